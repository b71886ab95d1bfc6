"""Noise-parameter estimation from observed endpoint configurations.

Two routes:

* Method of moments: integrate the moment ODEs forward from the
  initial configuration and minimise a weighted mismatch between the
  model-implied and the observed mean/covariance of the endpoint
  positions.  A two-stage schedule first matches the mean by shooting
  for the initial momentum, then optimises momentum and amplitudes
  jointly, either with differential evolution (global, preferred) or a
  quasi-Newton descent.

* Likelihood via bridges: guided bridges conditioned on each observed
  configuration give importance-weighted samples of the unobserved
  paths.  A discretised q-marginal pseudo-likelihood of a path scores
  parameter vectors; Monte-Carlo EM ascends its conditioned
  expectation, and ``mle_direct`` maximises the endpoint density
  estimates directly with common random numbers across evaluations.

Free parameters are packed into a flat vector theta through a linear
layout (per-component free amplitudes, or amplitudes tied across
fields), optionally extended by the initial momentum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import differential_evolution, minimize

from .bridges import GuidingScheme, importance_weights, sample_bridges, transition_density
from .errors import InputError, IntegrationError, NumericError
from .hamiltonian import LandmarkState, shoot, ShootOpts
from .kernels import KernelSpec, NoiseModel
from .moments import MomentState, _rk4_moment_step, _symmetrized, moment_rhs_arrays
from .sde import diffusion_blocks, ito_drift_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThetaLayout:
    """Linear packing of the free noise amplitudes (and optionally p0).

    amps(theta) = sum_k theta_k * basis[k], with basis of shape
    (P, J, d).  When ``p0_size`` is nonzero the packed vector is
    (theta_amp, p0.ravel()).
    """

    basis: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    p0_size: int = 0
    p0_lo: float = -5.0
    p0_hi: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "basis", np.asarray(self.basis, dtype=float))
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.basis.ndim != 3:
            raise InputError("layout basis must have shape (P, J, d)")
        P = self.basis.shape[0]
        if self.lo.shape != (P,) or self.hi.shape != (P,):
            raise InputError("layout bounds must match the number of parameters")

    @property
    def n_amp(self):
        return self.basis.shape[0]

    @property
    def dim(self):
        return self.n_amp + self.p0_size

    def amps(self, theta_amp):
        return np.einsum("...k,kld->...ld", np.asarray(theta_amp, dtype=float), self.basis)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        th = x[..., : self.n_amp]
        p0 = x[..., self.n_amp:] if self.p0_size else None
        return th, p0

    def bounds(self):
        lo = np.concatenate([self.lo, np.full(self.p0_size, self.p0_lo)])
        hi = np.concatenate([self.hi, np.full(self.p0_size, self.p0_hi)])
        return lo, hi

    @staticmethod
    def free(J, d, lo=-1.0, hi=1.0):
        """One parameter per field per coordinate."""
        basis = np.eye(J * d).reshape(J * d, J, d)
        return ThetaLayout(basis, np.full(J * d, lo), np.full(J * d, hi))

    @staticmethod
    def tied_per_axis(template_amps, lo=0.0, hi=1.0):
        """One parameter per coordinate axis, shared by all fields whose
        template amplitude is nonzero along that axis (e.g. the x- and
        y-families of a two-family grid)."""
        t = np.asarray(template_amps, dtype=float)
        J, d = t.shape
        basis = np.zeros((d, J, d))
        for a in range(d):
            basis[a, :, a] = (t[:, a] != 0.0).astype(float)
        return ThetaLayout(basis, np.full(d, lo), np.full(d, hi))

    def with_p0(self, p0_size, p0_lo=-5.0, p0_hi=5.0):
        return ThetaLayout(self.basis, self.lo, self.hi, p0_size, p0_lo, p0_hi)


@dataclass
class InferenceProblem:
    """Observed endpoints plus everything needed to score parameters."""

    observations: np.ndarray
    q0: np.ndarray
    p0: np.ndarray
    K: KernelSpec
    noise: NoiseModel
    layout: ThetaLayout
    T: float = 1.0
    steps: int = 120
    gamma1: float = 1.0
    gamma2: float = 1.0
    scheme: GuidingScheme = field(default_factory=GuidingScheme)
    eps_reg: float = 1e-8
    seed: int = 0
    target_mean: np.ndarray | None = None
    target_cov_blocks: np.ndarray | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        if self.observations.ndim != 3:
            raise InputError("observations must have shape (n, N, d)")
        self.q0 = np.atleast_2d(np.asarray(self.q0, dtype=float))
        self.p0 = np.atleast_2d(np.asarray(self.p0, dtype=float))
        if self.observations.shape[1:] != self.q0.shape:
            raise InputError("observations and q0 disagree on (N, d)")

    @property
    def n_obs(self):
        return self.observations.shape[0]

    def targets(self):
        """(mean (N, d), per-landmark covariance blocks (N, d, d))."""
        if self.target_mean is not None and self.target_cov_blocks is not None:
            return np.asarray(self.target_mean, float), np.asarray(self.target_cov_blocks, float)
        obs = self.observations
        mean = obs.mean(axis=0)
        x = obs - mean
        blocks = np.einsum("nia,nib->iab", x, x) / (obs.shape[0] - 1)
        return mean, blocks

    def model_for(self, theta_amp):
        return self.noise.with_amps(self.layout.amps(theta_amp))


def _integrate_moment_batch(problem, amps, p0, steps=None):
    """Batched moment integration; returns (mqT, cqq4T) with batch axes.

    amps: (..., J, d), p0: (..., N, d).  Non-finite trajectories are
    returned as NaN for the caller to turn into a cost sentinel.
    """
    steps = steps or problem.steps
    N, d = problem.q0.shape
    bshape = np.broadcast_shapes(amps.shape[:-2], p0.shape[:-2])
    mq = np.broadcast_to(problem.q0, bshape + (N, d)).copy()
    mp = np.broadcast_to(p0, bshape + (N, d)).copy()
    z = np.zeros(bshape + (N, d, N, d))
    state = (mq, mp, z.copy(), z.copy(), z.copy())
    h = problem.T / steps
    rhs = lambda s: moment_rhs_arrays(*s, problem.K, problem.noise, amps)
    with np.errstate(all="ignore"):
        for _ in range(steps):
            state = _symmetrized(_rk4_moment_step(state, h, rhs))
    return state[0], state[2]


def moment_cost(theta, problem: InferenceProblem) -> float:
    """Weighted moment mismatch C(theta) of the cost in the moment method.

    (1/gamma1) ||mean_target - mean(T)||^2 plus (1/gamma2) times the sum
    over landmarks of the squared Frobenius mismatch of the d x d
    position covariance blocks, each normalised by its target norm.
    Non-finite integrations yield +inf (optimiser-safe).
    """
    c = _moment_cost_batch(np.asarray(theta, dtype=float)[None], problem)[0]
    return float(c)


def _moment_cost_batch(xs, problem: InferenceProblem, mean_only=False, steps=None):
    th, p0x = problem.layout.split(xs)
    amps = problem.layout.amps(th)
    N, d = problem.q0.shape
    p0 = p0x.reshape(xs.shape[:-1] + (N, d)) if p0x is not None else problem.p0
    mqT, cqq4 = _integrate_moment_batch(problem, amps, p0, steps=steps)
    tmean, tblocks = problem.targets()
    cost = np.einsum("...ia->...", (mqT - tmean) ** 2) / problem.gamma1
    if not mean_only:
        blocks = np.einsum("...iaib->...iab", cqq4)
        norms = np.einsum("iab,iab->i", tblocks, tblocks)
        if np.any(norms <= 0):
            raise InputError("target covariance blocks must be nonzero for the normalised cost")
        diff = np.einsum("...iab->...i", (blocks - tblocks) ** 2)
        cost = cost + np.einsum("...i,i->...", diff, 1.0 / norms) / problem.gamma2
    return np.where(np.isfinite(cost), cost, np.inf)


@dataclass
class FitMomentsResult:
    theta: np.ndarray
    p0: np.ndarray
    amps: np.ndarray
    cost: float
    trace: np.ndarray
    converged: bool
    method: str
    stage1_mismatch: float


@dataclass
class OptimBudget:
    de_maxiter: int = 200
    de_stop_cost: float = 1e-10
    gd_maxiter: int = 200
    p0_halfwidth: float = 0.75


def fit_moments(problem: InferenceProblem, method: str = "differential_evolution",
                budget: OptimBudget | None = None) -> FitMomentsResult:
    """Two-stage moment matching.

    Stage 1 shoots for the initial momentum against the mean endpoint
    only (zero-amplitude flow).  Stage 2 minimises the full cost over
    (p0, theta) jointly when the layout includes p0, otherwise over
    theta alone: either bound-constrained differential evolution
    (rand/1/bin, population 15 x dim, F = 0.8, CR = 0.9) or L-BFGS-B
    with finite-difference gradients.
    """
    if method not in ("differential_evolution", "gradient_descent"):
        raise InputError(f"unknown fit method {method!r}")
    budget = budget or OptimBudget()
    tmean, _ = problem.targets()
    s1 = shoot(problem.q0, tmean, problem.K, problem.T, max(problem.steps, 60),
               ShootOpts(tol=1e-6, max_iter=300))
    p0_stage1 = s1.p0

    layout = problem.layout
    lo, hi = layout.bounds()
    if layout.p0_size:
        w = budget.p0_halfwidth
        lo = np.concatenate([layout.lo, p0_stage1.ravel() - w])
        hi = np.concatenate([layout.hi, p0_stage1.ravel() + w])
    x0 = np.concatenate([
        np.clip(0.5 * (layout.lo + layout.hi), layout.lo, layout.hi),
        p0_stage1.ravel()[: layout.p0_size],
    ])

    trace = []

    def record(c):
        trace.append(min(c, trace[-1]) if trace else c)

    if method == "differential_evolution":
        def fvec(xs):
            # scipy vectorized convention: xs has shape (dim, S)
            return _moment_cost_batch(xs.T, problem)

        def cb(xk, convergence=None):
            record(float(_moment_cost_batch(np.asarray(xk)[None], problem)[0]))
            return trace[-1] < budget.de_stop_cost

        res = differential_evolution(
            fvec, bounds=list(zip(lo, hi)), strategy="rand1bin", maxiter=budget.de_maxiter,
            popsize=15, mutation=0.8, recombination=0.9, init="random", polish=False,
            seed=problem.seed, tol=0.0, updating="deferred", vectorized=True, callback=cb)
        xbest, cost = res.x, float(res.fun)
    else:
        dim = lo.size

        def jac(x):
            h = 1e-6
            pts = np.concatenate([x + h * np.eye(dim), x - h * np.eye(dim)])
            vals = _moment_cost_batch(pts, problem)
            return (vals[:dim] - vals[dim:]) / (2 * h)

        def cb(xk):
            record(float(_moment_cost_batch(np.asarray(xk)[None], problem)[0]))

        res = minimize(lambda x: float(_moment_cost_batch(x[None], problem)[0]), x0,
                       jac=jac, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": budget.gd_maxiter, "ftol": 1e-16, "gtol": 1e-12},
                       callback=cb)
        xbest, cost = res.x, float(res.fun)
    record(cost)

    th, p0x = layout.split(xbest)
    p0_hat = p0x.reshape(problem.p0.shape) if p0x is not None else p0_stage1
    return FitMomentsResult(
        theta=th, p0=p0_hat, amps=layout.amps(th), cost=cost,
        trace=np.array(trace), converged=bool(cost < 1e-6), method=method,
        stage1_mismatch=s1.mismatch)


# ---------------------------------------------------------------------------
# path pseudo-likelihood, EM and direct MLE
# ---------------------------------------------------------------------------

def path_loglik(path, theta, problem: InferenceProblem) -> float:
    """Discretised q-marginal pseudo-log-likelihood of a path under theta.

    Per step, the position-increment residual against the Ito drift is
    scored under N(0, Sigma_q Sigma_q^T dt + eps I).  The (q, p) pair
    moves on a degenerate path measure (both blocks are driven by the
    same Wiener increments), so only the q-marginal is scored; eps
    regularises near-singular covariances.
    """
    th = np.asarray(theta, dtype=float)
    ll = _path_loglik_batch(path.q[None], path.p[None], np.asarray(path.times), th[None], problem)
    return float(ll[0, 0])


def _path_loglik_batch(qs, ps, times, thetas, problem: InferenceProblem):
    """Log pseudo-likelihood of B paths under S parameter vectors -> (S, B)."""
    from .hamiltonian import ham_vector_field_arrays
    from .kernels import noise_radial

    B, Ksteps, N, d = qs.shape
    nd = N * d
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    S = thetas.shape[0]
    amps = problem.layout.amps(thetas)  # (S, J, d)
    dt = float(times[1] - times[0])
    eps = problem.eps_reg
    out = np.zeros((S, B))
    const = nd * np.log(2.0 * np.pi)
    eye = np.eye(nd)
    for k in range(Ksteps - 1):
        q, p = qs[:, k], ps[:, k]
        dq = (qs[:, k + 1] - q).reshape(B, nd)
        aq, _ = ham_vector_field_arrays(q, p, problem.K)          # (B, N, d)
        X, kv, g, _ = noise_radial(problem.noise, q)              # (B, N, J[, d])
        # noise part of the Ito q-drift under each amplitude set
        Xa = np.einsum("bila,sla->sbil", X, amps)
        bq = aq[None] - 0.5 * np.einsum("bil,sbil,sla->sbia", g * kv, Xa, amps)
        r = dq[None] - bq.reshape(S, B, nd) * dt                  # (S, B, nd)
        # C = Sigma_q Sigma_q^T dt + eps I, with Sigma_q[(i,a),l] = k_v amps
        kk = np.einsum("bil,bjl,sla,slc->sbiajc", kv, kv, amps, amps).reshape(S, B, nd, nd)
        C = kk * dt + eps * eye
        try:
            L = np.linalg.cholesky(C)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"path covariance not positive definite at step {k}") from exc
        z = np.linalg.solve(C, r[..., None])[..., 0]
        quad = np.einsum("sbi,sbi->sb", r, z)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        out -= 0.5 * (quad + logdet + const)
    return out


@dataclass
class EmResult:
    theta: np.ndarray
    theta_trace: np.ndarray
    Q_trace: np.ndarray
    loglik_trace: np.ndarray
    ess: np.ndarray
    step_sizes: np.ndarray


def _stacked_targets(observations, n_bridges):
    n, N, d = observations.shape
    return np.repeat(observations, n_bridges, axis=0), n


def _iteration_seed(seed, *key):
    return np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))


def _log_marginal(problem: InferenceProblem, theta, targets, ss, n_bridges, steps,
                  store_paths=False):
    """Bridge estimate of sum_i log p_theta(q^i) with its standard error.

    One batched simulation covers all observations (n_bridges bridges
    per observation); the Wiener streams are fixed by ``ss``, so
    repeated calls with different theta share randomness.
    """
    state0 = LandmarkState(problem.q0, problem.p0)
    n = problem.n_obs
    nd = problem.q0.size
    model = problem.model_for(theta)
    batch = sample_bridges(state0, problem.K, model, problem.scheme,
                           problem.T, steps, targets, ss,
                           n_bridges=n * n_bridges, store_paths=store_paths)
    # log-sum-exp form: log phi can be huge in magnitude far from the data scale
    lp = batch.log_phi.reshape(n, n_bridges)
    m = lp.max(axis=1, keepdims=True)
    w = np.exp(lp - m)
    mean_w = w.mean(axis=1)
    log_mean_phi = m[:, 0] + np.log(mean_w)
    rel_se = w.std(axis=1, ddof=1) / np.sqrt(n_bridges) / mean_w

    obs = problem.observations
    sqv, _ = diffusion_blocks(obs, np.zeros_like(obs), model)
    from .bridges import _pinv_and_gram_inverse

    _, _, rankv, sv = _pinv_and_gram_inverse(sqv, 1e-10)
    if np.any(rankv < nd):
        raise NumericError("Sigma_q rank-deficient at an observation; density undefined")
    log_detA = -2.0 * np.sum(np.log(sv[:, :nd]), axis=1)
    sq0, _ = diffusion_blocks(state0.q[None], state0.p[None], model)
    pinv0, _, _, _ = _pinv_and_gram_inverse(sq0, 1e-10, need_A=False)
    w0 = np.einsum("ij,nj->ni", pinv0[0], state0.q.ravel() - obs.reshape(n, nd))
    log_pref = 0.5 * log_detA - 0.5 * np.einsum("ni,ni->n", w0, w0) / problem.T \
        - 0.5 * nd * np.log(2.0 * np.pi * problem.T)
    L = float(np.sum(log_pref + log_mean_phi))
    se = float(np.sqrt(np.sum(rel_se**2)))
    return L, se, batch


def em_fit(problem: InferenceProblem, theta0, K_iters: int = 20, N_bridges: int = 32,
           step_eps: float = 0.1, seed: int | None = None, fd_h: float = 1e-3,
           bridge_steps: int | None = None, max_halvings: int = 10,
           step_cap: float | None = None) -> EmResult:
    """Monte-Carlo generalised EM for the noise amplitudes.

    Per iteration and observation q^i, N_bridges guided bridges
    targeting q^i are sampled under theta_{k-1}; their weights
    exp(log phi) and the weighted mean of path_loglik form the
    Algorithm-1 surrogate Q, which is recorded and monitored.  The
    ascent direction is the marginal-likelihood score: at the current
    iterate the EM gradient identity gives

        grad Q(theta | theta_{k-1}) |_{theta_{k-1}}
            = grad sum_i log p_theta(q^i),

    and the right-hand side has an unbiased bridge estimator (density
    prefactor times mean phi, differentiated through the simulation
    with common random numbers).  Scoring frozen imputed paths instead
    leaves an O(log(steps)) discretisation bias that buries the O(dt)
    data signal for diffusion amplitudes, so the score form is the
    usable generalised-EM update.  Steps are clipped to the bounds,
    capped componentwise, and halved (up to max_halvings) while the
    estimated log-likelihood drops by more than twice its standard
    error.
    """
    if seed is None:
        seed = problem.seed
    theta = np.asarray(theta0, dtype=float).copy()
    if theta.shape != (problem.layout.n_amp,):
        raise InputError("theta0 must match the amplitude layout")
    steps = bridge_steps or problem.steps
    lo, hi = problem.layout.lo, problem.layout.hi
    if step_cap is None:
        step_cap = float(np.max(hi - lo)) / 5.0
    n = problem.n_obs
    targets, _ = _stacked_targets(problem.observations, N_bridges)

    theta_trace = [theta.copy()]
    Q_trace = np.zeros(K_iters)
    L_trace = np.zeros(K_iters)
    ess_all = np.zeros((K_iters, n))
    step_sizes = np.zeros(K_iters)

    for it in range(K_iters):
        ss = _iteration_seed(seed, it)
        L0, se0, batch = _log_marginal(problem, theta, targets, ss, N_bridges, steps,
                                       store_paths=True)
        # Algorithm-1 surrogate at the current iterate, for monitoring
        lp = batch.log_phi.reshape(n, N_bridges)
        ll = _path_loglik_batch(batch.q, batch.p, batch.times, theta[None], problem)
        ll = ll.reshape(n, N_bridges)
        qsum = 0.0
        for i in range(n):
            w, ess_all[it, i] = importance_weights(lp[i])
            qsum += w @ ll[i]
        Q_trace[it] = qsum / n
        L_trace[it] = L0
        if np.any(ess_all[it] < 2.0):
            log.warning("EM iteration %d: min ESS %.2f < 2; consider more bridges",
                        it, float(ess_all[it].min()))

        P = theta.size
        grad = np.empty(P)
        for e in range(P):
            dh = fd_h * np.eye(P)[e]
            Lp, _, _ = _log_marginal(problem, np.clip(theta + dh, lo, hi), targets, ss,
                                     N_bridges, steps)
            Lm, _, _ = _log_marginal(problem, np.clip(theta - dh, lo, hi), targets, ss,
                                     N_bridges, steps)
            grad[e] = (Lp - Lm) / (2 * fd_h)
        if not np.all(np.isfinite(grad)):
            log.warning("EM iteration %d: non-finite score estimate, skipping update", it)
            theta_trace.append(theta.copy())
            continue

        step = float(step_eps)
        accepted = False
        for _ in range(max_halvings):
            delta = step * grad
            mx = np.max(np.abs(delta))
            if mx > step_cap:
                delta = delta * (step_cap / mx)
            cand = np.clip(theta + delta, lo, hi)
            if np.allclose(cand, theta):
                break
            Lc, _, _ = _log_marginal(problem, cand, targets, ss, N_bridges, steps)
            if Lc >= L0 - 2.0 * se0:
                accepted = True
                break
            step *= 0.5
        if accepted:
            theta = cand
            step_sizes[it] = step
        theta_trace.append(theta.copy())

    # fixed-step stochastic ascent hovers around the optimum: average the
    # tail of the trace for the point estimate
    trace = np.array(theta_trace)
    tail = max(1, (len(trace) - 1) // 3)
    theta_hat = trace[-tail:].mean(axis=0)
    return EmResult(theta=theta_hat, theta_trace=trace, Q_trace=Q_trace,
                    loglik_trace=L_trace, ess=ess_all, step_sizes=step_sizes)


@dataclass
class MleResult:
    theta: np.ndarray
    loglik: float
    n_evals: int
    converged: bool


def mle_direct(problem: InferenceProblem, theta0, n_bridges: int = 500,
               seed: int | None = None, opts: dict | None = None) -> MleResult:
    """Maximise the summed log endpoint density over theta directly.

    Each evaluation estimates the transition density at every observed
    configuration from one batched set of guided bridges whose Wiener
    streams are fixed across theta evaluations (common random numbers).
    Derivative-free bound-constrained search (Powell).
    """
    if seed is None:
        seed = problem.seed
    opts = dict(opts or {})
    steps = opts.pop("bridge_steps", problem.steps)
    maxiter = opts.pop("maxiter", 100)
    targets, _ = _stacked_targets(problem.observations, n_bridges)
    ss = _iteration_seed(seed, 7001)
    n_evals = 0

    def neg_loglik(theta):
        nonlocal n_evals
        n_evals += 1
        L, _, _ = _log_marginal(problem, theta, targets, ss, n_bridges, steps)
        return -L

    res = minimize(neg_loglik, np.asarray(theta0, dtype=float), method="Powell",
                   bounds=list(zip(problem.layout.lo, problem.layout.hi)),
                   options={"maxiter": maxiter, "xtol": 1e-3, "ftol": 1e-6})
    return MleResult(theta=np.asarray(res.x), loglik=-float(res.fun),
                     n_evals=n_evals, converged=bool(res.success))
