"""Second-order moment closure of the landmark Fokker-Planck equation.

State: first moments <q>, <p> and centred second moments
Delta2<qq>, Delta2<qp>, Delta2<pp> (each N*d x N*d).  Their coupled
ODEs follow from applying the backward Kolmogorov operator to the
monomials and truncating the cluster expansion at doublet correlations,
with kernel-valued factors frozen at the means (<K(q)> ~ K(<q>), and
sigma/grad-sigma factors evaluated at <q> with their polynomial parts
kept as fluctuating variables).

The drift-derivative couplings are written for a generic radial kernel
through g(s) = -k'(s)/s (smooth limit -k''(0) at coincidence), which
reduces to the familiar 1/r^2-weighted Gaussian expressions and also
supports compactly supported B-spline fields.  For non-Gaussian fields
the quadratic-in-displacement Hessian couplings in the pp/pq blocks,
which cancel exactly in the Gaussian case (k'^2 = k k'' - k k'/s), are
dropped together with their gradient-product partners.

Index conventions for the 4-d views used internally:
    cqq4[i,a,j,b] = Delta2< q_i^a q_j^b >
    cqp4[i,a,j,b] = Delta2< q_i^a p_j^b >   (no symmetry)
    cpp4[i,a,j,b] = Delta2< p_i^a p_j^b >
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError, IntegrationError
from .hamiltonian import pairwise_kernel
from .kernels import KernelSpec, NoiseModel, noise_drift_correction, noise_radial

log = logging.getLogger(__name__)

_E = lambda *args: np.einsum(*args, optimize=True)


@dataclass
class MomentState:
    """First and centred second moments of the landmark distribution."""

    mq: np.ndarray
    mp: np.ndarray
    cqq: np.ndarray
    cqp: np.ndarray
    cpp: np.ndarray

    def __post_init__(self):
        self.mq = np.atleast_2d(np.asarray(self.mq, dtype=float))
        self.mp = np.atleast_2d(np.asarray(self.mp, dtype=float))
        n = self.mq.size
        for name in ("cqq", "cqp", "cpp"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != (n, n):
                raise InputError(f"{name} must have shape ({n}, {n}), got {m.shape}")
            setattr(self, name, m)

    @staticmethod
    def zero_covariance(q0, p0):
        """Point initial condition: means at (q0, p0), all Delta2 zero."""
        q0 = np.atleast_2d(np.asarray(q0, dtype=float))
        p0 = np.atleast_2d(np.asarray(p0, dtype=float))
        n = q0.size
        z = np.zeros((n, n))
        return MomentState(q0, p0, z.copy(), z.copy(), z.copy())

    @property
    def N(self):
        return self.mq.shape[0]

    @property
    def d(self):
        return self.mq.shape[1]

    def landmark_cov(self, i):
        """The d x d position covariance block of landmark i."""
        d = self.d
        return self.cqq[i * d:(i + 1) * d, i * d:(i + 1) * d]

    def second_moment_matrix(self):
        """The full 2Nd x 2Nd centred second-moment block."""
        top = np.concatenate([self.cqq, self.cqp], axis=1)
        bot = np.concatenate([self.cqp.T, self.cpp], axis=1)
        return np.concatenate([top, bot], axis=0)


@dataclass
class MomentTrajectory:
    times: np.ndarray
    mq: np.ndarray
    mp: np.ndarray
    cqq: np.ndarray
    cqp: np.ndarray
    cpp: np.ndarray
    min_eig: np.ndarray | None = None

    def state(self, k) -> MomentState:
        return MomentState(self.mq[k], self.mp[k], self.cqq[k], self.cqp[k], self.cpp[k])

    def final(self) -> MomentState:
        return self.state(-1)


def _swap_pairs(x):
    """x[..., i, a, j, b] -> x[..., j, b, i, a]."""
    return np.swapaxes(np.swapaxes(x, -4, -2), -3, -1)


def moment_rhs(m: MomentState, K: KernelSpec, model: NoiseModel) -> MomentState:
    """Time derivative of the moment state under the closed hierarchy."""
    N, d = m.N, m.d
    c4 = lambda c: c.reshape(N, d, N, d)
    dmq, dmp, dcqq, dcqp, dcpp = moment_rhs_arrays(
        m.mq, m.mp, c4(m.cqq), c4(m.cqp), c4(m.cpp), K, model, model.amps)
    n = N * d
    return MomentState(dmq, dmp, dcqq.reshape(n, n), dcqp.reshape(n, n), dcpp.reshape(n, n))


def moment_rhs_arrays(mq, mp, cqq4, cqp4, cpp4, K: KernelSpec, model: NoiseModel, amps):
    """Batched RHS; all arrays may carry leading batch axes (amps too)."""
    Kmat, w1, _ = pairwise_kernel(K, mq)
    G = -w1  # -k'(s)/s for the landmark kernel, >= 0 near coincidence
    dmq_pair = mq[..., :, None, :] - mq[..., None, :, :]

    X, kv, g, _ = noise_radial(model, mq)
    amps = np.asarray(amps, dtype=float)
    sigma = kv[..., :, :, None] * amps[..., None, :, :]
    u = g[..., :, :, None] * amps[..., None, :, :]     # grad sigma_l^b = -u[...,b] X

    cqpD = _E("...iaic->...iac", cqp4)                  # Delta2<q_i^a p_i^c>
    Ppp = _E("...icjc->...ij", cpp4)
    mpdot = _E("...ic,...jc->...ij", mp, mp)
    GM = G * (mpdot + Ppp)
    P1 = _E("...ile,...ie->...il", u, mp)

    # --- first moments -------------------------------------------------
    # noise-induced Ito drift corrections evaluated at the means
    nq_corr, np_corr = noise_drift_correction(model, mq, mp, amps=amps)
    d_mq = _E("...ij,...ja->...ia", Kmat, mp) + nq_corr

    a_p = _E("...ij,...ija->...ia", GM, dmq_pair) \
        + _E("...ij,...ic,...iajc->...ia", G, mp, cqp4) \
        - _E("...ij,...ic,...jac->...ia", G, mp, cqpD) \
        + _E("...ij,...jc,...iac->...ia", G, mp, cqpD) \
        - _E("...ij,...jc,...jaic->...ia", G, mp, cqp4)
    d_mp = a_p + np_corr

    # --- qq block -------------------------------------------------------
    a_qq = _E("...jk,...iakb->...iajb", Kmat, cqp4) + _E("...ik,...jbka->...iajb", Kmat, cqp4)
    b_qq = _E("...ila,...jlb->...iajb", sigma, sigma)
    c_half = -0.5 * _E("...iajc,...jlb,...jlc->...iajb", cqq4, u, sigma)
    d_cqq = a_qq + b_qq + c_half + _swap_pairs(c_half)

    # --- pp block -------------------------------------------------------
    w1_ = _E("...jk,...kc,...jkb->...jcb", G, mp, dmq_pair)
    t1 = _E("...iajc,...jcb->...iajb", cpp4, w1_)
    t2 = _E("...iakc,...jc,...jk,...jkb->...iajb", cpp4, mp, G, dmq_pair)
    S3 = np.sum(GM, axis=-1)
    t3 = _E("...j,...jbia->...iajb", S3, cqp4) - _E("...jk,...kbia->...iajb", GM, cqp4)
    w4_ = _E("...jk,...jbkc->...jbc", G, cqp4) - _E("...jk,...kbc->...jbc", G, cqpD)
    t4 = _E("...iajc,...jbc->...iajb", cpp4, w4_)
    t5 = _E("...iakc,...jk,...jbc->...iajb", cpp4, G, cqpD) \
        - _E("...iakc,...jk,...kbjc->...iajb", cpp4, G, cqp4)
    bkt = t1 + t2 + t3 + t4 + t5
    a_pp = bkt + _swap_pairs(bkt)

    # full quadruplet expansion of the cotangent-lift noise product
    b_pp = (
        _E("...il,...ila,...jl,...jlb->...iajb", P1, X, P1, X)
        + _E("...iejc,...ile,...ila,...jlc,...jlb->...iajb", cpp4, u, X, u, X)
        + _E("...iae,...ile,...jl,...jlb->...iajb", cqpD, u, P1, X)
        + _E("...jbie,...ile,...ila,...jl->...iajb", cqp4, u, X, P1)
        + _E("...iajc,...jlc,...il,...jlb->...iajb", cqp4, u, P1, X)
        + _E("...jbc,...jlc,...il,...ila->...iajb", cqpD, u, P1, X)
        + _E("...iajb,...il,...jl->...iajb", cqq4, P1, P1)
        + _E("...iejc,...ile,...jlc,...iajb->...iajb", cpp4, u, u, cqq4)
        + _E("...iae,...ile,...jbc,...jlc->...iajb", cqpD, u, cqpD, u)
        + _E("...jbie,...ile,...iajc,...jlc->...iajb", cqp4, u, cqp4, u)
    )
    c_pp_half = 0.5 * _E("...jlc,...jlb,...iajc->...iajb", u, sigma, cpp4)
    d_cpp = a_pp + b_pp + c_pp_half + _swap_pairs(c_pp_half)

    # --- pq block (time derivative of Delta2<p_i^a q_j^b>) --------------
    w1p = _E("...ik,...kc,...ika->...ica", G, mp, dmq_pair)
    tp1 = _E("...jbic,...ica->...iajb", cqp4, w1p)
    tp2 = _E("...ic,...ik,...jbkc,...ika->...iajb", mp, G, cqp4, dmq_pair)
    tp3 = _E("...i,...iajb->...iajb", S3, cqq4) - _E("...ik,...kajb->...iajb", GM, cqq4)
    w4p = _E("...ik,...iakc->...iac", G, cqp4) - _E("...ik,...kac->...iac", G, cqpD)
    tp4 = _E("...jbic,...iac->...iajb", cqp4, w4p)
    tp5 = _E("...ik,...jbkc,...iac->...iajb", G, cqp4, cqpD) \
        - _E("...ik,...jbkc,...kaic->...iajb", G, cqp4, cqp4)
    tpK = _E("...jk,...iakb->...iajb", Kmat, cpp4)
    b_pq = _E("...ilc,...jlb,...iac->...iajb", u, sigma, cqpD) \
        + _E("...ilc,...jlb,...ic,...ila->...iajb", u, sigma, mp, X)
    c_pq = -0.5 * _E("...jlb,...jlc,...jcia->...iajb", u, sigma, cqp4) \
        + 0.5 * _E("...ilc,...ila,...jbic->...iajb", u, sigma, cqp4)
    rhs_pq = tp1 + tp2 + tp3 + tp4 + tp5 + tpK + b_pq + c_pq
    d_cqp = _swap_pairs(rhs_pq)

    return d_mq, d_mp, d_cqq, d_cqp, d_cpp


def integrate_moments(m0: MomentState, K: KernelSpec, model: NoiseModel,
                      T: float, steps: int, psd_monitor: bool = True) -> MomentTrajectory:
    """RK4 integration of the moment ODEs on a uniform grid.

    cqq and cpp are re-symmetrised after every step.  Positive
    semidefiniteness of the full second-moment block is monitored (the
    closure can violate it), never enforced.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    N, d = m0.N, m0.d
    n = N * d
    h = T / steps
    arrs = (m0.mq, m0.mp,
            m0.cqq.reshape(N, d, N, d), m0.cqp.reshape(N, d, N, d), m0.cpp.reshape(N, d, N, d))
    times = np.linspace(0.0, T, steps + 1)
    out = [np.empty((steps + 1,) + a.shape) for a in arrs]
    for o, a in zip(out, arrs):
        o[0] = a
    min_eig = np.empty(steps + 1) if psd_monitor else None

    def rhs(state):
        return moment_rhs_arrays(*state, K, model, model.amps)

    state = arrs
    if psd_monitor:
        min_eig[0] = _min_eig(state, n)
    for k in range(steps):
        state = _rk4_moment_step(state, h, rhs)
        state = _symmetrized(state)
        for o, a in zip(out, state):
            o[k + 1] = a
        if not all(np.all(np.isfinite(a)) for a in state):
            raise IntegrationError(f"moment integration blew up at step {k + 1}", step=k + 1)
        if psd_monitor:
            min_eig[k + 1] = _min_eig(state, n)
    if psd_monitor and np.min(min_eig) < -1e-10:
        log.info("moment closure left the PSD cone: min eigenvalue %.3e", float(np.min(min_eig)))
    return MomentTrajectory(
        times, out[0], out[1],
        out[2].reshape(steps + 1, n, n), out[3].reshape(steps + 1, n, n),
        out[4].reshape(steps + 1, n, n), min_eig)


def _rk4_moment_step(state, h, rhs):
    k1 = rhs(state)
    k2 = rhs(tuple(s + 0.5 * h * k for s, k in zip(state, k1)))
    k3 = rhs(tuple(s + 0.5 * h * k for s, k in zip(state, k2)))
    k4 = rhs(tuple(s + h * k for s, k in zip(state, k3)))
    return tuple(s + (h / 6.0) * (a + 2.0 * b + 2.0 * c + e)
                 for s, a, b, c, e in zip(state, k1, k2, k3, k4))


def _symmetrized(state):
    mq, mp, cqq, cqp, cpp = state
    cqq = 0.5 * (cqq + _swap_pairs(cqq))
    cpp = 0.5 * (cpp + _swap_pairs(cpp))
    return mq, mp, cqq, cqp, cpp


def _min_eig(state, n):
    _, _, cqq, cqp, cpp = state
    top = np.concatenate([cqq.reshape(n, n), cqp.reshape(n, n)], axis=1)
    bot = np.concatenate([cqp.reshape(n, n).T, cpp.reshape(n, n)], axis=1)
    return float(np.linalg.eigvalsh(np.concatenate([top, bot], axis=0))[0])


def empirical_moments(samples) -> MomentState:
    """Sample means and unbiased centred second moments of an ensemble.

    ``samples`` is anything with q and p arrays of shape (n, N, d)
    (e.g. the EndpointSamples from sample_endpoints), or a (q, p) tuple.
    """
    if hasattr(samples, "q"):
        q, p = np.asarray(samples.q, dtype=float), np.asarray(samples.p, dtype=float)
    else:
        q, p = (np.asarray(a, dtype=float) for a in samples)
    if q.ndim != 3 or q.shape != p.shape:
        raise InputError("samples must be (n, N, d) position and momentum arrays")
    n = q.shape[0]
    if n < 2:
        raise InputError("need at least 2 samples for centred moments")
    N, d = q.shape[1:]
    mq, mp = q.mean(axis=0), p.mean(axis=0)
    xq = (q - mq).reshape(n, N * d)
    xp = (p - mp).reshape(n, N * d)
    cqq = xq.T @ xq / (n - 1)
    cqp = xq.T @ xp / (n - 1)
    cpp = xp.T @ xp / (n - 1)
    cqq = 0.5 * (cqq + cqq.T)
    cpp = 0.5 * (cpp + cpp.T)
    return MomentState(mq, mp, cqq, cqp, cpp)
