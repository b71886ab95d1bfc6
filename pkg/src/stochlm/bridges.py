"""Guided diffusion bridges conditioned on landmark positions at time T.

A guiding drift is added to the forward SDE so every sample hits a
target configuration v (in q) almost surely at time T.  Expectations
under the true conditioned law are recovered by reweighting each
sample with a correction factor phi, accumulated in log form along
the path from four groups of integrals:

  (i)   -(q - v)^T A(q) btilde_q / (T - s) ds
  (ii)  quadratic-variation terms in A(q) and (q - v)
  (iii) a Girsanov pair for the bounded drift replacement b -> btilde
  (iv)  a Girsanov pair for the difference between the guiding vector
        actually used and the basic one -Sigma_q^+ (q - v)/(T - t)

with A(q) = (Sigma_q Sigma_q^T)^{-1}.  Group (iv) makes the predictor
choice exact: any bounded endpoint predictor yields correct reweighted
expectations.

Three guiding schemes are provided: ``basic`` (difference to the
target), ``phi_predictor`` (difference of the deterministically
predicted endpoint to the target, which avoids the over-shooting of
the basic scheme), and ``differential`` (the predictor difference
pulled back through a finite-difference linearisation of the endpoint
map along the noise directions, for high-momentum dynamics).

Integration is Euler-Maruyama in Ito form; the time grid has spacing
dt = T/steps and the integration stops one step short of T (the
singular guiding term is never evaluated at T), reporting the miss
distance at t_last = T - dt as ``hit_error``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BridgeError, EstimationError, InputError
from .hamiltonian import LandmarkState, ham_vector_field_arrays
from .kernels import KernelSpec, NoiseModel
from .sde import _rng_for, diffusion_blocks, ito_drift_arrays

BASIC = "basic"
PHI_PREDICTOR = "phi_predictor"
DIFFERENTIAL = "differential"
_SCHEME_KINDS = (BASIC, PHI_PREDICTOR, DIFFERENTIAL)


@dataclass(frozen=True)
class GuidingScheme:
    """Guiding-term flavour, drift cap M for btilde, predictor substeps.

    ``identity_predictor`` replaces the endpoint predictor by the
    current position (phi(q, p) = q), which must make phi_predictor
    reproduce the basic scheme exactly; kept as a consistency hook.
    """

    kind: str = PHI_PREDICTOR
    drift_cap: float | None = None  # None: 10 * max(1, ||p0||) at simulation start
    substeps: int = 10
    identity_predictor: bool = False
    # differential scheme: recompute the endpoint linearisation every
    # diff_refresh steps (a stale linearisation only degrades the
    # proposal; the correction factor stays exact)
    diff_refresh: int = 1

    def __post_init__(self):
        if self.kind not in _SCHEME_KINDS:
            raise InputError(f"unknown guiding scheme {self.kind!r}; expected one of {_SCHEME_KINDS}")
        if self.drift_cap is not None and self.drift_cap <= 0:
            raise InputError("drift_cap must be positive")
        if self.substeps < 1:
            raise InputError("predictor substeps must be >= 1")
        if self.diff_refresh < 1:
            raise InputError("diff_refresh must be >= 1")


@dataclass
class BridgePath:
    """One guided sample path plus its importance weight and diagnostics."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    log_phi: float
    v: np.ndarray
    hit_error: float
    seed: object = None

    def state(self, k) -> LandmarkState:
        return LandmarkState(self.q[k], self.p[k])


@dataclass
class BridgeBatch:
    """A batch of bridges sharing the target; paths stored when requested."""

    times: np.ndarray
    log_phi: np.ndarray
    hit_error: np.ndarray
    v: np.ndarray
    q: np.ndarray | None = None
    p: np.ndarray | None = None
    seed: object = None

    @property
    def n(self):
        return self.log_phi.shape[0]

    def path(self, i) -> BridgePath:
        if self.q is None:
            raise InputError("paths were not stored for this batch")
        return BridgePath(self.times, self.q[i], self.p[i],
                          float(self.log_phi[i]), self.v, float(self.hit_error[i]))

    def paths(self):
        return [self.path(i) for i in range(self.n)]


def pinv_sigma_q(state: LandmarkState, model: NoiseModel, tol: float = 1e-10):
    """Moore-Penrose pseudo-inverse of the position diffusion block.

    Singular values below tol * s_max are treated as zero.  Returns
    (Sigma_q^+, rank); a rank below N*d triggers a surjectivity warning
    (the guiding term then cannot span the whole position space).
    """
    sq, _ = diffusion_blocks(state.q[None], state.p[None], model)
    pinv, _, rank, _ = _pinv_and_gram_inverse(sq, tol, need_A=False)
    nd = state.q.size
    if rank[0] < nd:
        warnings.warn(
            f"Sigma_q rank {int(rank[0])} < {nd}: noise fields do not span the "
            "position space; bridge guidance may fail", stacklevel=2)
    return pinv[0], int(rank[0])


def _pinv_and_gram_inverse(sq, tol, need_A=True):
    """Batched SVD pseudo-inverse of (..., nd, J) plus (Sq Sq^T)^{-1}."""
    U, s, Vt = np.linalg.svd(sq, full_matrices=False)
    smax = s[..., :1]
    keep = s > tol * np.where(smax > 0, smax, 1.0)
    rank = keep.sum(axis=-1)
    sinv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    pinv = np.einsum("...ji,...j,...kj->...ik", Vt, sinv, U)
    A = None
    if need_A:
        A = np.einsum("...ij,...j,...kj->...ik", U, sinv * sinv, U)
    return pinv, A, rank, s


def _capped_vf(q, p, K, cap):
    """Hamiltonian vector field with the per-landmark q-drift cap."""
    dq, dp = ham_vector_field_arrays(q, p, K)
    nrm = np.linalg.norm(dq, axis=-1, keepdims=True)
    scale = np.minimum(1.0, cap / np.where(nrm > 0, nrm, 1.0))
    return dq * scale, dp


def _predict_q(q, p, K, cap, tau, substeps):
    """q-part of the capped deterministic flow integrated over [0, tau] (RK4)."""
    h = tau / substeps
    for _ in range(substeps):
        k1q, k1p = _capped_vf(q, p, K, cap)
        k2q, k2p = _capped_vf(q + 0.5 * h * k1q, p + 0.5 * h * k1p, K, cap)
        k3q, k3p = _capped_vf(q + 0.5 * h * k2q, p + 0.5 * h * k2p, K, cap)
        k4q, k4p = _capped_vf(q + h * k3q, p + h * k3p, K, cap)
        q = q + (h / 6.0) * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = p + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    return q


def default_drift_cap(p0):
    return 10.0 * max(1.0, float(np.max(np.linalg.norm(np.atleast_2d(p0), axis=-1))))


def predict_endpoint(state: LandmarkState, K: KernelSpec, scheme: GuidingScheme,
                     t: float, T: float, model: NoiseModel | None = None):
    """Predicted endpoint position at time T from the state at time t.

    Integrates the drift-capped deterministic dynamics with RK4 over
    [t, T] using scheme.substeps steps.  When a noise model is given,
    the bounded-drift correction Sigma Sigma_q^+ (btilde_q - b_q) is
    included; without it the momentum drift is left uncapped (the
    difference is absorbed exactly by the correction factor).
    """
    if not t < T:
        raise InputError("predictor needs t < T")
    cap = scheme.drift_cap if scheme.drift_cap is not None else default_drift_cap(state.p)
    if model is None:
        return _predict_q(state.q, state.p, K, cap, T - t, scheme.substeps)
    q, p = state.q[None], state.p[None]
    return _predict_q_corrected(q, p, K, model, cap, T - t, scheme.substeps)[0]


def _corrected_vf(q, p, K, model, cap, tol=1e-10):
    """btilde = b + Sigma Sigma_q^+ (btilde_q - b_q) with b the Ito drift."""
    bq, bp = ito_drift_arrays(q, p, K, model)
    nrm = np.linalg.norm(bq, axis=-1, keepdims=True)
    scale = np.minimum(1.0, cap / np.where(nrm > 0, nrm, 1.0))
    btq = bq * scale
    sq, sp = diffusion_blocks(q, p, model)
    pinv, _, _, _ = _pinv_and_gram_inverse(sq, tol, need_A=False)
    shape = q.shape
    u = np.einsum("...ij,...j->...i", pinv, (btq - bq).reshape(shape[:-2] + (-1,)))
    dq = bq + np.einsum("...ij,...j->...i", sq, u).reshape(shape)
    dp = bp + np.einsum("...ij,...j->...i", sp, u).reshape(shape)
    return dq, dp


def _predict_q_corrected(q, p, K, model, cap, tau, substeps):
    h = tau / substeps
    for _ in range(substeps):
        k1q, k1p = _corrected_vf(q, p, K, model, cap)
        k2q, k2p = _corrected_vf(q + 0.5 * h * k1q, p + 0.5 * h * k1p, K, model, cap)
        k3q, k3p = _corrected_vf(q + 0.5 * h * k2q, p + 0.5 * h * k2p, K, model, cap)
        k4q, k4p = _corrected_vf(q + h * k3q, p + h * k3p, K, model, cap)
        q = q + (h / 6.0) * (k1q + 2 * k2q + 2 * k3q + k4q)
        p = p + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    return q


def guiding_term(state: LandmarkState, K: KernelSpec, model: NoiseModel,
                 scheme: GuidingScheme, t: float, T: float, v):
    """The guiding drift (gq, gp) pulling the bridge towards v at time T."""
    if not t < T:
        raise InputError("guiding term needs t < T")
    v = np.atleast_2d(np.asarray(v, dtype=float))
    q, p = state.q[None], state.p[None]
    sq, sp = diffusion_blocks(q, p, model)
    pinv, _, _, _ = _pinv_and_gram_inverse(sq, 1e-10, need_A=False)
    h_used, _, _ = _guiding_vector(q, p, K, model, scheme, sq, sp, pinv, T - t, v.ravel(),
                                   cap=scheme.drift_cap if scheme.drift_cap is not None
                                   else default_drift_cap(state.p))
    N, d = state.q.shape
    gq = np.einsum("...ij,...j->...i", sq, h_used).reshape(1, N, d)[0]
    gp = np.einsum("...ij,...j->...i", sp, h_used).reshape(1, N, d)[0]
    return gq, gp


def _guiding_vector(q, p, K, model, scheme, sq, sp, pinv, tau, vflat, cap,
                    dpinv_cache=None):
    """Noise-space guiding vectors (h_used, h_basic, Dpinv), each batched.

    ``vflat`` is the flattened target, broadcastable against the
    flattened positions (a single target or one per batch row).  For
    the differential scheme a cached endpoint linearisation may be
    passed in and is returned for reuse.
    """
    bshape = q.shape[:-2]
    nd = q.shape[-2] * q.shape[-1]
    uflat = q.reshape(bshape + (nd,)) - vflat
    h_basic = -np.einsum("...ij,...j->...i", pinv, uflat) / tau
    if scheme.kind == BASIC:
        return h_basic, h_basic, None
    if scheme.identity_predictor:
        phi = q.reshape(bshape + (nd,))
    else:
        phi = _predict_q(q, p, K, cap, tau, scheme.substeps).reshape(bshape + (nd,))
    diff = phi - vflat
    if scheme.kind == PHI_PREDICTOR:
        return -np.einsum("...ij,...j->...i", pinv, diff) / tau, h_basic, None
    # differential: D[:, l] = d phi / d h_l at h = 0 for the noise
    # directions Sigma e_l.  By the chain rule D = (d phi / d state) Sigma;
    # the state Jacobian needs only 2 N d central differences, fewer than
    # the 2 J direct ones.
    if dpinv_cache is None:
        eps = 1e-5
        eye = np.eye(nd)
        dirs = eye.reshape(nd, *q.shape[-2:])                         # (nd, N, d)
        zq = np.zeros_like(dirs)
        pert_q = np.concatenate([dirs, -dirs, zq, zq])                # (4 nd, N, d)
        pert_p = np.concatenate([zq, zq, dirs, -dirs])
        qp = q[None] + eps * pert_q[:, None] if bshape else q[None] + eps * pert_q
        pp = p[None] + eps * pert_p[:, None] if bshape else p[None] + eps * pert_p
        phi_pm = _predict_q(qp, pp, K, cap, tau, scheme.substeps)
        phi_pm = phi_pm.reshape((4 * nd,) + bshape + (nd,))
        Jq = (phi_pm[:nd] - phi_pm[nd:2 * nd]) / (2 * eps)            # (nd, ..., nd)
        Jp = (phi_pm[2 * nd:3 * nd] - phi_pm[3 * nd:]) / (2 * eps)
        Jq = np.moveaxis(Jq, 0, -1)                                   # (..., nd_out, nd_in)
        Jp = np.moveaxis(Jp, 0, -1)
        D = np.einsum("...ai,...ij->...aj", Jq, sq) + np.einsum("...ai,...ij->...aj", Jp, sp)
        dpinv_cache = np.linalg.pinv(D)
    return -np.einsum("...ij,...j->...i", dpinv_cache, diff) / tau, h_basic, dpinv_cache


def simulate_bridge(state0: LandmarkState, K: KernelSpec, model: NoiseModel,
                    scheme: GuidingScheme, T: float, steps: int, v, seed) -> BridgePath:
    """Simulate one guided bridge from state0 towards q(T) ~ v."""
    batch = sample_bridges(state0, K, model, scheme, T, steps, v, seed,
                           n_bridges=1, store_paths=True, _single_seed=True)
    return batch.path(0)


def sample_bridges(state0: LandmarkState, K: KernelSpec, model: NoiseModel,
                   scheme: GuidingScheme, T: float, steps: int, v, seed,
                   n_bridges: int, store_paths: bool = True,
                   svd_tol: float = 1e-10, _single_seed: bool = False) -> BridgeBatch:
    """Simulate a batch of independent guided bridges towards v.

    Bridge i draws its Wiener increments from the stream derived from
    (seed, i), so batches are reproducible and order-independent.
    ``v`` is one target configuration (N, d) shared by the batch, or
    one target per bridge (n_bridges, N, d).
    """
    if steps < 2:
        raise InputError("bridge integration needs steps >= 2")
    v = np.asarray(v, dtype=float)
    B = int(n_bridges)
    N, d = state0.q.shape
    nd = N * d
    if v.shape == (N, d):
        vflat = v.ravel()
    elif v.shape == (B, N, d):
        vflat = v.reshape(B, nd)
    else:
        raise InputError(f"target shape {v.shape} matches neither {(N, d)} nor {(B, N, d)}")
    dt = T / steps
    cap = scheme.drift_cap if scheme.drift_cap is not None else default_drift_cap(state0.p)

    q = np.broadcast_to(state0.q, (B, N, d)).copy()
    p = np.broadcast_to(state0.p, (B, N, d)).copy()
    if _single_seed:
        rngs = [_rng_for(seed)]
    else:
        rngs = [_rng_for(seed, i) for i in range(B)]
    log_phi = np.zeros(B)
    times = np.arange(steps) * dt
    if store_paths:
        qs = np.empty((B, steps, N, d))
        ps = np.empty((B, steps, N, d))
        qs[:, 0], ps[:, 0] = q, p

    sq, sp = diffusion_blocks(q, p, model)
    pinv, A, rank, _ = _pinv_and_gram_inverse(sq, svd_tol)
    root = np.sqrt(dt)
    dpinv = None
    # per-bridge streams, drawn in memory-bounded chunks of steps
    chunk = max(1, min(steps - 1, int(4e8 / max(1, B * model.J * 8))))
    buf, buf_at = None, 0

    def next_dW(k):
        nonlocal buf, buf_at
        if buf is None or k >= buf_at + buf.shape[1]:
            m = min(chunk, steps - 1 - k)
            buf = np.stack([r.normal(0.0, root, size=(m, model.J)) for r in rngs])
            buf_at = k
        return buf[:, k - buf_at]

    for k in range(steps - 1):
        if np.any(rank < nd):
            bad = int(np.argmax(rank < nd))
            raise BridgeError(
                f"A(q) singular at step {k} (bridge {bad}: rank {int(rank[bad])} < {nd})", step=k)
        tau = T - times[k]
        bq, bp = ito_drift_arrays(q, p, K, model)
        nrm = np.linalg.norm(bq, axis=-1, keepdims=True)
        btq = bq * np.minimum(1.0, cap / np.where(nrm > 0, nrm, 1.0))
        ucap = np.einsum("bij,bj->bi", pinv, (btq - bq).reshape(B, nd))
        btq_eff = bq.reshape(B, nd) + np.einsum("bij,bj->bi", sq, ucap)
        btp_eff = bp.reshape(B, nd) + np.einsum("bij,bj->bi", sp, ucap)

        cache = dpinv if (scheme.kind == DIFFERENTIAL and k % scheme.diff_refresh) else None
        h_used, h_basic, dpinv = _guiding_vector(q, p, K, model, scheme, sq, sp, pinv,
                                                 tau, vflat, cap, dpinv_cache=cache)
        dW = next_dW(k)

        u = q.reshape(B, nd) - vflat
        log_phi -= np.einsum("bi,bij,bj->b", u, A, btq_eff) * dt / tau
        log_phi += np.einsum("bj,bj->b", -ucap, dW) - 0.5 * np.einsum("bj,bj->b", ucap, ucap) * dt
        hdiff = h_basic - h_used
        log_phi += np.einsum("bj,bj->b", hdiff, dW) - 0.5 * np.einsum("bj,bj->b", hdiff, hdiff) * dt

        drift_q = btq_eff + np.einsum("bij,bj->bi", sq, h_used)
        drift_p = btp_eff + np.einsum("bij,bj->bi", sp, h_used)
        q = (q.reshape(B, nd) + drift_q * dt + np.einsum("bij,bj->bi", sq, dW)).reshape(B, N, d)
        p = (p.reshape(B, nd) + drift_p * dt + np.einsum("bij,bj->bi", sp, dW)).reshape(B, N, d)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise BridgeError(f"bridge blew up at step {k + 1}", step=k + 1)

        sq, sp = diffusion_blocks(q, p, model)
        pinv, A_next, rank, _ = _pinv_and_gram_inverse(sq, svd_tol)
        # quadratic-variation group: dA sandwiched by (q - v), and the
        # covariation of A with the outer product of (q - v)
        u_next = q.reshape(B, nd) - vflat
        dA = A_next - A
        log_phi -= np.einsum("bi,bij,bj->b", u, dA, u) / (2.0 * tau)
        duu = np.einsum("bi,bj->bij", u_next, u_next) - np.einsum("bi,bj->bij", u, u)
        log_phi -= np.einsum("bij,bij->b", dA, duu) / tau
        A = A_next

        if store_paths:
            qs[:, k + 1], ps[:, k + 1] = q, p

    hit = np.linalg.norm((q.reshape(B, nd) - vflat), axis=-1)
    if not np.all(np.isfinite(log_phi)):
        raise BridgeError("non-finite log correction factor")
    return BridgeBatch(times, log_phi, hit, v,
                       qs if store_paths else None, ps if store_paths else None, seed=seed)


def importance_weights(log_phi):
    """Stabilised self-normalised weights and their effective sample size."""
    log_phi = np.asarray(log_phi, dtype=float)
    if log_phi.size == 0:
        raise EstimationError("no bridges given")
    m = np.max(log_phi)
    if not np.isfinite(m):
        raise EstimationError("all bridge weights vanished (non-finite log phi)")
    w = np.exp(log_phi - m)
    tot = w.sum()
    if tot <= 0.0 or not np.isfinite(tot):
        raise EstimationError("all bridge weights vanished after stabilisation")
    ess = float(tot**2 / np.sum(w**2))
    return w / tot, ess


@dataclass
class CondExpectation:
    value: object
    ess: float


def conditioned_expectation(f, bridges) -> CondExpectation:
    """Self-normalised importance-sampling estimate of E[f | q_T = v].

    ``f`` maps a BridgePath to a scalar or array; ``bridges`` is a list
    of BridgePath or a BridgeBatch with stored paths.  Also reports the
    effective sample size of the weights.
    """
    if isinstance(bridges, BridgeBatch):
        bridges = bridges.paths()
    if len(bridges) == 0:
        raise EstimationError("no bridges given")
    w, ess = importance_weights([b.log_phi for b in bridges])
    vals = np.array([np.asarray(f(b), dtype=float) for b in bridges])
    est = np.tensordot(w, vals, axes=(0, 0))
    return CondExpectation(value=est if est.shape else float(est), ess=ess)


def transition_density(state0: LandmarkState, K: KernelSpec, model: NoiseModel,
                       scheme: GuidingScheme, v, T: float, steps: int,
                       n_bridges: int, seed, with_se: bool = False):
    """Monte-Carlo estimate of the endpoint density of q(T) at v.

    mean(phi) over guided bridges times the closed-form prefactor
    sqrt(det A(v)) (2 pi T)^(-Nd/2) exp(-||Sigma_q(q0)^+ (q0 - v)||^2 / (2T)).
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    batch = sample_bridges(state0, K, model, scheme, T, steps, v, seed,
                           n_bridges=n_bridges, store_paths=False)
    phi = np.exp(batch.log_phi)
    mean_phi = float(phi.mean())
    se_phi = float(phi.std(ddof=1) / np.sqrt(len(phi)))

    nd = state0.q.size
    sqv, _ = diffusion_blocks(v[None], np.zeros_like(v)[None], model)
    _, _, rankv, sv = _pinv_and_gram_inverse(sqv, 1e-10)
    if rankv[0] < nd:
        raise BridgeError(f"Sigma_q(v) rank {int(rankv[0])} < {nd}: density prefactor undefined")
    log_detA = -2.0 * np.sum(np.log(sv[0][: nd]))
    sq0, _ = diffusion_blocks(state0.q[None], state0.p[None], model)
    pinv0, _, _, _ = _pinv_and_gram_inverse(sq0, 1e-10, need_A=False)
    w0 = pinv0[0] @ (state0.q.ravel() - v.ravel())
    prefactor = np.exp(0.5 * log_detA - 0.5 * np.dot(w0, w0) / T) / (2.0 * np.pi * T) ** (nd / 2.0)
    density = prefactor * mean_phi
    if with_se:
        return density, prefactor * se_phi
    return density
