"""Deterministic landmark dynamics.

The configuration space is N point landmarks q_i in R^d with conjugate
momenta p_i.  The kinetic-energy Hamiltonian

    h(q, p) = 1/2 sum_{ij} (p_i . p_j) K(||q_i - q_j||)

generates the canonical equations

    dq_i/dt =  sum_j p_j K(||q_i - q_j||)
    dp_i/dt = -sum_j (p_i . p_j) k'(s_ij) (q_i - q_j)/s_ij

which are the point-particle reductions of the geodesic flow on the
diffeomorphism group.  All functions broadcast over leading batch axes
of q and p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import InputError, IntegrationError
from .kernels import KernelSpec, radial_parts


@dataclass
class LandmarkState:
    """Positions q and momenta p, each of shape (N, d)."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if self.q.shape != self.p.shape:
            raise InputError(f"q and p shapes differ: {self.q.shape} vs {self.p.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise InputError("landmark state has non-finite entries")

    @property
    def N(self):
        return self.q.shape[0]

    @property
    def d(self):
        return self.q.shape[1]

    def copy(self):
        return LandmarkState(self.q.copy(), self.p.copy())


@dataclass
class Trajectory:
    """Uniform-grid trajectory: times (K,), q and p of shape (K, N, d)."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray

    def state(self, k) -> LandmarkState:
        return LandmarkState(self.q[k], self.p[k])

    def final(self) -> LandmarkState:
        return self.state(-1)


def pairwise_kernel(K: KernelSpec, q):
    """K(||q_i - q_j||) (..., N, N) and w1 = k'(s)/s with the smooth limit."""
    diff = q[..., :, None, :] - q[..., None, :, :]
    s = np.linalg.norm(diff, axis=-1)
    k, w1, _ = radial_parts(K.kind, K.scale, s)
    return k, w1, diff


def hamiltonian(state: LandmarkState, K: KernelSpec) -> float:
    """Kinetic energy h(q, p); conserved along the deterministic flow."""
    return float(hamiltonian_arrays(state.q, state.p, K))


def hamiltonian_arrays(q, p, K: KernelSpec):
    k, _, _ = pairwise_kernel(K, q)
    pp = np.einsum("...ia,...ja->...ij", p, p)
    return 0.5 * np.einsum("...ij,...ij->...", pp, k)


def ham_vector_field(state: LandmarkState, K: KernelSpec):
    """(dq, dp) = (dh/dp, -dh/dq), the exact symplectic gradient of h."""
    dq, dp = ham_vector_field_arrays(state.q, state.p, K)
    return dq, dp


def ham_vector_field_arrays(q, p, K: KernelSpec):
    k, w1, diff = pairwise_kernel(K, q)
    dq = np.einsum("...ij,...ja->...ia", k, p)
    pp = np.einsum("...ia,...ja->...ij", p, p)
    dp = -np.einsum("...ij,...ij,...ija->...ia", pp, w1, diff)
    return dq, dp


def _rk4_step(q, p, h, deriv):
    k1q, k1p = deriv(q, p)
    k2q, k2p = deriv(q + 0.5 * h * k1q, p + 0.5 * h * k1p)
    k3q, k3p = deriv(q + 0.5 * h * k2q, p + 0.5 * h * k2p)
    k4q, k4p = deriv(q + h * k3q, p + h * k3p)
    qn = q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    pn = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    return qn, pn


def flow_deterministic(state0: LandmarkState, K: KernelSpec, T: float, steps: int) -> Trajectory:
    """Classical RK4 integration of the canonical equations on a uniform grid."""
    if steps < 1:
        raise InputError("steps must be >= 1")
    h = T / steps
    times = np.linspace(0.0, T, steps + 1)
    qs = np.empty((steps + 1,) + state0.q.shape)
    ps = np.empty_like(qs)
    qs[0], ps[0] = state0.q, state0.p
    deriv = lambda q, p: ham_vector_field_arrays(q, p, K)
    for k in range(steps):
        qs[k + 1], ps[k + 1] = _rk4_step(qs[k], ps[k], h, deriv)
        if not (np.all(np.isfinite(qs[k + 1])) and np.all(np.isfinite(ps[k + 1]))):
            raise IntegrationError(f"deterministic flow blew up at step {k + 1}", step=k + 1)
    return Trajectory(times, qs, ps)


def flow_endpoint_arrays(q0, p0, K: KernelSpec, T: float, steps: int):
    """Endpoint-only RK4 flow for batched initial conditions (no storage)."""
    h = T / steps
    q, p = np.asarray(q0, dtype=float), np.asarray(p0, dtype=float)
    deriv = lambda qq, pp: ham_vector_field_arrays(qq, pp, K)
    for _ in range(steps):
        q, p = _rk4_step(q, p, h, deriv)
    return q, p


@dataclass
class ShootOpts:
    tol: float = 1e-6
    max_iter: int = 400
    steps: int = 100


@dataclass
class ShootResult:
    p0: np.ndarray
    mismatch: float
    converged: bool
    n_iter: int


def shoot(q0, q_target, K: KernelSpec, T: float, steps: int, opts: ShootOpts | None = None) -> ShootResult:
    """Find the initial momentum whose flow endpoint matches q_target.

    Quasi-Newton (L-BFGS-B) minimisation of ||q(T; q0, p0) - q_target||^2
    with finite-difference gradients.  Returns the best iterate with a
    non-converged flag if the endpoint mismatch stays above opts.tol.
    """
    opts = opts or ShootOpts()
    q0 = np.atleast_2d(np.asarray(q0, dtype=float))
    q_target = np.atleast_2d(np.asarray(q_target, dtype=float))
    if q0.shape != q_target.shape:
        raise InputError("q0 and q_target must share a shape")
    shape = q0.shape

    def objective(p_flat):
        qT, _ = flow_endpoint_arrays(q0, p_flat.reshape(shape), K, T, steps)
        return float(np.sum((qT - q_target) ** 2))

    # straight-line momentum is exact for one free landmark and a good
    # warm start otherwise
    x0 = ((q_target - q0) / T).ravel()
    res = minimize(
        objective,
        x0,
        method="L-BFGS-B",
        options={"maxiter": opts.max_iter, "ftol": 1e-18, "gtol": 1e-14},
    )
    mismatch = float(np.sqrt(max(res.fun, 0.0)))
    return ShootResult(
        p0=res.x.reshape(shape),
        mismatch=mismatch,
        converged=bool(mismatch < opts.tol),
        n_iter=int(res.nit),
    )


def ellipse_landmarks(n, radii=(1.0, 0.5), center=(0.0, 0.0), phase=0.0):
    """N landmarks evenly spaced (in angle) on an ellipse."""
    if n < 1:
        raise InputError("ellipse needs at least one landmark")
    th = 2.0 * np.pi * np.arange(n) / n + phase
    a, b = radii
    cx, cy = center
    return np.column_stack([cx + a * np.cos(th), cy + b * np.sin(th)])
