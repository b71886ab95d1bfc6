"""Forward stochastic simulation of the landmark system.

The Stratonovich system perturbs the canonical equations with J shared
scalar Wiener processes through the noise fields sigma_l:

    dq_i = dh/dp_i dt + sum_l sigma_l(q_i) o dW^l
    dp_i = -dh/dq_i dt - sum_l grad_q(p_i . sigma_l(q_i)) o dW^l

The q-noise is the infinitesimal action of the stochastic velocity
field; the p-noise is its cotangent lift, so nearby landmarks feel
correlated kicks and the noise grows with the field gradients.

Integration is the stochastic Heun predictor-corrector (Stratonovich
consistent, same Wiener increment in both stages).  ``ito_drift``
exposes the equivalent Ito-form drift used by the Euler-Maruyama
bridge sampler and by the moment equations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import InputError, IntegrationError
from .hamiltonian import LandmarkState, ham_vector_field_arrays
from .kernels import KernelSpec, NoiseModel, noise_drift_correction, noise_radial


@dataclass
class SdePath:
    """Uniform-grid sample path with the seed it was generated from."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    seed: object = None

    def state(self, k) -> LandmarkState:
        return LandmarkState(self.q[k], self.p[k])

    def final(self) -> LandmarkState:
        return self.state(-1)


@dataclass
class EndpointSamples:
    """Monte-Carlo endpoint ensemble: q and p of shape (n, N, d)."""

    q: np.ndarray
    p: np.ndarray
    seed: object = None


def _rng_for(seed, index=None):
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    if index is not None:
        ss = np.random.SeedSequence(entropy=ss.entropy, spawn_key=ss.spawn_key + (int(index),))
    return np.random.default_rng(ss)


def _threads():
    try:
        return max(1, int(os.environ.get("STOCHLM_THREADS", "1")))
    except ValueError:
        return 1


def noise_increments(q, p, model: NoiseModel, dW):
    """Apply the diffusion to noise increments dW of shape (..., J).

    Returns (dq, dp) with the q-block sigma_l(q_i) dW^l and the p-block
    -grad_q(p_i . sigma_l(q_i)) dW^l.  Uses the radial structure
    directly (grad sigma_l^b = -amps[l,b] g X), avoiding full Jacobian
    tensors in the integrator hot path.
    """
    X, k, g, _ = noise_radial(model, q)
    dWn = dW[..., None, :]
    dq = np.einsum("...il,la->...ia", k * dWn, model.amps)
    pl = np.einsum("...ia,la->...il", p, model.amps)
    dp = np.einsum("...il,...ila->...ia", pl * g * dWn, X)
    return dq, dp


def diffusion_matrix(state: LandmarkState, model: NoiseModel):
    """Stacked diffusion matrix of shape (2 N d, J).

    Column l holds sigma_l evaluated at all landmarks (q-block, rows
    i*d + alpha) over the cotangent-lift block -grad_q(p . sigma_l).
    """
    sq, sp = diffusion_blocks(state.q, state.p, model)
    return np.concatenate([sq, sp], axis=-2)


def diffusion_blocks(q, p, model: NoiseModel):
    """(Sigma_q, Sigma_p), each (..., N*d, J), for batched states."""
    X, k, g, _ = noise_radial(model, q)
    bshape = q.shape[:-2]
    N, d = q.shape[-2:]
    J = model.J
    sigma = k[..., None] * model.amps
    sq = np.swapaxes(sigma, -1, -2).reshape(bshape + (N * d, J))
    pl = np.einsum("...ia,la->...il", p, model.amps)
    sp_nd = (pl * g)[..., None] * X  # -grad(p . sigma_l) = (p.lambda_l) g X
    sp = np.swapaxes(sp_nd, -1, -2).reshape(bshape + (N * d, J))
    return sq, sp


def ito_drift(state: LandmarkState, K: KernelSpec, model: NoiseModel):
    """Drift of the system in Ito form (Stratonovich drift plus correction)."""
    return ito_drift_arrays(state.q, state.p, K, model)


def ito_drift_arrays(q, p, K: KernelSpec, model: NoiseModel, amps=None):
    bq, bp = ham_vector_field_arrays(q, p, K)
    cq, cp = noise_drift_correction(model, q, p, amps=amps)
    return bq + cq, bp + cp


def heun_step(q, p, K, model, dt, dW):
    """One Stratonovich Heun step; the same dW drives both stages."""
    aq, ap = ham_vector_field_arrays(q, p, K)
    nq, np_ = noise_increments(q, p, model, dW)
    q1 = q + aq * dt + nq
    p1 = p + ap * dt + np_
    aq1, ap1 = ham_vector_field_arrays(q1, p1, K)
    nq1, np1 = noise_increments(q1, p1, model, dW)
    qn = q + 0.5 * (aq + aq1) * dt + 0.5 * (nq + nq1)
    pn = p + 0.5 * (ap + ap1) * dt + 0.5 * (np_ + np1)
    return qn, pn


def simulate_sde(state0: LandmarkState, K: KernelSpec, model: NoiseModel,
                 T: float, steps: int, seed) -> SdePath:
    """Simulate one path of the stochastic landmark system.

    With all amplitudes zero the output is exactly the deterministic
    Heun path; identical (seed, parameters) give identical paths.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    rng = _rng_for(seed)
    dt = T / steps
    dW = rng.normal(0.0, np.sqrt(dt), size=(steps, model.J))
    times = np.linspace(0.0, T, steps + 1)
    qs = np.empty((steps + 1,) + state0.q.shape)
    ps = np.empty_like(qs)
    qs[0], ps[0] = state0.q, state0.p
    for k in range(steps):
        qs[k + 1], ps[k + 1] = heun_step(qs[k], ps[k], K, model, dt, dW[k])
        if not (np.all(np.isfinite(qs[k + 1])) and np.all(np.isfinite(ps[k + 1]))):
            raise IntegrationError(f"SDE path blew up at step {k + 1}", step=k + 1)
    return SdePath(times, qs, ps, seed=seed)


def _endpoint_block(state0, K, model, T, steps, seed, indices, chunk=250):
    """Endpoints for a block of samples, each driven by its own stream."""
    B = len(indices)
    q = np.broadcast_to(state0.q, (B,) + state0.q.shape).copy()
    p = np.broadcast_to(state0.p, (B,) + state0.p.shape).copy()
    rngs = [_rng_for(seed, i) for i in indices]
    dt = T / steps
    root = np.sqrt(dt)
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        dW = np.stack([r.normal(0.0, root, size=(m, model.J)) for r in rngs])
        for k in range(m):
            q, p = heun_step(q, p, K, model, dt, dW[:, k])
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise IntegrationError(f"endpoint sampling blew up near step {done + m}", step=done + m)
        done += m
    return q, p


def sample_endpoints(state0: LandmarkState, K: KernelSpec, model: NoiseModel,
                     T: float, steps: int, n_samples: int, seed,
                     block_size: int = 1000):
    """Independent endpoint samples plus their empirical moments.

    Sample i is driven by the stream derived from (seed, i), so results
    are reproducible and independent of block size, thread count and
    scheduling order.
    """
    if n_samples < 2:
        raise InputError("n_samples must be >= 2")
    from .moments import empirical_moments  # cycle-free: moments imports nothing from sde

    blocks = [range(s, min(s + block_size, n_samples)) for s in range(0, n_samples, block_size)]
    nthreads = _threads()
    if nthreads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            results = list(ex.map(
                lambda idx: _endpoint_block(state0, K, model, T, steps, seed, list(idx)), blocks))
    else:
        results = [_endpoint_block(state0, K, model, T, steps, seed, list(idx)) for idx in blocks]
    q = np.concatenate([r[0] for r in results])
    p = np.concatenate([r[1] for r in results])
    samples = EndpointSamples(q, p, seed=seed)
    return samples, empirical_moments(samples)


def simulate_additive_baseline(state0: LandmarkState, K: KernelSpec, sigma_const: float,
                               T: float, steps: int, seed) -> SdePath:
    """Additive-force baseline: white noise straight into each momentum.

    dq_i = dh/dp_i dt, dp_i = -dh/dq_i dt + sigma dW^{i,alpha}, one
    independent Wiener component per landmark per coordinate.  Used to
    contrast data-attached noise with the Eulerian transport noise.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    rng = _rng_for(seed)
    dt = T / steps
    N, d = state0.q.shape
    dW = rng.normal(0.0, np.sqrt(dt), size=(steps, N, d))
    times = np.linspace(0.0, T, steps + 1)
    qs = np.empty((steps + 1, N, d))
    ps = np.empty_like(qs)
    qs[0], ps[0] = state0.q, state0.p
    for k in range(steps):
        q, p = qs[k], ps[k]
        aq, ap = ham_vector_field_arrays(q, p, K)
        q1 = q + aq * dt
        p1 = p + ap * dt + sigma_const * dW[k]
        aq1, ap1 = ham_vector_field_arrays(q1, p1, K)
        qs[k + 1] = q + 0.5 * (aq + aq1) * dt
        ps[k + 1] = p + 0.5 * (ap + ap1) * dt + sigma_const * dW[k]
        if not (np.all(np.isfinite(qs[k + 1])) and np.all(np.isfinite(ps[k + 1]))):
            raise IntegrationError(f"baseline path blew up at step {k + 1}", step=k + 1)
    return SdePath(times, qs, ps, seed=seed)
