"""Scalar kernels and spatially correlated noise fields.

Two radial kernel families are supported, both evaluated on a scalar
distance x >= 0 together with exact first and second derivatives:

* ``gaussian``:       k_r(x) = exp(-x^2 / (2 r^2)),  k(0) = 1.
* ``cubic_bspline``:  the centred cardinal cubic B-spline S3(x/r),
  rescaled so k(0) = 1 (S3(0) = 2/3); compact support, k(x) = 0 for
  x >= 2 r, and twice continuously differentiable everywhere.

A noise model is a set of J vector fields on the data domain,

    sigma_l(q) = lambda_l * k_{r_l}(||q - delta_l||),

with centres delta_l, length-scales r_l and amplitude vectors
lambda_l in R^d.  ``noise_field_eval`` returns values, Jacobians and
Hessians of all fields at a batch of points; everything is pure and
broadcasts over arbitrary leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

GAUSSIAN = "gaussian"
CUBIC_BSPLINE = "cubic_bspline"
KERNEL_KINDS = (GAUSSIAN, CUBIC_BSPLINE)


@dataclass(frozen=True)
class KernelSpec:
    """A radial kernel kind plus its length-scale (landmark alpha or noise r_l)."""

    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InputError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise InputError(f"kernel scale must be positive and finite, got {self.scale}")

    def to_dict(self):
        return {"kind": self.kind, "scale": float(self.scale)}

    @staticmethod
    def from_dict(d):
        return KernelSpec(kind=d["kind"], scale=float(d["scale"]))


def _gaussian_kd(x, r):
    inv = 1.0 / (r * r)
    k = np.exp(-0.5 * x * x * inv)
    d1 = -x * inv * k
    d2 = (x * x * inv - 1.0) * inv * k
    return k, d1, d2


def _bspline_kd(x, r):
    # centred cardinal cubic B-spline on u = x/r, rescaled so k(0) = 1
    u = x / r
    k = np.zeros_like(u)
    d1 = np.zeros_like(u)
    d2 = np.zeros_like(u)
    inner = u < 1.0
    outer = (u >= 1.0) & (u < 2.0)
    ui = np.where(inner, u, 0.0)
    k = np.where(inner, 1.5 * (2.0 / 3.0 - ui * ui + 0.5 * ui**3), k)
    d1 = np.where(inner, 1.5 * (-2.0 * ui + 1.5 * ui * ui), d1)
    d2 = np.where(inner, 1.5 * (-2.0 + 3.0 * ui), d2)
    uo = np.where(outer, u, 0.0)
    k = np.where(outer, 1.5 * (2.0 - uo) ** 3 / 6.0, k)
    d1 = np.where(outer, -1.5 * 0.5 * (2.0 - uo) ** 2, d1)
    d2 = np.where(outer, 1.5 * (2.0 - uo), d2)
    return k, d1 / r, d2 / (r * r)


def kernel_eval(spec: KernelSpec, x):
    """Evaluate k(x), k'(x), k''(x) for a scalar distance x >= 0.

    ``x`` may be a scalar or an ndarray; the three outputs share its
    shape.  Raises :class:`InputError` on negative or non-finite input.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InputError("kernel_eval: non-finite distance")
    if np.any(x < 0.0):
        raise InputError("kernel_eval: distance must be non-negative")
    k, d1, d2 = _kernel_kd(spec.kind, x, spec.scale)
    if x.ndim == 0:
        return float(k), float(d1), float(d2)
    return k, d1, d2


def _kernel_kd(kind, x, r):
    if kind == GAUSSIAN:
        return _gaussian_kd(x, r)
    return _bspline_kd(x, r)


def _kernel_k2_zero(kind, r):
    """k''(0), the smooth limit of k'(s)/s at coincident points."""
    if kind == GAUSSIAN:
        return -1.0 / (r * r)
    return -3.0 / (r * r)


def radial_parts(kind, scales, s):
    """Radial building blocks for composed fields k(||x||).

    Parameters
    ----------
    kind : str
    scales : ndarray, broadcastable against ``s``
    s : ndarray of distances, >= 0

    Returns
    -------
    k : k(s)
    w1 : k'(s)/s with the smooth limit k''(0) at s = 0, so that
         grad k(||x||) = w1 * x.
    d2 : k''(s)
    """
    scales = np.asarray(scales, dtype=float)
    k, d1, d2 = _kernel_kd(kind, s, scales)
    k2z = _kernel_k2_zero(kind, scales)
    small = s < 1e-300
    s_safe = np.where(small, 1.0, s)
    w1 = np.where(small, np.broadcast_to(k2z, s.shape), d1 / s_safe)
    return k, w1, d2


@dataclass(frozen=True)
class NoiseModel:
    """J radial noise fields sharing a kernel kind.

    centers : (J, d) field positions delta_l
    scales  : (J,)  length-scales r_l
    amps    : (J, d) amplitude vectors lambda_l
    """

    kind: str
    centers: np.ndarray
    scales: np.ndarray
    amps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centers", np.atleast_2d(np.asarray(self.centers, dtype=float)))
        object.__setattr__(self, "scales", np.atleast_1d(np.asarray(self.scales, dtype=float)))
        object.__setattr__(self, "amps", np.atleast_2d(np.asarray(self.amps, dtype=float)))
        if self.kind not in KERNEL_KINDS:
            raise InputError(f"unknown kernel kind {self.kind!r}")
        J, d = self.centers.shape
        if J < 1:
            raise InputError("noise model needs at least one field")
        if self.scales.shape != (J,):
            raise InputError(f"scales must have shape ({J},), got {self.scales.shape}")
        if self.amps.shape != (J, d):
            raise InputError(f"amps must have shape ({J}, {d}), got {self.amps.shape}")
        if not (np.all(np.isfinite(self.centers)) and np.all(np.isfinite(self.amps))):
            raise InputError("noise model has non-finite centers or amplitudes")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0.0):
            raise InputError("noise length-scales must be positive and finite")

    @property
    def J(self):
        return self.centers.shape[0]

    @property
    def d(self):
        return self.centers.shape[1]

    def with_amps(self, amps):
        """Same geometry, new amplitude vectors (used by inference)."""
        return NoiseModel(self.kind, self.centers, self.scales, np.asarray(amps, dtype=float))

    def to_dict(self):
        return {
            "kind": self.kind,
            "fields": [
                {
                    "center": self.centers[l].tolist(),
                    "scale": float(self.scales[l]),
                    "amplitude": self.amps[l].tolist(),
                }
                for l in range(self.J)
            ],
        }

    @staticmethod
    def from_dict(d):
        fields = d["fields"]
        return NoiseModel(
            kind=d["kind"],
            centers=np.array([f["center"] for f in fields], dtype=float),
            scales=np.array([f["scale"] for f in fields], dtype=float),
            amps=np.array([f["amplitude"] for f in fields], dtype=float),
        )


def concat_noise(*models: NoiseModel) -> NoiseModel:
    """Merge several noise models with the same kernel kind into one."""
    kinds = {m.kind for m in models}
    if len(kinds) != 1:
        raise InputError("cannot merge noise models with different kernel kinds")
    return NoiseModel(
        models[0].kind,
        np.concatenate([m.centers for m in models]),
        np.concatenate([m.scales for m in models]),
        np.concatenate([m.amps for m in models]),
    )


def noise_radial(model: NoiseModel, q):
    """Radial pieces of all fields at points q of shape (..., d).

    Returns ``(X, k, g, d2)`` with

    * ``X`` (..., J, d): displacements q - delta_l,
    * ``k`` (..., J): kernel values,
    * ``g`` (..., J): -k'(s)/s  (>= 0 inside the support; smooth limit
      -k''(0) at the centre), so grad sigma_l^b = -amps[l,b] * g * X,
    * ``d2`` (..., J): k''(s).
    """
    q = np.asarray(q, dtype=float)
    X = q[..., None, :] - model.centers
    s = np.linalg.norm(X, axis=-1)
    k, w1, d2 = radial_parts(model.kind, model.scales, s)
    return X, k, -w1, d2


def noise_field_eval(model: NoiseModel, q, amps=None):
    """Values, Jacobians and Hessians of all noise fields at point(s) q.

    Parameters
    ----------
    model : NoiseModel
    q : (..., d) evaluation points (a bare (d,) point gives unbatched output)
    amps : optional override of the amplitude vectors, broadcastable to
        (..., J, d); used by inference to evaluate many parameter
        vectors against shared geometry.

    Returns
    -------
    sigma : (..., J, d)        sigma_l(q)
    grad  : (..., J, d, d)     grad[l, b, c] = d sigma_l^b / d q^c
    hess  : (..., J, d, d, d)  hess[l, b, c, e] = d^2 sigma_l^b / d q^c d q^e
    """
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise InputError("noise_field_eval: non-finite evaluation point")
    X, k, g, d2 = noise_radial(model, q)
    amps = model.amps if amps is None else np.asarray(amps, dtype=float)
    sigma = amps * k[..., None]

    # grad k(||x||) = w1 x with w1 = -g; Hessian = (d2 - w1) n nT + w1 I,
    # where n = x/s (zero vector at the centre, where the Hessian is k''(0) I)
    w1 = -g
    gradk = w1[..., None] * X
    s = np.linalg.norm(X, axis=-1)
    n = X / np.where(s[..., None] > 0.0, s[..., None], 1.0)
    d = model.d
    eye = np.eye(d)
    hessk = (d2 - w1)[..., None, None] * (n[..., :, None] * n[..., None, :]) + w1[..., None, None] * eye

    grad = amps[..., :, None] * gradk[..., None, :]
    hess = amps[..., :, None, None] * hessk[..., None, :, :]
    return sigma, grad, hess


def noise_drift_correction(model: NoiseModel, q, p, amps=None):
    """Ito drift correction of the landmark system at points q.

    Returns (bq, bp), the noise-induced parts of the Ito-form drift:

        bq_i^a = 1/2 sum_{l,g} (d sigma_l^a / d q^g) sigma_l^g
        bp_i^a = 1/2 sum_l (p_i . lambda_l) [ g^2 (X . lambda_l) X^a
                 - (k'' - k'/s) k (n . lambda_l) n^a - (k'/s) k lambda_l^a ]

    assembled from radial pieces only (no Jacobian/Hessian tensors), for
    q, p of shape (..., N, d) and optionally batched amplitudes.
    """
    X, k, g, d2 = noise_radial(model, q)
    amps = model.amps if amps is None else np.asarray(amps, dtype=float)
    w1 = -g
    pa = np.einsum("...ia,...la->...il", p, amps)
    Xa = np.einsum("...ila,...la->...il", X, amps)
    bq = -0.5 * np.einsum("...il,...la->...ia", g * k * Xa, amps)
    s = np.linalg.norm(X, axis=-1)
    n_ = X / np.where(s[..., None] > 0.0, s[..., None], 1.0)
    na = np.einsum("...ila,...la->...il", n_, amps)
    bp = 0.5 * (
        np.einsum("...il,...ila->...ia", pa * g * g * Xa, X)
        - np.einsum("...il,...ila->...ia", pa * (d2 - w1) * k * na, n_)
        - np.einsum("...il,...la->...ia", pa * w1 * k, amps)
    )
    return bq, bp


def make_grid_noise(n_per_side, extent, r, amplitudes, kind=GAUSSIAN):
    """Noise fields on a regular 2-d grid covering ``extent``.

    Centres are inset half a cell from the extent boundary, i.e. at
    fractions (2k+1)/(2n) of each side.  ``amplitudes`` is either a
    single length-2 vector (one field per centre) or a list of vectors
    (one field per centre per vector, e.g. separate x- and y-amplitude
    families sharing the same grid).
    """
    if int(n_per_side) < 1:
        raise InputError("n_per_side must be >= 1")
    n = int(n_per_side)
    extent = np.asarray(extent, dtype=float)
    if extent.shape != (2, 2):
        raise InputError("extent must be ((x0, x1), (y0, y1))")
    if np.any(extent[:, 1] <= extent[:, 0]) or not np.all(np.isfinite(extent)):
        raise InputError("degenerate extent: upper bounds must exceed lower bounds")
    amplitudes = np.asarray(amplitudes, dtype=float)
    if amplitudes.ndim == 1:
        amplitudes = amplitudes[None, :]
    if amplitudes.shape[-1] != 2:
        raise InputError("grid noise is 2-d; amplitude vectors must have length 2")

    fracs = (2.0 * np.arange(n) + 1.0) / (2.0 * n)
    xs = extent[0, 0] + fracs * (extent[0, 1] - extent[0, 0])
    ys = extent[1, 0] + fracs * (extent[1, 1] - extent[1, 0])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])

    m = amplitudes.shape[0]
    centers = np.repeat(centers, m, axis=0)
    amps = np.tile(amplitudes, (n * n, 1))
    scales = np.full(centers.shape[0], float(r))
    return NoiseModel(kind=kind, centers=centers, scales=scales, amps=amps)
