import numpy as np
import pytest

from stochlm import InputError, KernelSpec, NoiseModel, kernel_eval, make_grid_noise, noise_field_eval
from stochlm.kernels import concat_noise


def fd_value(spec, x, h=1e-5):
    kp, _, _ = kernel_eval(spec, x + h)
    km, _, _ = kernel_eval(spec, x - h)
    return (kp - km) / (2 * h)


def fd_second(spec, x, h=1e-5):
    kp, _, _ = kernel_eval(spec, x + h)
    k0, _, _ = kernel_eval(spec, x)
    km, _, _ = kernel_eval(spec, x - h)
    return (kp - 2 * k0 + km) / (h * h)


def test_gaussian_at_zero():
    k, d1, d2 = kernel_eval(KernelSpec("gaussian", 0.5), 0.0)
    assert k == 1.0
    assert d1 == 0.0
    assert d2 == pytest.approx(-4.0)


def test_gaussian_direct_value():
    # k(x) = exp(-x^2 / (2 r^2)) at r = 0.5, x = 0.5
    k, d1, d2 = kernel_eval(KernelSpec("gaussian", 0.5), 0.5)
    assert k == pytest.approx(np.exp(-0.5), rel=1e-12)
    assert d1 == pytest.approx(fd_value(KernelSpec("gaussian", 0.5), 0.5), rel=1e-6)


def test_bspline_compact_support():
    spec = KernelSpec("cubic_bspline", 1.0)
    for x in (2.0, 2.5, 10.0):
        assert kernel_eval(spec, x) == (0.0, 0.0, 0.0)


def test_bspline_normalised_at_zero():
    k, d1, d2 = kernel_eval(KernelSpec("cubic_bspline", 0.7), 0.0)
    assert k == pytest.approx(1.0)
    assert d1 == 0.0
    assert d2 == pytest.approx(-3.0 / 0.49)


@pytest.mark.parametrize("kind", ["gaussian", "cubic_bspline"])
@pytest.mark.parametrize("scale", [0.25, 0.5, 1.0, 2.0])
def test_derivatives_match_finite_differences(kind, scale):
    spec = KernelSpec(kind, scale)
    # stay away from the spline joints where third derivatives jump
    xs = scale * np.array([0.05, 0.2, 0.45, 0.7, 1.2, 1.7]) + 0.013 * scale
    for x in xs:
        k, d1, d2 = kernel_eval(spec, float(x))
        if abs(d1) > 1e-8:
            assert d1 == pytest.approx(fd_value(spec, float(x), h=1e-6 * scale), rel=1e-6)
        if abs(d2) > 1e-8:
            assert d2 == pytest.approx(fd_second(spec, float(x), h=1e-4 * scale), rel=1e-5)


def test_gaussian_far_field_negligible():
    spec = KernelSpec("gaussian", 0.3)
    k, _, _ = kernel_eval(spec, 12 * 0.3)
    assert k < 1e-12


def test_kernel_eval_rejects_bad_input():
    spec = KernelSpec("gaussian", 1.0)
    with pytest.raises(InputError):
        kernel_eval(spec, np.nan)
    with pytest.raises(InputError):
        kernel_eval(spec, -0.1)
    with pytest.raises(InputError):
        KernelSpec("gaussian", -1.0)


def single_field(kind="gaussian", center=(0.3, -0.2), r=0.5, lam=(0.08, 0.0)):
    return NoiseModel(kind, np.array([center]), np.array([r]), np.array([lam]))


def test_sigma_at_center_is_amplitude():
    model = single_field()
    sigma, grad, _ = noise_field_eval(model, np.array([0.3, -0.2]))
    assert np.allclose(sigma[0], [0.08, 0.0])
    assert np.allclose(grad[0], 0.0)


def test_sigma_direct_value():
    model = single_field()
    sigma, _, _ = noise_field_eval(model, np.array([0.8, -0.2]))
    assert sigma[0, 0] == pytest.approx(0.08 * np.exp(-0.5), rel=1e-12)
    assert sigma[0, 1] == 0.0


@pytest.mark.parametrize("kind", ["gaussian", "cubic_bspline"])
def test_noise_grad_hess_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    model = NoiseModel(
        kind,
        centers=rng.normal(size=(3, 2)) * 0.4,
        scales=np.array([0.5, 0.8, 0.6]),
        amps=rng.normal(size=(3, 2)) * 0.1,
    )
    pts = rng.normal(size=(5, 2)) * 0.5
    h = 1e-5
    for q in pts:
        sigma, grad, hess = noise_field_eval(model, q)
        for c in range(2):
            e = np.zeros(2)
            e[c] = h
            sp, gp, _ = noise_field_eval(model, q + e)
            sm, gm, _ = noise_field_eval(model, q - e)
            fd_grad = (sp - sm) / (2 * h)
            fd_hess = (gp - gm) / (2 * h)
            scale = np.maximum(np.abs(grad[:, :, c]), 1e-3)
            assert np.all(np.abs(grad[:, :, c] - fd_grad) / scale < 1e-6)
            scale_h = np.maximum(np.abs(hess[:, :, :, c]), 1e-2)
            assert np.all(np.abs(hess[:, :, :, c] - fd_hess) / scale_h < 1e-5)


def test_noise_eval_batched_matches_loop():
    model = single_field()
    pts = np.array([[0.0, 0.0], [0.5, 0.5], [1.0, -1.0]])
    sig_b, grad_b, hess_b = noise_field_eval(model, pts)
    for i, q in enumerate(pts):
        s, g, h = noise_field_eval(model, q)
        assert np.allclose(sig_b[i], s)
        assert np.allclose(grad_b[i], g)
        assert np.allclose(hess_b[i], h)


def test_grid_centers_half_cell_inset():
    model = make_grid_noise(4, [[0, 1], [0, 1]], r=0.5, amplitudes=[0.08, 0.0])
    assert model.J == 16
    expected = {1 / 8, 3 / 8, 5 / 8, 7 / 8}
    assert set(np.round(model.centers[:, 0], 12)) == expected
    assert set(np.round(model.centers[:, 1], 12)) == expected


def test_grid_single_field_at_center():
    model = make_grid_noise(1, [[-1, 1], [0, 2]], r=0.5, amplitudes=[0.1, 0.1])
    assert model.J == 1
    assert np.allclose(model.centers[0], [0.0, 1.0])


def test_grid_six_by_six():
    model = make_grid_noise(6, [[0, 1], [0, 1]], r=0.4, amplitudes=[0.05, 0.0])
    assert model.J == 36


def test_grid_amplitude_families():
    model = make_grid_noise(4, [[0, 1], [0, 1]], r=0.5,
                            amplitudes=[[0.08, 0.0], [0.0, 0.08]])
    assert model.J == 32
    assert np.sum(np.all(model.amps == [0.08, 0.0], axis=1)) == 16


def test_grid_rejects_degenerate_extent():
    with pytest.raises(InputError):
        make_grid_noise(2, [[0, 0], [0, 1]], r=0.5, amplitudes=[0.1, 0.0])


def test_noise_model_roundtrip_and_concat():
    a = single_field()
    b = single_field(center=(1.0, 1.0), lam=(0.0, 0.05))
    m = concat_noise(a, b)
    assert m.J == 2
    m2 = NoiseModel.from_dict(m.to_dict())
    assert np.allclose(m2.centers, m.centers)
    assert np.allclose(m2.amps, m.amps)
    assert m2.kind == m.kind
