import numpy as np
import pytest

from stochlm import (
    KernelSpec,
    LandmarkState,
    MomentState,
    NoiseModel,
    empirical_moments,
    integrate_moments,
    make_grid_noise,
    moment_rhs,
    sample_endpoints,
)
from stochlm.hamiltonian import ellipse_landmarks, flow_deterministic, ham_vector_field_arrays
from stochlm.errors import InputError

K05 = KernelSpec("gaussian", 0.5)


def constant_fields(lams):
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    d = lams.shape[1]
    return NoiseModel("gaussian", np.zeros((lams.shape[0], d)),
                      np.full(lams.shape[0], 1e7), lams)


# ---------------------------------------------------------------------------
# dense loop reference: literal transcription of the printed Gaussian
# moment-closure terms (1/r^2-weighted sigma products), independent of the
# package's vectorised implementation
# ---------------------------------------------------------------------------

def reference_rhs_gaussian(mq, mp, cqq, cqp, cpp, alpha, centers, rls, lams):
    N, d = mq.shape
    J = len(rls)

    def Kbar(x):
        return np.exp(-np.dot(x, x) / (2 * alpha**2))

    def sig(l, x):
        return lams[l] * np.exp(-np.sum((x - centers[l]) ** 2) / (2 * rls[l] ** 2))

    S = np.array([[sig(l, mq[i]) for l in range(J)] for i in range(N)])  # (N, J, d)
    KM = np.array([[Kbar(mq[i] - mq[j]) for j in range(N)] for i in range(N)])
    G = KM / alpha**2

    d_mq = np.zeros((N, d))
    for i in range(N):
        for a in range(d):
            acc = sum(mp[j, a] * KM[i, j] for j in range(N))
            for l in range(J):
                for g in range(d):
                    acc -= (1 / (2 * rls[l] ** 2)) * S[i, l, a] * (mq[i, g] - centers[l][g]) * S[i, l, g]
            d_mq[i, a] = acc

    d_mp = np.zeros((N, d))
    for i in range(N):
        for a in range(d):
            acc = 0.0
            for j in range(N):
                for c in range(d):
                    acc += G[i, j] * (
                        mp[i, c] * mp[j, c] * (mq[i, a] - mq[j, a])
                        + cpp[i, c, j, c] * (mq[i, a] - mq[j, a])
                        + mp[i, c] * (cqp[i, a, j, c] - cqp[j, a, j, c])
                        + mp[j, c] * (cqp[i, a, i, c] - cqp[j, a, i, c])
                    )
            for l in range(J):
                for c in range(d):
                    acc += (1 / (2 * rls[l] ** 2)) * mp[i, c] * S[i, l, c] * S[i, l, a]
            d_mp[i, a] = acc

    d_cqq = np.zeros((N, d, N, d))
    for i in range(N):
        for a in range(d):
            for j in range(N):
                for b in range(d):
                    acc = 0.0
                    for k in range(N):
                        acc += KM[j, k] * cqp[i, a, k, b] + KM[i, k] * cqp[j, b, k, a]
                    for l in range(J):
                        acc += S[i, l, a] * S[j, l, b]
                        for c in range(d):
                            acc -= 0.5 / rls[l] ** 2 * (
                                cqq[i, a, j, c] * S[j, l, c] * S[j, l, b]
                                + cqq[j, b, i, c] * S[i, l, c] * S[i, l, a]
                            )
                    d_cqq[i, a, j, b] = acc

    def app_half(i, a, j, b):
        acc = 0.0
        for k in range(N):
            for c in range(d):
                acc += G[j, k] * (
                    cpp[i, a, j, c] * mp[k, c] * (mq[j, b] - mq[k, b])
                    + cpp[i, a, k, c] * mp[j, c] * (mq[j, b] - mq[k, b])
                    + (cqp[j, b, i, a] - cqp[k, b, i, a]) * mp[j, c] * mp[k, c]
                    + cpp[i, a, j, c] * (cqp[j, b, k, c] - cqp[k, b, k, c])
                    + cpp[i, a, k, c] * (cqp[j, b, j, c] - cqp[k, b, j, c])
                    + (cqp[j, b, i, a] - cqp[k, b, i, a]) * cpp[k, c, j, c]
                )
        return acc

    d_cpp = np.zeros((N, d, N, d))
    for i in range(N):
        for a in range(d):
            for j in range(N):
                for b in range(d):
                    acc = app_half(i, a, j, b) + app_half(j, b, i, a)
                    for l in range(J):
                        cl = centers[l]
                        for c in range(d):
                            for e in range(d):
                                cb = mq[i, a] - cl[a]
                                db = mq[j, b] - cl[b]
                                e4 = (
                                    mp[i, e] * mp[j, c] * cb * db
                                    + cpp[i, e, j, c] * cb * db
                                    + cqp[i, a, i, e] * mp[j, c] * db
                                    + cqp[j, b, i, e] * mp[j, c] * cb
                                    + cqp[i, a, j, c] * mp[i, e] * db
                                    + cqp[j, b, j, c] * mp[i, e] * cb
                                    + cqq[i, a, j, b] * mp[i, e] * mp[j, c]
                                    + cpp[i, e, j, c] * cqq[i, a, j, b]
                                    + cqp[i, a, i, e] * cqp[j, b, j, c]
                                    + cqp[j, b, i, e] * cqp[i, a, j, c]
                                )
                                acc += S[i, l, e] * S[j, l, c] / rls[l] ** 4 * e4
                            acc += 0.5 / rls[l] ** 2 * (
                                S[j, l, b] * S[j, l, c] * cpp[i, a, j, c]
                                + S[i, l, a] * S[i, l, c] * cpp[j, b, i, c]
                            )
                    d_cpp[i, a, j, b] = acc

    def dpq(i, a, j, b):
        acc = 0.0
        for k in range(N):
            for c in range(d):
                acc += G[i, k] * (
                    cqp[j, b, i, c] * mp[k, c] * (mq[i, a] - mq[k, a])
                    + cqp[j, b, k, c] * mp[i, c] * (mq[i, a] - mq[k, a])
                    + (cqq[i, a, j, b] - cqq[k, a, j, b]) * mp[i, c] * mp[k, c]
                    + cqp[j, b, i, c] * (cqp[i, a, k, c] - cqp[k, a, k, c])
                    + cqp[j, b, k, c] * (cqp[i, a, i, c] - cqp[k, a, i, c])
                    + (cqq[i, a, j, b] - cqq[k, a, j, b]) * cpp[k, c, i, c]
                )
            acc += KM[j, k] * cpp[i, a, k, b]
        for l in range(J):
            for c in range(d):
                acc += 1 / rls[l] ** 2 * S[j, l, b] * S[i, l, c] * (
                    cqp[i, a, i, c] + mp[i, c] * (mq[i, a] - centers[l][a])
                )
                acc += 0.5 / rls[l] ** 2 * (
                    -S[j, l, b] * S[j, l, c] * cqp[j, c, i, a]
                    + S[i, l, c] * S[i, l, a] * cqp[j, b, i, c]
                )
        return acc

    d_cqp = np.zeros((N, d, N, d))
    for i in range(N):
        for a in range(d):
            for j in range(N):
                for b in range(d):
                    d_cqp[i, a, j, b] = dpq(j, b, i, a)

    return d_mq, d_mp, d_cqq, d_cqp, d_cpp


def random_moment_state(rng, N, d):
    n = N * d
    mq = rng.normal(size=(N, d)) * 0.5
    mp = rng.normal(size=(N, d)) * 0.8
    A = rng.normal(size=(2 * n, 2 * n)) * 0.05
    M = A @ A.T
    cqq, cqp, cpp = M[:n, :n], M[:n, n:], M[n:, n:]
    return MomentState(mq, mp, cqq, cqp, cpp)


def test_rhs_matches_printed_gaussian_reference():
    rng = np.random.default_rng(12)
    N, d = 2, 2
    centers = rng.normal(size=(3, 2)) * 0.4
    rls = np.array([0.5, 0.7, 0.4])
    lams = rng.normal(size=(3, 2)) * 0.1
    model = NoiseModel("gaussian", centers, rls, lams)
    K = KernelSpec("gaussian", 0.45)
    m = random_moment_state(rng, N, d)
    out = moment_rhs(m, K, model)
    c4 = lambda c: c.reshape(N, d, N, d)
    ref = reference_rhs_gaussian(m.mq, m.mp, c4(m.cqq), c4(m.cqp), c4(m.cpp),
                                 0.45, centers, rls, lams)
    names = ["mq", "mp", "cqq", "cqp", "cpp"]
    got = [out.mq, out.mp, c4(out.cqq), c4(out.cqp), c4(out.cpp)]
    for name, g, r in zip(names, got, ref):
        assert np.allclose(g, r, rtol=1e-10, atol=1e-12), f"{name} mismatch:\n{g}\n{r}"


def test_zero_noise_reduces_to_deterministic_drift():
    st = LandmarkState(ellipse_landmarks(3), np.array([[0.5, 0.1], [0.0, -0.2], [0.3, 0.3]]))
    model = make_grid_noise(2, [[-1, 1], [-1, 1]], r=0.5, amplitudes=[0.0, 0.0])
    m = MomentState.zero_covariance(st.q, st.p)
    out = moment_rhs(m, K05, model)
    dq, dp = ham_vector_field_arrays(st.q, st.p, K05)
    assert np.allclose(out.mq, dq, atol=1e-14)
    assert np.allclose(out.mp, dp, atol=1e-14)
    assert np.allclose(out.cqq, 0.0, atol=1e-16)
    assert np.allclose(out.cqp, 0.0, atol=1e-16)
    assert np.allclose(out.cpp, 0.0, atol=1e-16)


def test_constant_field_covariance_is_linear_in_time():
    lam = np.array([[0.07, 0.0], [0.0, 0.04]])
    model = constant_fields(lam)
    m0 = MomentState.zero_covariance([[0.1, -0.3]], [[0.2, 0.1]])
    out = moment_rhs(m0, K05, model)
    target = lam.T @ lam  # sum_l lambda_l lambda_l^T
    assert np.allclose(out.cqq, target, atol=1e-10)
    assert np.allclose(out.mp, 0.0, atol=1e-10)
    assert np.allclose(out.cpp, 0.0, atol=1e-12)

    traj = integrate_moments(m0, K05, model, T=1.0, steps=200)
    assert np.allclose(traj.final().cqq, target, atol=1e-10)
    assert np.allclose(traj.final().cpp, 0.0, atol=1e-12)


def test_zero_noise_means_follow_deterministic_flow():
    st = LandmarkState(ellipse_landmarks(5), np.tile([0.6, 0.15], (5, 1)))
    K = KernelSpec("gaussian", 0.1)
    model = make_grid_noise(2, [[-1, 1], [-1, 1]], r=0.5, amplitudes=[0.0, 0.0])
    m0 = MomentState.zero_covariance(st.q, st.p)
    traj = integrate_moments(m0, K, model, T=1.0, steps=1000)
    det = flow_deterministic(st, K, T=1.0, steps=1000)
    assert np.linalg.norm(traj.final().mq - det.q[-1]) < 1e-8


def test_symmetry_preserved_each_step():
    rng = np.random.default_rng(3)
    model = make_grid_noise(2, [[-1, 1], [-1, 1]], r=0.4, amplitudes=[[0.1, 0.0], [0.0, 0.1]])
    m0 = MomentState.zero_covariance(rng.normal(size=(2, 2)) * 0.3, rng.normal(size=(2, 2)))
    traj = integrate_moments(m0, K05, model, T=0.5, steps=50)
    for k in (10, 25, 50):
        assert np.array_equal(traj.cqq[k], traj.cqq[k].T)
        assert np.array_equal(traj.cpp[k], traj.cpp[k].T)
    assert traj.min_eig is not None and traj.min_eig.shape == (51,)


def test_small_noise_quadratic_scaling():
    base = 0.08
    st = LandmarkState([[0.0, 0.0]], [[1.0, 0.0]])
    covs = []
    for s in (1.0, 0.5, 0.25):
        model = make_grid_noise(4, [[-0.5, 1.5], [-1, 1]], r=0.5,
                                amplitudes=[[base * s, 0.0], [0.0, base * s]])
        m0 = MomentState.zero_covariance(st.q, st.p)
        covs.append(np.linalg.norm(integrate_moments(m0, K05, model, 1.0, 200).final().cqq))
    r1 = covs[0] / covs[1]
    r2 = covs[1] / covs[2]
    assert abs(r1 - 4.0) / 4.0 < 0.05
    assert abs(r2 - 4.0) / 4.0 < 0.05


def test_fig2_regime_matches_monte_carlo():
    # single landmark through a 4x4 two-family grid at r = 0.5
    st = LandmarkState([[0.0, 0.0]], [[1.0, 0.0]])
    model = make_grid_noise(4, [[-0.5, 1.5], [-1.0, 1.0]], r=0.5,
                            amplitudes=[[0.08, 0.0], [0.0, 0.08]])
    m0 = MomentState.zero_covariance(st.q, st.p)
    mom = integrate_moments(m0, K05, model, T=1.0, steps=500).final()
    _, emp = sample_endpoints(st, K05, model, T=1.0, steps=500, n_samples=4000, seed=17)
    rel = np.linalg.norm(mom.cqq - emp.cqq) / np.linalg.norm(emp.cqq)
    assert rel < 0.12, rel


def test_two_landmark_interaction_matches_monte_carlo():
    # interacting pair with momentum exchange; checks all coupled blocks
    K = KernelSpec("gaussian", 0.4)
    st = LandmarkState([[0.0, 0.0], [0.0, 0.45]], [[0.8, 0.2], [-0.1, -0.5]])
    model = make_grid_noise(3, [[-0.4, 1.2], [-0.6, 1.0]], r=0.45,
                            amplitudes=[[0.06, 0.0], [0.0, 0.06]])
    m0 = MomentState.zero_covariance(st.q, st.p)
    mom = integrate_moments(m0, K, model, T=0.6, steps=300).final()
    _, emp = sample_endpoints(st, K, model, T=0.6, steps=300, n_samples=6000, seed=5)
    assert np.linalg.norm(mom.mq - emp.mq) < 0.01
    # the qp cross block carries the largest doublet-truncation error
    for name, tol in (("cqq", 0.15), ("cqp", 0.3), ("cpp", 0.15)):
        a, b = getattr(mom, name), getattr(emp, name)
        rel = np.linalg.norm(a - b) / np.linalg.norm(b)
        assert rel < tol, f"{name}: {rel}"


def test_empirical_moments_hand_example():
    q = np.array([[[0.0, 0.0]], [[2.0, 0.0]]])
    p = np.zeros_like(q)
    m = empirical_moments((q, p))
    assert np.allclose(m.mq, [[1.0, 0.0]])
    assert m.cqq[0, 0] == pytest.approx(2.0)  # divisor n-1
    assert np.allclose(m.cpp, 0.0)


def test_empirical_moments_constant_samples():
    q = np.tile([[0.3, -0.2]], (5, 1, 1))
    m = empirical_moments((q, q))
    assert np.allclose(m.cqq, 0.0)


def test_empirical_moments_needs_two_samples():
    q = np.zeros((1, 1, 2))
    with pytest.raises(InputError):
        empirical_moments((q, q))
