import math

import numpy as np
import pytest
from scipy import stats
from scipy import special as sp

from implicit_reparam import distributions as dist
from implicit_reparam import special as S
from implicit_reparam.errors import (
    DegenerateWindowError,
    DomainError,
    GradientOverflowError,
)

N = 100_000


def _mean_within(x, target, k=3.0):
    x = np.asarray(x, dtype=np.float64)
    se = x.std(ddof=1) / math.sqrt(x.size)
    return abs(x.mean() - target) <= k * se, x.mean(), se


# ---------------------------------------------------------------------------
# parameter records


def test_gamma_params_clipping_is_opt_in():
    assert dist.GammaParams.clipped(1e-6, 5e3).as_tuple() == (1e-3, 1e3)
    assert dist.GammaParams(1e-6, 5e3).as_tuple() == (1e-6, 5e3)
    with pytest.raises(DomainError):
        dist.GammaParams(0.0)


def test_von_mises_params_wrap_and_xy():
    p = dist.VonMisesParams(3 * math.pi, 1.0)
    assert -math.pi <= p.loc < math.pi and p.loc == pytest.approx(-math.pi)
    q = dist.VonMisesParams.from_xy(1.0, 1.0, 2.0)
    assert q.loc == pytest.approx(math.pi / 4)
    with pytest.raises(DomainError):
        dist.VonMisesParams(0.0, 0.0)


def test_window_and_mixture_validation():
    with pytest.raises(DomainError):
        dist.TruncationWindow(1.0, 1.0)
    with pytest.raises(DomainError):
        dist.MixtureParams(np.array([0.5, 0.6]), np.array([[[0.0, 1.0]], [[1.0, 1.0]]]))
    with pytest.raises(DomainError):
        dist.MixtureParams(np.array([1.0]), np.array([[[0.0, -1.0]]]))


# ---------------------------------------------------------------------------
# Gamma


def test_gamma_rate_column_is_minus_z_at_unit_rate():
    gs = dist.sample_gamma(dist.GammaParams(1.0, 1.0), np.random.default_rng(0), 1000)
    np.testing.assert_array_equal(gs.column("rate"), -gs.z)


@pytest.mark.parametrize("sampler", ["marsaglia-tsang", "numpy"])
@pytest.mark.parametrize("alpha", [0.3, 1.0, 10.0])
def test_gamma_shape_gradient_mean_is_one(sampler, alpha):
    gs = dist.sample_gamma(dist.GammaParams(alpha), np.random.default_rng(1), N, sampler=sampler)
    ok, m, se = _mean_within(gs.column("shape"), 1.0)
    assert ok, (m, se)


@pytest.mark.parametrize("alpha", [1e-3, 0.3, 1.0, 10.0, 1e3])
def test_gamma_shape_gradient_positive_and_finite(alpha):
    gs = dist.sample_gamma(dist.GammaParams.clipped(alpha, 2.0), np.random.default_rng(2), 5000)
    d = gs.column("shape")
    assert np.all(np.isfinite(gs.jac))
    assert np.all(d[gs.z > 0] > 0)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 10.0])
def test_gamma_samplers_agree_in_distribution(alpha):
    a = dist.sample_gamma(dist.GammaParams(alpha), np.random.default_rng(3), 20000).z[:, 0]
    b = dist.sample_gamma(
        dist.GammaParams(alpha), np.random.default_rng(4), 20000, sampler="numpy"
    ).z[:, 0]
    assert stats.ks_2samp(a, b).pvalue > 1e-3
    assert stats.kstest(a, stats.gamma(alpha).cdf).pvalue > 1e-3


def test_gamma_cdf_level_check():
    a, b = 2.5, 1.7
    gs = dist.sample_gamma(dist.GammaParams(a, b), np.random.default_rng(5), 2000)
    z = gs.z[:, 0]
    pdf = stats.gamma(a, scale=1 / b).pdf(z)
    for j, (name, h) in enumerate((("shape", a * 1e-5), ("rate", b * 1e-5))):
        up = sp.gammainc(a + h, z * b) if j == 0 else sp.gammainc(a, z * (b + h))
        dn = sp.gammainc(a - h, z * b) if j == 0 else sp.gammainc(a, z * (b - h))
        dF = (up - dn) / (2 * h)
        err = np.abs(-pdf * gs.column(name)[:, 0] - dF)
        assert err.mean() <= 3.2e-8, name


def test_gamma_rate_pathwise_with_common_random_numbers():
    a, b, d = 2.0, 3.0, 1e-6
    hi = dist.sample_gamma(dist.GammaParams(a, b * (1 + d)), np.random.default_rng(6), 500).z
    lo = dist.sample_gamma(dist.GammaParams(a, b * (1 - d)), np.random.default_rng(6), 500).z
    gs = dist.sample_gamma(dist.GammaParams(a, b), np.random.default_rng(6), 500)
    fd = (hi - lo) / (2 * b * d)
    np.testing.assert_allclose(gs.column("rate"), fd, rtol=1e-3)


def test_gamma_finite_difference_method_close_to_autodiff():
    p = dist.GammaParams(3.0, 1.0)
    ad = dist.sample_gamma(p, np.random.default_rng(7), 1000)
    fd = dist.sample_gamma(p, np.random.default_rng(7), 1000, grad_method="finite-diff")
    np.testing.assert_array_equal(ad.z, fd.z)
    np.testing.assert_allclose(fd.jac, ad.jac, rtol=1e-4, atol=1e-8)


def test_gamma_finite_difference_at_underflowed_draw_raises():
    with pytest.raises(GradientOverflowError):
        dist.sample_gamma(dist.GammaParams(1e-3), np.random.default_rng(0), 1000, grad_method="finite-diff")


def test_sampling_is_deterministic():
    a = dist.sample_gamma(dist.GammaParams(0.7, 2.0), np.random.default_rng(9), 100)
    b = dist.sample_gamma(dist.GammaParams(0.7, 2.0), np.random.default_rng(9), 100)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.jac, b.jac)


# ---------------------------------------------------------------------------
# Beta and Dirichlet


def test_beta_symmetric_when_shapes_equal():
    z = dist.sample_beta(2.0, 2.0, np.random.default_rng(10), 20000).z[:, 0]
    assert stats.kstest(z, lambda x: 1 - stats.beta(2, 2).cdf(1 - x)).pvalue > 1e-3
    assert stats.kstest(z, stats.beta(2, 2).cdf).pvalue > 1e-3
    assert np.all((z > 0) & (z < 1))


@pytest.mark.parametrize("a, b", [(0.5, 1.5), (2.0, 3.0)])
def test_beta_gradient_means(a, b):
    gs = dist.sample_beta(a, b, np.random.default_rng(11), N)
    ok, m, se = _mean_within(gs.column("a")[:, 0], b / (a + b) ** 2)
    assert ok, (m, se)
    ok, m, se = _mean_within(gs.column("b")[:, 0], -a / (a + b) ** 2)
    assert ok, (m, se)


def test_dirichlet_constraints():
    alphas = np.array([0.5, 1.0, 3.0, 7.0])
    gs = dist.sample_dirichlet(alphas, np.random.default_rng(12), 5000)
    np.testing.assert_allclose(gs.z.sum(axis=1), 1.0, atol=1e-12)
    assert np.max(np.abs(gs.jac.sum(axis=1))) <= 1e-10


def test_dirichlet_gradient_means():
    alphas = np.array([0.5, 1.0, 3.0])
    gs = dist.sample_dirichlet(alphas, np.random.default_rng(13), N)
    tot = alphas.sum()
    for i in range(3):
        ok, m, se = _mean_within(gs.jac[:, i, i], (tot - alphas[i]) / tot**2)
        assert ok, (i, m, se)
        j = (i + 1) % 3
        ok, m, se = _mean_within(gs.jac[:, i, j], -alphas[i] / tot**2)
        assert ok, (i, j, m, se)


def test_two_dimensional_dirichlet_is_beta_pathwise():
    d = dist.sample_dirichlet([2.0, 3.0], np.random.default_rng(14), 1000)
    b = dist.sample_beta(2.0, 3.0, np.random.default_rng(14), 1000)
    np.testing.assert_allclose(d.z[:, 0], b.z[:, 0], rtol=1e-14)
    np.testing.assert_allclose(d.jac[:, 0, 0], b.jac[:, 0, 0], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(d.jac[:, 0, 1], b.jac[:, 0, 1], rtol=1e-12, atol=1e-15)


def test_dirichlet_column_subset():
    gs = dist.sample_dirichlet([1.0, 2.0, 3.0], np.random.default_rng(15), 10, wrt=[2])
    assert gs.jac.shape == (10, 3, 1) and gs.params == ("alpha[2]",)


# ---------------------------------------------------------------------------
# Student-t


def test_student_t_draws_follow_t():
    z = dist.sample_student_t(5.0, np.random.default_rng(16), 20000).z[:, 0]
    assert stats.kstest(z, stats.t(5.0).cdf).pvalue > 1e-3


def test_student_t_gradient_mean_is_zero():
    gs = dist.sample_student_t(5.0, np.random.default_rng(17), N)
    ok, m, se = _mean_within(gs.jac[:, 0, 0], 0.0)
    assert ok, (m, se)


def test_student_t_second_moment_derivative():
    nu = 5.0
    # E[z^2] = nu / (nu - 2) from the Gamma scale-mixture form, differenced in nu
    h = 1e-4
    target = ((nu + h) / (nu + h - 2) - (nu - h) / (nu - h - 2)) / (2 * h)
    gs = dist.sample_student_t(nu, np.random.default_rng(18), N)
    g = 2 * gs.z[:, 0] * gs.jac[:, 0, 0]
    ok, m, se = _mean_within(g, target)
    assert ok, (m, se, target)


def test_normal_scale_factor():
    z = np.array([0.3, -1.2, 2.0])
    explicit, implicit = dist.normal_jacobians(z, 0.0, 2.0)
    np.testing.assert_allclose(implicit[:, 1], z / 2.0, rtol=1e-14)


# ---------------------------------------------------------------------------
# von Mises


def test_von_mises_location_column_is_one_and_draws_wrapped():
    gs = dist.sample_von_mises(dist.VonMisesParams(3.0, 2.0), np.random.default_rng(19), 5000)
    np.testing.assert_array_equal(gs.column("loc"), 1.0)
    assert np.all((gs.z >= -math.pi) & (gs.z < math.pi))


def test_von_mises_draws_follow_distribution():
    z = dist.sample_von_mises(dist.VonMisesParams(0.5, 2.0), np.random.default_rng(20), 20000).z[:, 0]
    assert stats.kstest(z, stats.vonmises(2.0, loc=0.5).cdf).pvalue > 1e-3


@pytest.mark.parametrize("kappa", [0.5, 2.0])
def test_von_mises_cosine_identity(kappa):
    gs = dist.sample_von_mises(dist.VonMisesParams(0.0, kappa), np.random.default_rng(21), N)
    g = -np.sin(gs.z[:, 0]) * gs.column("concentration")[:, 0]
    ok, m, se = _mean_within(g, float(S.bessel_i_ratio_dkappa(kappa)))
    assert ok, (m, se)


def test_von_mises_large_concentration_slope():
    kappa = 1e4
    gs = dist.sample_von_mises(dist.VonMisesParams(0.0, kappa), np.random.default_rng(22), 2000)
    z = gs.z[:, 0]
    np.testing.assert_allclose(gs.column("concentration")[:, 0], -z / (2 * kappa), rtol=2e-3, atol=1e-12)


def test_von_mises_cdf_level_check():
    kappa = 3.0
    gs = dist.sample_von_mises(dist.VonMisesParams(0.0, kappa), np.random.default_rng(23), 2000)
    z = gs.z[:, 0]
    h = kappa * 1e-4
    dF = (stats.vonmises(kappa + h).cdf(z) - stats.vonmises(kappa - h).cdf(z)) / (2 * h)
    pdf = stats.vonmises(kappa).pdf(z)
    err = np.abs(-pdf * gs.column("concentration")[:, 0] - dF)
    assert err.mean() <= 1.1e-8


# ---------------------------------------------------------------------------
# truncated


def test_truncated_gamma_full_support_matches_untruncated_formula():
    a, b = 2.5, 1.5
    gs = dist.sample_truncated(
        "gamma", (a, b), dist.TruncationWindow(0.0, math.inf), np.random.default_rng(24), 2000
    )
    z = gs.z[:, 0]
    ref_shape = z * S.gamma_dlogz_dalpha(z * b, np.full_like(z, a))
    np.testing.assert_allclose(gs.column("shape")[:, 0], ref_shape, rtol=1e-8)
    np.testing.assert_allclose(gs.column("rate")[:, 0], -z / b, rtol=1e-8)


@pytest.mark.parametrize("family, params, window", [
    ("normal", (0.3, 1.2), (-1.0, 2.0)),
    ("normal", (0.0, 1.0), (1.5, 4.0)),
    ("gamma", (2.0, 1.5), (0.5, 3.0)),
])
def test_truncated_pathwise_with_common_random_numbers(family, params, window):
    win = dist.TruncationWindow(*window)
    gs = dist.sample_truncated(family, params, win, np.random.default_rng(25), 300)
    for j in range(2):
        h = 1e-6 * max(1.0, abs(params[j]))
        up, dn = list(params), list(params)
        up[j] += h
        dn[j] -= h
        zu = dist.sample_truncated(family, up, win, np.random.default_rng(25), 300).z
        zd = dist.sample_truncated(family, dn, win, np.random.default_rng(25), 300).z
        np.testing.assert_allclose(gs.jac[:, :, j], (zu - zd) / (2 * h), rtol=1e-3, atol=1e-7)


def test_truncated_normal_gradient_mean_matches_closed_form():
    mu, sigma, a, b = 0.3, 1.2, -1.0, 2.0

    def mean(m, s):
        return stats.truncnorm((a - m) / s, (b - m) / s, loc=m, scale=s).mean()

    h = 1e-5
    t_mu = (mean(mu + h, sigma) - mean(mu - h, sigma)) / (2 * h)
    t_sigma = (mean(mu, sigma + h) - mean(mu, sigma - h)) / (2 * h)
    gs = dist.sample_truncated("normal", (mu, sigma), dist.TruncationWindow(a, b), np.random.default_rng(26), N)
    for col, t in (("loc", t_mu), ("scale", t_sigma)):
        ok, m, se = _mean_within(gs.column(col)[:, 0], t)
        assert ok, (col, m, se, t)


def test_truncated_draws_in_window_and_distributed():
    win = dist.TruncationWindow(-0.5, 1.0)
    z = dist.sample_truncated("normal", (0.0, 1.0), win, np.random.default_rng(27), 20000).z[:, 0]
    assert np.all((z >= -0.5) & (z <= 1.0))
    assert stats.kstest(z, stats.truncnorm(-0.5, 1.0).cdf).pvalue > 1e-3


def test_truncated_degenerate_windows():
    with pytest.raises(DegenerateWindowError):
        dist.sample_truncated(
            "normal", (0.0, 1.0), dist.TruncationWindow(1.0 - 1e-15, 1.0), np.random.default_rng(0), 5
        )
    with pytest.raises(DegenerateWindowError):
        dist.sample_truncated("normal", (0.0, 1.0), dist.TruncationWindow(40.0, 41.0), np.random.default_rng(0), 5)
    with pytest.raises(DegenerateWindowError):
        dist.sample_truncated("gamma", (1.0, 1.0), dist.TruncationWindow(-2.0, -1.0), np.random.default_rng(0), 5)


# ---------------------------------------------------------------------------
# mixtures


def _two_normals():
    return dist.MixtureParams(np.array([0.3, 0.7]), np.array([[[-1.0, 0.5]], [[1.5, 1.0]]]))


def test_single_component_mixture_is_base_family():
    mp = dist.MixtureParams(np.array([1.0]), np.array([[[0.4, 2.0], [-1.0, 0.5]]]))
    gs = dist.sample_mixture(mp, np.random.default_rng(28), 500)
    eps = (gs.z - mp.components[0, :, 0]) / mp.components[0, :, 1]
    np.testing.assert_allclose(gs.column("loc[0,0]")[:, 0], 1.0, rtol=1e-12)
    np.testing.assert_allclose(gs.column("scale[0,0]")[:, 0], eps[:, 0], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(gs.column("scale[0,1]")[:, 1], eps[:, 1], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(gs.column("loc[0,0]")[:, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(gs.column("w0"), 0.0, atol=1e-12)


def test_mixture_gradient_matches_bisection_inverse():
    mp = _two_normals()
    gs = dist.sample_mixture(mp, np.random.default_rng(29), 200)
    z = gs.z[:, 0]
    u = np.asarray(dist.mixture_transform(mp, [z])[0])
    h = 1e-6

    def inverse(mu0):
        comps = mp.components.copy()
        comps[0, 0, 0] = mu0
        p = dist.MixtureParams(mp.weights, comps)
        return dist.bisect_inverse(lambda x: np.asarray(dist.mixture_transform(p, [x])[0]), u, -math.inf, math.inf)

    fd = (inverse(-1.0 + h) - inverse(-1.0 - h)) / (2 * h)
    np.testing.assert_allclose(gs.column("loc[0,0]")[:, 0], fd, rtol=1e-4, atol=1e-7)


def test_mixture_dense_and_triangular_solves_agree():
    mp = dist.MixtureParams(
        np.array([0.2, 0.5, 0.3]),
        np.array([[[-1.0, 0.5], [0.0, 1.0]], [[1.0, 1.0], [2.0, 0.7]], [[0.0, 2.0], [-2.0, 1.5]]]),
    )
    a = dist.sample_mixture(mp, np.random.default_rng(30), 500)
    b = dist.sample_mixture(mp, np.random.default_rng(30), 500, dense=True)
    assert np.max(np.abs(a.jac - b.jac)) <= 1e-12


def test_mixture_gradient_means_match_closed_form():
    mp = _two_normals()
    gs = dist.sample_mixture(mp, np.random.default_rng(31), N)
    w, mu = mp.weights, mp.components[:, 0, 0]
    mean = float(w @ mu)
    targets = {
        "loc[0,0]": w[0],
        "loc[1,0]": w[1],
        "scale[0,0]": 0.0,
        "scale[1,0]": 0.0,
        # weights enter as w / sum(w)
        "w0": mu[0] - mean,
        "w1": mu[1] - mean,
    }
    for name, t in targets.items():
        ok, m, se = _mean_within(gs.column(name)[:, 0], t)
        assert ok, (name, m, se, t)


def test_gamma_mixture_mean_gradient():
    mp = dist.MixtureParams(np.array([0.4, 0.6]), np.array([[[2.0, 1.0]], [[5.0, 2.0]]]), family="gamma")
    gs = dist.sample_mixture(mp, np.random.default_rng(32), 20000)
    # E[z] = sum_k w_k a_k / b_k
    ok, m, se = _mean_within(gs.column("shape[1,0]")[:, 0], 0.6 / 2.0)
    assert ok, (m, se)
    ok, m, se = _mean_within(gs.column("rate[0,0]")[:, 0], -0.4 * 2.0 / 1.0**2)
    assert ok, (m, se)


# ---------------------------------------------------------------------------
# Normal and the generic implicit solve


def test_explicit_normal_examples():
    r = dist.explicit_normal(0.0, 1.0, np.random.default_rng(33), 100)
    np.testing.assert_allclose(r.implicit[:, 0], 1.0, rtol=4 * np.finfo(float).eps)
    np.testing.assert_array_equal(r.explicit[:, 0], 1.0)
    np.testing.assert_allclose(r.implicit[:, 1], r.z, rtol=1e-15, atol=1e-300)
    e, i = dist.normal_jacobians(0.0, 0.0, 1.0)
    np.testing.assert_array_equal(e, [1.0, 0.0])
    np.testing.assert_array_equal(i, [1.0, 0.0])


def test_normal_routes_agree_to_four_ulps():
    rng = np.random.default_rng(34)
    mus = rng.uniform(-10, 10, 1000)
    sigmas = np.exp(rng.uniform(-3, 3, 1000))
    z = mus + sigmas * rng.standard_normal(1000)
    e, i = dist.normal_jacobians(z, mus, sigmas)
    ulp = np.spacing(np.maximum(np.abs(e), np.abs(i)))
    assert np.max(np.abs(e - i) / ulp) <= 4


def _normal_cdf(z, mu, sigma):
    return S.normal_cdf((z - mu) / sigma)


def _gamma_cdf(z, a, b):
    return S.reg_inc_gamma(z * b, a)


@pytest.mark.parametrize("cdf, params, draw", [
    (_normal_cdf, (0.5, 1.3), lambda r: 0.5 + 1.3 * r.standard_normal(200)),
    (_gamma_cdf, (2.5, 1.5), lambda r: r.standard_gamma(2.5, 200) / 1.5),
])
def test_jacobian_invariant_under_monotone_transform(cdf, params, draw):
    z = draw(np.random.default_rng(35))
    plain = dist.implicit_grad(cdf, z, params)
    warped = dist.implicit_grad(cdf, z, params, transform=dist.logit_scale)
    np.testing.assert_allclose(warped, plain, rtol=1e-12, atol=1e-300)


def test_implicit_grad_matches_sampler_for_gamma():
    gs = dist.sample_gamma(dist.GammaParams(2.5, 1.5), np.random.default_rng(36), 200)
    g = dist.implicit_grad(_gamma_cdf, gs.z[:, 0], (2.5, 1.5))
    np.testing.assert_allclose(g, gs.jac[:, 0, :], rtol=1e-10)
