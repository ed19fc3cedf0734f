"""Signal model, Rician likelihood, Bessel helpers and the single-tensor fit."""

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats

from fiberdist.errors import DesignError, GradientNormError, InputError
from fiberdist.geometry import Axis, exp_map, geodesic_distance, tangent_basis
from fiberdist.signal import (GenerativeTensor, GradientScheme, TensorComponent, VoxelModel,
                              VoxelSignal, bessel_ratio, fibonacci_scheme, fractional_anisotropy,
                              generative_signal, log_bessel_i0, log_likelihood,
                              log_likelihood_grad, noiseless_signal, rician_logpdf,
                              rician_mean, rician_sample, single_tensor_regression_fit,
                              to_identifiable)

SCHEME = fibonacci_scheme()


def random_unit(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


class TestScheme:
    def test_fibonacci(self):
        assert SCHEME.m == 41 and SCHEME.b_value == 1000 and SCHEME.n_b0 == 5
        np.testing.assert_allclose(np.linalg.norm(SCHEME.directions, axis=1), 1, atol=1e-14)

    def test_norm_tolerance(self):
        d = np.array([[0.999999, 0, 0], [0, 1, 0], [0, 0, 1]])
        s = GradientScheme(d, 1000)
        np.testing.assert_allclose(np.linalg.norm(s.directions, axis=1), 1, atol=1e-15)
        with pytest.raises(GradientNormError):
            GradientScheme(np.array([[0.99999, 0, 0]]), 1000)

    def test_gradient_error_is_input_error(self):
        with pytest.raises(InputError):
            GradientScheme(np.array([[2.0, 0, 0]]), 1000)

    def test_bad_b(self):
        with pytest.raises(InputError):
            GradientScheme(np.eye(3), 0)


class TestBessel:
    @pytest.mark.parametrize("x", [0.0, 1e-8, 0.3, 1.999, 2.0, 5.0, 50.0, 700.0, 1e4, 1e6])
    def test_log_i0_mpmath(self, x):
        ref = float(mpmath.log(mpmath.besseli(0, x)))
        assert log_bessel_i0(x) == pytest.approx(ref, rel=1e-13, abs=1e-15)

    def test_log_i0_large_x_asymptotic(self):
        # log I0(x) ~ x - log(2 pi x)/2 + log(1 + 1/8x + 9/128x^2 + 225/3072x^3)
        x = np.array([1e3, 1e5, 1e8])
        series = 1 / (8 * x) + 9 / (128 * x**2) + 225 / (3072 * x**3)
        asym = x - 0.5 * np.log(2 * np.pi * x) + np.log1p(series)
        np.testing.assert_allclose(log_bessel_i0(x), asym, rtol=1e-14)

    @pytest.mark.parametrize("x", [1e-6, 0.5, 3.0, 40.0, 1e4])
    def test_ratio_mpmath(self, x):
        ref = float(mpmath.besseli(1, x) / mpmath.besseli(0, x))
        assert bessel_ratio(x) == pytest.approx(ref, rel=1e-13)

    def test_negative_rejected(self):
        with pytest.raises(InputError):
            log_bessel_i0(-1.0)


class TestRician:
    @pytest.mark.parametrize("nu,sigma", [(0.0, 1.0), (1.0, 1.0), (5.0, 2.0), (1860.0, 57.0),
                                          (30.0, 57.0)])
    def test_quadrature_normalization(self, nu, sigma):
        f = lambda x: np.exp(rician_logpdf(x, nu, sigma))  # noqa: E731
        lo, hi = max(0.0, nu - 40 * sigma), nu + 40 * sigma
        total, _ = integrate.quad(f, lo, hi, limit=400, epsabs=1e-12, epsrel=1e-12,
                                  points=[nu] if nu > lo else None)
        assert abs(total - 1) < 1e-6

    def test_matches_scipy_rice(self):
        x = np.linspace(0.01, 20, 50)
        for nu, sigma in [(0.5, 1.0), (3.0, 1.5), (10.0, 2.0)]:
            ref = stats.rice.logpdf(x, nu / sigma, scale=sigma)
            np.testing.assert_allclose(rician_logpdf(x, nu, sigma), ref, rtol=1e-9, atol=1e-9)

    def test_support(self):
        assert rician_logpdf(-1.0, 1.0, 1.0) == -np.inf
        assert rician_logpdf(0.0, 1.0, 1.0) == -np.inf

    def test_no_overflow_at_high_snr(self):
        v = rician_logpdf(np.array([1860.0, 1e6]), np.array([1850.0, 1e6]), 1.0)
        assert np.all(np.isfinite(v))

    def test_sampler_ks(self):
        rng = np.random.default_rng(20)
        for nu, sigma in [(0.0, 1.0), (2.0, 1.0), (1860.0, 57.0)]:
            x = rician_sample(nu, sigma, rng, 100_000)
            res = stats.ks_1samp(x, stats.rice(nu / sigma, scale=sigma).cdf)
            assert res.statistic < 0.01

    def test_mean(self):
        for nu, sigma in [(0.0, 1.0), (2.0, 1.0), (100.0, 3.0)]:
            ref = stats.rice.mean(nu / sigma, scale=sigma)
            assert rician_mean(nu, sigma) == pytest.approx(ref, rel=1e-10)

    def test_sampler_seeded(self):
        a = rician_sample(np.ones(5), 1.0, np.random.default_rng(1))
        b = rician_sample(np.ones(5), 1.0, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)


def random_model(rng, J):
    comps = []
    taus = rng.dirichlet(np.ones(J)) * rng.uniform(0.2, 0.5)
    for j in range(J):
        comps.append(TensorComponent(float(taus[j]), float(rng.uniform(0.5e-3, 2e-3)),
                                     Axis(random_unit(rng))))
    return VoxelModel(tuple(comps))


def _perturbed(model, j, k, eps):
    tau, alpha, axes = model.arrays()
    tau, alpha, axes = tau.copy(), alpha.copy(), axes.copy()
    if k == 0:
        tau[j] += eps
    elif k == 1:
        alpha[j] += eps
    else:
        t = tangent_basis(axes[j])[k - 2]
        axes[j] = exp_map(axes[j], eps * t)
    # keep the component order fixed
    comps = [TensorComponent(float(t), float(a), Axis(m)) for t, a, m in zip(tau, alpha, axes)]
    return comps


def _ll_from_components(comps, voxel):
    tau = np.array([c.tau for c in comps])
    alpha = np.array([c.alpha for c in comps])
    axes = np.array([c.axis.v for c in comps])
    nu = voxel.s0 * np.exp(-SCHEME.b_value * alpha * (SCHEME.directions @ axes.T) ** 2) @ tau
    return float(np.sum(rician_logpdf(voxel.intensities, nu, voxel.sigma)))


class TestLikelihood:
    def test_finite_difference_gradient(self):
        rng = np.random.default_rng(21)
        steps = (1e-6, 1e-9, 1e-6, 1e-6)
        for trial in range(100):
            J = int(rng.integers(1, 4))
            model = random_model(rng, J)
            nu = noiseless_signal(model, 1860.0, SCHEME)
            x = rician_sample(nu, 57.0, rng)
            voxel = VoxelSignal(x, 1860.0, 57.0)
            g = log_likelihood_grad(model, voxel, SCHEME)
            for j in range(J):
                for k in range(4):
                    # central differences on the component as ordered in the model
                    h = steps[k]
                    hi = _ll_from_components(_perturbed(model, j, k, h), voxel)
                    lo = _ll_from_components(_perturbed(model, j, k, -h), voxel)
                    fd = (hi - lo) / (2 * h)
                    scale = max(abs(fd), abs(g[j, k]), 1e-3 * np.abs(g).max(), 1e-8)
                    assert abs(fd - g[j, k]) / scale < 1e-5, (trial, j, k, fd, g[j, k])

    def test_loglik_matches_direct_sum(self):
        rng = np.random.default_rng(22)
        model = random_model(rng, 2)
        x = rician_sample(noiseless_signal(model, 1860.0, SCHEME), 57.0, rng)
        voxel = VoxelSignal(x, 1860.0, 57.0)
        ref = np.sum(stats.rice.logpdf(x, noiseless_signal(model, 1860.0, SCHEME) / 57.0,
                                       scale=57.0))
        assert log_likelihood(model, voxel, SCHEME) == pytest.approx(ref, rel=1e-10)

    def test_isotropic_model_signal(self):
        m = VoxelModel((), isotropic_tau=0.4)
        np.testing.assert_allclose(noiseless_signal(m, 100.0, SCHEME), 40.0)
        assert noiseless_signal(m, 100.0, SCHEME, u_index=3) == 40.0
        with pytest.raises(InputError):
            log_likelihood_grad(m, VoxelSignal(np.ones(41), 1.0, 1.0), SCHEME)


class TestModelMapping:
    def test_generative_identifiable_identity(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            J = int(rng.integers(1, 5))
            w = rng.dirichlet(np.ones(J))
            tensors = []
            for j in range(J):
                l2 = rng.uniform(0.1e-3, 0.6e-3)
                tensors.append(GenerativeTensor(l2 + rng.uniform(0, 2e-3), l2,
                                                Axis(random_unit(rng)), float(w[j])))
            w_sum = sum(t.weight for t in tensors)
            tensors = [GenerativeTensor(t.l1, t.l2, t.axis, t.weight / w_sum) for t in tensors]
            a = generative_signal(tensors, 1860.0, SCHEME)
            b = noiseless_signal(to_identifiable(tensors, SCHEME.b_value), 1860.0, SCHEME)
            np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_weights_must_sum_to_one(self):
        t = GenerativeTensor(1.7e-3, 0.3e-3, Axis((1, 0, 0)), 0.5)
        with pytest.raises(InputError):
            generative_signal([t], 1.0, SCHEME)

    def test_component_validation(self):
        with pytest.raises(InputError):
            TensorComponent(1.2, 1e-3, Axis((1, 0, 0)))
        with pytest.raises(InputError):
            TensorComponent(0.3, -1e-3, Axis((1, 0, 0)))
        with pytest.raises(InputError):
            VoxelModel(tuple(TensorComponent(0.1, 1e-3, Axis((1, 0, 0))) for _ in range(5)))

    def test_components_sorted_by_tau(self):
        m = VoxelModel((TensorComponent(0.1, 1e-3, Axis((1, 0, 0))),
                        TensorComponent(0.3, 1e-3, Axis((0, 1, 0)))))
        assert [c.tau for c in m.components] == [0.3, 0.1]


class TestTensorFit:
    def test_fa_examples(self):
        assert fractional_anisotropy((1.0, 1.0, 1.0)) == 0.0
        assert fractional_anisotropy((1.0, 0.0, 0.0)) == pytest.approx(1.0)
        l1, l2 = 1.7e-3, 0.3e-3
        ref = np.sqrt(0.5) * np.sqrt(2 * (l1 - l2) ** 2) / np.sqrt(l1**2 + 2 * l2**2)
        assert fractional_anisotropy((l1, l2, l2)) == pytest.approx(ref)
        with pytest.raises(InputError):
            fractional_anisotropy((0, 0, 0))

    def test_noiseless_recovery(self):
        t = GenerativeTensor(1.7e-3, 0.3e-3, Axis((1, 2, 3)))
        x = generative_signal([t], 1860.0, SCHEME)
        fit = single_tensor_regression_fit(VoxelSignal(x, 1860.0, 57.0), SCHEME)
        np.testing.assert_allclose(fit.tensor, t.tensor(), atol=1e-12)
        np.testing.assert_allclose(fit.eigenvalues, [1.7e-3, 0.3e-3, 0.3e-3], atol=1e-12)
        assert geodesic_distance(fit.axis.v, t.axis.v) < 1e-12
        assert fit.fa == pytest.approx(fractional_anisotropy(t.eigenvalues))

    def test_isotropic_fa_small(self):
        t = GenerativeTensor(0.7e-3, 0.7e-3, Axis((0, 0, 1)))
        x = generative_signal([t], 1860.0, SCHEME)
        fit = single_tensor_regression_fit(VoxelSignal(x, 1860.0, 57.0), SCHEME)
        assert fit.fa < 1e-8

    def test_rank_deficient_design(self):
        dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1, 1, 0]]) / np.array(
            [[1], [1], [1], [np.sqrt(2)]])
        s = GradientScheme(dirs, 1000)
        with pytest.raises(DesignError):
            single_tensor_regression_fit(VoxelSignal(np.ones(4), 1.0, 0.1), s)
