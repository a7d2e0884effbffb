import numpy as np
import pytest

from nae import model as nm
from nae import verify as vf
from nae.numeric import Rng


class TestHelpers:
    def test_moment_matched_normal(self):
        E = vf.moment_matched_normal(Rng(0), 500, 4)
        np.testing.assert_allclose(E.mean(axis=0), 0.0, atol=1e-13)
        np.testing.assert_allclose(E.T @ E / 500, np.eye(4), atol=1e-12)

    def test_zero_residual(self):
        r = Rng(1)
        p = vf.random_model(r, 3, 4)
        x = r.normal(3)
        vf.zero_residual(p, x)
        np.testing.assert_allclose(p.Wdec @ nm.encode_clean(p, x) + p.d, x, atol=1e-14)

    def test_fd_gradient_on_quadratic(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        arrays = {"v": np.array([0.5, -1.0])}
        g = vf.fd_gradient(lambda: 0.5 * arrays["v"] @ A @ arrays["v"], arrays)
        np.testing.assert_allclose(g["v"], A @ arrays["v"], rtol=1e-9)

    def test_fd_mismatch(self):
        n = {"a": np.array([1.0, 100.0])}
        assert vf.fd_mismatch({"a": np.array([1.0, 100.0])}, n) == 0.0
        np.testing.assert_allclose(vf.fd_mismatch({"a": np.array([1.0, 100.002])}, n), 2.0, rtol=1e-6)
        # near zero the absolute floor of 1e-6 governs
        small = {"a": np.array([0.01])}
        np.testing.assert_allclose(vf.fd_mismatch({"a": np.array([0.01 + 5e-7])}, small), 0.5, rtol=1e-6)

    def test_fd_jacobian_sigmoid(self):
        r = Rng(2)
        p = vf.random_model(r, 4, 3)
        x = r.normal(4)
        h = nm.encode_clean(p, x)
        J = (h * (1 - h))[:, None] * p.W
        np.testing.assert_allclose(vf.fd_jacobian_frobenius2(p, x), np.sum(J**2), rtol=1e-8)

    def test_dropout_enumeration_single_unit(self):
        # one hidden unit: E over {0, h} minus the mean-h reconstruction is p(1-p) h^2 |w'|^2
        r = Rng(3)
        p = vf.random_model(r, 3, 1)
        x = r.normal(3)
        h = nm.encode_clean(p, x)[0]
        got = vf.enumerate_dropout_excess(p, x, 0.3)
        np.testing.assert_allclose(got, 0.3 * 0.7 * h**2 * np.sum(p.Wdec[:, 0] ** 2), rtol=1e-12)

    def test_mc_excess_vanishes_without_noise(self):
        r = Rng(4)
        p = vf.random_model(r, 3, 4)
        x = r.normal(3)
        E = r.normal((10, 4))
        assert abs(vf.mc_prenoise_excess(p, x, 0.0, E)) < 1e-14
        assert abs(vf.mc_input_excess(p, x, 0.0, r.normal((10, 3)))) < 1e-14


class TestChecks:
    def test_line_format(self):
        assert vf.Check("x", True, 1e-3).line() == "[PASS] x: max error 1.000e-03"
        assert vf.Check("y", False, 2.0, "why").line().startswith("[FAIL] y")

    def test_exact_marginalization(self):
        c = vf.check_exact_marginalization()
        assert c.passed and c.max_error <= 1e-12

    def test_correspondences(self):
        checks = vf.check_correspondences()
        assert checks and all(c.passed for c in checks)

    def test_small_draws_taylor_covariance(self):
        assert vf.check_input_covariance(draws=10**5).passed

    def test_noise_suite(self):
        lines = []
        checks = vf.run_suite("noise", out=lines.append)
        assert all(c.passed for c in checks)
        assert lines[-1].startswith("noise: 2/2 checks passed")

    def test_unknown_suite(self):
        with pytest.raises(KeyError):
            vf.run_suite("bogus")
