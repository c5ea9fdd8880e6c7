"""
驗證服務單元測試
"""

import unittest
from functools import lru_cache

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.application.galerkin import GalerkinParameters, GalerkinSystem
from src.application.propulsion import build_propulsion
from src.application.verify import (
    TimePolynomial,
    VerificationReport,
    lagrange_identity_check,
    lattice_gradient,
    momentum_residual,
    recover_pressure,
    relative_weak_residual,
    slip_reduction_check,
    snapshot_terms,
    trilinear_identity_residual,
    weak_form_terms,
    weak_form_vectors,
    weak_residual,
    weak_residual_vector,
)
from tests.fixtures import (
    coarse_basis,
    coarse_disc,
    coarse_system,
    random_coefficients,
    two_layer_density,
    unit_sphere_geometry,
)

batch = arrays(np.float64, (6, 3), elements=st.floats(-3.0, 3.0, allow_nan=False))


@lru_cache(maxsize=None)
def _short_run():
    system = coarse_system("swirl", amplitude=0.5)
    initial = system.make_state(random_coefficients(21), two_layer_density())
    return system, system.time_integrate(initial, 0.04, 0.01)


@lru_cache(maxsize=None)
def _ramp_run(dt):
    disc = coarse_disc()
    flux = build_propulsion(disc, "swirl", 0.5, "ramp", ramp_time=1.0)
    system = GalerkinSystem(
        coarse_basis(), disc, unit_sphere_geometry(), flux, GalerkinParameters(picard_tol=1e-12)
    )
    initial = system.make_state(np.zeros(system.basis.N), two_layer_density())
    return system, system.time_integrate(initial, 0.08, dt)


def _weak_tolerance(dt):
    return 10.0 * (1e-8 + dt**2)


class TestTimePolynomial(unittest.TestCase):
    """時間測試函數單元測試"""

    def test_value_and_derivative(self):
        """測試 ψ(t) = 1 + 2t − t³ 的值與導數"""
        psi = TimePolynomial((1.0, 2.0, 0.0, -1.0))
        self.assertAlmostEqual(psi(2.0), 1.0 + 4.0 - 8.0)
        self.assertAlmostEqual(psi.derivative(2.0), 2.0 - 12.0)
        self.assertEqual(TimePolynomial()(5.0), 1.0)

    def test_degree_limit(self):
        """測試超過三次被拒絕"""
        with self.assertRaises(ValueError):
            TimePolynomial((1.0, 0.0, 0.0, 0.0, 1.0))


class TestWeakResidual(unittest.TestCase):
    """弱形式殘差單元測試"""

    def setUp(self):
        """共用一段短模擬"""
        self.system, self.result = _short_run()

    def test_midpoint_residual_is_small(self):
        """測試以步內中點重組的離散方程，常數與三次 ψ 的殘差在捨入階"""
        for psi in (TimePolynomial(), TimePolynomial((1.0, -2.0, 0.5, 3.0))):
            residual = weak_residual_vector(self.system, self.result, psi, rule="midpoint")
            self.assertEqual(residual.shape, (self.system.basis.N,))
            self.assertLess(np.abs(residual).max(), _weak_tolerance(self.result.dt))

    def test_terms_sum_to_residual(self):
        """測試五項之和等於帶號殘差"""
        xi = np.eye(self.system.basis.N)[7]
        terms = weak_form_terms(self.system, self.result, xi, t=0.02)
        self.assertEqual(len(terms), 5)
        self.assertAlmostEqual(
            abs(sum(terms.values())),
            weak_residual(self.system, self.result, xi, t=0.02),
            places=12,
        )

    def test_snapshot_terms_are_reusable(self):
        """測試預先求值的快照項與逐次求值結果相同，未知規則報錯"""
        snapshots = snapshot_terms(self.system, self.result)
        psi = TimePolynomial((1.0, -2.0, 0.5, 3.0))
        np.testing.assert_array_equal(
            weak_residual_vector(self.system, self.result, psi, snapshots=snapshots),
            weak_residual_vector(self.system, self.result, psi),
        )
        np.testing.assert_array_equal(
            weak_residual_vector(self.system, self.result, rule="conservative", snapshots=snapshots),
            weak_residual_vector(self.system, self.result, rule="conservative"),
        )
        with self.assertRaises(ValueError):
            weak_residual_vector(self.system, self.result, rule="gauss")

    def test_trilinear_and_momentum(self):
        """測試三線性恆等式殘差與動量殘差的形狀與索引檢查"""
        defect = trilinear_identity_residual(self.system, self.result, 1)
        self.assertGreaterEqual(defect, 0.0)
        self.assertTrue(np.isfinite(defect))
        self.assertEqual(defect, self.result.diagnostics[0].trilinear_defect)
        with self.assertRaises(IndexError):
            trilinear_identity_residual(self.system, self.result, 0)

        g = momentum_residual(self.system, self.result, 2)
        self.assertEqual(g.shape, (self.system.disc.n_nodes, 3))
        self.assertTrue(np.all(np.isfinite(g)))


class TestTrapezoidConvergence(unittest.TestCase):
    """快照梯形求積的弱形式殘差，與時間推進規則無關"""

    def _relative(self, dt, psi):
        system, result = _ramp_run(dt)
        return relative_weak_residual(weak_form_vectors(system, result, psi))

    def test_residual_within_dt_squared(self):
        """測試常數與三次 ψ 的相對殘差不超過 10(1e-8 + dt²)"""
        for dt in (0.02, 0.01):
            for psi in (TimePolynomial(), TimePolynomial((1.0, -2.0, 0.5, 3.0))):
                with self.subTest(dt=dt, psi=psi.coefficients):
                    self.assertLessEqual(self._relative(dt, psi), _weak_tolerance(dt))

    def test_residual_decreases_with_dt(self):
        """測試步長減半時殘差下降"""
        for psi in (TimePolynomial(), TimePolynomial((1.0, -2.0, 0.5, 3.0))):
            with self.subTest(psi=psi.coefficients):
                coarse = self._relative(0.02, psi)
                fine = self._relative(0.01, psi)
                self.assertLess(fine, coarse)

    def test_conservative_gap_is_separate(self):
        """測試守恆形式殘差有限，且不計入梯形殘差"""
        system, result = _ramp_run(0.01)
        gap = weak_residual_vector(system, result, rule="conservative")
        trapezoid = weak_residual_vector(system, result)
        self.assertEqual(gap.shape, trapezoid.shape)
        self.assertTrue(np.all(np.isfinite(gap)))
        self.assertFalse(np.array_equal(gap, trapezoid))


class TestBoundaryAlgebra(unittest.TestCase):
    """邊界代數恆等式單元測試"""

    @given(batch, batch, batch, batch)
    @settings(max_examples=50, deadline=None)
    def test_lagrange_identity(self, a, b, c, d):
        """測試 (A×B)·(C×D) = (A·C)(B·D) − (A·D)(B·C)"""
        self.assertLess(lagrange_identity_check(a, b, c, d), 1e-10)

    def test_slip_reduction_tangential(self):
        """測試切向的 g 與 f 下兩種滑移形式逐點一致"""
        disc = coarse_disc()
        n = disc.surface_normals
        rng = np.random.default_rng(0)

        def tangential(raw):
            return raw - np.einsum("sc,sc->s", raw, n)[:, None] * n

        u = tangential(rng.normal(size=n.shape))
        phi = tangential(rng.normal(size=n.shape))
        zero = np.zeros_like(n)
        check = slip_reduction_check(u, zero, zero, phi, zero, n)
        self.assertTrue(check.within_bound)
        self.assertEqual(check.violating_nodes, [])
        self.assertLess(check.max_residual, 1e-10)

    def test_slip_reduction_normal_parts(self):
        """測試有法向分量時回報節點，差值等於法向分量乘積"""
        disc = coarse_disc()
        n = disc.surface_normals
        zero = np.zeros_like(n)
        with self.assertLogs("src.application.verify", level="WARNING"):
            check = slip_reduction_check(n, zero, zero, 2.0 * n, zero, n)
        self.assertEqual(len(check.violating_nodes), len(n))
        np.testing.assert_allclose(check.residual, 2.0, atol=1e-12)
        self.assertTrue(check.within_bound)


class TestPressureRecovery(unittest.TestCase):
    """壓力回復單元測試"""

    def setUp(self):
        """設置粗網格"""
        self.disc = coarse_disc()
        self.x = self.disc.volume_points

    def test_recovers_known_gradient(self):
        """測試 g = ∇(x²) 回復 p = x² − 平均值"""
        g = np.zeros_like(self.x)
        g[:, 0] = 2.0 * self.x[:, 0]
        pressure = recover_pressure(self.disc, g)

        exact = self.x[:, 0] ** 2
        w = self.disc.volume_weights
        exact = exact - (w @ exact) / w.sum()
        self.assertLess(pressure.defect, 1e-8)
        np.testing.assert_allclose(pressure.values, exact, atol=1e-8)
        self.assertAlmostEqual(float(w @ pressure.values), 0.0, places=8)

    def test_rotational_field_is_flagged(self):
        """測試非梯度場的旋度缺陷大並發出警告"""
        g = np.stack([-self.x[:, 1], self.x[:, 0], np.zeros(len(self.x))], axis=1)
        with self.assertLogs("src.application.verify", level="WARNING"):
            pressure = recover_pressure(self.disc, g)
        self.assertGreater(pressure.defect, 0.25)

    def test_lattice_gradient_of_linear_function(self):
        """測試線性函數的格點梯度精確"""
        f = 3.0 * self.x[:, 0] - self.x[:, 1] + 2.0 * self.x[:, 2]
        grad = lattice_gradient(self.disc, f)
        np.testing.assert_allclose(grad, np.broadcast_to([3.0, -1.0, 2.0], grad.shape), atol=1e-8)


class TestVerificationReport(unittest.TestCase):
    """驗證報告單元測試"""

    def test_pass_fail_and_report(self):
        """測試判定、只記錄項目與序列化"""
        report = VerificationReport()
        report.add("weak_residual", 1e-9, 1e-6)
        report.add("mass_drift", 1e-2, 1e-4, note="coarse")
        report.add("nan_value", float("nan"), 1.0)
        report.report("pressure_curl_defect", 0.3)

        self.assertFalse(report.passed)
        self.assertEqual([c.name for c in report.failures()], ["mass_drift", "nan_value"])
        data = report.to_dict()
        self.assertEqual(len(data["checks"]), 4)
        self.assertEqual(data["checks"][1]["note"], "coarse")
        self.assertTrue(data["checks"][3]["passed"])

    def test_empty_report_passes(self):
        """測試空報告視為通過"""
        self.assertTrue(VerificationReport().passed)


if __name__ == "__main__":
    unittest.main()
