"""
自推進通量服務單元測試
"""

import unittest

import numpy as np

from src.application.propulsion import (
    build_propulsion,
    check_tangential,
    flux_surface_norm,
    make_tangential_flux,
    propulsion_budget,
    time_profile,
)
from src.domain.errors import ConfigError, FluxError
from src.domain.models import PropulsionFlux
from tests.fixtures import coarse_disc


class TestTimeProfiles(unittest.TestCase):
    """時間輪廓單元測試"""

    def test_values(self):
        """測試 constant、ramp 與 sinusoid 的取值"""
        self.assertEqual(time_profile("constant")(5.0), 1.0)

        ramp = time_profile("ramp", ramp_time=0.5)
        self.assertEqual(ramp(-1.0), 0.0)
        self.assertAlmostEqual(ramp(0.25), 0.5)
        self.assertEqual(ramp(2.0), 1.0)

        wave = time_profile("sinusoid", period=2.0)
        self.assertAlmostEqual(wave(0.5), 1.0)
        self.assertAlmostEqual(wave(1.0), 0.0)

    def test_invalid_parameters(self):
        """測試非正參數與未知名稱"""
        with self.assertRaises(ConfigError) as ctx:
            time_profile("ramp", ramp_time=0.0)
        self.assertEqual(ctx.exception.keys, ["propulsion.ramp_time"])

        with self.assertRaises(ConfigError):
            time_profile("sinusoid", period=-1.0)
        with self.assertRaises(ConfigError):
            time_profile("pulse")


class TestFluxFamilies(unittest.TestCase):
    """內建通量族單元測試"""

    def setUp(self):
        """設置粗網格"""
        self.disc = coarse_disc()
        self.normals = self.disc.surface_normals

    def test_families_are_tangential(self):
        """測試所有內建通量族在 ∂S_0 上切向"""
        for family in ("swirl", "azimuthal", "squirmer"):
            flux = build_propulsion(self.disc, family, amplitude=2.0)
            self.assertLessEqual(check_tangential(flux, self.normals), 1e-10, family)
            self.assertEqual(flux.family, family)

    def test_azimuthal_has_unit_speed_off_axis(self):
        """測試方位角通量在遠離極點處為單位長度"""
        flux = build_propulsion(self.disc, "azimuthal")
        off_axis = np.abs(self.normals[:, 2]) < 0.9
        np.testing.assert_allclose(
            np.linalg.norm(flux.samples[off_axis], axis=1), 1.0, atol=1e-12
        )

    def test_none_family(self):
        """測試 none 族為零通量"""
        flux = build_propulsion(self.disc, "none")
        self.assertFalse(flux.samples.any())
        self.assertEqual(flux_surface_norm(flux, self.disc.surface_weights, 1.0), 0.0)

    def test_unknown_family(self):
        """測試未知通量族"""
        with self.assertRaises(ConfigError) as ctx:
            build_propulsion(self.disc, "jet")
        self.assertEqual(ctx.exception.keys, ["propulsion.family"])

    def test_projection_removes_normal_part(self):
        """測試 make_tangential_flux 移除法向分量"""
        raw = self.normals + np.array([0.0, 0.0, 1.0])
        flux = make_tangential_flux(raw, self.normals)
        normal = np.einsum("sc,sc->s", flux.samples, self.normals)
        np.testing.assert_allclose(normal, 0.0, atol=1e-12)

        with self.assertRaises(FluxError):
            make_tangential_flux(raw[:-1], self.normals)

    def test_normal_flux_rejected(self):
        """測試法向通量被 check_tangential 拒絕"""
        flux = PropulsionFlux(self.normals.copy(), lambda t: 1.0)
        with self.assertRaises(FluxError) as ctx:
            check_tangential(flux, self.normals)
        self.assertIn("flux not tangential", str(ctx.exception))


class TestPropulsionBudget(unittest.TestCase):
    """推進能量預算單元測試"""

    def setUp(self):
        """設置粗網格"""
        self.disc = coarse_disc()

    def test_constant_profile(self):
        """測試常數輪廓下預算為 να t ∮|w|²"""
        flux = build_propulsion(self.disc, "swirl")
        surface = flux_surface_norm(flux, self.disc.surface_weights, 0.0)
        for rule in ("trapezoid", "midpoint"):
            budget = propulsion_budget(flux, self.disc, 0.5, 2.0, 0.8, rule=rule)
            self.assertAlmostEqual(budget, 0.5 * 2.0 * 0.8 * surface, places=10)

    def test_sinusoid_over_one_period(self):
        """測試完整週期上 sin² 的平均為 1/2，兩種規則一致"""
        flux = build_propulsion(self.disc, "swirl", profile="sinusoid", period=1.0)
        surface = flux_surface_norm(flux, self.disc.surface_weights, 0.25)
        trap = propulsion_budget(flux, self.disc, 1.0, 1.0, 1.0, rule="trapezoid")
        mid = propulsion_budget(flux, self.disc, 1.0, 1.0, 1.0, rule="midpoint")
        self.assertAlmostEqual(trap, 0.5 * surface, places=8)
        self.assertAlmostEqual(mid, 0.5 * surface, places=8)

    def test_edge_cases(self):
        """測試 t ≤ 0 與未知規則"""
        flux = build_propulsion(self.disc, "swirl")
        self.assertEqual(propulsion_budget(flux, self.disc, 1.0, 1.0, 0.0), 0.0)
        with self.assertRaises(ValueError):
            propulsion_budget(flux, self.disc, 1.0, 1.0, 1.0, rule="simpson")


if __name__ == "__main__":
    unittest.main()
