"""
密度輸運服務單元測試
"""

import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from src.application.transport import (
    RENORMALIZATIONS,
    AnalyticRelativeVelocity,
    GalerkinRelativeVelocity,
    GaussianBumpTest,
    LatticeInterpolator,
    advect_density,
    density_profile,
    initial_density,
    mass_integral,
    renormalized_residual,
    test_function_norm as bump_norm,
    trace_characteristic,
)
from src.domain.errors import CharacteristicEscapeError, ConfigError, DensityError
from src.domain.models import DensityField
from tests.fixtures import coarse_basis, coarse_disc, two_layer_density, uniform_density

SPIN = np.array([0.0, 0.0, 1.0])


class TestCharacteristics(unittest.TestCase):
    """特徵線回溯單元測試"""

    def test_zero_velocity_is_identity(self):
        """測試零相對速度下落點不動"""
        x = np.array([[1.5, 0.2, -0.3], [0.0, 2.0, 0.5]])
        feet = trace_characteristic(x, 1.0, AnalyticRelativeVelocity.zero(), 0.1)
        np.testing.assert_array_equal(feet, x)

    def test_rotation_matches_exact_flow(self):
        """測試剛體旋轉的回溯落點等於反向旋轉"""
        x = np.array([2.0, 0.5, 0.3])
        feet = trace_characteristic(x, 0.5, AnalyticRelativeVelocity.rotation(SPIN), 0.01)
        expected = Rotation.from_rotvec(-0.5 * SPIN).apply(x)
        self.assertEqual(feet.shape, (3,))
        np.testing.assert_allclose(feet, expected, atol=1e-8)

    def test_invalid_substep(self):
        """測試非正子步長被拒絕"""
        with self.assertRaises(ValueError):
            trace_characteristic(np.zeros(3), 1.0, AnalyticRelativeVelocity.zero(), 0.0)

    def test_escape_raises(self):
        """測試落點遠離 F_0 時回報節點與深度"""
        disc = coarse_disc()
        rho = uniform_density()
        push = AnalyticRelativeVelocity.constant(np.array([10.0, 0.0, 0.0]))
        with self.assertRaises(CharacteristicEscapeError) as ctx:
            advect_density(rho, push, 1.0, disc, 0.1)
        self.assertGreater(ctx.exception.penetration, 0.1 * disc.h_grid)


class TestLatticeInterpolator(unittest.TestCase):
    """凸組合內插單元測試"""

    def setUp(self):
        """設置內插器"""
        self.disc = coarse_disc()
        self.interp = LatticeInterpolator(self.disc)

    @given(st.integers(min_value=0, max_value=2**16))
    @settings(max_examples=25, deadline=None)
    def test_weights_form_convex_combination(self, seed):
        """測試權重非負且總和為 1"""
        rng = np.random.default_rng(seed)
        nodes = rng.choice(self.disc.n_nodes, size=8)
        points = self.disc.volume_points[nodes] + rng.uniform(-0.2, 0.2, size=(8, 3))
        _, weights = self.interp.stencil(points)
        self.assertTrue(np.all(weights >= 0.0))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)

    def test_reproduces_nodes_and_constants(self):
        """測試完整格的節點上取回原值、常數場不變"""
        disc = self.disc
        values = np.linspace(0.0, 1.0, disc.n_nodes)
        centers = disc.origin + (disc.cell_index + 0.5) * disc.h_grid
        full = np.all(np.isclose(centers, disc.volume_points, atol=1e-12), axis=1)
        self.assertTrue(full.any())
        np.testing.assert_allclose(
            self.interp(values, disc.volume_points[full]), values[full], atol=1e-9
        )
        points = self.disc.volume_points[:20] + 0.1
        np.testing.assert_allclose(
            self.interp(np.full(self.disc.n_nodes, 3.0), points), 3.0
        )


class TestAdvection(unittest.TestCase):
    """密度推進單元測試"""

    def setUp(self):
        """設置粗網格與旋轉流場"""
        self.disc = coarse_disc()
        self.spin = AnalyticRelativeVelocity.rotation(SPIN)

    def test_same_time_returns_input(self):
        """測試 t 等於起始時間時原樣返回"""
        rho = uniform_density()
        self.assertIs(advect_density(rho, self.spin, 0.0, self.disc, 0.1), rho)

    def test_maximum_principle(self):
        """測試推進後密度保持初始界限"""
        rho = two_layer_density()
        lo, hi = rho.bounds
        for t in (0.3, 0.6, 0.9):
            rho = advect_density(rho, self.spin, t, self.disc, 0.05)
            self.assertGreaterEqual(rho.minimum, lo)
            self.assertLessEqual(rho.maximum, hi)
        self.assertEqual(rho.bounds, (lo, hi))

    def test_radial_density_is_invariant_under_rotation(self):
        """測試徑向分層在旋轉下不變，質量守恆"""
        profile = density_profile("smooth_layer", 1.0, 2.0, layer_radius=2.0, layer_width=0.3)
        rho0 = initial_density(self.disc, profile)
        rho = advect_density(rho0, self.spin, 1.0, self.disc, 0.01)

        np.testing.assert_allclose(rho.values, rho0.values, atol=1e-6)
        mass0 = mass_integral(rho0, self.disc)
        self.assertAlmostEqual(mass_integral(rho, self.disc) / mass0, 1.0, places=6)
        self.assertEqual(rho.time_stamp, 1.0)

    def test_nodal_density_without_profile(self):
        """測試無輪廓的密度以內插推進並保持界限"""
        values = 1.0 + 0.5 * np.cos(self.disc.volume_points[:, 0])
        rho = DensityField(values, (float(values.min()), float(values.max())))
        moved = advect_density(rho, self.spin, 0.2, self.disc, 0.05)
        self.assertIsNone(moved.profile)
        self.assertGreaterEqual(moved.minimum, rho.bounds[0] - 1e-12)
        self.assertLessEqual(moved.maximum, rho.bounds[1] + 1e-12)

    def test_values_are_not_clipped(self):
        """測試推進不截斷數值，越界由監控看到"""
        values = 1.0 + 0.5 * np.cos(self.disc.volume_points[:, 0])
        rho = DensityField(values, (1.2, 1.3))
        moved = advect_density(rho, self.spin, 0.2, self.disc, 0.05)
        self.assertLess(moved.minimum, 1.2)
        self.assertGreater(moved.maximum, 1.3)

    def test_composed_feet_stay_in_closure_bounds(self):
        """測試連續分層經多次合成落點後仍在閉包值域內"""
        profile = density_profile("smooth_layer", 1.0, 2.0, layer_radius=1.5, layer_width=0.3)
        rho = initial_density(self.disc, profile)
        lo, hi = rho.bounds
        self.assertLess(lo, float(rho.values.min()))
        for t in (0.3, 0.6, 0.9):
            rho = advect_density(rho, self.spin, t, self.disc, 0.05)
            self.assertGreaterEqual(rho.minimum, lo - 1e-12)
            self.assertLessEqual(rho.maximum, hi + 1e-12)


class TestInitialDensity(unittest.TestCase):
    """初始密度單元測試"""

    def test_profiles(self):
        """測試內建輪廓的取值"""
        points = np.array([[0.0, 0.0, 1.5], [0.0, 0.0, 2.8]])
        two = density_profile("two_layer", 1.0, 3.0, layer_radius=2.0)
        np.testing.assert_array_equal(two(points), [1.0, 3.0])
        strat = density_profile("stratified", 1.0, 3.0, R=3.0)
        np.testing.assert_allclose(strat(np.array([[0.0, 0.0, -3.0], [0.0, 0.0, 0.0]])), [1.0, 2.0])

    def test_unknown_profile(self):
        """測試未知輪廓名稱"""
        with self.assertRaises(ConfigError) as ctx:
            density_profile("marble")
        self.assertEqual(ctx.exception.keys, ["initial.density"])

    def test_shift_and_bounds(self):
        """測試正性平移加入節點值與界限"""
        rho = initial_density(coarse_disc(), density_profile("uniform", 0.0), shift=0.25)
        np.testing.assert_allclose(rho.values, 0.25)
        self.assertEqual(rho.bounds, (0.25, 0.25))

    def test_positive_mode_rejects_vacuum(self):
        """測試正密度模式拒絕零密度、任何模式拒絕負密度"""
        disc = coarse_disc()
        with self.assertRaises(DensityError):
            initial_density(disc, density_profile("uniform", 0.0), positive=True)
        with self.assertRaises(DensityError):
            initial_density(disc, density_profile("uniform", -1.0))


class TestRelativeVelocity(unittest.TestCase):
    """相對速度單元測試"""

    def test_coefficients_interpolate_linearly(self):
        """測試 Galerkin 係數在時間節點間線性內插"""
        basis = coarse_basis()
        coeffs = [np.zeros(basis.N), 2.0 * np.ones(basis.N)]
        rel = GalerkinRelativeVelocity(basis, [0.0, 1.0], coeffs, coarse_disc().R)
        np.testing.assert_allclose(rel.alpha(0.5), np.ones(basis.N))
        np.testing.assert_array_equal(rel(coarse_disc().volume_points[:5], 0.0), 0.0)

    def test_length_mismatch(self):
        """測試時間與係數長度不一致"""
        with self.assertRaises(ValueError):
            GalerkinRelativeVelocity(coarse_basis(), [0.0, 1.0], [np.zeros(10)], 3.0)


class TestRenormalizedResidual(unittest.TestCase):
    """重整化弱形式殘差單元測試"""

    def test_stationary_density_has_small_residual(self):
        """測試繞 e3 旋轉下的徑向密度，對軸上的 bump 與各種 b 殘差低於 1e-4"""
        disc = coarse_disc()
        spin = AnalyticRelativeVelocity.rotation(SPIN)
        profile = density_profile("smooth_layer", 1.0, 2.0, layer_radius=2.0, layer_width=0.5)
        rho0 = initial_density(disc, profile)
        snaps = [rho0] + [
            advect_density(rho0, spin, t, disc, 0.01) for t in (0.125, 0.25, 0.375, 0.5)
        ]
        times = np.array([s.time_stamp for s in snaps])

        for center in ([0.0, 0.0, 2.0], [0.0, 0.0, -2.1]):
            phi = GaussianBumpTest(np.array(center), 0.4, (1.0, 0.5, -0.3, 0.2))
            norm = bump_norm(phi, disc, times)
            self.assertGreater(norm, 0.0)
            for b in RENORMALIZATIONS.values():
                with self.subTest(center=center, b=b.name):
                    residual = renormalized_residual(b, snaps, spin, phi, disc)
                    self.assertLess(residual / norm, 1e-4)

    def test_single_snapshot(self):
        """測試單一快照的殘差為零"""
        phi = GaussianBumpTest(np.zeros(3), 1.0)
        self.assertEqual(
            renormalized_residual(
                RENORMALIZATIONS["identity"], [uniform_density()],
                AnalyticRelativeVelocity.zero(), phi, coarse_disc(),
            ),
            0.0,
        )


if __name__ == "__main__":
    unittest.main()
