"""
幾何服務單元測試
"""

import unittest

import numpy as np
import trimesh
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from src.application.geometry import (
    build_discretization,
    build_rigid_geometry,
    chi_R,
    compute_mass_inertia,
    project_to_fluid,
    truncated_rigid_velocity,
)
from src.domain.errors import GeometryError
from src.domain.shapes import Sphere, TriangulatedSurface, sphere_surface_quadrature
from tests.fixtures import OUTER_RADIUS, coarse_disc

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


class TestMassInertia(unittest.TestCase):
    """剛體質量與慣性單元測試"""

    def test_sphere_oracle(self):
        """測試球體質量與慣性接近 4π/3 與 (2/5)m a²"""
        mass, inertia = compute_mass_inertia(Sphere(1.0), 1.0)

        self.assertAlmostEqual(mass, 4.0 * np.pi / 3.0, places=12)
        expected = 0.4 * mass
        np.testing.assert_allclose(inertia, expected * np.eye(3), rtol=0, atol=1e-3 * expected)

    def test_density_scales_linearly(self):
        """測試質量與慣性隨剛體密度線性放大"""
        m1, j1 = compute_mass_inertia(Sphere(1.0), 1.0, cells_per_radius=6)
        m3, j3 = compute_mass_inertia(Sphere(1.0), 3.0, cells_per_radius=6)

        self.assertAlmostEqual(m3, 3.0 * m1)
        np.testing.assert_allclose(j3, 3.0 * j1)

    def test_mesh_body_uses_exact_inertia(self):
        """測試三角化剛體的質量等於網格體積乘密度"""
        box = TriangulatedSurface(trimesh.creation.box(extents=(1.0, 2.0, 3.0)))
        mass, inertia = compute_mass_inertia(box, 2.0)

        self.assertAlmostEqual(mass, 12.0)
        # 長方體 J_xx = m(b² + c²)/12
        self.assertAlmostEqual(inertia[0, 0], mass * (4.0 + 9.0) / 12.0)

    def test_degenerate_body(self):
        """測試非正密度被拒絕"""
        with self.assertRaises(GeometryError) as ctx:
            compute_mass_inertia(Sphere(1.0), 0.0)
        self.assertIn("degenerate body", str(ctx.exception))

        with self.assertRaises(GeometryError):
            Sphere(-1.0)

    def test_body_density_bounds(self):
        """測試 ρ_S 必須落在 [c1, c2]"""
        with self.assertRaises(GeometryError) as ctx:
            build_rigid_geometry(Sphere(1.0), 20.0, c1=0.1, c2=10.0)
        self.assertIn("body density out of bounds", str(ctx.exception))


class TestDiscretization(unittest.TestCase):
    """截斷流體區域離散單元測試"""

    def setUp(self):
        """使用共用的粗網格"""
        self.disc = coarse_disc()

    def test_volume_weights_approximate_shell(self):
        """測試權重總和接近 |B_R \\ S_0|"""
        exact = 4.0 / 3.0 * np.pi * (OUTER_RADIUS**3 - 1.0)
        self.assertAlmostEqual(self.disc.fluid_volume / exact, 1.0, delta=2e-2)
        self.assertTrue(np.all(self.disc.volume_weights > 0.0))

    def test_nodes_lie_in_fluid(self):
        """測試所有節點落在 F_0 內"""
        self.assertTrue(np.all(self.disc.contains_fluid(self.disc.volume_points)))

    def test_surface_rules(self):
        """測試表面權重總和與法向量方向"""
        np.testing.assert_allclose(self.disc.surface_weights.sum(), 4.0 * np.pi, rtol=1e-12)
        np.testing.assert_allclose(
            self.disc.outer_weights.sum(), 4.0 * np.pi * OUTER_RADIUS**2, rtol=1e-12
        )
        # ∂S_0 的法向量指向剛體內部
        radial = np.einsum("sc,sc->s", self.disc.surface_points, self.disc.surface_normals)
        self.assertTrue(np.all(radial < 0.0))

    def test_lookup_matches_cells(self):
        """測試格點查詢表與節點格子索引一致"""
        cells = self.disc.cell_index
        lookup = self.disc.node_lookup[cells[:, 0], cells[:, 1], cells[:, 2]]
        np.testing.assert_array_equal(lookup, np.arange(self.disc.n_nodes))

    def test_refinement_improves_volume(self):
        """測試加密格點後體積誤差不增加"""
        exact = 4.0 / 3.0 * np.pi * (OUTER_RADIUS**3 - 1.0)
        coarse = abs(coarse_disc(resolution=2.0).fluid_volume - exact)
        fine = abs(coarse_disc(resolution=4.0).fluid_volume - exact)
        self.assertLessEqual(fine, coarse)

    def test_geometry_overlap(self):
        """測試剛體不在 B(0, R/2) 內時被拒絕"""
        with self.assertRaises(GeometryError) as ctx:
            build_discretization(Sphere(1.0), 1.5, 2.0, 1)
        self.assertIn("geometry overlap", str(ctx.exception))

        with self.assertRaises(GeometryError):
            build_discretization(Sphere(2.5), 4.0, 2.0, 1)

    def test_project_to_fluid(self):
        """測試外部點投影回邊界並回報穿透深度"""
        points = np.array([[0.0, 0.0, 3.2], [0.5, 0.0, 0.0], [2.0, 0.0, 0.0]])
        projected, depth = project_to_fluid(self.disc, points)

        np.testing.assert_allclose(projected[0], [0.0, 0.0, 3.0])
        np.testing.assert_allclose(projected[1], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(projected[2], points[2])
        np.testing.assert_allclose(depth, [0.2, 0.5, 0.0], atol=1e-12)


class TestCutoff(unittest.TestCase):
    """截斷映射 χ_R 單元測試"""

    def test_branches(self):
        """測試球內為恆等、球外縮放到球面"""
        np.testing.assert_array_equal(chi_R(np.array([1.0, 2.0, 0.0]), 4.0), [1.0, 2.0, 0.0])
        np.testing.assert_allclose(chi_R(np.array([0.0, 8.0, 0.0]), 4.0), [0.0, 4.0, 0.0])

    @given(arrays(np.float64, (5, 3), elements=finite))
    @settings(max_examples=50, deadline=None)
    def test_image_lies_in_closed_ball(self, points):
        """測試 χ_R 的像落在閉球內"""
        image = chi_R(points, 2.0)
        self.assertTrue(np.all(np.linalg.norm(image, axis=1) <= 2.0 + 1e-12))

    def test_truncated_rigid_velocity_inside(self):
        """測試 B(0, R) 內 u_{S,R} 等於 u_S"""
        disc = coarse_disc()
        ell, omega = np.array([0.1, 0.0, -0.2]), np.array([0.0, 0.3, 0.5])
        pts = disc.volume_points
        expected = ell + np.cross(omega, pts)
        np.testing.assert_array_equal(
            truncated_rigid_velocity(ell, omega, pts, disc.R), expected
        )


class TestSphereQuadrature(unittest.TestCase):
    """球面積分規則單元測試"""

    def test_integrates_quadratics(self):
        """測試 ∮ y₃² dΓ = 4π r⁴/3 在細分後收斂"""
        errors = []
        for level in (1, 3):
            points, weights, normals = sphere_surface_quadrature(2.0, level)
            value = weights @ points[:, 2] ** 2
            errors.append(abs(value - 4.0 * np.pi * 2.0**4 / 3.0))
            np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0)
        self.assertLess(errors[1], errors[0])


if __name__ == "__main__":
    unittest.main()
