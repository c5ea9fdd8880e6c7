"""
剛體形狀描述 - 解析球體與三角化封閉曲面
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import trimesh

from src.domain.errors import GeometryError

SurfaceRule = Tuple[np.ndarray, np.ndarray, np.ndarray]


def _solid_angles(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    計算三角形 (a, b, c) 自原點所張的帶號立體角

    Args:
        a, b, c: 形狀 (..., 3) 的頂點座標（以觀察點為原點）

    Returns:
        帶號立體角陣列
    """
    la = np.linalg.norm(a, axis=-1)
    lb = np.linalg.norm(b, axis=-1)
    lc = np.linalg.norm(c, axis=-1)
    numerator = np.einsum("...i,...i->...", a, np.cross(b, c))
    denominator = (
        la * lb * lc
        + np.einsum("...i,...i->...", a, b) * lc
        + np.einsum("...i,...i->...", b, c) * la
        + np.einsum("...i,...i->...", c, a) * lb
    )
    return 2.0 * np.arctan2(numerator, denominator)


def sphere_surface_quadrature(
    radius: float, subdivisions: int, center: Optional[np.ndarray] = None
) -> SurfaceRule:
    """
    以測地二十面體剖分建立球面積分規則

    每個三角形以其球面三角形的精確面積為權重，節點為徑向投影後的重心，
    因此權重總和等於 4πr²。

    Args:
        radius: 球半徑
        subdivisions: 二十面體細分次數
        center: 球心，預設為原點

    Returns:
        (節點, 權重, 向外單位法向量)
    """
    if radius <= 0.0:
        raise GeometryError("degenerate body: sphere radius must be positive")
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions, radius=1.0)
    tri = np.asarray(mesh.vertices)[np.asarray(mesh.faces)]
    tri = tri / np.linalg.norm(tri, axis=-1, keepdims=True)

    omega = np.abs(_solid_angles(tri[:, 0], tri[:, 1], tri[:, 2]))
    directions = tri.sum(axis=1)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    origin = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    points = origin + radius * directions
    weights = omega * radius**2
    return points, weights, directions


@dataclass(frozen=True, eq=False)
class Sphere:
    """解析球體剛體"""

    radius: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not np.isfinite(self.radius) or self.radius <= 0.0:
            raise GeometryError("degenerate body: sphere radius must be positive")

    is_analytic = True

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius**3

    @property
    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    @property
    def bounding_radius(self) -> float:
        """包含剛體且以原點為心的最小球半徑"""
        return float(np.linalg.norm(self.center) + self.radius)

    def translated(self, offset: np.ndarray) -> "Sphere":
        return Sphere(self.radius, self.center + np.asarray(offset, dtype=float))

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """剛體外為正、剛體內為負的帶號距離"""
        pts = np.asarray(points, dtype=float)
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.signed_distance(points) < 0.0

    def surface_quadrature(self, subdivisions: int) -> SurfaceRule:
        """
        ∂S_0 上的積分規則，法向量指向剛體內部

        Args:
            subdivisions: 二十面體細分次數

        Returns:
            (節點, 權重, 指向 S_0 的單位法向量)
        """
        points, weights, outward = sphere_surface_quadrature(
            self.radius, subdivisions, self.center
        )
        return points, weights, -outward


class TriangulatedSurface:
    """由封閉三角網格描述的剛體"""

    is_analytic = False

    def __init__(self, mesh: trimesh.Trimesh) -> None:
        if not mesh.is_watertight:
            raise GeometryError("degenerate body: triangulated surface is not closed")
        if abs(float(mesh.volume)) <= 1e-14:
            raise GeometryError("degenerate body: zero enclosed volume")
        if mesh.volume < 0.0:
            mesh = mesh.copy()
            mesh.invert()
        self.mesh = mesh

    @classmethod
    def from_file(cls, path: str) -> "TriangulatedSurface":
        mesh = trimesh.load_mesh(path, force="mesh")
        if not isinstance(mesh, trimesh.Trimesh):
            raise GeometryError(f"degenerate body: {path} does not hold a single mesh")
        return cls(mesh)

    @property
    def volume(self) -> float:
        return float(self.mesh.volume)

    @property
    def area(self) -> float:
        return float(self.mesh.area)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.mesh.center_mass, dtype=float)

    @property
    def bounding_radius(self) -> float:
        return float(np.max(np.linalg.norm(self.mesh.vertices, axis=1)))

    def translated(self, offset: np.ndarray) -> "TriangulatedSurface":
        mesh = self.mesh.copy()
        mesh.apply_translation(np.asarray(offset, dtype=float))
        return TriangulatedSurface(mesh)

    def winding_number(self, points: np.ndarray, chunk: int = 256) -> np.ndarray:
        """
        廣義環繞數，封閉曲面內部為 1、外部為 0

        Args:
            points: 形狀 (n, 3) 的查詢點
            chunk: 每批處理的點數

        Returns:
            每個點的環繞數
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tri = np.asarray(self.mesh.triangles)
        result = np.empty(len(pts))
        for start in range(0, len(pts), chunk):
            block = pts[start : start + chunk, None, None, :]
            rel = tri[None, :, :, :] - block
            omega = _solid_angles(rel[..., 0, :], rel[..., 1, :], rel[..., 2, :])
            result[start : start + chunk] = omega.sum(axis=1) / (4.0 * np.pi)
        return result

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.winding_number(points) > 0.5

    def surface_quadrature(self, subdivisions: int) -> SurfaceRule:
        """三角形重心規則；細分次數對網格無作用"""
        del subdivisions
        points = np.asarray(self.mesh.triangles_center, dtype=float)
        weights = np.asarray(self.mesh.area_faces, dtype=float)
        inward = -np.asarray(self.mesh.face_normals, dtype=float)
        return points, weights, inward
