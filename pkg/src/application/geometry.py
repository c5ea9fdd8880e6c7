"""
幾何服務 - 剛體質量性質、截斷流體區域的積分規則與截斷映射 χ_R
"""

import logging
from typing import Tuple

import numpy as np

from src.domain.errors import GeometryError
from src.domain.models import BodyShape, FluidDiscretization, RigidGeometry
from src.domain.shapes import Sphere, sphere_surface_quadrature

logger = logging.getLogger(__name__)

SUBSAMPLES = 8
_HALF_DIAGONAL = np.sqrt(3.0) / 2.0


class _BodyRegion:
    """球體剛體內部，用於慣性積分"""

    def __init__(self, shape: Sphere) -> None:
        self.shape = shape

    def classify(self, centers: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
        d = -self.shape.signed_distance(centers)
        return d >= _HALF_DIAGONAL * h, np.abs(d) < _HALF_DIAGONAL * h

    def fraction(self, points: np.ndarray, delta: float) -> np.ndarray:
        d = -self.shape.signed_distance(points)
        return np.clip(0.5 + d / delta, 0.0, 1.0)

    def inside(self, points: np.ndarray) -> np.ndarray:
        return self.shape.contains(points)


class _FluidRegion:
    """截斷流體區域 F_0 = B_R \\ S_0"""

    def __init__(self, body: BodyShape, R: float) -> None:
        self.body = body
        self.R = R

    def _distance(self, points: np.ndarray) -> np.ndarray:
        outer = self.R - np.linalg.norm(points, axis=1)
        if isinstance(self.body, Sphere):
            return np.minimum(outer, self.body.signed_distance(points))
        return outer

    def classify(self, centers: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
        d = self._distance(centers)
        full = d >= _HALF_DIAGONAL * h
        partial = np.abs(d) < _HALF_DIAGONAL * h
        if not isinstance(self.body, Sphere):
            near = np.linalg.norm(centers, axis=1) <= (
                self.body.bounding_radius + _HALF_DIAGONAL * h
            )
            partial |= full & near
            full &= ~near
        return full, partial

    def fraction(self, points: np.ndarray, delta: float) -> np.ndarray:
        ramp = np.clip(0.5 + self._distance(points) / delta, 0.0, 1.0)
        if isinstance(self.body, Sphere):
            return ramp
        return ramp * (~self.body.contains(points))

    def inside(self, points: np.ndarray) -> np.ndarray:
        in_ball = np.linalg.norm(points, axis=1) < self.R
        return in_ball & ~self.body.contains(points)


def _clipped_lattice(
    region: "_BodyRegion | _FluidRegion",
    origin: np.ndarray,
    n: int,
    h: float,
    subsamples: int = SUBSAMPLES,
    chunk_cells: int = 2048,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    以格點中點法積分區域，邊界格以 subsamples³ 次取樣裁切

    Args:
        region: 積分區域
        origin: 格點角落座標
        n: 每個方向的格子數
        h: 格距
        subsamples: 每方向次取樣數
        chunk_cells: 每批處理的邊界格數

    Returns:
        (節點, 權重, 格子索引)
    """
    index = np.indices((n, n, n)).reshape(3, -1).T
    centers = origin + (index + 0.5) * h
    full, partial = region.classify(centers, h)

    points = [centers[full]]
    weights = [np.full(int(full.sum()), h**3)]
    cells = [index[full]]

    ticks = ((np.arange(subsamples) + 0.5) / subsamples - 0.5) * h
    offsets = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1).reshape(-1, 3)
    delta = h / subsamples
    count = subsamples**3

    partial_cells = np.flatnonzero(partial)
    for start in range(0, len(partial_cells), chunk_cells):
        block = partial_cells[start : start + chunk_cells]
        sub = centers[block, None, :] + offsets[None, :, :]
        frac = region.fraction(sub.reshape(-1, 3), delta).reshape(len(block), count)
        total = frac.sum(axis=1)

        # 沒有任何次取樣中心落在區域內的格子直接捨棄
        interior = frac > 0.5
        keep = interior.any(axis=1)
        if not keep.any():
            continue
        block, sub, frac, total, interior = (
            block[keep],
            sub[keep],
            frac[keep],
            total[keep],
            interior[keep],
        )

        node = np.einsum("cs,csk->ck", frac, sub) / total[:, None]
        bad = np.flatnonzero(~region.inside(node))
        for c in bad:
            gap = np.linalg.norm(sub[c] - node[c], axis=1)
            gap[~interior[c]] = np.inf
            node[c] = sub[c, int(np.argmin(gap))]

        points.append(node)
        weights.append(total / count * h**3)
        cells.append(index[block])

    return np.vstack(points), np.concatenate(weights), np.vstack(cells)


def compute_mass_inertia(
    shape: BodyShape, body_density: float, cells_per_radius: int = 16
) -> Tuple[float, np.ndarray]:
    """
    計算剛體質量與以中心為原點的慣性張量 J_0

    Args:
        shape: 剛體形狀
        body_density: 剛體密度 ρ_S
        cells_per_radius: 球體慣性積分每半徑的格數

    Returns:
        (m, J_0)
    """
    if not np.isfinite(body_density) or body_density <= 0.0:
        raise GeometryError("degenerate body: body density must be positive")
    if not shape.volume > 0.0:
        raise GeometryError("degenerate body: zero volume")

    mass = body_density * shape.volume
    if isinstance(shape, Sphere):
        h = shape.radius / cells_per_radius
        n = 2 * cells_per_radius
        origin = shape.center - shape.radius
        points, weights, _ = _clipped_lattice(_BodyRegion(shape), origin, n, h)
        rel = points - shape.center
        r2 = np.einsum("ij,ij->i", rel, rel)
        integrand = r2[:, None, None] * np.eye(3) - rel[:, :, None] * rel[:, None, :]
        inertia = body_density * np.einsum("i,ijk->jk", weights, integrand)
    else:
        # 多面體慣性為精確積分（trimesh 以單位密度計算）
        inertia = body_density * np.asarray(shape.mesh.moment_inertia, dtype=float)

    inertia = 0.5 * (inertia + inertia.T)
    if np.linalg.eigvalsh(inertia).min() <= 0.0:
        raise GeometryError("degenerate body: inertia tensor is not positive definite")
    return float(mass), inertia


def build_rigid_geometry(
    shape: BodyShape, body_density: float, c1: float = 0.1, c2: float = 10.0
) -> RigidGeometry:
    """
    建立剛體幾何，檢查 ρ_S ∈ [c1, c2]

    Args:
        shape: 剛體形狀
        body_density: 剛體密度
        c1, c2: 允許的密度上下界（c1 > 0）

    Returns:
        RigidGeometry
    """
    if not 0.0 < c1 <= c2:
        raise GeometryError("body density out of bounds: require 0 < c1 <= c2")
    if not c1 <= body_density <= c2:
        raise GeometryError(
            f"body density out of bounds: {body_density} not in [{c1}, {c2}]"
        )
    mass, inertia = compute_mass_inertia(shape, body_density)
    return RigidGeometry(
        shape=shape,
        body_density=body_density,
        mass=mass,
        inertia=inertia,
        center=np.asarray(shape.center, dtype=float),
        c1=c1,
        c2=c2,
    )


def build_discretization(
    shape: BodyShape, R: float, resolution: float, surface_subdivisions: int = 4
) -> FluidDiscretization:
    """
    建立截斷流體區域的積分節點、表面規則與插值格點

    座標為剛體座標：形狀先平移使其中心落在原點。

    Args:
        shape: 剛體形狀
        R: 外球半徑
        resolution: 每單位長度的格子數
        surface_subdivisions: 表面二十面體細分次數

    Returns:
        FluidDiscretization
    """
    if not resolution > 0.0:
        raise GeometryError("geometry overlap: resolution must be positive")
    body = shape.translated(-np.asarray(shape.center, dtype=float))
    if not R > body.bounding_radius:
        raise GeometryError(f"geometry overlap: body not strictly inside B(0, {R})")
    if body.bounding_radius > 0.5 * R:
        raise GeometryError(f"geometry overlap: body must lie inside B(0, {0.5 * R})")

    h = 1.0 / resolution
    n = int(np.ceil(2.0 * R / h - 1e-9))
    origin = np.full(3, -0.5 * n * h)
    points, weights, cells = _clipped_lattice(_FluidRegion(body, R), origin, n, h)

    lookup = np.full((n, n, n), -1, dtype=int)
    lookup[cells[:, 0], cells[:, 1], cells[:, 2]] = np.arange(len(weights))

    s_points, s_weights, s_normals = body.surface_quadrature(surface_subdivisions)
    o_points, o_weights, o_normals = sphere_surface_quadrature(R, surface_subdivisions)

    disc = FluidDiscretization(
        R=float(R),
        body=body,
        resolution=float(resolution),
        h_grid=h,
        origin=origin,
        lattice_shape=(n, n, n),
        volume_points=points,
        volume_weights=weights,
        cell_index=cells,
        node_lookup=lookup,
        surface_points=s_points,
        surface_weights=s_weights,
        surface_normals=s_normals,
        outer_points=o_points,
        outer_weights=o_weights,
        outer_normals=o_normals,
        surface_subdivisions=surface_subdivisions,
    )
    logger.info(
        "discretization: R=%.3g h=%.3g nodes=%d |F_0|=%.6g surface nodes=%d",
        R,
        h,
        disc.n_nodes,
        disc.fluid_volume,
        len(s_weights),
    )
    return disc


def project_to_fluid(
    disc: FluidDiscretization, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    將落在 F_0 外的點投影回區域閉包

    Args:
        disc: 流體離散
        points: 形狀 (n, 3) 的點

    Returns:
        (投影後的點, 穿透深度；區域內為 0)
    """
    pts = np.array(points, dtype=float)
    depth = np.zeros(len(pts))
    r = np.linalg.norm(pts, axis=1)

    outside = r > disc.R
    if outside.any():
        depth[outside] = r[outside] - disc.R
        pts[outside] *= (disc.R / r[outside])[:, None]

    body = disc.body
    if isinstance(body, Sphere):
        inner = r < body.radius
        if inner.any():
            depth[inner] = body.radius - r[inner]
            safe = np.where(r[inner] > 0.0, r[inner], 1.0)
            pts[inner] *= (body.radius / safe)[:, None]
    else:
        inner = body.contains(pts)
        if inner.any():
            nodes = disc.volume_points
            for i in np.flatnonzero(inner):
                gap = np.linalg.norm(nodes - pts[i], axis=1)
                j = int(np.argmin(gap))
                depth[i] = gap[j]
                pts[i] = nodes[j]
    return pts, depth


def chi_R(y: np.ndarray, R: float) -> np.ndarray:
    """
    截斷映射 χ_R：球內為恆等，球外徑向縮放到半徑 R

    Args:
        y: 單點 (3,) 或形狀 (n, 3) 的點
        R: 半徑

    Returns:
        映射後的點，形狀與輸入相同
    """
    if R <= 0.0:
        raise GeometryError("geometry overlap: R must be positive")
    pts = np.asarray(y, dtype=float)
    norm = np.linalg.norm(pts, axis=-1, keepdims=True)
    scale = np.where(norm < R, 1.0, R / np.where(norm > 0.0, norm, 1.0))
    return pts * scale


def truncated_rigid_velocity(
    ell: np.ndarray, omega: np.ndarray, points: np.ndarray, R: float
) -> np.ndarray:
    """截斷剛體速度 u_{S,R}(y) = ℓ + r × χ_R(y)"""
    return np.asarray(ell, dtype=float) + np.cross(omega, chi_R(points, R))
