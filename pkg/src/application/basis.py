"""
Galerkin 基底服務 - 以精確多項式旋度建構無散度基底並在 𝓥 內積下正交歸一化
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import sympy as sp
from scipy import linalg

from src.domain.errors import BasisError, DensityError, GeometryError
from src.domain.models import (
    DensityField,
    FluidDiscretization,
    GalerkinBasis,
    HField,
    RigidGeometry,
    VelocitySample,
)
from src.domain.shapes import Sphere
from src.infrastructure.writers import basis_cache_key

logger = logging.getLogger(__name__)

X, Y, Z = sp.symbols("x y z")
_VARS = (X, Y, Z)
DROP_TOLERANCE = 1e-6
LIFTING_MODES = 6


class BasisCache(Protocol):
    """基底快取介面"""

    def load(self, key: str) -> Optional[GalerkinBasis]: ...

    def save(self, key: str, basis: GalerkinBasis) -> None: ...


@dataclass
class _Candidate:
    """一個候選向量場：三個分量的多項式及其剛體部分"""

    field: Tuple[sp.Poly, sp.Poly, sp.Poly]
    ell: np.ndarray
    omega: np.ndarray


def monomial_exponents(degree: int) -> np.ndarray:
    """依總次數排序的所有 x^i y^j z^k（i+j+k ≤ degree）指數"""
    exps = [
        (i, j, total - i - j)
        for total in range(degree + 1)
        for i in range(total, -1, -1)
        for j in range(total - i, -1, -1)
    ]
    return np.array(exps, dtype=int)


def monomial_matrix(points: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """
    在各點上求所有單項式的值

    Args:
        points: 形狀 (n, 3)
        exponents: 形狀 (P, 3)

    Returns:
        形狀 (n, P) 的矩陣
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    top = int(exponents.max()) if exponents.size else 0
    powers = pts[:, :, None] ** np.arange(top + 1)[None, None, :]
    return (
        powers[:, 0, exponents[:, 0]]
        * powers[:, 1, exponents[:, 1]]
        * powers[:, 2, exponents[:, 2]]
    )


def weighted_gram(a: np.ndarray, weights: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Σ_m w_m a_k(m)·b_l(m)，a 與 b 的第二軸為節點，其餘軸一併縮併

    Args:
        a: 形狀 (K, M, ...)
        weights: 形狀 (M,)
        b: 形狀 (L, M, ...)

    Returns:
        形狀 (K, L)
    """
    shape = (1, -1) + (1,) * (a.ndim - 2)
    left = (a * weights.reshape(shape)).reshape(a.shape[0], -1)
    return left @ b.reshape(b.shape[0], -1).T


def _poly(expr: Union[sp.Expr, int]) -> sp.Poly:
    return sp.Poly(expr, *_VARS, domain="QQ")


def _curl(field: Sequence[sp.Poly]) -> Tuple[sp.Poly, sp.Poly, sp.Poly]:
    ax, ay, az = field
    return (
        az.diff(Y) - ay.diff(Z),
        ax.diff(Z) - az.diff(X),
        ay.diff(X) - ax.diff(Y),
    )


def _coefficient_table(polys: Sequence[sp.Poly], lookup: Dict[tuple, int]) -> np.ndarray:
    """將多項式轉成單項式係數陣列 (P, len(polys))"""
    table = np.zeros((len(lookup), len(polys)))
    for col, poly in enumerate(polys):
        for monom, coeff in poly.terms():
            if coeff != 0:
                table[lookup[tuple(monom)], col] = float(coeff)
    return table


class BasisBuilder:
    """
    Galerkin 基底建構器

    以 s = (|y|² − a²)/(R² − a²) 作為兩個邊界之間的水平函數：
    內部模態為 ∇×(s(1−s)² ψ e_c)，剛體提升模態為
    ∇×((1 − 3s² + 2s³)(½ ℓ×y − ½|y|² r))。
    """

    def __init__(
        self,
        disc: FluidDiscretization,
        geo: RigidGeometry,
        potential_order: int = 2,
        density: Optional[np.ndarray] = None,
        cache: Optional[BasisCache] = None,
    ) -> None:
        if not isinstance(disc.body, Sphere):
            raise GeometryError(
                "basis construction requires an analytic body level set (sphere)"
            )
        if potential_order < 0:
            raise BasisError("basis rank deficient: negative potential order", rank=0)
        self.disc = disc
        self.geo = geo
        self.potential_order = int(potential_order)
        self.density = (
            np.ones(disc.n_nodes)
            if density is None
            else np.asarray(density, dtype=float)
        )
        self.cache = cache

    def _candidates(self) -> Tuple[List[_Candidate], List[_Candidate]]:
        a = sp.Rational(repr(float(self.disc.body.radius)))
        R = sp.Rational(repr(float(self.disc.R)))
        r2 = X**2 + Y**2 + Z**2
        s = _poly((r2 - a**2) / (R**2 - a**2))
        one = _poly(1)
        kappa = s * (one - s) ** 2
        lift = one - 3 * s**2 + 2 * s**3
        zero = np.zeros(3)

        interior: List[_Candidate] = []
        for i, j, k in monomial_exponents(self.potential_order):
            f = kappa * _poly(X ** int(i) * Y ** int(j) * Z ** int(k))
            gx, gy, gz = f.diff(X), f.diff(Y), f.diff(Z)
            nil = _poly(0)
            # ∇f × e_c
            for field in ((nil, gz, -gy), (-gz, nil, gx), (gy, -gx, nil)):
                interior.append(_Candidate(field, zero, zero))

        lifting: List[_Candidate] = []
        half = sp.Rational(1, 2)
        for axis in range(3):
            e = np.eye(3)[axis]
            ell_cross_y = [
                _poly(half * v) for v in sp.Matrix(e.astype(int).tolist()).cross(
                    sp.Matrix([X, Y, Z])
                )
            ]
            field = _curl([lift * c for c in ell_cross_y])
            lifting.append(_Candidate(field, e.copy(), zero))
        for axis in range(3):
            e = np.eye(3)[axis]
            potential = [
                _poly(-half * r2 * int(e[c])) for c in range(3)
            ]
            field = _curl([lift * c for c in potential])
            lifting.append(_Candidate(field, zero, e.copy()))
        return interior, lifting

    def _tables(
        self, candidates: Sequence[_Candidate]
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        degree = max(
            max(p.total_degree() for p in cand.field if not p.is_zero)
            for cand in candidates
        )
        exponents = monomial_exponents(degree)
        lookup = {tuple(e): i for i, e in enumerate(exponents.tolist())}
        values, grads, laps = [], [], []
        for cand in candidates:
            values.append(_coefficient_table(cand.field, lookup))
            grad_polys = [comp.diff(v) for comp in cand.field for v in _VARS]
            grads.append(_coefficient_table(grad_polys, lookup).reshape(-1, 3, 3))
            lap_polys = [
                sum((comp.diff(v).diff(v) for v in _VARS), _poly(0))
                for comp in cand.field
            ]
            laps.append(_coefficient_table(lap_polys, lookup))
        return exponents, np.array(values), np.array(grads), np.array(laps)

    def _v_gram(
        self, values: np.ndarray, grads: np.ndarray, ell: np.ndarray, omega: np.ndarray
    ) -> np.ndarray:
        w = self.disc.volume_weights
        fluid = weighted_gram(values, w * self.density, values)
        grad = weighted_gram(grads, w, grads)
        body = self.geo.mass * ell @ ell.T + omega @ self.geo.inertia @ omega.T
        gram = fluid + grad + body
        return 0.5 * (gram + gram.T)

    def build(self, N: int) -> GalerkinBasis:
        """
        建構 N 維正交歸一基底

        Args:
            N: 基底維度（至少 6）

        Returns:
            GalerkinBasis
        """
        if N < LIFTING_MODES:
            raise BasisError(
                "basis rank deficient: N must be at least 6 for the rigid liftings",
                rank=N,
            )
        key = None
        if self.cache is not None:
            key = basis_cache_key(
                self.disc, self.geo, N, self.potential_order, self.density
            )
            cached = self.cache.load(key)
            if cached is not None:
                logger.info("basis loaded from cache (%s)", key[:12])
                return cached

        interior, lifting = self._candidates()
        candidates = interior + lifting
        exponents, coef, grad_coef, lap_coef = self._tables(candidates)

        phi = monomial_matrix(self.disc.volume_points, exponents)
        values = np.einsum("mp,kpc->kmc", phi, coef, optimize=True)
        grads = np.einsum("mp,kpcd->kmcd", phi, grad_coef, optimize=True)
        ell = np.array([c.ell for c in candidates])
        omega = np.array([c.omega for c in candidates])
        gram = self._v_gram(values, grads, ell, omega)

        n_interior = len(interior)
        chosen, rank = self._orthonormalize(gram, n_interior, N - LIFTING_MODES)
        # 提升模態放在前面
        order = list(range(len(chosen) - LIFTING_MODES, len(chosen))) + list(
            range(len(chosen) - LIFTING_MODES)
        )
        C = np.array(chosen)[order]

        condition = float(np.linalg.cond(gram))
        fields = self._assemble(C, exponents, coef, grad_coef, lap_coef, ell, omega, phi)
        basis = GalerkinBasis(
            **fields, candidate_condition=condition, candidate_rank=rank
        )
        logger.info(
            "basis built: N=%d candidates=%d rank=%d cond=%.3e",
            N,
            len(candidates),
            rank,
            condition,
        )
        if self.cache is not None and key is not None:
            self.cache.save(key, basis)
        return basis

    @staticmethod
    def _orthonormalize(
        gram: np.ndarray, n_interior: int, wanted: int
    ) -> Tuple[List[np.ndarray], int]:
        """
        在 𝓥 內積下做修正 Gram–Schmidt（兩次正交化）

        先貪婪挑選內部候選，再處理六個提升候選。
        """
        K = gram.shape[0]
        chosen: List[np.ndarray] = []

        def accept(k: int) -> bool:
            v = np.zeros(K)
            v[k] = 1.0
            reference = np.sqrt(gram[k, k])
            for _ in range(2):
                for q in chosen:
                    v -= (q @ gram @ v) * q
            norm = np.sqrt(max(v @ gram @ v, 0.0))
            if reference == 0.0 or norm <= DROP_TOLERANCE * reference:
                return False
            chosen.append(v / norm)
            return True

        independent = 0
        for k in range(n_interior):
            if independent == wanted:
                break
            if accept(k):
                independent += 1
        if independent < wanted:
            remaining = sum(accept(k) for k in range(n_interior, K))
            raise BasisError("basis rank deficient", rank=independent + remaining)
        for k in range(n_interior, K):
            if not accept(k):
                raise BasisError("basis rank deficient", rank=len(chosen))
        return chosen, len(chosen)

    def _assemble(
        self,
        C: np.ndarray,
        exponents: np.ndarray,
        coef: np.ndarray,
        grad_coef: np.ndarray,
        lap_coef: np.ndarray,
        ell: np.ndarray,
        omega: np.ndarray,
        phi: np.ndarray,
    ) -> dict:
        disc = self.disc
        coefficients = np.einsum("nk,kpc->npc", C, coef)
        gradient_coefficients = np.einsum("nk,kpcd->npcd", C, grad_coef)
        laplacian_coefficients = np.einsum("nk,kpc->npc", C, lap_coef)

        values = np.einsum("mp,npc->nmc", phi, coefficients, optimize=True)
        gradients = np.einsum("mp,npcd->nmcd", phi, gradient_coefficients, optimize=True)
        laplacians = np.einsum("mp,npc->nmc", phi, laplacian_coefficients, optimize=True)

        phi_s = monomial_matrix(disc.surface_points, exponents)
        trace = np.einsum("sp,npc->nsc", phi_s, coefficients, optimize=True)
        grad_s = np.einsum("sp,npcd->nscd", phi_s, gradient_coefficients, optimize=True)
        strain = 0.5 * (grad_s + np.swapaxes(grad_s, -1, -2))
        strain_trace = np.einsum("nscd,sd->nsc", strain, disc.surface_normals)

        phi_o = monomial_matrix(disc.outer_points, exponents)
        outer = np.einsum("op,npc->noc", phi_o, coefficients, optimize=True)

        basis_ell = C @ ell
        basis_omega = C @ omega
        gram = self._v_gram(values, gradients, basis_ell, basis_omega)
        return dict(
            values=values,
            gradients=gradients,
            laplacians=laplacians,
            ell=basis_ell,
            omega=basis_omega,
            trace_S0=trace,
            strain_trace_S0=strain_trace,
            outer_trace=outer,
            exponents=exponents,
            coefficients=coefficients,
            gradient_coefficients=gradient_coefficients,
            laplacian_coefficients=laplacian_coefficients,
            gram=gram,
            potential_order=self.potential_order,
        )


def build_basis(
    disc: FluidDiscretization,
    geo: RigidGeometry,
    N: int,
    potential_order: int = 2,
    density: Optional[np.ndarray] = None,
    cache: Optional[BasisCache] = None,
) -> GalerkinBasis:
    """建構 N 維 Galerkin 基底（BasisBuilder 的便捷入口）"""
    return BasisBuilder(disc, geo, potential_order, density, cache).build(N)


def v_gram_matrix(
    basis: GalerkinBasis,
    disc: FluidDiscretization,
    geo: RigidGeometry,
    density: Optional[np.ndarray] = None,
) -> np.ndarray:
    """以節點值重新計算 𝓥 內積的 Gram 矩陣"""
    rho = np.ones(disc.n_nodes) if density is None else np.asarray(density, dtype=float)
    w = disc.volume_weights
    fluid = weighted_gram(basis.values, w * rho, basis.values)
    grad = weighted_gram(basis.gradients, w, basis.gradients)
    body = geo.mass * basis.ell @ basis.ell.T + basis.omega @ geo.inertia @ basis.omega.T
    return fluid + grad + body


def h_gram_matrix(
    basis: GalerkinBasis,
    density: Union[DensityField, np.ndarray],
    geo: RigidGeometry,
    disc: FluidDiscretization,
) -> np.ndarray:
    """
    𝓗 內積的 Gram 矩陣 ((z_i, z_j)_𝓗)

    Args:
        basis: Galerkin 基底
        density: 節點密度
        geo: 剛體幾何
        disc: 流體離散

    Returns:
        對稱 N×N 矩陣
    """
    rho = _density_values(density)
    w = disc.volume_weights * rho
    fluid = weighted_gram(basis.values, w, basis.values)
    body = geo.mass * basis.ell @ basis.ell.T + basis.omega @ geo.inertia @ basis.omega.T
    gram = fluid + body
    return 0.5 * (gram + gram.T)


def _density_values(density: Union[DensityField, np.ndarray]) -> np.ndarray:
    rho = density.values if isinstance(density, DensityField) else np.asarray(density)
    if rho.size and rho.min() < 0.0:
        node = int(np.argmin(rho))
        raise DensityError(f"density negative: {rho[node]:.3e} at node {node}")
    return rho


def inner_product_H(
    phi: HField,
    psi: HField,
    density: Union[DensityField, np.ndarray],
    disc: FluidDiscretization,
    geo: RigidGeometry,
) -> float:
    """
    (φ, ψ)_𝓗 = ∫ ρ φ·ψ + m ℓ_φ·ℓ_ψ + J_0 r_φ·r_ψ

    Args:
        phi, psi: 帶剛體部分的場
        density: 節點密度（不可為負）
        disc: 流體離散
        geo: 剛體幾何

    Returns:
        內積值
    """
    rho = _density_values(density)
    ell_phi, r_phi = phi.rigid_part
    ell_psi, r_psi = psi.rigid_part
    fluid = float(
        np.einsum("m,mc,mc->", disc.volume_weights * rho, phi.values, psi.values)
    )
    body = geo.mass * float(ell_phi @ ell_psi) + float(r_phi @ geo.inertia @ r_psi)
    return fluid + body


def rigid_part_extraction(
    points: np.ndarray, values: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    以最小平方擬合 φ(y) ≈ ℓ + r × y

    Args:
        points: 剛體內的取樣點 (n, 3)
        values: 對應的向量值 (n, 3)

    Returns:
        (ℓ, r)
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.atleast_2d(np.asarray(values, dtype=float))
    if len(pts) < 4 or np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-10) < 3:
        raise BasisError("rigid fit degenerate: need 4 non-coplanar samples")

    # r × y = -[y]_× r
    hat = np.zeros((len(pts), 3, 3))
    hat[:, 0, 1], hat[:, 0, 2] = -pts[:, 2], pts[:, 1]
    hat[:, 1, 0], hat[:, 1, 2] = pts[:, 2], -pts[:, 0]
    hat[:, 2, 0], hat[:, 2, 1] = -pts[:, 1], pts[:, 0]
    design = np.concatenate(
        [np.broadcast_to(np.eye(3), (len(pts), 3, 3)), -hat], axis=2
    ).reshape(-1, 6)
    solution, _, rank, _ = linalg.lstsq(design, vals.reshape(-1))
    if rank < 6:
        raise BasisError("rigid fit degenerate: rank deficient design")
    return solution[:3], solution[3:]


def evaluate_velocity(
    basis: GalerkinBasis, alpha: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """在任意點求 u = Σ α_i z_i"""
    combined = np.einsum("i,ipc->pc", np.asarray(alpha, dtype=float), basis.coefficients)
    return monomial_matrix(points, basis.exponents) @ combined


def evaluate_gradient(
    basis: GalerkinBasis, alpha: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """在任意點求 ∇u，分量 [c, d] = ∂_d u_c"""
    combined = np.einsum(
        "i,ipcd->pcd", np.asarray(alpha, dtype=float), basis.gradient_coefficients
    )
    return np.einsum("np,pcd->ncd", monomial_matrix(points, basis.exponents), combined)


def basis_invariant_defects(
    basis: GalerkinBasis, disc: FluidDiscretization
) -> Dict[str, float]:
    """
    回報基底的散度、法向跡與外邊界跡缺陷

    Returns:
        {"divergence": 相對散度, "normal_trace": 法向跡, "outer_trace": 外邊界跡}
    """
    div = np.einsum("nmcc->nm", basis.gradients)
    scale = np.abs(basis.gradients).max(axis=(1, 2, 3))
    divergence = float((np.abs(div).max(axis=1) / np.where(scale > 0, scale, 1.0)).max())

    rigid = basis.ell[:, None, :] + np.cross(
        basis.omega[:, None, :], disc.surface_points[None, :, :]
    )
    gap = basis.trace_S0 - rigid
    normal = float(np.abs(np.einsum("nsc,sc->ns", gap, disc.surface_normals)).max())
    outer = float(np.abs(basis.outer_trace).max())
    return {"divergence": divergence, "normal_trace": normal, "outer_trace": outer}


def project_initial_velocity(
    basis: GalerkinBasis,
    disc: FluidDiscretization,
    geo: RigidGeometry,
    density: Union[DensityField, np.ndarray],
    u0: VelocitySample,
) -> Tuple[np.ndarray, float]:
    """
    初始速度在 X_N 上的 𝓗 正交投影

    Args:
        basis: Galerkin 基底
        disc: 流體離散
        geo: 剛體幾何
        density: 初始密度
        u0: 初始速度取樣

    Returns:
        (係數, 投影誤差的 𝓗 範數)
    """
    mass = h_gram_matrix(basis, density, geo, disc)
    rhs = np.array(
        [inner_product_H(f, u0, density, disc, geo) for f in basis.functions]
    )
    coeffs = linalg.solve(mass, rhs, assume_a="pos")
    total = inner_product_H(u0, u0, density, disc, geo)
    error = np.sqrt(max(total - float(coeffs @ rhs), 0.0))
    return coeffs, error
