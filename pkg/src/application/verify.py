"""
驗證服務 - 弱形式殘差、邊界代數恆等式、三線性恆等式與壓力回復
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, sparse
from scipy.sparse import linalg as sparse_linalg

from src.application.galerkin import (
    GalerkinSystem,
    convection_matrix,
    gyroscopic_parts,
    relative_velocity_nodes,
    viscosity_of_density,
)
from src.domain.models import FluidDiscretization, PressureField, SimulationResult

logger = logging.getLogger(__name__)

PRESSURE_DEFECT_TOLERANCE = 0.25
WEAK_FORM_TERMS = (
    "momentum",
    "convection",
    "fluid_rotation",
    "body_rotation",
    "dissipation",
)


class TimePolynomial:
    """時間測試函數 ψ(t) = Σ c_k t^k（最高三次）"""

    def __init__(self, coefficients: Sequence[float] = (1.0,)) -> None:
        if len(coefficients) > 4:
            raise ValueError("time test functions are polynomials of degree at most 3")
        self.coefficients = np.asarray(coefficients, dtype=float)
        self._derivative = np.polynomial.polynomial.polyder(self.coefficients)

    def __call__(self, t: float) -> float:
        return float(np.polynomial.polynomial.polyval(t, self.coefficients))

    def derivative(self, t: float) -> float:
        return float(np.polynomial.polynomial.polyval(t, self._derivative))


def _window(result: SimulationResult, t: Optional[float]) -> int:
    """時間 t 之前（含）的最後一個快照索引"""
    if t is None:
        return len(result.states) - 1
    times = result.times
    return int(np.searchsorted(times, t + 1e-12 * max(1.0, abs(t)), side="right") - 1)


def _midpoint_vectors(
    system: GalerkinSystem,
    result: SimulationResult,
    psi: TimePolynomial,
    last: int,
) -> Dict[str, np.ndarray]:
    """以步內中點重組時間推進本身的離散方程；總和只剩 Picard 與捨入誤差"""
    totals = {name: np.zeros(system.basis.N) for name in WEAK_FORM_TERMS}
    for n in range(1, last + 1):
        before, after = result.states[n - 1], result.states[n]
        weight = psi(0.5 * (before.t + after.t))
        for name, vector in system.step_terms(before, after).items():
            totals[name] += weight * vector
    return totals


@dataclass
class SnapshotTerms:
    """
    快照狀態上各項的逐點值，形狀皆為 (K+1, N)，可對不同 ψ 重複使用

    inertia 為 Mα'，α' 以二階差分估計；symmetric 為 ½(K + Kᵀ)α。
    """

    times: np.ndarray
    momentum: np.ndarray
    inertia: np.ndarray
    convection: np.ndarray
    symmetric: np.ndarray
    fluid_rotation: np.ndarray
    body_rotation: np.ndarray
    dissipation: np.ndarray

    def weights(self, psi: TimePolynomial) -> Tuple[np.ndarray, np.ndarray]:
        values = np.array([psi(t) for t in self.times])
        slopes = np.array([psi.derivative(t) for t in self.times])
        return values[:, None], slopes[:, None]

    def integral(self, rows: np.ndarray) -> np.ndarray:
        return integrate.trapezoid(rows, self.times, axis=0)


def snapshot_terms(
    system: GalerkinSystem, result: SimulationResult, t: Optional[float] = None
) -> SnapshotTerms:
    """在時間 t 之前的每個快照上求值質量、對流、陀螺、耗散與推進各項"""
    states = result.states[: _window(result, t) + 1]
    basis, disc, geo = system.basis, system.disc, system.geo
    times = np.array([s.t for s in states])
    alphas = np.array([s.alpha for s in states])
    if len(states) > 1:
        rates = np.gradient(alphas, times, axis=0, edge_order=2 if len(states) > 2 else 1)
    else:
        rates = np.zeros_like(alphas)

    rows: Dict[str, List[np.ndarray]] = {
        name: [] for name in ("momentum", "inertia", "convection", "symmetric",
                              "fluid_rotation", "body_rotation", "dissipation")
    }
    for s, rate in zip(states, rates):
        M = system.mass(s.density)
        K = convection_matrix(basis, s.density, s.alpha, disc)
        fluid, body = gyroscopic_parts(basis, s.density, s.alpha, disc, geo)
        rows["momentum"].append(M @ s.alpha)
        rows["inertia"].append(M @ rate)
        rows["convection"].append(0.5 * (K - K.T) @ s.alpha)
        rows["symmetric"].append(0.5 * (K + K.T) @ s.alpha)
        rows["fluid_rotation"].append(fluid @ s.alpha)
        rows["body_rotation"].append(body @ s.alpha)
        rows["dissipation"].append(
            system.dissipation(s.density) @ s.alpha + system.forcing(s.t, s.density)
        )
    shape = (len(states), basis.N)
    return SnapshotTerms(
        times=times, **{name: np.array(v).reshape(shape) for name, v in rows.items()}
    )


def _trapezoid_vectors(terms: SnapshotTerms, psi: TimePolynomial) -> Dict[str, np.ndarray]:
    """
    只用快照狀態的獨立時間求積

    連續問題 Mα' + ½Ṁα = (A + ½(K − Kᵀ) + G)α + C 乘上 ψ 後，動量項分部積分為
    ½[ψMα] − ½∫ψ'Mα + ½∫ψMα'，其餘各項以梯形公式積分。
    殘差隨 dt² 收斂，而不依賴時間推進所用的中點平均。
    """
    if len(terms.times) < 2:
        return {name: np.zeros(terms.momentum.shape[1]) for name in WEAK_FORM_TERMS}
    w, dw = terms.weights(psi)
    ends = w[-1] * terms.momentum[-1] - w[0] * terms.momentum[0]
    momentum = (
        0.5 * ends
        - 0.5 * terms.integral(dw * terms.momentum)
        + 0.5 * terms.integral(w * terms.inertia)
    )
    return {
        "momentum": momentum,
        "convection": -terms.integral(w * terms.convection),
        "fluid_rotation": -terms.integral(w * terms.fluid_rotation),
        "body_rotation": -terms.integral(w * terms.body_rotation),
        "dissipation": -terms.integral(w * terms.dissipation),
    }


def _conservative_vector(terms: SnapshotTerms, psi: TimePolynomial) -> np.ndarray:
    """
    守恆形式 d(Mα)/dt = (A + K + G)α + C 的梯形求積

    與反對稱形式相差 ½(K + Kᵀ)α − ½Ṁα，即格點求積下連續方程的缺陷；
    這一項由空間離散決定，不隨 dt 收斂。
    """
    if len(terms.times) < 2:
        return np.zeros(terms.momentum.shape[1])
    w, dw = terms.weights(psi)
    bulk = (
        terms.convection
        + terms.symmetric
        + terms.fluid_rotation
        + terms.body_rotation
        + terms.dissipation
    )
    ends = w[-1] * terms.momentum[-1] - w[0] * terms.momentum[0]
    return ends - terms.integral(dw * terms.momentum) - terms.integral(w * bulk)


def weak_form_vectors(
    system: GalerkinSystem,
    result: SimulationResult,
    psi: TimePolynomial,
    t: Optional[float] = None,
    rule: str = "trapezoid",
    snapshots: Optional[SnapshotTerms] = None,
) -> Dict[str, np.ndarray]:
    """
    弱形式五項，對每個基底測試函數 ξ = z_i 同時計算

    Args:
        system: Galerkin 系統
        result: 模擬結果
        psi: 時間多項式
        t: 積分終點，預設為最後時間
        rule: trapezoid（快照上的獨立求積）或 midpoint（時間推進本身的離散方程）
        snapshots: 已求值的快照項（trapezoid 使用，須截在同一個 t）

    Returns:
        momentum、convection、fluid_rotation、body_rotation、dissipation 五項，各為 (N,)
    """
    if rule == "trapezoid":
        return _trapezoid_vectors(snapshots or snapshot_terms(system, result, t), psi)
    if rule == "midpoint":
        return _midpoint_vectors(system, result, psi, _window(result, t))
    raise ValueError(f"unknown quadrature rule: {rule}")


def weak_form_terms(
    system: GalerkinSystem,
    result: SimulationResult,
    xi: np.ndarray,
    psi: Optional[TimePolynomial] = None,
    t: Optional[float] = None,
    rule: str = "trapezoid",
) -> Dict[str, float]:
    """測試函數 φ = ξ(y)ψ(t) 的弱形式五項，ξ 以基底係數給定"""
    xi = np.asarray(xi, dtype=float)
    vectors = weak_form_vectors(system, result, psi or TimePolynomial(), t, rule)
    return {name: float(xi @ v) for name, v in vectors.items()}


def weak_residual_vector(
    system: GalerkinSystem,
    result: SimulationResult,
    psi: Optional[TimePolynomial] = None,
    t: Optional[float] = None,
    rule: str = "trapezoid",
    snapshots: Optional[SnapshotTerms] = None,
) -> np.ndarray:
    """
    每個基底測試函數 ξ = z_i 的弱形式 LHS − RHS（帶號）

    Args:
        system: Galerkin 系統
        result: 模擬結果
        psi: 時間多項式，預設 ψ ≡ 1
        t: 積分終點
        rule: trapezoid（獨立求積，dt² 階）、midpoint（離散方程本身，捨入階）
            或 conservative（守恆形式，含格點連續方程缺陷）
        snapshots: 已求值的快照項

    Returns:
        (N,) 殘差向量
    """
    psi = psi or TimePolynomial()
    if rule == "conservative":
        return _conservative_vector(snapshots or snapshot_terms(system, result, t), psi)
    vectors = weak_form_vectors(system, result, psi, t, rule, snapshots)
    return np.sum(list(vectors.values()), axis=0)


def weak_residual(
    system: GalerkinSystem,
    result: SimulationResult,
    xi: np.ndarray,
    psi: Optional[TimePolynomial] = None,
    t: Optional[float] = None,
    rule: str = "trapezoid",
) -> float:
    """弱形式殘差的絕對值，ξ 以基底係數給定"""
    xi = np.asarray(xi, dtype=float)
    return abs(float(xi @ weak_residual_vector(system, result, psi, t, rule)))


def relative_weak_residual(vectors: Dict[str, np.ndarray]) -> float:
    """|Σ 各項| 除以 max(Σ|各項|, 1)，取所有基底測試函數的最大值"""
    residual = np.abs(np.sum(list(vectors.values()), axis=0))
    scale = np.maximum(np.sum([np.abs(v) for v in vectors.values()], axis=0), 1.0)
    return float((residual / scale).max(initial=0.0))


def lagrange_identity_check(
    A: np.ndarray, B: np.ndarray, C: np.ndarray, D: np.ndarray
) -> float:
    """
    |(A×B)·(C×D) − (A·C)(B·D) + (A·D)(B·C)|，可對 (..., 3) 陣列批次計算

    Returns:
        最大殘差
    """
    A, B, C, D = (np.asarray(x, dtype=float) for x in (A, B, C, D))
    lhs = np.einsum("...i,...i->...", np.cross(A, B), np.cross(C, D))
    rhs = np.einsum("...i,...i->...", A, C) * np.einsum(
        "...i,...i->...", B, D
    ) - np.einsum("...i,...i->...", A, D) * np.einsum("...i,...i->...", B, C)
    return float(np.max(np.abs(lhs - rhs)))


@dataclass
class SlipReduction:
    """滑移配對化約的逐節點檢查結果"""

    residual: np.ndarray
    bound: np.ndarray
    violating_nodes: List[int]

    @property
    def max_residual(self) -> float:
        return float(self.residual.max(initial=0.0))

    @property
    def within_bound(self) -> bool:
        return bool(np.all(self.residual <= self.bound))


def slip_reduction_check(
    u_trace: np.ndarray,
    u_S: np.ndarray,
    w: np.ndarray,
    phi_trace: np.ndarray,
    phi_S: np.ndarray,
    normals: np.ndarray,
    tolerance: float = 1e-6,
) -> SlipReduction:
    """
    逐節點比較 [(u−u_S−w)×n]·[(φ−φ_S)×n] 與 (u−u_S−w)·(φ−φ_S)

    兩者之差等於兩個法向分量的乘積，因此界限為 |g·n||f·n| 加上捨入。

    Args:
        u_trace, u_S, w: ∂S_0 上的流體跡、剛體速度與推進通量
        phi_trace, phi_S: 測試函數的跡與剛體部分
        normals: 單位法向量
        tolerance: 法向分量容許值

    Returns:
        SlipReduction
    """
    g = np.asarray(u_trace) - np.asarray(u_S) - np.asarray(w)
    f = np.asarray(phi_trace) - np.asarray(phi_S)
    n = np.asarray(normals, dtype=float)
    lhs = np.einsum("sc,sc->s", np.cross(g, n), np.cross(f, n))
    rhs = np.einsum("sc,sc->s", g, f)
    residual = np.abs(lhs - rhs)

    gn = np.abs(np.einsum("sc,sc->s", g, n))
    fn = np.abs(np.einsum("sc,sc->s", f, n))
    scale = np.linalg.norm(g, axis=1) * np.linalg.norm(f, axis=1)
    bound = gn * fn + 1e-12 * np.maximum(scale, 1.0)
    violating = np.flatnonzero((gn > tolerance) | (fn > tolerance)).tolist()
    for node in violating[:5]:
        logger.warning("slip reduction precondition violated at surface node %d", node)
    return SlipReduction(residual, bound, violating)


def trilinear_identity_residual(
    system: GalerkinSystem, result: SimulationResult, step: int
) -> float:
    """第 step 步的離散三線性恆等式相對殘差"""
    if not 1 <= step < len(result.states):
        raise IndexError(f"step {step} outside the trajectory")
    before, after = result.states[step - 1], result.states[step]
    return system.trilinear_defect(before, after, after.t - before.t)


def lattice_edges(disc: FluidDiscretization) -> Tuple[np.ndarray, np.ndarray]:
    """沿三個座標軸相鄰、且都在 F_0 內的節點對"""
    lookup = disc.node_lookup
    first, second = [], []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a = lookup[tuple(lo)].ravel()
        b = lookup[tuple(hi)].ravel()
        both = (a >= 0) & (b >= 0)
        first.append(a[both])
        second.append(b[both])
    return np.concatenate(first), np.concatenate(second)


def lattice_gradient(disc: FluidDiscretization, values: np.ndarray) -> np.ndarray:
    """
    以格點邊差分的最小平方估計節點梯度

    每個節點由其相鄰節點的差分 (f_j − f_i)/(x_j − x_i) 組成 3×3 正規方程。
    """
    i, j = lattice_edges(disc)
    points = disc.volume_points
    f = np.asarray(values, dtype=float)
    d = points[j] - points[i]
    df = f[j] - f[i]
    n = disc.n_nodes
    normal = np.zeros((n, 3, 3))
    rhs = np.zeros((n, 3))
    outer = d[:, :, None] * d[:, None, :]
    for idx in (i, j):
        np.add.at(normal, idx, outer)
        np.add.at(rhs, idx, d * df[:, None])
    # 孤立節點沒有鄰邊，梯度取零
    normal += 1e-12 * np.eye(3)
    return np.linalg.solve(normal, rhs[..., None])[..., 0]


def momentum_residual(
    system: GalerkinSystem, result: SimulationResult, step: int
) -> np.ndarray:
    """
    連續方程化約後的動量殘差
    g = ν Δu (+ 2D(u)∇ν) − ρ∂_t u − (ρ(u−u_S)·∇)u − ρ r × u，在步內中點求值
    """
    if not 1 <= step < len(result.states):
        raise IndexError(f"step {step} outside the trajectory")
    basis, disc = system.basis, system.disc
    before, after = result.states[step - 1], result.states[step]
    dt = after.t - before.t
    mid = 0.5 * (before.alpha + after.alpha)
    rho = 0.5 * (before.density.values + after.density.values)

    lap = np.einsum("n,nmc->mc", mid, basis.laplacians)
    grad = np.einsum("n,nmcd->mcd", mid, basis.gradients)
    u = np.einsum("n,nmc->mc", mid, basis.values)
    du = np.einsum("n,nmc->mc", (after.alpha - before.alpha) / dt, basis.values)
    rel = relative_velocity_nodes(basis, mid, disc)
    r = mid @ basis.omega

    p = system.params
    if p.variable_viscosity:
        nu = viscosity_of_density(rho, p.nu1, p.nu2)
        strain = 0.5 * (grad + np.swapaxes(grad, -1, -2))
        viscous = nu[:, None] * lap + 2.0 * np.einsum(
            "mcd,md->mc", strain, lattice_gradient(disc, nu)
        )
    else:
        viscous = p.nu * lap
    convect = np.einsum("mcd,md->mc", grad, rel)
    return viscous - rho[:, None] * (du + convect + np.cross(r, u))


def recover_pressure(
    disc: FluidDiscretization, residual: np.ndarray
) -> PressureField:
    """
    在格點上以最小平方解 ∇p = g，固定一個節點後正規化為零平均

    Args:
        disc: 流體離散
        residual: 節點上的動量殘差 g (M, 3)

    Returns:
        PressureField，defect 為旋度不相容的相對殘差
    """
    g = np.asarray(residual, dtype=float)
    n = disc.n_nodes
    i, j = lattice_edges(disc)
    d = disc.volume_points[j] - disc.volume_points[i]
    target = np.einsum("ec,ec->e", d, 0.5 * (g[i] + g[j]))

    edges = len(i)
    rows = np.repeat(np.arange(edges), 2)
    cols = np.stack([j, i], axis=1).ravel()
    vals = np.tile([1.0, -1.0], edges)
    E = sparse.csr_matrix((vals, (rows, cols)), shape=(edges, n))

    # 固定節點 0 的值為 0
    free = E[:, 1:]
    normal = (free.T @ free).tocsc()
    p = np.zeros(n)
    if edges and n > 1:
        p[1:] = sparse_linalg.spsolve(normal, free.T @ target)

    misfit = E @ p - target
    scale = float(np.linalg.norm(target))
    defect = float(np.linalg.norm(misfit)) / scale if scale > 0.0 else 0.0

    w = disc.volume_weights
    mean = float(w @ p) / float(w.sum())
    p = p - mean
    if defect > PRESSURE_DEFECT_TOLERANCE:
        logger.warning("pressure recovery degraded: curl defect %.3e", defect)
    return PressureField(values=p, points=disc.volume_points, defect=defect, mean=mean)


@dataclass
class VerificationCheck:
    """單一驗證項目"""

    name: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""


@dataclass
class VerificationReport:
    """具名驗證項目的集合"""

    checks: List[VerificationCheck] = field(default_factory=list)

    def add(
        self, name: str, value: float, tolerance: float, note: str = ""
    ) -> VerificationCheck:
        """value ≤ tolerance 視為通過"""
        check = VerificationCheck(
            name, float(value), float(tolerance), bool(np.isfinite(value) and value <= tolerance), note
        )
        self.checks.append(check)
        return check

    def report(self, name: str, value: float, note: str = "") -> VerificationCheck:
        """只記錄數值、不判定的項目"""
        check = VerificationCheck(name, float(value), float("inf"), True, note)
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[VerificationCheck]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "checks": [asdict(c) for c in self.checks],
        }
