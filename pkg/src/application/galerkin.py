"""
Galerkin 系統服務 - 矩陣組裝、Picard 固定點與耦合的係數與密度時間積分
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import linalg

from src.application.basis import h_gram_matrix, weighted_gram
from src.application.bodyframe import body_clearance, integrate_pose, so3_defect
from src.application.propulsion import check_tangential, flux_surface_norm
from src.application.transport import (
    GalerkinRelativeVelocity,
    LatticeInterpolator,
    advect_density,
    mass_integral,
)
from src.domain.errors import AssemblyError, InvariantViolation, SolverError
from src.domain.models import (
    BodyPose,
    DensityField,
    EnergyLedger,
    FluidDiscretization,
    GalerkinBasis,
    LedgerRecord,
    PropulsionFlux,
    RigidGeometry,
    SimState,
    SimulationResult,
    StepDiagnostics,
)

logger = logging.getLogger(__name__)

DENSITY_ROUNDOFF = 1e-12

DensityLike = Union[DensityField, np.ndarray]


@dataclass(frozen=True)
class GalerkinParameters:
    """流體、耦合與 Picard 迭代參數"""

    nu: float = 1.0
    alpha: float = 1.0
    variable_viscosity: bool = False
    nu1: float = 0.5
    nu2: float = 2.0
    picard_tol: float = 1e-8
    picard_max_iter: int = 50
    freeze_density: bool = False
    dt_sub_factor: int = 4
    positive_density: bool = False

    @property
    def dissipation_nu(self) -> float:
        """能量帳本耗散側使用的黏度"""
        return self.nu1 if self.variable_viscosity else self.nu

    @property
    def budget_nu(self) -> float:
        """能量帳本預算側使用的黏度"""
        return self.nu2 if self.variable_viscosity else self.nu


def _values(density: DensityLike) -> np.ndarray:
    return density.values if isinstance(density, DensityField) else np.asarray(density)


def _require_finite(name: str, array: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise AssemblyError(f"assembly NaN: non-finite entries in {name}")
    return array


def viscosity_of_density(rho: np.ndarray, nu1: float, nu2: float) -> np.ndarray:
    """
    ν(ρ) = ν1 + (ν2 − ν1)·ρ/(1 + ρ)

    Raises:
        AssemblyError: 任一取樣落在 [ν1, ν2] 之外
    """
    rho = np.asarray(rho, dtype=float)
    nu = nu1 + (nu2 - nu1) * rho / (1.0 + rho)
    if nu.size and (not np.all(np.isfinite(nu)) or nu.min() < nu1 or nu.max() > nu2):
        raise AssemblyError(
            f"viscosity bounds violated: samples in [{nu.min():.4g}, {nu.max():.4g}]"
            f" outside [{nu1}, {nu2}]"
        )
    return nu


def strain_rates(basis: GalerkinBasis) -> np.ndarray:
    """D(z_i) = ½(∇z_i + ∇z_iᵀ)，形狀 (N, M, 3, 3)"""
    g = basis.gradients
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def slip_gaps(basis: GalerkinBasis, disc: FluidDiscretization) -> np.ndarray:
    """∂S_0 上的 z_i − z_{S,i}，形狀 (N, S, 3)"""
    rigid = basis.ell[:, None, :] + np.cross(
        basis.omega[:, None, :], disc.surface_points[None, :, :]
    )
    return basis.trace_S0 - rigid


def assemble_mass(
    basis: GalerkinBasis,
    rho: DensityLike,
    geo: RigidGeometry,
    disc: FluidDiscretization,
) -> np.ndarray:
    """M_N = ((z_i, z_j)_𝓗) 以目前的密度計算"""
    return _require_finite("M_N", h_gram_matrix(basis, rho, geo, disc))


def assemble_dissipation(
    basis: GalerkinBasis,
    disc: FluidDiscretization,
    nu: float,
    alpha: float,
    nu_nodes: Optional[np.ndarray] = None,
    nu_surface: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    A_N = −2∫ν D(z_i):D(z_j) − 2α∮ν (z_i − z_{S,i})·(z_j − z_{S,j})

    Args:
        basis: Galerkin 基底
        disc: 流體離散
        nu: 常數黏度（未提供節點黏度時使用）
        alpha: Navier 滑移係數
        nu_nodes: 體積節點上的 ν(ρ) 取樣
        nu_surface: ∂S_0 節點上的 ν(ρ) 取樣

    Returns:
        對稱半負定 N×N 矩陣
    """
    strain = strain_rates(basis)
    gaps = slip_gaps(basis, disc)
    w_vol = disc.volume_weights * (nu if nu_nodes is None else nu_nodes)
    w_srf = disc.surface_weights * (nu if nu_surface is None else nu_surface)
    A = -2.0 * weighted_gram(strain, w_vol, strain) - 2.0 * alpha * weighted_gram(
        gaps, w_srf, gaps
    )
    return _require_finite("A_N", 0.5 * (A + A.T))


def assemble_forcing(
    basis: GalerkinBasis,
    disc: FluidDiscretization,
    flux: PropulsionFlux,
    t: float,
    nu: float,
    alpha: float,
    nu_surface: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    C_j = 2να ∮ w(t)·(z_j − z_{S,j}) dΓ

    Raises:
        FluxError: w 不是切向
    """
    check_tangential(flux, disc.surface_normals)
    w = flux.at(t)
    weights = disc.surface_weights * (nu if nu_surface is None else nu_surface)
    C = 2.0 * alpha * np.einsum("s,nsc,sc->n", weights, slip_gaps(basis, disc), w)
    return _require_finite("C", C)


def relative_velocity_nodes(
    basis: GalerkinBasis, v: np.ndarray, disc: FluidDiscretization
) -> np.ndarray:
    """體積節點上的 v − v_S（節點皆在 B_R 內，χ_R 為恆等）"""
    v = np.asarray(v, dtype=float)
    fluid = np.einsum("n,nmc->mc", v, basis.values)
    rigid = v @ basis.ell + np.cross(v @ basis.omega, disc.volume_points)
    return fluid - rigid


def convection_matrix(
    basis: GalerkinBasis,
    rho: DensityLike,
    v: np.ndarray,
    disc: FluidDiscretization,
) -> np.ndarray:
    """K_jk(v) = ∫ [(ρ(v − v_S)·∇) z_j]·z_k"""
    flow = _values(rho)[:, None] * relative_velocity_nodes(basis, v, disc)
    advected = np.einsum("nmcd,md->nmc", basis.gradients, flow, optimize=True)
    return _require_finite("K", weighted_gram(advected, disc.volume_weights, basis.values))


def gyroscopic_parts(
    basis: GalerkinBasis,
    rho: DensityLike,
    v: np.ndarray,
    disc: FluidDiscretization,
    geo: RigidGeometry,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    陀螺項的流體與剛體部分

    流體：−∫det(ρ r_v, z_k, z_j)；
    剛體：det(mℓ_{z_k}, r_v, ℓ_{z_j}) + det(J_0 r_v, r_{z_k}, r_{z_j})。

    Returns:
        (流體部分, 剛體部分)，皆為反對稱 N×N 矩陣
    """
    v = np.asarray(v, dtype=float)
    r_v = v @ basis.omega
    rotated = np.cross(r_v, basis.values)
    fluid = -weighted_gram(basis.values, disc.volume_weights * _values(rho), rotated)
    linear = geo.mass * basis.ell @ np.cross(basis.ell, r_v).T
    angular = basis.omega @ np.cross(geo.inertia @ r_v, basis.omega).T
    return _require_finite("G", fluid), _require_finite("G", linear + angular)


def gyroscopic_matrix(
    basis: GalerkinBasis,
    rho: DensityLike,
    v: np.ndarray,
    disc: FluidDiscretization,
    geo: RigidGeometry,
) -> np.ndarray:
    """G(v) = 流體部分 + 剛體部分；反對稱，因此 αᵀGα = 0"""
    fluid, body = gyroscopic_parts(basis, rho, v, disc, geo)
    return fluid + body


def assemble_nonlinear(
    basis: GalerkinBasis,
    rho: DensityLike,
    u: np.ndarray,
    v: np.ndarray,
    disc: FluidDiscretization,
    geo: RigidGeometry,
    form: str = "advective",
) -> np.ndarray:
    """
    非線性項 B_N(u, v)

    advective：B_j = −∫[(ρ(v−v_S)·∇)v]·z_j − ∫det(ρ r_u, v, z_j)
    + det(mℓ_u, r_v, ℓ_{z_j}) + det(J_0 r_u, r_v, r_{z_j})。
    skew：時間推進所用的反對稱形式 [½(K − Kᵀ)(v) + G(v)] u。
    兩者在 u = v 且密度滿足連續方程時相差 ½∫∂_tρ u·z_j。

    Args:
        basis: Galerkin 基底
        rho: 密度
        u, v: 係數向量
        disc: 流體離散
        geo: 剛體幾何
        form: advective 或 skew

    Returns:
        長度 N 的向量
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if form == "skew":
        K = convection_matrix(basis, rho, v, disc)
        G = gyroscopic_matrix(basis, rho, v, disc, geo)
        return _require_finite("B_N", (0.5 * (K - K.T) + G) @ u)
    if form != "advective":
        raise ValueError(f"unknown nonlinear form: {form}")

    rho_values = _values(rho)
    K = convection_matrix(basis, rho_values, v, disc)
    r_u = u @ basis.omega
    v_field = np.einsum("n,nmc->mc", v, basis.values)
    spin = disc.volume_weights * rho_values
    coriolis = np.einsum("m,nmc,mc->n", spin, basis.values, np.cross(r_u, v_field))
    linear = geo.mass * basis.ell @ np.cross(u @ basis.ell, v @ basis.omega)
    angular = basis.omega @ np.cross(geo.inertia @ r_u, v @ basis.omega)
    return _require_finite("B_N", -K.T @ v - coriolis + linear + angular)


def _factor(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(matrix)):
        raise SolverError("mass matrix singular: non-finite system matrix")
    lu, piv = linalg.lu_factor(matrix, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-14 * max(diag.max(), 1.0):
        raise SolverError("mass matrix singular: reduce dt or check the density")
    return lu, piv


@dataclass(frozen=True)
class StepEnergy:
    """單一時間步的能量量與增量"""

    t: float
    e_fluid: float
    e_body: float
    d_visc: float = 0.0
    d_slip: float = 0.0
    w_budget: float = 0.0


def energy_ledger_step(records: List[LedgerRecord], step: StepEnergy) -> LedgerRecord:
    """
    將一步的能量量累加進帳本紀錄並計算不等式餘量

    slack = E(0) + W − E − D_visc − D_slip

    Args:
        records: 先前的紀錄，新紀錄就地附加
        step: 本步的動能與增量

    Returns:
        新紀錄
    """
    energy = step.e_fluid + step.e_body
    if not records:
        record = LedgerRecord(step.t, step.e_fluid, step.e_body, 0.0, 0.0, 0.0, 0.0)
    else:
        previous = records[-1]
        d_visc = previous.d_visc + step.d_visc
        d_slip = previous.d_slip + step.d_slip
        w_budget = previous.w_budget + step.w_budget
        slack = records[0].energy + w_budget - energy - d_visc - d_slip
        record = LedgerRecord(
            step.t, step.e_fluid, step.e_body, d_visc, d_slip, w_budget, slack
        )
    records.append(record)
    return record


@dataclass
class InvariantMonitor:
    """檢查硬性不變量；hard 模式中止，soft 模式記錄並警告"""

    hard: bool = False
    slack_tolerance: float = 1e-8
    so3_tolerance: float = 1e-9
    breaches: List[Dict[str, float]] = field(default_factory=list)

    def check(self, step: int, t: float, terms: Dict[str, float]) -> None:
        failed = {k: v for k, v in terms.items() if not np.isfinite(v) or v > 0.0}
        if not failed:
            return
        if self.hard:
            raise InvariantViolation(step, failed)
        logger.warning(
            "invariant breach at step %d (t=%.4g): %s",
            step,
            t,
            ", ".join(f"{k}={v:.3e}" for k, v in failed.items()),
        )
        self.breaches.append({"step": float(step), "t": t, **failed})


class GalerkinSystem:
    """
    耦合的 Galerkin 動力系統

    每一步以能量一致的隱式中點形式求解
    ½(M¹a − M⁰b) + ½M̄(a − b) = dt[(A + ½(K − Kᵀ) + G)(v_mid)·α_mid + C(t_mid)]，
    其中 a、b 為新舊係數，M̄ 為兩端質量矩陣的平均。
    """

    def __init__(
        self,
        basis: GalerkinBasis,
        disc: FluidDiscretization,
        geo: RigidGeometry,
        flux: PropulsionFlux,
        params: Optional[GalerkinParameters] = None,
    ) -> None:
        params = params or GalerkinParameters()
        if params.nu <= 0.0 or params.alpha < 0.0:
            raise AssemblyError("viscosity must be positive and slip coefficient nonnegative")
        if params.variable_viscosity and not 0.0 < params.nu1 <= params.nu2:
            raise AssemblyError("viscosity bounds violated: require 0 < nu1 <= nu2")
        self.basis = basis
        self.disc = disc
        self.geo = geo
        self.flux = flux
        self.params = params
        self.interpolator = LatticeInterpolator(disc)

        self.strain_gram = weighted_gram(
            strain_rates(basis), disc.volume_weights, strain_rates(basis)
        )
        gaps = slip_gaps(basis, disc)
        self.slip_gram = weighted_gram(gaps, disc.surface_weights, gaps)
        self.body_gram = (
            geo.mass * basis.ell @ basis.ell.T + basis.omega @ geo.inertia @ basis.omega.T
        )
        self._constant_A = (
            None
            if params.variable_viscosity
            else assemble_dissipation(basis, disc, params.nu, params.alpha)
        )
        self.body_radius = disc.body.bounding_radius

    # --- 組裝 ---

    def mass(self, rho: DensityLike) -> np.ndarray:
        return assemble_mass(self.basis, rho, self.geo, self.disc)

    def _surface_density(self, rho: DensityLike) -> np.ndarray:
        return self.interpolator(_values(rho), self.disc.surface_points)

    def dissipation(self, rho: Optional[DensityLike] = None) -> np.ndarray:
        if self._constant_A is not None:
            return self._constant_A
        if rho is None:
            raise AssemblyError("variable viscosity requires a density")
        p = self.params
        nu_nodes = viscosity_of_density(_values(rho), p.nu1, p.nu2)
        nu_surface = viscosity_of_density(self._surface_density(rho), p.nu1, p.nu2)
        return assemble_dissipation(
            self.basis, self.disc, p.nu, p.alpha, nu_nodes, nu_surface
        )

    def forcing(self, t: float, rho: Optional[DensityLike] = None) -> np.ndarray:
        p = self.params
        nu_surface = None
        if p.variable_viscosity:
            if rho is None:
                raise AssemblyError("variable viscosity requires a density")
            nu_surface = viscosity_of_density(self._surface_density(rho), p.nu1, p.nu2)
        return assemble_forcing(
            self.basis, self.disc, self.flux, t, p.nu, p.alpha, nu_surface
        )

    def fluid_mass(self, rho: DensityLike) -> np.ndarray:
        w = self.disc.volume_weights * _values(rho)
        return weighted_gram(self.basis.values, w, self.basis.values)

    # --- 狀態 ---

    def make_state(
        self,
        alpha: np.ndarray,
        rho: DensityField,
        t: float = 0.0,
        pose: Optional[BodyPose] = None,
    ) -> SimState:
        """由係數建立狀態，剛體速度取自基底的剛體部分"""
        alpha = np.asarray(alpha, dtype=float)
        return SimState(
            alpha=alpha,
            density=rho,
            ell=alpha @ self.basis.ell,
            omega=alpha @ self.basis.omega,
            t=t,
            pose=pose or BodyPose.identity(),
        )

    def energies(self, alpha: np.ndarray, rho: DensityLike) -> Tuple[float, float]:
        """(½∫ρ|u|², ½m|ℓ|² + ½J_0 r·r)"""
        alpha = np.asarray(alpha, dtype=float)
        fluid = 0.5 * float(alpha @ self.fluid_mass(rho) @ alpha)
        body = 0.5 * float(alpha @ self.body_gram @ alpha)
        return fluid, body

    # --- 固定點映射 ---

    def transport(
        self, rho: DensityField, t0: float, t1: float, a0: np.ndarray, a1: np.ndarray
    ) -> DensityField:
        """以 a0 → a1 線性內插的相對速度將 rho 從 t0 推進到 t1"""
        rel = GalerkinRelativeVelocity(self.basis, [t0, t1], [a0, a1], self.disc.R)
        dt_sub = (t1 - t0) / self.params.dt_sub_factor
        return advect_density(
            rho, rel, t1, self.disc, dt_sub, t_start=t0, interpolator=self.interpolator
        )

    def linear_step(
        self,
        b: np.ndarray,
        rho0: DensityField,
        rho1: DensityField,
        v_mid: np.ndarray,
        t0: float,
        dt: float,
    ) -> np.ndarray:
        """
        給定兩端密度與凍結的 v_mid，求解線性步得到新係數

        Raises:
            SolverError: 系統矩陣奇異
        """
        M0 = self.mass(rho0)
        M1 = self.mass(rho1)
        rho_mid = 0.5 * (rho0.values + rho1.values)
        Mbar = 0.5 * (M0 + M1)
        L = (
            self.dissipation(rho_mid)
            + self._skew_convection(rho_mid, v_mid)
            + gyroscopic_matrix(self.basis, rho_mid, v_mid, self.disc, self.geo)
        )
        C = self.forcing(t0 + 0.5 * dt, rho_mid)
        P = 0.5 * (M1 + Mbar) - 0.5 * dt * L
        rhs = (0.5 * (M0 + Mbar) + 0.5 * dt * L) @ b + dt * C
        return linalg.lu_solve(_factor(P), rhs)

    def step_terms(
        self,
        before: SimState,
        after: SimState,
    ) -> Dict[str, np.ndarray]:
        """
        已完成一步的離散方程各項（移到同一側），總和為該步殘差

        Returns:
            momentum、convection、fluid_rotation、body_rotation、dissipation 五項
        """
        b, a = before.alpha, after.alpha
        dt = after.t - before.t
        M0 = self.mass(before.density)
        M1 = self.mass(after.density)
        Mbar = 0.5 * (M0 + M1)
        rho_mid = 0.5 * (before.density.values + after.density.values)
        mid = 0.5 * (a + b)
        fluid, body = gyroscopic_parts(self.basis, rho_mid, mid, self.disc, self.geo)
        A = self.dissipation(rho_mid)
        C = self.forcing(before.t + 0.5 * dt, rho_mid)
        return {
            "momentum": 0.5 * (M1 @ a - M0 @ b) + 0.5 * Mbar @ (a - b),
            "convection": -dt * self._skew_convection(rho_mid, mid) @ mid,
            "fluid_rotation": -dt * fluid @ mid,
            "body_rotation": -dt * body @ mid,
            "dissipation": -dt * (A @ mid + C),
        }

    def _skew_convection(self, rho: DensityLike, v: np.ndarray) -> np.ndarray:
        K = convection_matrix(self.basis, rho, v, self.disc)
        return 0.5 * (K - K.T)

    def fixed_point_map(
        self,
        v_traj: np.ndarray,
        rho0: DensityField,
        times: np.ndarray,
        alpha0: np.ndarray,
    ) -> Tuple[np.ndarray, List[DensityField]]:
        """
        𝒩(v)：以 v 推進密度，再解以 v 凍結非線性項的線性方程

        Args:
            v_traj: 時間節點上的 v 係數 (K+1, N)
            rho0: times[0] 的密度
            times: 時間節點 (K+1,)
            alpha0: 初始係數

        Returns:
            (u 係數軌跡 (K+1, N), 各時間節點的密度)
        """
        v_traj = np.atleast_2d(np.asarray(v_traj, dtype=float))
        times = np.asarray(times, dtype=float)
        u = [np.asarray(alpha0, dtype=float)]
        densities = [rho0]
        for n in range(len(times) - 1):
            t0, t1 = float(times[n]), float(times[n + 1])
            rho1 = self.transport(densities[-1], t0, t1, v_traj[n], v_traj[n + 1])
            v_mid = 0.5 * (v_traj[n] + v_traj[n + 1])
            u.append(self.linear_step(u[-1], densities[-1], rho1, v_mid, t0, t1 - t0))
            densities.append(rho1)
        return np.array(u), densities

    def picard_solve(self, state: SimState, dt: float) -> Tuple[SimState, int, float]:
        """
        以 v⁰ = α^n 迭代 𝒩 直到 ‖α^{k+1} − α^k‖_∞ ≤ tol

        Returns:
            (新狀態, 迭代次數, 最後增量)

        Raises:
            SolverError: 達到迭代上限仍未收斂
        """
        p = self.params
        b = np.asarray(state.alpha, dtype=float)
        t0, t1 = state.t, state.t + dt
        v = b.copy()
        rho1: Optional[DensityField] = None
        increment = np.inf
        for k in range(1, p.picard_max_iter + 1):
            if rho1 is None or not p.freeze_density:
                rho1 = self.transport(state.density, t0, t1, b, v)
            a = self.linear_step(b, state.density, rho1, 0.5 * (b + v), t0, dt)
            increment = float(np.max(np.abs(a - v))) if a.size else 0.0
            logger.debug("picard t=%.4g iteration %d increment %.3e", t1, k, increment)
            v = a
            if increment <= p.picard_tol:
                mid = 0.5 * (b + a)
                pose = integrate_pose(
                    state.pose, mid @ self.basis.ell, mid @ self.basis.omega, dt
                )
                return self.make_state(a, rho1, t1, pose), k, increment
        raise SolverError(
            f"picard stalled at t={t1:.6g}: increment {increment:.3e} after "
            f"{p.picard_max_iter} iterations; reduce time.dt"
        )

    # --- 時間積分 ---

    def step_energy(
        self, before: SimState, after: SimState, dt: float
    ) -> StepEnergy:
        """由中點速度計算本步的耗散與預算增量"""
        p = self.params
        mid = 0.5 * (before.alpha + after.alpha)
        t_mid = before.t + 0.5 * dt
        d_visc = dt * 2.0 * p.dissipation_nu * float(mid @ self.strain_gram @ mid)
        d_slip = dt * p.dissipation_nu * p.alpha * float(mid @ self.slip_gram @ mid)
        w_budget = (
            dt
            * p.budget_nu
            * p.alpha
            * flux_surface_norm(self.flux, self.disc.surface_weights, t_mid)
        )
        e_fluid, e_body = self.energies(after.alpha, after.density)
        return StepEnergy(after.t, e_fluid, e_body, d_visc, d_slip, w_budget)

    def diagnostics(
        self, step: int, before: SimState, after: SimState, iterations: int, increment: float
    ) -> StepDiagnostics:
        dt = after.t - before.t
        mid = 0.5 * (before.alpha + after.alpha)
        rho_mid = 0.5 * (before.density.values + after.density.values)
        M = self.mass(after.density)
        A = self.dissipation(rho_mid)
        G = gyroscopic_matrix(self.basis, rho_mid, mid, self.disc, self.geo)
        gyro = abs(float(mid @ G @ mid))
        return StepDiagnostics(
            step=step,
            t=after.t,
            picard_iterations=iterations,
            picard_increment=increment,
            min_eig_mass=float(linalg.eigvalsh(M)[0]),
            max_eig_dissipation=float(linalg.eigvalsh(A)[-1]),
            gyroscopic=gyro,
            trilinear_defect=self.trilinear_defect(before, after, dt),
            density_min=after.density.minimum,
            density_max=after.density.maximum,
            mass=mass_integral(after.density, self.disc),
            so3_defect=so3_defect(after.pose.Q),
        )

    def trilinear_defect(self, before: SimState, after: SimState, dt: float) -> float:
        """
        |∫[(ρ(u−u_S)·∇)u]·u − ½∫∂_tρ|u|²| 相對於 ∫ρ|u−u_S||∇u||u|

        ∂_tρ 以相鄰密度快照差分。
        """
        mid = 0.5 * (before.alpha + after.alpha)
        rho_mid = 0.5 * (before.density.values + after.density.values)
        rel = relative_velocity_nodes(self.basis, mid, self.disc)
        u = np.einsum("n,nmc->mc", mid, self.basis.values)
        grad = np.einsum("n,nmcd->mcd", mid, self.basis.gradients)
        w = self.disc.volume_weights
        convect = float(w @ (rho_mid * np.einsum("mcd,md,mc->m", grad, rel, u)))
        drho = (after.density.values - before.density.values) / dt
        storage = 0.5 * float(w @ (drho * np.einsum("mc,mc->m", u, u)))
        scale = float(
            w
            @ (
                rho_mid
                * np.linalg.norm(rel, axis=1)
                * np.linalg.norm(grad, axis=(1, 2))
                * np.linalg.norm(u, axis=1)
            )
        )
        if scale <= 1e-300:
            return 0.0
        return abs(convect - storage) / scale

    def time_integrate(
        self,
        initial: SimState,
        T: float,
        dt: float,
        monitor: Optional[InvariantMonitor] = None,
        on_step: Optional[Callable[[int, SimState], None]] = None,
    ) -> SimulationResult:
        """
        由初始狀態積分到時間 T

        Args:
            initial: t = 0 的狀態
            T: 終止時間
            dt: 時間步長
            monitor: 不變量監控器（預設 soft）
            on_step: 每步結束後的回呼 (步數, 狀態)

        Returns:
            SimulationResult
        """
        if dt <= 0.0 or T < 0.0:
            raise SolverError("time step must be positive and horizon nonnegative")
        monitor = monitor or InvariantMonitor()
        steps = int(round(T / dt))
        p = self.params
        lo, hi = initial.density.bounds
        roundoff = DENSITY_ROUNDOFF * max(1.0, abs(lo), abs(hi))

        states = [initial]
        e_fluid, e_body = self.energies(initial.alpha, initial.density)
        records: List[LedgerRecord] = []
        energy_ledger_step(records, StepEnergy(initial.t, e_fluid, e_body))
        initial_energy = records[0].energy
        diagnostics: List[StepDiagnostics] = []
        h = self.disc.h_grid

        logger.info("time integration: %d steps of dt=%.3g", steps, dt)
        for n in range(1, steps + 1):
            before = states[-1]
            after, iterations, increment = self.picard_solve(before, dt)
            record = energy_ledger_step(records, self.step_energy(before, after, dt))
            diag = self.diagnostics(n, before, after, iterations, increment)
            diagnostics.append(diag)
            states.append(after)

            speed = float(
                np.abs(relative_velocity_nodes(self.basis, after.alpha, self.disc)).max(
                    initial=0.0
                )
            )
            if speed * dt > 0.5 * h:
                logger.warning(
                    "CFL: max|u - u_S|·dt = %.3g exceeds half the lattice spacing", speed * dt
                )
            body_clearance(after.pose, self.body_radius, self.disc.R)

            terms = {
                "energy_slack": -record.slack - monitor.slack_tolerance * (1.0 + initial_energy),
                "density_below_min": lo - diag.density_min - roundoff,
                "density_above_max": diag.density_max - hi - roundoff,
                "mass_matrix_spd": -diag.min_eig_mass,
                "dissipation_nsd": diag.max_eig_dissipation - 1e-10,
                "so3_defect": diag.so3_defect - monitor.so3_tolerance,
            }
            if p.positive_density:
                terms["density_not_positive"] = -diag.density_min
            monitor.check(n, after.t, terms)
            if on_step is not None:
                on_step(n, after)

        return SimulationResult(
            states=states,
            ledger=EnergyLedger(tuple(records)),
            diagnostics=diagnostics,
            dt=dt,
            breaches=list(monitor.breaches),
        )
