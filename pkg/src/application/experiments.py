"""
實驗驅動 - 建立情境、執行模擬、寫出結果，以及區域與細化掃描
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.application.basis import (
    basis_invariant_defects,
    build_basis,
    project_initial_velocity,
)
from src.application.geometry import build_discretization, build_rigid_geometry
from src.application.galerkin import (
    DENSITY_ROUNDOFF,
    GalerkinParameters,
    GalerkinSystem,
    InvariantMonitor,
    relative_velocity_nodes,
)
from src.application.propulsion import build_propulsion
from src.application.report_generator import ReportGenerator
from src.application.transport import (
    RENORMALIZATIONS,
    GalerkinRelativeVelocity,
    GaussianBumpTest,
    density_extrema,
    density_profile,
    initial_density,
    mass_integral,
    renormalized_residuals,
    test_function_norm,
)
from src.application.verify import (
    TimePolynomial,
    VerificationReport,
    lagrange_identity_check,
    momentum_residual,
    recover_pressure,
    relative_weak_residual,
    slip_reduction_check,
    snapshot_terms,
    weak_form_vectors,
    weak_residual_vector,
)
from src.domain.errors import SimulationError
from src.domain.models import (
    FluidDiscretization,
    GalerkinBasis,
    RigidGeometry,
    SimState,
    SimulationResult,
    VelocitySample,
)
from src.domain.shapes import Sphere
from src.infrastructure.config import ScenarioConfig, load_config, to_flat_dict
from src.infrastructure.writers import (
    NpzBasisCache,
    write_density_snapshot,
    write_ledger_csv,
    write_sweep_csv,
    write_trajectory_csv,
)

logger = logging.getLogger(__name__)

GYROSCOPIC_TOLERANCE = 1e-10
SO3_TOLERANCE = 1e-9
MASS_TOLERANCE = 1e-4
CUMULATIVE_SLACK_TOLERANCE = 1e-6
LAGRANGE_TOLERANCE = 1e-10
TRILINEAR_TOLERANCE = 1e-3
RENORMALIZED_TOLERANCE = 1e-4
RENORMALIZED_SAMPLES = 5

ConfigLike = Union[ScenarioConfig, str]


@dataclass
class Scenario:
    """建好的一次模擬：幾何、基底、系統與初始狀態"""

    config: ScenarioConfig
    geo: RigidGeometry
    disc: FluidDiscretization
    basis: GalerkinBasis
    system: GalerkinSystem
    initial: SimState
    projection_error: float


@dataclass
class RunOutcome:
    """run_scenario 的結果"""

    status: int
    out_dir: str
    result: SimulationResult
    report: VerificationReport
    files: Dict[str, str] = field(default_factory=dict)


def _resolve(config: ConfigLike) -> ScenarioConfig:
    return load_config(config) if isinstance(config, str) else config


def build_shape(config: ScenarioConfig) -> Sphere:
    """依 body.* 建立剛體形狀"""
    return Sphere(config.body.radius)


def initial_velocity_sample(
    config: ScenarioConfig, disc: FluidDiscretization
) -> VelocitySample:
    """
    zero 或 vortex 初始速度在節點上的取樣

    vortex 為 amplitude·(−y₂, y₁, 0)·exp(−|y|²/R²)。
    """
    ini = config.initial
    pts = disc.volume_points
    if ini.velocity == "vortex":
        swirl = np.stack([-pts[:, 1], pts[:, 0], np.zeros(len(pts))], axis=1)
        decay = np.exp(-np.einsum("mc,mc->m", pts, pts) / disc.R**2)
        values = ini.amplitude * swirl * decay[:, None]
    else:
        values = np.zeros_like(pts)
    return VelocitySample(values, np.array(ini.ell), np.array(ini.omega))


def initial_coefficients(
    config: ScenarioConfig,
    basis: GalerkinBasis,
    disc: FluidDiscretization,
    geo: RigidGeometry,
    rho: np.ndarray,
    seed: int = 0,
) -> Tuple[np.ndarray, float]:
    """
    初始係數與投影誤差

    random_modes 直接以種子抽樣係數 amplitude·N(0, 1)/√N。
    """
    if config.initial.velocity == "random_modes":
        rng = np.random.default_rng(seed)
        coeffs = config.initial.amplitude * rng.standard_normal(basis.N) / np.sqrt(basis.N)
        return coeffs, 0.0
    sample = initial_velocity_sample(config, disc)
    return project_initial_velocity(basis, disc, geo, rho, sample)


def galerkin_parameters(config: ScenarioConfig) -> GalerkinParameters:
    return GalerkinParameters(
        nu=config.fluid.nu,
        alpha=config.coupling.alpha,
        variable_viscosity=config.fluid.variable_viscosity,
        nu1=config.fluid.nu1,
        nu2=config.fluid.nu2,
        picard_tol=config.picard.tol,
        picard_max_iter=config.picard.max_iter,
        freeze_density=config.picard.freeze_density,
        dt_sub_factor=config.transport.dt_sub_factor,
        positive_density=config.mode.positive_density,
    )


def build_scenario(config: ConfigLike, seed: int = 0) -> Scenario:
    """
    由設定建立幾何、離散、基底、推進通量與初始狀態

    Args:
        config: ScenarioConfig 或設定檔路徑
        seed: random_modes 的亂數種子

    Returns:
        Scenario
    """
    config = _resolve(config)
    shape = build_shape(config)
    geo = build_rigid_geometry(shape, config.body.density, config.body.c1, config.body.c2)
    disc = build_discretization(
        shape, config.domain.R, config.domain.resolution, config.domain.surface_subdivisions
    )

    ini = config.initial
    profile = density_profile(
        ini.density,
        ini.density_low,
        ini.density_high,
        ini.layer_radius,
        ini.layer_width,
        config.domain.R,
    )
    rho0 = initial_density(disc, profile, config.eps_shift, config.mode.positive_density)

    cache = NpzBasisCache(config.basis.cache_dir) if config.basis.cache_dir else None
    basis = build_basis(
        disc,
        geo,
        config.basis.N,
        config.basis.potential_order,
        density=rho0.values,
        cache=cache,
    )

    flux = build_propulsion(
        disc,
        config.propulsion.family,
        config.propulsion.amplitude,
        config.propulsion.profile,
        config.propulsion.ramp_time,
        config.propulsion.period,
    )
    system = GalerkinSystem(basis, disc, geo, flux, galerkin_parameters(config))
    alpha0, error = initial_coefficients(config, basis, disc, geo, rho0.values, seed)
    return Scenario(config, geo, disc, basis, system, system.make_state(alpha0, rho0), error)


def simulate(
    scenario: Scenario,
    hard: bool = False,
    on_step: Optional[Callable[[int, SimState], None]] = None,
) -> SimulationResult:
    """以情境的時間設定積分"""
    monitor = InvariantMonitor(hard=hard)
    t = scenario.config.time
    return scenario.system.time_integrate(scenario.initial, t.T, t.dt, monitor, on_step)


def summary_checks(scenario: Scenario, result: SimulationResult) -> VerificationReport:
    """能量不等式、質量守恆、最大值原理、陀螺中性與 SO(3) 的摘要檢查"""
    report = VerificationReport()
    ledger = result.ledger
    e0 = ledger.initial_energy
    slack = ledger.column("slack")
    energy = ledger.column("e_fluid") + ledger.column("e_body")
    report.add(
        "energy_slack_final",
        max(-float(slack[-1]), 0.0) / (1.0 + e0),
        CUMULATIVE_SLACK_TOLERANCE,
        "cumulative energy inequality",
    )
    report.add(
        "energy_slack_min",
        max(-float(slack.min()), 0.0) / (1.0 + e0),
        1e-8,
        "per-step one-sided bound",
    )

    diags = result.diagnostics
    initial = scenario.initial.density
    lo, hi = initial.bounds
    m0 = mass_integral(initial, scenario.disc)
    if diags:
        masses = np.array([d.mass for d in diags])
        drift = float(np.abs(masses - m0).max())
        report.add("mass_drift", drift / m0 if m0 > 0.0 else drift, MASS_TOLERANCE)
        breach = max(
            max(lo - d.density_min for d in diags), max(d.density_max - hi for d in diags)
        )
        report.add(
            "max_principle",
            max(breach, 0.0),
            DENSITY_ROUNDOFF * max(1.0, abs(lo), abs(hi)),
        )
        scale = 1.0 + float(energy.max())
        report.add(
            "gyroscopic_neutrality",
            max(d.gyroscopic for d in diags),
            GYROSCOPIC_TOLERANCE * scale,
        )
        report.add("so3_defect", max(d.so3_defect for d in diags), SO3_TOLERANCE)
        report.report("trilinear_defect_max", max(d.trilinear_defect for d in diags))
        report.report("picard_iterations_max", max(d.picard_iterations for d in diags))

    # 報告中的密度皆已扣除正性平移
    lo_rho, hi_rho = density_extrema(result.final.density)
    report.report("density_min", lo_rho, f"shift {initial.shift:g} removed")
    report.report("density_max", hi_rho, f"shift {initial.shift:g} removed")
    report.report("mass_initial", m0)
    report.report("mass_final", mass_integral(result.final.density, scenario.disc))

    for name, value in basis_invariant_defects(scenario.basis, scenario.disc).items():
        report.report(f"basis_{name}", value)
    report.report("projection_error", scenario.projection_error)
    report.report("breaches", len(result.breaches))
    return report


def _random_bumps(
    disc: FluidDiscretization, rng: np.random.Generator, count: int, sigma: float
) -> List[GaussianBumpTest]:
    """中心距 ∂F_0 至少 3σ 的高斯測試函數"""
    bumps: List[GaussianBumpTest] = []
    for index in rng.permutation(disc.n_nodes):
        c0, c1, c2, c3 = (float(c) for c in rng.uniform(-1.0, 1.0, size=4))
        bump = GaussianBumpTest(disc.volume_points[index], sigma, (c0, c1, c2, c3))
        if bump.support_margin(disc) >= 3.0:
            bumps.append(bump)
        if len(bumps) == count:
            break
    return bumps


def verification_checks(
    scenario: Scenario,
    result: SimulationResult,
    report: VerificationReport,
    seed: int = 0,
) -> VerificationReport:
    """
    在摘要之外加入驗證核心：弱形式、恆等式、重整化與壓力回復

    快照上的各項只求值一次，供所有時間測試函數共用；
    三線性恆等式直接取每步診斷中已算好的值。

    Args:
        scenario: 情境
        result: 模擬結果
        report: 要附加的報告
        seed: 隨機測試的種子

    Returns:
        同一份 report
    """
    system, disc, basis = scenario.system, scenario.disc, scenario.basis
    rng = np.random.default_rng(seed)
    dt = result.dt
    weak_tolerance = 10.0 * (1e-8 + dt**2)

    # 每個基底函數都當成測試函數
    snapshots = snapshot_terms(system, result)
    for label, psi in (
        ("constant", TimePolynomial()),
        ("cubic", TimePolynomial(tuple(rng.uniform(-1.0, 1.0, size=4)))),
    ):
        vectors = weak_form_vectors(system, result, psi, snapshots=snapshots)
        report.add(
            f"weak_residual_{label}",
            relative_weak_residual(vectors),
            weak_tolerance,
            "snapshot trapezoid rule, relative to the term magnitudes",
        )
    step = np.abs(weak_residual_vector(system, result, rule="midpoint"))
    report.add(
        "step_consistency",
        float(step.max(initial=0.0)),
        weak_tolerance,
        "discrete equations re-evaluated on the stored steps",
    )
    gap = np.abs(weak_residual_vector(system, result, rule="conservative", snapshots=snapshots))
    report.report(
        "conservative_form_gap",
        float(gap.max(initial=0.0)),
        "lattice quadrature defect of the continuity equation, fixed by the grid",
    )

    vectors = rng.standard_normal((4, 1000, 3))
    report.add(
        "lagrange_identity",
        lagrange_identity_check(*vectors),
        LAGRANGE_TOLERANCE,
    )

    final = result.final
    xi = rng.standard_normal(basis.N)
    pts = disc.surface_points
    slip = slip_reduction_check(
        np.einsum("n,nsc->sc", final.alpha, basis.trace_S0),
        final.ell + np.cross(final.omega, pts),
        system.flux.at(final.t),
        np.einsum("n,nsc->sc", xi, basis.trace_S0),
        xi @ basis.ell + np.cross(xi @ basis.omega, pts),
        disc.surface_normals,
    )
    report.add(
        "slip_reduction",
        float(np.max(slip.residual - slip.bound, initial=0.0)),
        0.0,
        f"{len(slip.violating_nodes)} nodes with normal components",
    )

    if len(result.states) > 1:
        report.add(
            "trilinear_identity",
            max(d.trilinear_defect for d in result.diagnostics),
            TRILINEAR_TOLERANCE,
        )

        rel = GalerkinRelativeVelocity(basis, result.times, result.coefficients, disc.R)
        states = result.states
        densities = [s.density for s in states]
        velocities = [
            relative_velocity_nodes(basis, s.alpha, disc) for s in states
        ]
        worst = {name: 0.0 for name in RENORMALIZATIONS}
        for bump in _random_bumps(disc, rng, RENORMALIZED_SAMPLES, sigma=0.4):
            norm = test_function_norm(bump, disc, result.times)
            if norm <= 0.0:
                continue
            values = renormalized_residuals(
                RENORMALIZATIONS, densities, rel, bump, disc, velocities
            )
            for name, value in values.items():
                worst[name] = max(worst[name], value / norm)
        for name, value in worst.items():
            report.add(f"renormalized_{name}", value, RENORMALIZED_TOLERANCE)

        pressure = recover_pressure(
            disc, momentum_residual(system, result, len(result.states) - 1)
        )
        report.report(
            "pressure_curl_defect",
            pressure.defect,
            "relative misfit of the edge-wise gradient fit; first-order stencil",
        )
    return report


def _ledger_rows(result: SimulationResult, limit: int = 20) -> List[Dict[str, float]]:
    records = result.ledger.records
    stride = max(1, len(records) // limit)
    picked = list(records[::stride])
    if picked[-1] is not records[-1]:
        picked.append(records[-1])
    return [
        {
            "t": r.t,
            "E": r.energy,
            "D_visc": r.d_visc,
            "D_slip": r.d_slip,
            "W_budget": r.w_budget,
            "slack": r.slack,
        }
        for r in picked
    ]


def run_scenario(
    config: ConfigLike,
    out_dir: str,
    hard: bool = False,
    seed: int = 0,
    verify: bool = False,
    title: str = "scenario",
) -> RunOutcome:
    """
    執行一個情境並寫出所有輸出

    Args:
        config: ScenarioConfig 或設定檔路徑
        out_dir: 輸出目錄
        hard: 硬性不變量模式（破壞時拋出 InvariantViolation）
        seed: 亂數種子
        verify: 是否加入完整驗證核心
        title: 報告標題

    Returns:
        RunOutcome；status 為 0 表示所有不變量成立
    """
    scenario = build_scenario(config, seed)
    os.makedirs(out_dir, exist_ok=True)
    files: Dict[str, str] = {}
    every = scenario.config.output.snapshot_every

    def snapshot(step: int, state: SimState) -> None:
        if every and step % every == 0:
            path = os.path.join(out_dir, f"density_{step:05d}.npz")
            write_density_snapshot(path, scenario.disc, state.density)
            files[f"density_{step:05d}"] = path

    result = simulate(scenario, hard, snapshot)

    files["trajectory"] = os.path.join(out_dir, "trajectory.csv")
    write_trajectory_csv(files["trajectory"], result.states)
    files["ledger"] = os.path.join(out_dir, "ledger.csv")
    write_ledger_csv(files["ledger"], result.ledger)
    files["density_final"] = os.path.join(out_dir, "density_final.npz")
    write_density_snapshot(files["density_final"], scenario.disc, result.final.density)

    report = summary_checks(scenario, result)
    if verify:
        verification_checks(scenario, result, report, seed)

    status = 0 if result.hard_invariants_held else 1
    final = result.final
    summary = {
        "steps": len(result.states) - 1,
        "dt": result.dt,
        "basis_size": scenario.basis.N,
        "fluid_nodes": scenario.disc.n_nodes,
        "initial_energy": result.ledger.initial_energy,
        "final_energy": result.ledger.last.energy if result.ledger.last else 0.0,
        "final_slack": result.ledger.last.slack if result.ledger.last else 0.0,
        "final_speed": float(np.linalg.norm(final.ell)),
        "final_spin": float(np.linalg.norm(final.omega)),
        "candidate_condition": scenario.basis.candidate_condition,
        "exit_status": status,
    }
    files.update(
        ReportGenerator().generate(
            out_dir,
            title,
            report,
            summary,
            to_flat_dict(scenario.config),
            _ledger_rows(result),
        )
    )
    logger.info("run finished with status %d, outputs in %s", status, out_dir)
    return RunOutcome(status, out_dir, result, report, files)


@dataclass
class SweepEntry:
    """掃描中單次執行的摘要（可跨行程傳遞）"""

    R: float
    N: int
    dt: float
    times: np.ndarray
    ell: np.ndarray
    omega: np.ndarray
    energy: np.ndarray
    min_slack: float
    projection_error: float
    weak_residual: float


def _sweep_entry(config: ScenarioConfig, seed: int) -> SweepEntry:
    """執行一次並只保留掃描需要的資料"""
    scenario = build_scenario(config, seed)
    result = simulate(scenario)
    states = result.states
    weak = relative_weak_residual(weak_form_vectors(scenario.system, result, TimePolynomial()))
    ledger = result.ledger
    return SweepEntry(
        R=config.domain.R,
        N=scenario.basis.N,
        dt=result.dt,
        times=result.times,
        ell=np.array([s.ell for s in states]),
        omega=np.array([s.omega for s in states]),
        energy=ledger.column("e_fluid") + ledger.column("e_body"),
        min_slack=float(ledger.column("slack").min()),
        projection_error=scenario.projection_error,
        weak_residual=weak,
    )


def trajectory_difference(a: SweepEntry, b: SweepEntry) -> float:
    """在較粗的時間格上比較 (ℓ, r) 軌跡的最大差"""
    coarse, fine = (a, b) if len(a.times) <= len(b.times) else (b, a)
    diff = 0.0
    for name in ("ell", "omega"):
        values = getattr(fine, name)
        resampled = np.stack(
            [np.interp(coarse.times, fine.times, values[:, c]) for c in range(3)], axis=1
        )
        gap = np.linalg.norm(getattr(coarse, name) - resampled, axis=1)
        diff = max(diff, float(gap.max(initial=0.0)))
    return diff


def _run_entries(
    configs: Sequence[ScenarioConfig],
    labels: Sequence[str],
    seed: int,
    workers: int,
) -> List[SweepEntry]:
    """依序或以行程池執行；任何一次失敗都附上其標籤"""
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_entry, c, seed) for c in configs]
            entries = []
            for label, future in zip(labels, futures):
                try:
                    entries.append(future.result())
                except SimulationError as e:
                    raise SimulationError(f"sweep entry {label} failed: {e}") from e
            return entries
    entries = []
    for config, label in zip(configs, labels):
        logger.info("sweep entry %s", label)
        try:
            entries.append(_sweep_entry(config, seed))
        except SimulationError as e:
            raise SimulationError(f"sweep entry {label} failed: {e}") from e
    return entries


@dataclass
class DomainSweepReport:
    """R 掃描：各次執行與相鄰 R 之間的軌跡差"""

    entries: List[SweepEntry]
    differences: List[float]

    @property
    def radii(self) -> List[float]:
        return [e.R for e in self.entries]

    @property
    def decreasing(self) -> bool:
        d = self.differences
        return all(later <= earlier for earlier, later in zip(d, d[1:]))


def domain_sweep(
    config: ConfigLike,
    radii: Sequence[float] = (3.0, 4.0, 6.0),
    out_dir: Optional[str] = None,
    workers: int = 1,
    seed: int = 0,
) -> DomainSweepReport:
    """
    以遞增的 R 重複同一情境，比較剛體軌跡

    Args:
        config: 基準設定
        radii: 遞增的外球半徑
        out_dir: 若提供，寫出 domain_sweep.csv
        workers: 行程數
        seed: 亂數種子

    Returns:
        DomainSweepReport
    """
    base = _resolve(config)
    radii = [float(R) for R in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise SimulationError("domain sweep requires strictly increasing R")
    configs = [base.with_overrides({"domain.R": repr(R)}) for R in radii]
    entries = _run_entries(configs, [f"R={R:g}" for R in radii], seed, workers)
    differences = [trajectory_difference(a, b) for a, b in zip(entries, entries[1:])]
    report = DomainSweepReport(entries, differences)
    logger.info(
        "domain sweep differences %s (decreasing: %s)",
        ", ".join(f"{d:.3e}" for d in differences),
        report.decreasing,
    )

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        rows = []
        for i, e in enumerate(entries):
            diff = differences[i] if i < len(differences) else float("nan")
            rows.append(
                [
                    e.R,
                    float(e.energy[-1]),
                    float(np.linalg.norm(e.ell, axis=1).max(initial=0.0)),
                    float(np.linalg.norm(e.omega, axis=1).max(initial=0.0)),
                    e.min_slack,
                    diff,
                ]
            )
        write_sweep_csv(
            os.path.join(out_dir, "domain_sweep.csv"),
            ["R", "E_final", "max_ell", "max_r", "min_slack", "diff_to_next"],
            rows,
        )
    return report


@dataclass
class RefinementSweepReport:
    """N 與 dt 的細化掃描"""

    entries: List[SweepEntry]
    differences: List[float]

    def by_basis_size(self, N: int) -> List[SweepEntry]:
        return [e for e in self.entries if e.N == N]

    def projection_errors(self) -> List[float]:
        """每個 N 的初始投影誤差（取該 N 的第一次執行）"""
        seen: Dict[int, float] = {}
        for e in self.entries:
            seen.setdefault(e.N, e.projection_error)
        return list(seen.values())


def refinement_sweep(
    config: ConfigLike,
    sizes: Sequence[int] = (10, 20),
    steps: Sequence[float] = (0.01, 0.005),
    out_dir: Optional[str] = None,
    workers: int = 1,
    seed: int = 0,
) -> RefinementSweepReport:
    """
    在 N 遞增、dt 遞減的網格上重複同一情境

    differences 為同一 N 下相鄰 dt 的軌跡差，跨 N 的位置記為 NaN。

    Args:
        config: 基準設定
        sizes: 遞增的基底大小
        steps: 遞減的時間步長
        out_dir: 若提供，寫出 refinement_sweep.csv
        workers: 行程數
        seed: 亂數種子

    Returns:
        RefinementSweepReport
    """
    base = _resolve(config)
    sizes = [int(N) for N in sizes]
    steps = [float(dt) for dt in steps]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise SimulationError("refinement sweep requires increasing N")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise SimulationError("refinement sweep requires decreasing dt")

    configs, labels = [], []
    for N in sizes:
        for dt in steps:
            configs.append(base.with_overrides({"basis.N": str(N), "time.dt": repr(dt)}))
            labels.append(f"N={N} dt={dt:g}")
    entries = _run_entries(configs, labels, seed, workers)

    differences = []
    for a, b in zip(entries, entries[1:]):
        differences.append(trajectory_difference(a, b) if a.N == b.N else float("nan"))
    report = RefinementSweepReport(entries, differences)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        rows = []
        for i, e in enumerate(entries):
            diff = differences[i] if i < len(differences) else float("nan")
            rows.append(
                [e.N, e.dt, e.projection_error, e.weak_residual, e.min_slack, diff]
            )
        write_sweep_csv(
            os.path.join(out_dir, "refinement_sweep.csv"),
            ["N", "dt", "projection_error", "weak_residual", "min_slack", "diff_to_next"],
            rows,
        )
    return report
