"""
領域模型 - 定義模擬所用的資料結構
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Dict, List, Optional, Protocol, Tuple, Union

import numpy as np

from src.domain.shapes import Sphere, TriangulatedSurface

BodyShape = Union[Sphere, TriangulatedSurface]
RigidPart = Tuple[np.ndarray, np.ndarray]
DensityProfile = Callable[[np.ndarray], np.ndarray]
TimeProfile = Callable[[float], float]


def _frozen_array(values: np.ndarray, dtype: type = float) -> np.ndarray:
    """複製並鎖定陣列，使資料類別在建構後不可變"""
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


class HField(Protocol):
    """帶有剛體部分的速度場取樣"""

    @property
    def values(self) -> np.ndarray: ...

    @property
    def rigid_part(self) -> RigidPart: ...


@dataclass(frozen=True, eq=False)
class RigidGeometry:
    """剛體 S_0：形狀、密度、質量與慣性張量"""

    shape: BodyShape
    body_density: float
    mass: float
    inertia: np.ndarray
    center: np.ndarray
    c1: float = 0.1
    c2: float = 10.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "inertia", _frozen_array(self.inertia))
        object.__setattr__(self, "center", _frozen_array(self.center))


@dataclass(frozen=True, eq=False)
class FluidDiscretization:
    """截斷流體區域 F_0 = B_R \\ S_0 的積分節點與插值格點"""

    R: float
    body: BodyShape
    resolution: float
    h_grid: float
    origin: np.ndarray
    lattice_shape: Tuple[int, int, int]
    volume_points: np.ndarray
    volume_weights: np.ndarray
    cell_index: np.ndarray
    node_lookup: np.ndarray
    surface_points: np.ndarray
    surface_weights: np.ndarray
    surface_normals: np.ndarray
    outer_points: np.ndarray
    outer_weights: np.ndarray
    outer_normals: np.ndarray
    surface_subdivisions: int = 4

    def __post_init__(self) -> None:
        for name in (
            "origin",
            "volume_points",
            "volume_weights",
            "surface_points",
            "surface_weights",
            "surface_normals",
            "outer_points",
            "outer_weights",
            "outer_normals",
        ):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        object.__setattr__(self, "cell_index", _frozen_array(self.cell_index, int))
        object.__setattr__(self, "node_lookup", _frozen_array(self.node_lookup, int))

    @property
    def n_nodes(self) -> int:
        return int(len(self.volume_weights))

    @property
    def fluid_volume(self) -> float:
        return float(self.volume_weights.sum())

    def contains_fluid(self, points: np.ndarray) -> np.ndarray:
        """判斷點是否位於 F_0 內"""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside_ball = np.linalg.norm(pts, axis=1) < self.R
        return inside_ball & ~self.body.contains(pts)


@dataclass(frozen=True, eq=False)
class VelocitySample:
    """任意 𝓗 場在體積節點上的取樣，附帶剛體部分 (ℓ, r)"""

    values: np.ndarray
    ell: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def rigid_part(self) -> RigidPart:
        return np.asarray(self.ell, dtype=float), np.asarray(self.omega, dtype=float)


@dataclass(frozen=True, eq=False)
class BasisFunction:
    """單一無散度基底函數 z_i 及其剛體部分與邊界跡"""

    values: np.ndarray
    gradients: np.ndarray
    rigid_part: RigidPart
    trace_S0: np.ndarray
    strain_trace_S0: np.ndarray

    @property
    def ell(self) -> np.ndarray:
        return self.rigid_part[0]

    @property
    def omega(self) -> np.ndarray:
        return self.rigid_part[1]

    def rigid_trace(self, points: np.ndarray) -> np.ndarray:
        """z_S(y) = ℓ_z + r_z × y"""
        return self.ell + np.cross(self.omega, points)


@dataclass(frozen=True, eq=False)
class GalerkinBasis:
    """
    正交歸一化的 Galerkin 基底 X_N

    節點值以 (N, ...) 堆疊儲存；單一函數透過 `functions` 取得檢視。
    單項式係數表可在任意點重新求值。
    """

    values: np.ndarray
    gradients: np.ndarray
    laplacians: np.ndarray
    ell: np.ndarray
    omega: np.ndarray
    trace_S0: np.ndarray
    strain_trace_S0: np.ndarray
    outer_trace: np.ndarray
    exponents: np.ndarray
    coefficients: np.ndarray
    gradient_coefficients: np.ndarray
    laplacian_coefficients: np.ndarray
    gram: np.ndarray
    candidate_condition: float
    candidate_rank: int
    potential_order: int

    def __post_init__(self) -> None:
        for name in (
            "values",
            "gradients",
            "laplacians",
            "ell",
            "omega",
            "trace_S0",
            "strain_trace_S0",
            "outer_trace",
            "coefficients",
            "gradient_coefficients",
            "laplacian_coefficients",
            "gram",
        ):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        object.__setattr__(self, "exponents", _frozen_array(self.exponents, int))

    @property
    def N(self) -> int:
        return int(self.values.shape[0])

    @cached_property
    def functions(self) -> Tuple[BasisFunction, ...]:
        return tuple(
            BasisFunction(
                values=self.values[i],
                gradients=self.gradients[i],
                rigid_part=(self.ell[i], self.omega[i]),
                trace_S0=self.trace_S0[i],
                strain_trace_S0=self.strain_trace_S0[i],
            )
            for i in range(self.N)
        )

    @property
    def rigid_matrix(self) -> np.ndarray:
        """形狀 (N, 6) 的剛體部分矩陣 [ℓ | r]"""
        return np.hstack([self.ell, self.omega])

    def leading(self, n: int) -> "GalerkinBasis":
        """前 n 個函數張成的子空間 X_n ⊂ X_N，正交性保持不變"""
        if not 0 < n <= self.N:
            raise ValueError(f"leading size must lie in [1, {self.N}], got {n}")
        return replace(
            self,
            values=self.values[:n],
            gradients=self.gradients[:n],
            laplacians=self.laplacians[:n],
            ell=self.ell[:n],
            omega=self.omega[:n],
            trace_S0=self.trace_S0[:n],
            strain_trace_S0=self.strain_trace_S0[:n],
            outer_trace=self.outer_trace[:n],
            coefficients=self.coefficients[:n],
            gradient_coefficients=self.gradient_coefficients[:n],
            laplacian_coefficients=self.laplacian_coefficients[:n],
            gram=self.gram[:n, :n],
        )


@dataclass(frozen=True, eq=False)
class DensityField:
    """
    體積節點上的密度取樣

    若帶有初始輪廓 profile，feet 為各節點特徵線回溯到 profile_time 的落點，
    節點值即 profile(feet) + shift。
    """

    values: np.ndarray
    bounds: Tuple[float, float]
    time_stamp: float = 0.0
    profile: Optional[DensityProfile] = None
    shift: float = 0.0
    feet: Optional[np.ndarray] = None
    profile_time: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", _frozen_array(self.values))
        if self.feet is not None:
            object.__setattr__(self, "feet", _frozen_array(self.feet))
        lo, hi = self.bounds
        object.__setattr__(self, "bounds", (float(lo), float(hi)))

    @property
    def minimum(self) -> float:
        return float(self.values.min()) if self.values.size else 0.0

    @property
    def maximum(self) -> float:
        return float(self.values.max()) if self.values.size else 0.0

    @property
    def physical(self) -> np.ndarray:
        """扣除正性平移後的密度 values − shift"""
        return self.values - self.shift


@dataclass(frozen=True, eq=False)
class PropulsionFlux:
    """∂S_0 上的切向自推進通量 w 與其時間輪廓 g(t)"""

    samples: np.ndarray
    profile: TimeProfile
    family: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", _frozen_array(self.samples))

    def at(self, t: float) -> np.ndarray:
        return self.samples * float(self.profile(t))

    @classmethod
    def zero(cls, n_nodes: int) -> "PropulsionFlux":
        return cls(np.zeros((n_nodes, 3)), lambda t: 0.0, family="none")


@dataclass(frozen=True, eq=False)
class BodyPose:
    """慣性座標中的剛體位姿"""

    Q: np.ndarray
    h: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "Q", _frozen_array(self.Q))
        object.__setattr__(self, "h", _frozen_array(self.h))

    @classmethod
    def identity(cls) -> "BodyPose":
        return cls(np.eye(3), np.zeros(3), 0.0)


@dataclass(frozen=True, eq=False)
class SimState:
    """某一時刻的 Galerkin 係數、密度與剛體狀態"""

    alpha: np.ndarray
    density: DensityField
    ell: np.ndarray
    omega: np.ndarray
    t: float
    pose: BodyPose = field(default_factory=BodyPose.identity)

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", _frozen_array(self.alpha))
        object.__setattr__(self, "ell", _frozen_array(self.ell))
        object.__setattr__(self, "omega", _frozen_array(self.omega))


@dataclass(frozen=True)
class LedgerRecord:
    """能量帳本的一筆紀錄"""

    t: float
    e_fluid: float
    e_body: float
    d_visc: float
    d_slip: float
    w_budget: float
    slack: float

    @property
    def energy(self) -> float:
        return self.e_fluid + self.e_body


@dataclass(frozen=True)
class EnergyLedger:
    """能量不等式各項的逐步紀錄（積分時累加於串列，結束時凍結一次）"""

    records: Tuple[LedgerRecord, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def initial_energy(self) -> float:
        return self.records[0].energy if self.records else 0.0

    @property
    def last(self) -> Optional[LedgerRecord]:
        return self.records[-1] if self.records else None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


@dataclass(frozen=True)
class StepDiagnostics:
    """單一時間步的診斷資料"""

    step: int
    t: float
    picard_iterations: int
    picard_increment: float
    min_eig_mass: float
    max_eig_dissipation: float
    gyroscopic: float
    trilinear_defect: float
    density_min: float
    density_max: float
    mass: float
    so3_defect: float


@dataclass
class SimulationResult:
    """完整軌跡、能量帳本與診斷"""

    states: List[SimState]
    ledger: EnergyLedger
    diagnostics: List[StepDiagnostics]
    dt: float
    breaches: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final(self) -> SimState:
        return self.states[-1]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([s.alpha for s in self.states])

    @property
    def hard_invariants_held(self) -> bool:
        return not self.breaches


@dataclass(frozen=True, eq=False)
class PressureField:
    """由動量殘差回復的壓力（零平均）"""

    values: np.ndarray
    points: np.ndarray
    defect: float
    mean: float
