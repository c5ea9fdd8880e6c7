"""
情境設定 - 讀取扁平的 key=value 設定檔並轉換為不可變的設定物件
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from src.domain.errors import ConfigError

logger = logging.getLogger(__name__)

Vector3 = Tuple[float, float, float]

FLUX_FAMILY_NAMES = ("none", "swirl", "azimuthal", "squirmer")
PROFILE_NAMES = ("constant", "ramp", "sinusoid")
INITIAL_VELOCITY_NAMES = ("zero", "vortex", "random_modes")
DENSITY_PROFILE_NAMES = ("uniform", "two_layer", "smooth_layer", "stratified")


@dataclass(frozen=True)
class BodyConfig:
    shape: str = "sphere"
    radius: float = 1.0
    density: float = 1.0
    c1: float = 0.1
    c2: float = 10.0


@dataclass(frozen=True)
class DomainConfig:
    R: float = 4.0
    resolution: float = 4.0
    surface_subdivisions: int = 4


@dataclass(frozen=True)
class BasisConfig:
    N: int = 20
    potential_order: int = 2
    cache_dir: str = ""


@dataclass(frozen=True)
class FluidConfig:
    nu: float = 1.0
    variable_viscosity: bool = False
    nu1: float = 0.5
    nu2: float = 2.0


@dataclass(frozen=True)
class CouplingConfig:
    alpha: float = 1.0


@dataclass(frozen=True)
class TimeConfig:
    T: float = 1.0
    dt: float = 0.005


@dataclass(frozen=True)
class PicardConfig:
    tol: float = 1e-8
    max_iter: int = 50
    freeze_density: bool = False


@dataclass(frozen=True)
class TransportConfig:
    # None 代表 auto
    eps_shift: Optional[float] = None
    dt_sub_factor: int = 4


@dataclass(frozen=True)
class ModeConfig:
    positive_density: bool = False


@dataclass(frozen=True)
class PropulsionConfig:
    family: str = "swirl"
    amplitude: float = 1.0
    profile: str = "constant"
    ramp_time: float = 0.1
    period: float = 1.0


@dataclass(frozen=True)
class InitialConfig:
    velocity: str = "zero"
    amplitude: float = 0.1
    ell: Vector3 = (0.0, 0.0, 0.0)
    omega: Vector3 = (0.0, 0.0, 0.0)
    density: str = "uniform"
    density_low: float = 1.0
    density_high: float = 2.0
    layer_radius: float = 2.5
    layer_width: float = 0.3


@dataclass(frozen=True)
class OutputConfig:
    snapshot_every: int = 0


@dataclass(frozen=True)
class ScenarioConfig:
    """一次模擬的完整設定"""

    body: BodyConfig = field(default_factory=BodyConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    fluid: FluidConfig = field(default_factory=FluidConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    picard: PicardConfig = field(default_factory=PicardConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    propulsion: PropulsionConfig = field(default_factory=PropulsionConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def eps_shift(self) -> float:
        """transport.eps_shift 的實際值；auto 時為 1/N，正密度模式為 0"""
        if self.transport.eps_shift is not None:
            return self.transport.eps_shift
        return 0.0 if self.mode.positive_density else 1.0 / self.basis.N

    def with_overrides(self, overrides: Mapping[str, str]) -> "ScenarioConfig":
        """以點分隔鍵覆寫設定並重新驗證"""
        merged = dict(to_flat_dict(self))
        merged.update({k: str(v) for k, v in overrides.items()})
        return parse_config(merged)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _parse_vector(text: str) -> Vector3:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ValueError(text)
    x, y, z = (float(p) for p in parts)
    return (x, y, z)


def _convert(raw: str, default: Any, key: str) -> Any:
    """依欄位預設值的型別轉換字串"""
    text = raw.strip()
    if key == "transport.eps_shift":
        return None if text.lower() == "auto" else float(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return _parse_vector(text)
    return text


def _format(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_flat_dict(config: ScenarioConfig) -> Dict[str, str]:
    """轉回扁平的點分隔鍵字典（寫入報告或覆寫時使用）"""
    flat: Dict[str, str] = {}
    for section in fields(config):
        part = getattr(config, section.name)
        for item in fields(part):
            flat[f"{section.name}.{item.name}"] = _format(getattr(part, item.name))
    return flat


def _validate(config: ScenarioConfig) -> None:
    """檢查數值範圍與名稱；一次列出所有錯誤的鍵"""
    bad: List[str] = []

    def require(condition: bool, key: str) -> None:
        if not condition:
            bad.append(key)

    require(config.body.shape == "sphere", "body.shape")
    require(config.body.radius > 0.0, "body.radius")
    require(0.0 < config.body.c1 <= config.body.c2, "body.c1")
    require(config.body.c1 <= config.body.density <= config.body.c2, "body.density")
    require(config.domain.R > 0.0, "domain.R")
    require(config.domain.resolution > 0.0, "domain.resolution")
    require(config.domain.surface_subdivisions >= 0, "domain.surface_subdivisions")
    require(config.basis.N >= 6, "basis.N")
    require(config.basis.potential_order >= 0, "basis.potential_order")
    require(config.fluid.nu > 0.0, "fluid.nu")
    if config.fluid.variable_viscosity:
        require(config.fluid.nu1 > 0.0, "fluid.nu1")
        require(config.fluid.nu1 <= config.fluid.nu2, "fluid.nu2")
    require(config.coupling.alpha >= 0.0, "coupling.alpha")
    require(config.time.dt > 0.0, "time.dt")
    require(config.time.T >= 0.0, "time.T")
    require(config.picard.tol > 0.0, "picard.tol")
    require(config.picard.max_iter >= 1, "picard.max_iter")
    require(
        config.transport.eps_shift is None or config.transport.eps_shift >= 0.0,
        "transport.eps_shift",
    )
    require(config.transport.dt_sub_factor >= 1, "transport.dt_sub_factor")
    require(config.propulsion.family in FLUX_FAMILY_NAMES, "propulsion.family")
    require(config.propulsion.profile in PROFILE_NAMES, "propulsion.profile")
    require(config.propulsion.ramp_time > 0.0, "propulsion.ramp_time")
    require(config.propulsion.period > 0.0, "propulsion.period")
    require(config.initial.velocity in INITIAL_VELOCITY_NAMES, "initial.velocity")
    require(config.initial.density in DENSITY_PROFILE_NAMES, "initial.density")
    require(config.initial.density_low >= 0.0, "initial.density_low")
    require(config.initial.density_high >= 0.0, "initial.density_high")
    require(config.initial.layer_width > 0.0, "initial.layer_width")
    require(config.output.snapshot_every >= 0, "output.snapshot_every")
    if bad:
        message = "invalid value"
        if config.body.shape == "mesh":
            message += " (body.shape=mesh: the Galerkin basis needs the analytic sphere level set)"
        raise ConfigError(message, bad)


def parse_config(values: Mapping[str, Optional[str]]) -> ScenarioConfig:
    """
    將扁平鍵值對轉換為 ScenarioConfig

    Args:
        values: 點分隔鍵到字串值的對應

    Returns:
        驗證後的 ScenarioConfig

    Raises:
        ConfigError: 未知的鍵、型別錯誤或數值不合法
    """
    config = ScenarioConfig()
    sections = {f.name: getattr(config, f.name) for f in fields(config)}
    updates: Dict[str, Dict[str, Any]] = {name: {} for name in sections}
    unknown: List[str] = []
    malformed: List[str] = []

    for key, raw in values.items():
        section, _, name = key.partition(".")
        part = sections.get(section)
        known = part is not None and name in {f.name for f in fields(part)}
        if not known:
            unknown.append(key)
            continue
        try:
            updates[section][name] = _convert(raw or "", getattr(part, name), key)
        except ValueError:
            malformed.append(key)

    if unknown:
        raise ConfigError("unknown keys", sorted(unknown))
    if malformed:
        raise ConfigError("malformed values", sorted(malformed))

    config = replace(
        config,
        **{name: replace(part, **updates[name]) for name, part in sections.items()},
    )
    _validate(config)
    return config


def load_config(path: Optional[str] = None) -> ScenarioConfig:
    """
    讀取情境設定檔；未指定路徑時回傳全部預設值

    Args:
        path: key=value 設定檔路徑

    Returns:
        ScenarioConfig

    Raises:
        ConfigError: 檔案不存在或內容不合法
    """
    if not path:
        return parse_config({})
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    logger.info("loading scenario %s", path)
    return parse_config(dotenv_values(path, interpolate=False))
