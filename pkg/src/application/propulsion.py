"""
自推進通量服務 - ∂S_0 上的切向通量 w、時間輪廓與推進能量預算
"""

import logging
from functools import partial
from typing import Callable, Dict

import numpy as np
from scipy import integrate

from src.domain.errors import ConfigError, FluxError
from src.domain.models import FluidDiscretization, PropulsionFlux, TimeProfile

logger = logging.getLogger(__name__)

TANGENCY_TOLERANCE = 1e-10
_E3 = np.array([0.0, 0.0, 1.0])


def _constant(t: float) -> float:
    return 1.0


def _ramp(t: float, ramp_time: float) -> float:
    return float(min(max(t, 0.0) / ramp_time, 1.0))


def _sinusoid(t: float, period: float) -> float:
    return float(np.sin(2.0 * np.pi * t / period))


def time_profile(name: str, ramp_time: float = 0.1, period: float = 1.0) -> TimeProfile:
    """
    取得時間輪廓 g(t)

    Args:
        name: constant、ramp 或 sinusoid
        ramp_time: ramp 達到 1 的時間
        period: sinusoid 的週期

    Returns:
        g(t)
    """
    if name == "constant":
        return _constant
    if name == "ramp":
        if ramp_time <= 0.0:
            raise ConfigError("invalid value", ["propulsion.ramp_time"])
        return partial(_ramp, ramp_time=ramp_time)
    if name == "sinusoid":
        if period <= 0.0:
            raise ConfigError("invalid value", ["propulsion.period"])
        return partial(_sinusoid, period=period)
    raise ConfigError("unknown propulsion profile", ["propulsion.profile"])


def _swirl(normals: np.ndarray) -> np.ndarray:
    return np.cross(_E3, normals)


def _azimuthal(normals: np.ndarray) -> np.ndarray:
    raw = np.cross(_E3, normals)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    # 極點附近方向未定義，取零
    return np.where(norm > 1e-12, raw / np.where(norm > 1e-12, norm, 1.0), 0.0)


def _squirmer(normals: np.ndarray) -> np.ndarray:
    return np.broadcast_to(_E3, normals.shape).copy()


def _none(normals: np.ndarray) -> np.ndarray:
    return np.zeros_like(normals)


FLUX_FAMILIES: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "none": _none,
    "swirl": _swirl,
    "azimuthal": _azimuthal,
    "squirmer": _squirmer,
}


def make_tangential_flux(
    raw: np.ndarray,
    normals: np.ndarray,
    profile: TimeProfile = _constant,
    family: str = "custom",
) -> PropulsionFlux:
    """
    移除原始向量場的法向分量 w = raw − (raw·n)n

    Args:
        raw: 表面節點上的向量值 (S, 3)
        normals: 單位法向量 (S, 3)
        profile: 時間輪廓
        family: 通量族名稱（僅供紀錄）

    Returns:
        PropulsionFlux
    """
    raw = np.asarray(raw, dtype=float)
    n = np.asarray(normals, dtype=float)
    if raw.shape != n.shape:
        raise FluxError(
            f"flux samples {raw.shape} do not match surface nodes {n.shape}"
        )
    w = raw - np.einsum("sc,sc->s", raw, n)[:, None] * n
    return PropulsionFlux(w, profile, family)


def check_tangential(
    flux: PropulsionFlux, normals: np.ndarray, tolerance: float = TANGENCY_TOLERANCE
) -> float:
    """
    檢查 w·n = 0

    Returns:
        最大相對法向分量

    Raises:
        FluxError: 超出切向容許值
    """
    samples = flux.samples
    scale = max(1.0, float(np.abs(samples).max(initial=0.0)))
    normal = np.abs(np.einsum("sc,sc->s", samples, normals))
    defect = float(normal.max(initial=0.0)) / scale
    if defect > tolerance:
        node = int(np.argmax(normal))
        raise FluxError(f"flux not tangential: |w·n| = {normal[node]:.3e} at node {node}")
    return defect


def build_propulsion(
    disc: FluidDiscretization,
    family: str = "swirl",
    amplitude: float = 1.0,
    profile: str = "constant",
    ramp_time: float = 0.1,
    period: float = 1.0,
) -> PropulsionFlux:
    """
    依設定建立內建通量族

    Args:
        disc: 流體離散（提供 ∂S_0 節點與法向量）
        family: none、swirl、azimuthal 或 squirmer
        amplitude: 振幅
        profile: 時間輪廓名稱
        ramp_time, period: 輪廓參數

    Returns:
        PropulsionFlux
    """
    if family not in FLUX_FAMILIES:
        raise ConfigError("unknown propulsion family", ["propulsion.family"])
    g = time_profile(profile, ramp_time, period)
    normals = disc.surface_normals
    if family == "none":
        return PropulsionFlux.zero(len(normals))
    raw = amplitude * FLUX_FAMILIES[family](normals)
    flux = make_tangential_flux(raw, normals, g, family)
    logger.info(
        "propulsion: family=%s profile=%s max|w|=%.3g",
        family,
        profile,
        float(np.linalg.norm(flux.samples, axis=1).max(initial=0.0)),
    )
    return flux


def flux_surface_norm(flux: PropulsionFlux, weights: np.ndarray, t: float) -> float:
    """∮ |w(t)|² dΓ"""
    w = flux.at(t)
    return float(weights @ np.einsum("sc,sc->s", w, w))


def propulsion_budget(
    flux: PropulsionFlux,
    disc: FluidDiscretization,
    nu: float,
    alpha: float,
    t: float,
    rule: str = "trapezoid",
    intervals: int = 200,
) -> float:
    """
    推進能量預算 να ∫₀ᵗ ∮ |w|² dΓ ds

    Args:
        flux: 推進通量
        disc: 流體離散
        nu: 黏度
        alpha: 滑移係數
        t: 積分終點
        rule: trapezoid 或 midpoint
        intervals: 時間區間數

    Returns:
        預算值
    """
    if t <= 0.0:
        return 0.0
    weights = disc.surface_weights
    if rule == "trapezoid":
        grid = np.linspace(0.0, t, intervals + 1)
        values = np.array([flux_surface_norm(flux, weights, s) for s in grid])
        integral = float(integrate.trapezoid(values, grid))
    elif rule == "midpoint":
        step = t / intervals
        mids = (np.arange(intervals) + 0.5) * step
        integral = step * sum(flux_surface_norm(flux, weights, s) for s in mids)
    else:
        raise ValueError(f"unknown quadrature rule: {rule}")
    return nu * alpha * integral
