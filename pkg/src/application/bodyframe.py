"""
剛體座標服務 - 由 (ℓ, r) 重建慣性座標運動 (Q, h) 並在兩座標間映射場
"""

import logging
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.spatial.transform import Rotation

from src.domain.errors import DomainError
from src.domain.models import BodyPose, FluidDiscretization

logger = logging.getLogger(__name__)

CLEARANCE_FRACTION = 0.1


def hat(v: np.ndarray) -> np.ndarray:
    """向量的反對稱矩陣，hat(v) x = v × x"""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def reorthonormalize(Q: np.ndarray) -> np.ndarray:
    """以 SVD 極分解投影回 SO(3)"""
    u, _, vt = np.linalg.svd(Q)
    P = u @ vt
    if np.linalg.det(P) < 0.0:
        u[:, -1] *= -1.0
        P = u @ vt
    return P


def so3_defect(Q: np.ndarray) -> float:
    """‖QᵀQ − I‖_F 與 |det Q − 1| 的較大者"""
    Q = np.asarray(Q, dtype=float)
    ortho = float(np.linalg.norm(Q.T @ Q - np.eye(3)))
    return max(ortho, abs(float(np.linalg.det(Q)) - 1.0))


def integrate_pose(
    pose: BodyPose, ell: np.ndarray, omega: np.ndarray, dt: float
) -> BodyPose:
    """
    以步內常數的 (ℓ, r) 推進位姿：Q' = Q·hat(r)、h' = Qℓ

    旋轉使用精確指數映射，平移以中點規則積分。

    Args:
        pose: 目前位姿
        ell: 剛體座標下的線速度
        omega: 剛體座標下的角速度
        dt: 時間步長

    Returns:
        新位姿
    """
    ell = np.asarray(ell, dtype=float)
    rotvec = np.asarray(omega, dtype=float) * dt
    step = Rotation.from_rotvec(rotvec).as_matrix()
    half = Rotation.from_rotvec(0.5 * rotvec).as_matrix()
    h = pose.h + dt * (pose.Q @ half @ ell)
    Q = reorthonormalize(pose.Q @ step)
    return BodyPose(Q, h, pose.t + dt)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues 公式的旋轉矩陣，與積分器無關的對照值"""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = hat(k)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def pose_quaternion(pose: BodyPose) -> np.ndarray:
    """Q 的四元數，順序為 (x, y, z, w)"""
    return Rotation.from_matrix(pose.Q).as_quat()


def map_to_body(pose: BodyPose, x: np.ndarray) -> np.ndarray:
    """慣性座標點 x ↦ 剛體座標點 y = Qᵀ(x − h)"""
    pts = np.asarray(x, dtype=float)
    return (pts - pose.h) @ pose.Q


def map_to_inertial_point(pose: BodyPose, y: np.ndarray) -> np.ndarray:
    """剛體座標點 y ↦ 慣性座標點 x = Qy + h"""
    pts = np.asarray(y, dtype=float)
    return pts @ pose.Q.T + pose.h


def map_to_inertial(
    pose: BodyPose,
    field: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    disc: Optional[FluidDiscretization] = None,
) -> np.ndarray:
    """
    U(x, t) = Q·u(Qᵀ(x − h), t)

    Args:
        pose: 剛體位姿
        field: 剛體座標下的速度場 u(y)
        x: 慣性座標查詢點 (n, 3) 或 (3,)
        disc: 若提供，檢查查詢點落在取樣的 F_0 內

    Returns:
        慣性座標下的速度值
    """
    single = np.ndim(x) == 1
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    y = map_to_body(pose, pts)
    if disc is not None:
        outside = ~disc.contains_fluid(y)
        if outside.any():
            first = int(np.flatnonzero(outside)[0])
            raise DomainError(
                f"out of sampled domain: {pts[first].tolist()} maps to {y[first].tolist()}"
            )
    u = np.atleast_2d(np.asarray(field(y), dtype=float))
    U = u @ pose.Q.T
    return U[0] if single else U


def field_to_body(
    pose: BodyPose, field: Callable[[np.ndarray], np.ndarray], y: np.ndarray
) -> np.ndarray:
    """u(y, t) = Qᵀ U(Qy + h, t)"""
    single = np.ndim(y) == 1
    pts = np.atleast_2d(np.asarray(y, dtype=float))
    U = np.atleast_2d(np.asarray(field(map_to_inertial_point(pose, pts)), dtype=float))
    u = U @ pose.Q
    return u[0] if single else u


def rigid_velocity_inertial(
    pose: BodyPose, ell: np.ndarray, omega: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """U_S(x) = h' + R × (x − h)，其中 h' = Qℓ、R = Qr"""
    h_dot = pose.Q @ np.asarray(ell, dtype=float)
    R = pose.Q @ np.asarray(omega, dtype=float)
    return h_dot + np.cross(R, np.asarray(x, dtype=float) - pose.h)


def body_clearance(pose: BodyPose, body_radius: float, R: float) -> float:
    """
    剛體與 ∂B_R 的距離；小於 0.1·R 時發出警告

    Returns:
        R − (|h| + 剛體半徑)
    """
    clearance = R - (float(np.linalg.norm(pose.h)) + body_radius)
    if clearance < CLEARANCE_FRACTION * R:
        logger.warning(
            "body within %.3g of the outer boundary at t=%.4g", clearance, pose.t
        )
    return clearance


def exponential_step(omega: np.ndarray, dt: float) -> np.ndarray:
    """exp(hat(r)·dt)，以 scipy.linalg.expm 計算的對照值"""
    return linalg.expm(hat(omega) * dt)
