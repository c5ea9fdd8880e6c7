"""
輸出寫入器 - 軌跡與能量帳本 CSV、密度快照，以及基底二進位快取
"""

import csv
import hashlib
import logging
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from src.domain.models import (
    DensityField,
    EnergyLedger,
    FluidDiscretization,
    GalerkinBasis,
    RigidGeometry,
    SimState,
)

logger = logging.getLogger(__name__)

TRAJECTORY_SCHEMA = "# schema: trajectory v1"
LEDGER_SCHEMA = "# schema: ledger v1"
SWEEP_SCHEMA = "# schema: sweep v1"

TRAJECTORY_COLUMNS = [
    "t",
    "h_x",
    "h_y",
    "h_z",
    "q_x",
    "q_y",
    "q_z",
    "q_w",
    "ell_x",
    "ell_y",
    "ell_z",
    "r_x",
    "r_y",
    "r_z",
]
LEDGER_COLUMNS = ["t", "E_fluid", "E_body", "D_visc", "D_slip", "W_budget", "slack"]

_BASIS_ARRAYS = (
    "values",
    "gradients",
    "laplacians",
    "ell",
    "omega",
    "trace_S0",
    "strain_trace_S0",
    "outer_trace",
    "exponents",
    "coefficients",
    "gradient_coefficients",
    "laplacian_coefficients",
    "gram",
)


def _fmt(value: float) -> str:
    """固定格式的浮點數，確保相同輸入得到位元相同的輸出"""
    return repr(float(value))


def basis_cache_key(
    disc: FluidDiscretization,
    geo: RigidGeometry,
    N: int,
    potential_order: int,
    density: Optional[np.ndarray] = None,
) -> str:
    """
    以幾何與基底參數計算 SHA-256 快取鍵

    Args:
        disc: 流體離散
        geo: 剛體幾何
        N: 基底維度
        potential_order: 勢函數最高次數
        density: 正交化所用的密度

    Returns:
        十六進位雜湊字串
    """
    digest = hashlib.sha256()
    digest.update(f"sphere:{_fmt(disc.body.radius)}".encode())
    digest.update(
        (
            f"R={_fmt(disc.R)};res={_fmt(disc.resolution)};"
            f"sub={disc.surface_subdivisions};N={int(N)};order={int(potential_order)};"
            f"m={_fmt(geo.mass)}"
        ).encode()
    )
    digest.update(np.ascontiguousarray(geo.inertia, dtype=float).tobytes())
    if density is not None:
        digest.update(np.ascontiguousarray(density, dtype=float).tobytes())
    return digest.hexdigest()


class NpzBasisCache:
    """以 np.savez 檔案儲存基底的快取"""

    def __init__(self, cache_dir: str) -> None:
        self.cache_dir = Path(cache_dir)

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"basis-{key[:24]}.npz"

    def load(self, key: str) -> Optional[GalerkinBasis]:
        """
        讀取快取的基底

        Args:
            key: 快取鍵

        Returns:
            GalerkinBasis；不存在或內容不符時為 None
        """
        path = self._path(key)
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as data:
                if str(data["key"]) != key:
                    return None
                arrays = {name: np.array(data[name]) for name in _BASIS_ARRAYS}
                return GalerkinBasis(
                    **arrays,
                    candidate_condition=float(data["candidate_condition"]),
                    candidate_rank=int(data["candidate_rank"]),
                    potential_order=int(data["potential_order"]),
                )
        except (OSError, KeyError, ValueError) as e:
            logger.warning("ignoring unreadable basis cache %s: %s", path, e)
            return None

    def save(self, key: str, basis: GalerkinBasis) -> None:
        """將基底寫入快取目錄"""
        os.makedirs(self.cache_dir, exist_ok=True)
        arrays = {name: np.asarray(getattr(basis, name)) for name in _BASIS_ARRAYS}
        np.savez(
            self._path(key),
            key=np.array(key),
            candidate_condition=np.array(basis.candidate_condition),
            candidate_rank=np.array(basis.candidate_rank),
            potential_order=np.array(basis.potential_order),
            **arrays,
        )


def write_trajectory_csv(path: str, states: Sequence[SimState]) -> None:
    """
    寫出剛體軌跡 CSV：(t, h, Q 的四元數, ℓ, r)

    Args:
        path: 輸出檔案路徑
        states: 依時間排序的狀態
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(TRAJECTORY_SCHEMA + "\n")
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_COLUMNS)
        for state in states:
            quat = Rotation.from_matrix(state.pose.Q).as_quat()
            row = [state.t, *state.pose.h, *quat, *state.ell, *state.omega]
            writer.writerow([_fmt(v) for v in row])


def write_ledger_csv(path: str, ledger: EnergyLedger) -> None:
    """寫出能量帳本 CSV"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(LEDGER_SCHEMA + "\n")
        writer = csv.writer(f)
        writer.writerow(LEDGER_COLUMNS)
        for r in ledger.records:
            writer.writerow(
                [
                    _fmt(v)
                    for v in (r.t, r.e_fluid, r.e_body, r.d_visc, r.d_slip, r.w_budget, r.slack)
                ]
            )


def read_schema_csv(path: str) -> List[dict]:
    """
    讀取附帶 schema 行的 CSV

    Returns:
        以欄名為鍵的浮點數字典清單
    """
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline()
        if not first.startswith("# schema:"):
            f.seek(0)
        reader = csv.DictReader(f)
        return [{k: float(v) for k, v in row.items()} for row in reader]


def write_density_snapshot(
    path: str, disc: FluidDiscretization, density: DensityField
) -> None:
    """
    將節點密度寫成結構化格點 npz，F_0 以外的格子為 NaN

    寫出的是扣除正性平移後的密度；平移量另存於 shift。

    Args:
        path: 輸出 .npz 路徑
        disc: 流體離散
        density: 密度場
    """
    grid = np.full(disc.lattice_shape, np.nan)
    cells = disc.cell_index
    grid[cells[:, 0], cells[:, 1], cells[:, 2]] = density.physical
    np.savez(
        path,
        origin=np.asarray(disc.origin),
        spacing=np.array(disc.h_grid),
        shape=np.array(disc.lattice_shape),
        mask=disc.node_lookup >= 0,
        values=grid,
        time=np.array(density.time_stamp),
        shift=np.array(density.shift),
    )


def write_sweep_csv(
    path: str, columns: Sequence[str], rows: Iterable[Sequence[float]]
) -> None:
    """寫出掃描實驗的結果表"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(SWEEP_SCHEMA + "\n")
        writer = csv.writer(f)
        writer.writerow(list(columns))
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
