"""
領域錯誤 - 模擬過程中所有可預期的失敗
"""

from typing import Dict, List, Optional

import numpy as np


class SimulationError(Exception):
    """所有模擬錯誤的基底類別"""


class ConfigError(SimulationError):
    """情境設定檔解析或驗證失敗"""

    def __init__(self, message: str, keys: Optional[List[str]] = None) -> None:
        self.keys = list(keys or [])
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class GeometryError(SimulationError):
    """剛體或流體區域的幾何不合法"""


class DomainError(SimulationError):
    """查詢點落在取樣區域之外"""


class BasisError(SimulationError):
    """Galerkin 基底建構失敗"""

    def __init__(self, message: str, rank: Optional[int] = None) -> None:
        self.rank = rank
        if rank is not None:
            message = f"{message} (achieved rank {rank})"
        super().__init__(message)


class DensityError(SimulationError):
    """密度場違反非負性或正密度要求"""


class CharacteristicEscapeError(SimulationError):
    """反向特徵線離開流體區域超過投影容許值"""

    def __init__(self, node: int, point: np.ndarray, penetration: float) -> None:
        self.node = int(node)
        self.point = np.asarray(point, dtype=float)
        self.penetration = float(penetration)
        super().__init__(
            f"characteristic escape at node {self.node}: "
            f"foot {self.point.tolist()} penetrates by {self.penetration:.3e}"
        )


class AssemblyError(SimulationError):
    """矩陣組裝產生非有限值或違反黏度界限"""


class FluxError(SimulationError):
    """推進通量不滿足切向條件"""


class SolverError(SimulationError):
    """線性求解或 Picard 迭代失敗"""


class InvariantViolation(SimulationError):
    """硬性不變量在某一步被破壞"""

    def __init__(self, step: int, terms: Dict[str, float]) -> None:
        self.step = int(step)
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v:.6e}" for k, v in self.terms.items())
        super().__init__(f"invariant breach at step {self.step}: {detail}")
