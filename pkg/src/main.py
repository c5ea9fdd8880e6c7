#!/usr/bin/env python
"""
主應用入口點 - 自推進剛體與非齊次流體耦合系統的模擬與驗證
"""
import argparse
import os
import sys
from typing import List, Optional

# 確保項目根目錄在搜索路徑中
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from dotenv import load_dotenv

# 使用絕對導入，與測試代碼保持一致
from src.application.experiments import domain_sweep, refinement_sweep, run_scenario
from src.domain.errors import SimulationError
from src.infrastructure.config import load_config
from src.infrastructure.console import (
    print_error,
    print_header,
    print_info,
    print_success,
    setup_logging,
)


def _float_list(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    """建立命令列解析器"""
    parser = argparse.ArgumentParser(
        description="自推進剛體在非齊次不可壓縮流體中的 Galerkin 模擬"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="情境設定檔 (key=value)")
    common.add_argument("--out-dir", default=None, help="指定輸出目錄")
    common.add_argument(
        "--hard-invariants",
        action="store_true",
        help="不變量被破壞時立即中止",
    )
    common.add_argument("--seed", type=int, default=0, help="亂數種子")
    common.add_argument("--workers", type=int, default=1, help="掃描使用的行程數")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="執行單一情境")
    sub.add_parser("verify", parents=[common], help="執行情境並加入完整驗證")
    domain = sub.add_parser("sweep-domain", parents=[common], help="外球半徑 R 掃描")
    domain.add_argument("--radii", type=_float_list, default=[3.0, 4.0, 6.0])
    refine = sub.add_parser("sweep-refine", parents=[common], help="N 與 dt 細化掃描")
    refine.add_argument("--sizes", type=_int_list, default=[10, 20])
    refine.add_argument("--steps", type=_float_list, default=[0.01, 0.005])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    主函數：解析參數並執行子命令

    Returns:
        結束狀態碼；0 表示所有硬性不變量成立
    """
    args = build_parser().parse_args(argv)

    # 載入環境變數
    load_dotenv()
    setup_logging(os.getenv("LOG_LEVEL", "INFO"))

    # 命令行參數優先於環境變數
    config_path = args.config or os.getenv("SCENARIO_CONFIG") or None
    out_dir = args.out_dir or os.getenv("OUTPUT_DIR", "output")

    try:
        config = load_config(config_path)
        cache_dir = os.getenv("BASIS_CACHE_DIR")
        if cache_dir and not config.basis.cache_dir:
            config = config.with_overrides({"basis.cache_dir": cache_dir})
        title = os.path.splitext(os.path.basename(config_path))[0] if config_path else "default"

        if args.command in ("run", "verify"):
            print_header(f"{args.command}: {title}")
            outcome = run_scenario(
                config,
                out_dir,
                hard=args.hard_invariants,
                seed=args.seed,
                verify=args.command == "verify",
                title=title,
            )
            for check in outcome.report.failures():
                print_error(f"{check.name} = {check.value:.3e} (tolerance {check.tolerance:.3e})")
            if outcome.status == 0:
                print_success(f"所有不變量成立，輸出在 {out_dir}")
            else:
                print_error(f"不變量被破壞 {len(outcome.result.breaches)} 次，輸出在 {out_dir}")
            return outcome.status

        if args.command == "sweep-domain":
            print_header(f"domain sweep: {title}")
            report = domain_sweep(config, args.radii, out_dir, args.workers, args.seed)
            for R, diff in zip(report.radii, report.differences):
                print_info(f"R={R:g}: 與下一個 R 的軌跡差 {diff:.3e}")
            if report.decreasing:
                print_success("軌跡差隨 R 遞減")
            else:
                print_info("軌跡差未呈遞減")
            return 0

        print_header(f"refinement sweep: {title}")
        refined = refinement_sweep(
            config, args.sizes, args.steps, out_dir, args.workers, args.seed
        )
        for entry in refined.entries:
            print_info(
                f"N={entry.N} dt={entry.dt:g}: 弱形式殘差 {entry.weak_residual:.3e}, "
                f"投影誤差 {entry.projection_error:.3e}"
            )
        print_success(f"掃描結果已寫入 {out_dir}")
        return 0
    except SimulationError as e:
        print_error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
