"""
報告生成器 - 將模擬摘要與驗證結果渲染為 HTML 與 JSON
"""

import json
import math
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import pytz
from jinja2 import Environment, FileSystemLoader, select_autoescape

from src.application.verify import VerificationReport


class ReportGenerator:
    """驗證報告生成器"""

    def __init__(self, timezone: Optional[str] = None) -> None:
        """初始化 Jinja2 模板環境"""
        template_dir = Path(__file__).parent.parent / "presentation" / "templates"
        self.env = Environment(
            loader=FileSystemLoader(template_dir),
            autoescape=select_autoescape(["html"]),
        )
        self.env.filters["sci"] = self._sci
        self.env.filters["badge"] = self._badge
        self.timezone = pytz.timezone(
            timezone or os.getenv("REPORT_TIMEZONE", "Asia/Taipei")
        )

    def generate(
        self,
        output_dir: str,
        title: str,
        report: VerificationReport,
        summary: Mapping[str, Any],
        config: Mapping[str, str],
        ledger_rows: Optional[List[Mapping[str, float]]] = None,
    ) -> Dict[str, str]:
        """
        寫出 report.html 與 report.json

        Args:
            output_dir: 輸出目錄
            title: 報告標題（情境名稱）
            report: 驗證項目
            summary: 執行摘要（步數、最終能量等）
            config: 扁平化的情境設定
            ledger_rows: 要列出的帳本列

        Returns:
            {"html": 路徑, "json": 路徑}
        """
        os.makedirs(output_dir, exist_ok=True)
        now = datetime.now(self.timezone)

        template = self.env.get_template("report.html")
        html_content = template.render(
            title=title,
            checks=report.checks,
            passed=report.passed,
            summary=dict(summary),
            config=dict(sorted(config.items())),
            ledger=list(ledger_rows or []),
            now=now.strftime("%Y-%m-%d %H:%M:%S %Z"),
        )
        html_path = os.path.join(output_dir, "report.html")
        with open(html_path, "w", encoding="utf-8") as f:
            f.write(html_content)

        payload = {
            "title": title,
            "generated_at": now.isoformat(),
            "summary": {k: self._jsonable(v) for k, v in summary.items()},
            "config": dict(config),
            **report.to_dict(),
        }
        json_path = os.path.join(output_dir, "report.json")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self._sanitize(payload), f, indent=2, ensure_ascii=False)

        return {"html": html_path, "json": json_path}

    @classmethod
    def _sanitize(cls, value: Any) -> Any:
        """JSON 不接受 inf/NaN，改以字串表示"""
        if isinstance(value, dict):
            return {k: cls._sanitize(v) for k, v in value.items()}
        if isinstance(value, list):
            return [cls._sanitize(v) for v in value]
        if isinstance(value, float) and not math.isfinite(value):
            return str(value)
        return value

    @staticmethod
    def _jsonable(value: Any) -> Any:
        if hasattr(value, "item"):
            return value.item()
        return value

    @staticmethod
    def _sci(value: Any, digits: int = 3) -> str:
        """
        以科學記號格式化數值

        Args:
            value: 數值
            digits: 小數位數

        Returns:
            格式化字串；非數值原樣回傳
        """
        try:
            number = float(value)
        except (TypeError, ValueError):
            return str(value)
        if math.isinf(number):
            return "—" if number > 0 else "-inf"
        return f"{number:.{digits}e}"

    @staticmethod
    def _badge(passed: bool) -> str:
        """通過/失敗標籤的 CSS 類別與文字"""
        return "pass" if passed else "fail"
