"""
主控台輸出 - 彩色訊息與日誌格式
"""

import logging
import sys
from typing import Optional, TextIO

from colorama import Fore, Style, init

# 初始化 colorama
init()

_LEVEL_COLORS = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.BLUE,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED,
}


def print_success(message: str) -> None:
    """打印成功訊息"""
    print(f"{Fore.GREEN}✓ {message}{Style.RESET_ALL}")


def print_error(message: str) -> None:
    """打印錯誤訊息"""
    print(f"{Fore.RED}✗ {message}{Style.RESET_ALL}", file=sys.stderr)


def print_info(message: str) -> None:
    """打印資訊訊息"""
    print(f"{Fore.BLUE}ℹ {message}{Style.RESET_ALL}")


def print_header(message: str) -> None:
    """打印標題"""
    print(f"\n{Fore.CYAN}=== {message} ==={Style.RESET_ALL}\n")


class ColorFormatter(logging.Formatter):
    """依日誌等級上色"""

    def format(self, record: logging.LogRecord) -> str:
        color = _LEVEL_COLORS.get(record.levelno, "")
        return f"{color}{super().format(record)}{Style.RESET_ALL}"


def setup_logging(level: str = "INFO", stream: Optional[TextIO] = None) -> logging.Handler:
    """
    在根 logger 安裝彩色 handler

    Args:
        level: 日誌等級名稱
        stream: 輸出串流，預設 stderr

    Returns:
        安裝的 handler
    """
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(ColorFormatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    for existing in list(root.handlers):
        if isinstance(existing.formatter, ColorFormatter):
            root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    return handler
