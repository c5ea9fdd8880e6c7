#!/usr/bin/env python
"""
報告預覽腳本 - 執行一個情境並在瀏覽器中開啟驗證報告
"""
import http.server
import os
import shutil
import socketserver
import sys
import threading
import time
import webbrowser
from pathlib import Path

from dotenv import load_dotenv

from src.application.experiments import run_scenario
from src.domain.errors import SimulationError
from src.infrastructure.console import print_error, print_header, print_info, print_success


def start_http_server(directory: str, port: int = 8080) -> int:
    """
    啟動一個 HTTP 伺服器來預覽生成的報告

    Args:
        directory: 要提供的目錄
        port: 伺服器端口

    Returns:
        實際使用的端口
    """

    def handler(*args, **kwargs):
        return http.server.SimpleHTTPRequestHandler(*args, directory=directory, **kwargs)

    class QuietTCPServer(socketserver.TCPServer):
        allow_reuse_address = True

        def handle_error(self, request, client_address):
            pass

    try:
        httpd = QuietTCPServer(("", port), handler)
    except OSError:
        if port != 8090:
            print_info(f"端口 {port} 已被佔用，嘗試端口 8090...")
            return start_http_server(directory, 8090)
        raise

    server_thread = threading.Thread(target=httpd.serve_forever)
    server_thread.daemon = True
    server_thread.start()
    return port


def preview_report() -> None:
    """執行情境（含完整驗證）並預覽 report.html"""
    print_header("報告預覽")

    load_dotenv()
    config_path = os.getenv("SCENARIO_CONFIG", "scenarios/zero_data.env")
    preview_dir = "preview_output"

    if os.path.exists(preview_dir):
        shutil.rmtree(preview_dir)

    try:
        print_info(f"執行情境 {config_path} ...")
        title = Path(config_path).stem
        outcome = run_scenario(config_path, preview_dir, verify=True, title=title)
    except SimulationError as e:
        print_error(f"發生錯誤: {e}")
        sys.exit(1)

    report_file = outcome.files["html"]
    print_success(f"成功生成報告: {report_file}")
    print_info(f"報告大小: {Path(report_file).stat().st_size / 1024:.2f} KB")
    print_info(f"檢查項目 {len(outcome.report.checks)} 個，失敗 {len(outcome.report.failures())} 個")

    try:
        port = start_http_server(preview_dir, 8080)
    except OSError as e:
        print_error(f"啟動伺服器時發生錯誤: {e}")
        print_info("請手動開啟報告: " + os.path.abspath(report_file))
        sys.exit(1)

    url = f"http://localhost:{port}/{os.path.basename(report_file)}"
    print_info(f"在瀏覽器中開啟 {url}")
    webbrowser.open(url)
    print_info("按 Ctrl+C 關閉伺服器")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        print_info("\n伺服器已停止")


if __name__ == "__main__":
    preview_report()
