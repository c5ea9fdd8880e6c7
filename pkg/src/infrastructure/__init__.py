"""
基礎設施層：情境設定、主控台日誌與輸出檔案
"""
