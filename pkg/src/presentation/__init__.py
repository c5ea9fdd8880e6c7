"""
表現層：驗證報告模板
"""
