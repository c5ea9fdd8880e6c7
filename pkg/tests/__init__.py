"""
單元測試包（共用粗網格見 fixtures）
"""
