"""
self-propelled-body-flow 套件
"""
