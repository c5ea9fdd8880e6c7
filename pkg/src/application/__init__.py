"""
應用層：幾何、基底、輸運、推進、Galerkin 時間推進與驗證
"""
