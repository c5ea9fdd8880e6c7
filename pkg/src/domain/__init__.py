"""
領域層：資料模型、剛體形狀與錯誤類型
"""
