"""
Core data models and the automatic differentiation engine
核心数据模型与自动微分引擎
"""
