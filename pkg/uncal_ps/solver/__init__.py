"""
Differentiable inverse-rendering solver
可微逆渲染求解器：坐标场、几何、阴影、反射模型与训练
"""
