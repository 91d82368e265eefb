"""
Dataset and image input/output
数据集与图像读写
"""
