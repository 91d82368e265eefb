"""
Uncalibrated Photometric Stereo
基于可微逆渲染的非标定光度立体系统

Jointly recovers depth, surface normals, anisotropic reflectance, soft shadows and
per-image lighting from a single-view image stack.
"""

__version__ = "0.1.0"
__author__ = "ZGCA Team"
