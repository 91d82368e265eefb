"""
Command-line interface
命令行接口
"""
