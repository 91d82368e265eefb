#!/usr/bin/env python3
"""
Utils package for uncal-ps
工具包
"""

from uncal_ps.utils.logger import LogLevel, debug, error, get_logger, info, set_log_level, timed, warning

__all__ = [
    # Logger functions
    "debug",
    "info",
    "warning",
    "error",
    "get_logger",
    "set_log_level",
    "LogLevel",
    "timed",
]
