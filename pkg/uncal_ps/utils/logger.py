#!/usr/bin/env python3
"""
Unified logging system for uncal-ps
统一的日志系统 - 多级别、带颜色、带模块前缀的日志输出
"""
import os
import sys
import time
from contextlib import contextmanager
from enum import Enum
from typing import Iterator, Optional, TextIO


class LogLevel(Enum):
    """日志级别枚举"""

    DEBUG = 0
    INFO = 1
    WARNING = 2
    ERROR = 3

    @classmethod
    def from_string(cls, level_str: str) -> "LogLevel":
        """从字符串转换为日志级别，无法识别时回退到INFO"""
        try:
            return cls[level_str.strip().upper()]
        except KeyError:
            return cls.INFO


class Color:
    """ANSI颜色代码"""

    RESET = "\033[0m"
    BOLD = "\033[1m"
    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    BRIGHT_BLACK = "\033[90m"
    BRIGHT_RED = "\033[91m"
    BRIGHT_YELLOW = "\033[93m"
    BRIGHT_CYAN = "\033[96m"


# 级别 -> (标签, 颜色)
_LEVEL_STYLE = {
    LogLevel.DEBUG: ("DEBUG", Color.BRIGHT_BLACK),
    LogLevel.INFO: ("INFO", Color.BRIGHT_CYAN),
    LogLevel.WARNING: ("WARNING", Color.BRIGHT_YELLOW),
    LogLevel.ERROR: ("ERROR", Color.BRIGHT_RED),
}


class Logger:
    """统一日志记录器

    DEBUG/INFO 输出到 stdout，WARNING/ERROR 输出到 stderr
    """

    def __init__(self, name: str = "UncalPS", min_level: LogLevel = LogLevel.INFO, use_color: bool = True):
        """
        初始化日志记录器

        Args:
            name: 日志记录器名称
            min_level: 最低日志级别
            use_color: 是否使用颜色（仅在终端中生效）
        """
        self.name = name
        self.min_level = min_level
        self.use_color = use_color

    def _stream(self, level: LogLevel) -> TextIO:
        return sys.stderr if level.value >= LogLevel.WARNING.value else sys.stdout

    def _format_message(self, level: LogLevel, message: str, prefix: Optional[str], colored: bool) -> str:
        """
        格式化日志消息

        Args:
            level: 日志级别
            message: 消息内容
            prefix: 可选的前缀（如 SOLVER、SHADOW）
            colored: 是否输出ANSI颜色

        Returns:
            格式化后的消息
        """
        label, color = _LEVEL_STYLE[level]
        level_str = f"{color}{label:8}{Color.RESET}" if colored else f"{label:8}"
        prefix_str = f"[{prefix}] " if prefix else ""
        return f"{level_str} {prefix_str}{message}"

    def log(self, level: LogLevel, message: str, prefix: Optional[str] = None) -> None:
        """记录日志"""
        if level.value < self.min_level.value:
            return
        stream = self._stream(level)
        colored = self.use_color and stream.isatty()
        print(self._format_message(level, message, prefix, colored), file=stream, flush=True)

    def debug(self, message: str, prefix: Optional[str] = None) -> None:
        self.log(LogLevel.DEBUG, message, prefix)

    def info(self, message: str, prefix: Optional[str] = None) -> None:
        self.log(LogLevel.INFO, message, prefix)

    def warning(self, message: str, prefix: Optional[str] = None) -> None:
        self.log(LogLevel.WARNING, message, prefix)

    def error(self, message: str, prefix: Optional[str] = None) -> None:
        self.log(LogLevel.ERROR, message, prefix)

    def set_level(self, level: LogLevel) -> None:
        """设置最低日志级别"""
        self.min_level = level

    def is_enabled(self, level: LogLevel) -> bool:
        return level.value >= self.min_level.value


# 全局日志记录器实例
_global_logger: Optional[Logger] = None


def _get_default_log_level() -> LogLevel:
    """从环境变量 UNCAL_PS_LOG_LEVEL 获取默认日志级别，默认为INFO"""
    return LogLevel.from_string(os.environ.get("UNCAL_PS_LOG_LEVEL", "INFO"))


def get_logger(name: str = "UncalPS", min_level: Optional[LogLevel] = None) -> Logger:
    """
    获取全局日志记录器

    Args:
        name: 日志记录器名称
        min_level: 最低日志级别，如果为None则从环境变量读取

    Returns:
        Logger实例
    """
    global _global_logger
    if _global_logger is None:
        _global_logger = Logger(name, min_level if min_level is not None else _get_default_log_level())
    return _global_logger


def set_log_level(level: LogLevel) -> None:
    """设置全局日志级别"""
    get_logger().set_level(level)


# 便捷函数
def debug(message: str, prefix: Optional[str] = None) -> None:
    get_logger().debug(message, prefix)


def info(message: str, prefix: Optional[str] = None) -> None:
    get_logger().info(message, prefix)


def warning(message: str, prefix: Optional[str] = None) -> None:
    get_logger().warning(message, prefix)


def error(message: str, prefix: Optional[str] = None) -> None:
    get_logger().error(message, prefix)


@contextmanager
def timed(label: str, prefix: Optional[str] = None) -> Iterator[None]:
    """记录一段代码的耗时（INFO级别）"""
    start = time.perf_counter()
    try:
        yield
    finally:
        info(f"{label} took {time.perf_counter() - start:.2f}s", prefix)
