import logging
import os
from typing import Optional, Union

from .colors import make_str, strip_tags

CONSOLE_FORMAT = "%(levelname)s - %(message)s"
FILE_FORMAT = "%(asctime)s %(levelname)s %(message)s"


class TagFormatter(logging.Formatter):
    """Renders ``<<color>>`` tags to ANSI codes, or strips them for plain sinks."""

    def __init__(self, fmt: str, colored: bool = True) -> None:
        super().__init__(fmt)
        self.colored = colored

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        return make_str(text) if self.colored else strip_tags(text)


class LoggerWrap:
    """Project-scoped logger; messages may carry color tags."""

    def __init__(self, name: str, disable_log: bool = False, level: int = logging.INFO) -> None:
        self._logger = logging.getLogger(name)

        # Prevent leaking to root logger
        self._logger.propagate = False

        if disable_log:
            self._logger.disabled = True
            return

        if not self._logger.handlers:
            self._logger.setLevel(level)
            handler = logging.StreamHandler()
            handler.setFormatter(TagFormatter(CONSOLE_FORMAT))
            self._logger.addHandler(handler)

    def set_level(self, level: Union[int, str]) -> None:
        self._logger.setLevel(level)

    def is_debug(self) -> bool:
        return self._logger.isEnabledFor(logging.DEBUG)

    def attach_file(self, out_dir: str, name: str = "run.log") -> Optional[logging.Handler]:
        """
        Mirror every record into ``out_dir/name`` without color codes.

        Returns:
            The handler, for ``detach``; None when the file cannot be opened
        """
        try:
            handler = logging.FileHandler(os.path.join(out_dir, name), encoding="utf-8")
        except OSError as e:
            self.warning(f"<<yellow>> no run log in {out_dir}: {e}")
            return None
        handler.setFormatter(TagFormatter(FILE_FORMAT, colored=False))
        self._logger.addHandler(handler)
        return handler

    def detach(self, handler: Optional[logging.Handler]) -> None:
        if handler is None:
            return
        self._logger.removeHandler(handler)
        handler.close()

    def debug(self, msg: str, *args, **kwargs) -> None:
        self._logger.debug(msg, *args, **kwargs)

    def info(self, msg: str, *args, **kwargs) -> None:
        self._logger.info(msg, *args, **kwargs)

    def info_if_or_debug(self, msg: str, value) -> None:
        """Log at info level if value is truthy, otherwise at debug level."""
        if value:
            self._logger.info(msg)
        else:
            self._logger.debug(msg)

    def warning(self, msg: str, *args, **kwargs) -> None:
        self._logger.warning(msg, *args, **kwargs)

    def error_red(self, msg: str) -> None:
        self._logger.error(f"<<red>> {msg} <<default>>")


logger = LoggerWrap("nsp")


__all__ = [
    "logger",
    "LoggerWrap",
    "TagFormatter",
]
