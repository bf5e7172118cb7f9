"""
Console logging for training runs and CLI commands.
"""

import os
import re
import sys
from typing import Any, Dict, Optional


class RunLogger:
    """Prints prefixed, escape-free lines; `quiet` silences everything but errors."""

    def __init__(self, quiet: Optional[bool] = None):
        self.escape_pattern = re.compile(r'\x1b\[[0-9;]*[mGKHF]|\x1b\[[0-9]*~')
        if quiet is None:
            quiet = os.getenv('GNRL_QUIET', '') not in ('', '0')
        self.quiet = quiet

    def clean_text(self, text: Any) -> str:
        """Strip terminal escape sequences and control characters (prompt ids come from files)."""
        cleaned = self.escape_pattern.sub('', str(text))
        return re.sub(r'[\x00-\x08\x0B\x0C\x0E-\x1F\x7F]', '', cleaned)

    def log(self, message: Any, prefix: str = "", force: bool = False):
        if self.quiet and not force:
            return
        line = self.clean_text(message)
        print(f"{prefix} {line}" if prefix else line)
        sys.stdout.flush()

    def info(self, message: Any):
        self.log(message, "ℹ️")

    def success(self, message: Any):
        self.log(message, "✅")

    def warning(self, message: Any):
        self.log(message, "⚠️")

    def error(self, message: Any):
        self.log(message, "❌", force=True)

    def processing(self, message: Any):
        self.log(message, "🔄")

    def progress(self, stage: str, step: int, total: int, metrics: Dict[str, float]):
        """One line per logging interval of a training loop."""
        parts = ' '.join(f"{k}={v:.4g}" for k, v in metrics.items())
        self.log(f"[{stage}] step {step}/{total} {parts}", "📈")


# Global logger instance
logger = RunLogger()


def set_quiet(quiet: bool):
    logger.quiet = quiet


def log_processing(message: str):
    logger.processing(message)


def log_success(message: str):
    logger.success(message)


def log_error(message: str):
    logger.error(message)


def log_warning(message: str):
    logger.warning(message)


def log_info(message: str):
    logger.info(message)
