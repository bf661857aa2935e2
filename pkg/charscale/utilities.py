import logging
import os

LOG_LEVEL_VARIABLE = "CHARSCALE_LOG_LEVEL"


def env_log_level(default=logging.WARNING):
    """
    logging level named by CHARSCALE_LOG_LEVEL

    Keyword arguments:
    default -- level used when the variable is unset or unknown

    return:
    level -- numeric logging level
    """
    name = os.environ.get(LOG_LEVEL_VARIABLE, "").strip().upper()
    if not name:
        return default
    if name.isdigit():
        return int(name)
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else default


def human_bytes(count):
    for unit in ("B", "KB", "MB", "GB"):
        if abs(count) < 1000. or unit == "GB":
            return "{:.2f} {}".format(count, unit)
        count /= 1000.


def format_table(header, rows):
    """left aligned plain text table"""
    cells = [[str(cell) for cell in header]] + [[str(cell) for cell in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
             for row in cells]
    return "\n".join(lines)
