import json
from typing import Iterable, Iterator, Optional

from colorama import Fore, Style, init

init()  # Initialize colorama

COLORS = {
    "DEBUG": Fore.BLUE,
    "INFO": Fore.GREEN,
    "WARNING": Fore.YELLOW,
    "ERROR": Fore.RED,
    "CRITICAL": Fore.RED + Style.BRIGHT
}

LEVEL_PRIORITIES = {
    "DEBUG": 0,
    "INFO": 1,
    "WARNING": 2,
    "ERROR": 3,
    "CRITICAL": 4
}

CONTEXT_FIELDS = ["operation", "run_id", "epoch", "step", "status", "path"]
LOSS_FIELDS = ["loss", "seg_loss", "gen_loss", "disc_loss", "cycle_loss"]


def format_log_entry(entry: str, color: bool = True) -> str:
    try:
        data = json.loads(entry)
        level = data.get("level", "INFO")
        colour = COLORS.get(level, "") if color else ""
        reset = Style.RESET_ALL if color else ""

        timestamp = data.get("timestamp", "")
        message = data.get("message", "")

        extra = {k: v for k, v in data.items() if k not in ["timestamp", "level", "logger", "message"]}

        # Extract key context fields
        context = [f"{field}={extra[field]}" for field in CONTEXT_FIELDS if field in extra]
        for field in LOSS_FIELDS:
            if isinstance(extra.get(field), (int, float)):
                context.append(f"{field}={extra[field]:.4f}")

        # Evaluation summaries carry their aggregates under "metrics"
        if isinstance(extra.get("metrics"), dict):
            metrics = extra["metrics"]
            context.append(f"miou={metrics.get('miou', 0)}")
            context.append(f"global_acc={metrics.get('global_acc', 0)}")

        context_str = " | ".join(context)
        return f"{timestamp} {colour}{level.ljust(8)}{reset} {message} [{context_str}]"

    except (json.JSONDecodeError, AttributeError):
        return entry  # Return the original line if not a JSON object


def filter_entries(lines: Iterable[str], level: Optional[str] = None, text: Optional[str] = None,
                   operation: Optional[str] = None) -> Iterator[str]:
    """Yield the non-empty lines that pass the level, text and operation filters."""
    min_priority = LEVEL_PRIORITIES.get(level, 0) if level else 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if text and text.lower() not in line.lower():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError:
            if level is None and operation is None:
                yield line
            continue
        if not isinstance(data, dict):
            continue
        if level and LEVEL_PRIORITIES.get(data.get("level", ""), 0) < min_priority:
            continue
        if operation and data.get("operation", "") != operation:
            continue
        yield line

