from typing import Optional

_UNITS = (("hour", 3600), ("min", 60), ("sec", 1))


def format_elapsed(seconds: Optional[float]) -> str:
    """Duration for log lines: milliseconds under a second, else the two largest nonzero units."""
    if seconds is None or seconds < 0:
        return "n/a"
    if seconds < 1:
        return f"{seconds * 1000:.0f} ms"

    remaining = int(seconds)
    parts = []
    for name, size in _UNITS:
        value, remaining = divmod(remaining, size)
        if value:
            parts.append(f"{value} {name}{'s' if value != 1 else ''}")
    return " ".join(parts[:2])
