"""Simulated time.

Timestamps and durations are integer microseconds since the simulated epoch
(1970-01-01 00:00 UTC).  Integer ticks keep expiry comparisons exact.
"""

import re
from datetime import datetime, timedelta, timezone

US = 1
MS = 1_000
SECOND = 1_000_000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR
WEEK = 7 * DAY
MONTH = 30 * DAY
YEAR = 365 * DAY

# head pages have no successor; kept well below int64 max so dead + rt cannot overflow
INF = 1 << 62

_UNITS = {
    "us": US,
    "ms": MS,
    "s": SECOND, "sec": SECOND, "second": SECOND, "seconds": SECOND,
    "m": MINUTE, "min": MINUTE, "minute": MINUTE, "minutes": MINUTE,
    "h": HOUR, "hr": HOUR, "hour": HOUR, "hours": HOUR,
    "d": DAY, "day": DAY, "days": DAY,
    "w": WEEK, "week": WEEK, "weeks": WEEK,
    "month": MONTH, "months": MONTH,
    "y": YEAR, "year": YEAR, "years": YEAR,
}

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]+)\s*$")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def parse_duration(text):
    """Parse ``"1year"``, ``"6 h"``, ``"90s"`` into ticks.  Bare numbers are seconds."""
    text = str(text).strip()
    try:
        return int(round(float(text) * SECOND))
    except ValueError:
        pass
    m = _DURATION_RE.match(text)
    if not m or m.group(2).lower() not in _UNITS:
        raise ValueError(f"bad duration: {text!r}")
    return int(round(float(m.group(1)) * _UNITS[m.group(2).lower()]))


def at(year, month, day, hour=0, minute=0, second=0):
    """Ticks for a UTC calendar instant."""
    dt = datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc)
    return (dt - _EPOCH) // timedelta(microseconds=1)


def parse_timestamp(text):
    """Accept ISO-8601 (naive means UTC) or seconds since the epoch."""
    text = str(text).strip()
    try:
        return int(round(float(text) * SECOND))
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValueError(f"bad timestamp: {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - _EPOCH) // timedelta(microseconds=1)


def to_datetime(ticks):
    return _EPOCH + timedelta(microseconds=int(ticks))


def fmt(ticks):
    if ticks >= INF:
        return "inf"
    return to_datetime(ticks).strftime("%Y-%m-%d %H:%M:%S.%f")
