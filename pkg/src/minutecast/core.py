"""Domain types, minute windowing, and tweet/price alignment.

Everything here is an immutable value type or a pure function, so the
types can be shared freely between pipeline stages. All timestamps are
UTC epoch seconds (floats, millisecond precision is plenty for a
float64); normalization to UTC happens at ingestion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Optional

from .errors import DataError

SECONDS_PER_WINDOW = 60


def parse_timestamp(value: str) -> float:
    """Parse an ISO-8601 UTC timestamp into epoch seconds.

    Accepts a trailing ``Z`` or an explicit offset; naive timestamps are
    taken as UTC.
    """
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"invalid timestamp {value!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(ts: float) -> str:
    """Render epoch seconds as ISO-8601 UTC with a ``Z`` suffix."""
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, order=True)
class WindowKey:
    """One minute of event time, counted in minutes since the Unix epoch."""

    epoch_minute: int

    def start(self) -> float:
        return self.epoch_minute * float(SECONDS_PER_WINDOW)

    def end(self) -> float:
        return (self.epoch_minute + 1) * float(SECONDS_PER_WINDOW)

    def next(self) -> "WindowKey":
        return WindowKey(self.epoch_minute + 1)

    def iso(self) -> str:
        return format_timestamp(self.start())


def window_key(ts: float) -> WindowKey:
    """Map a UTC timestamp to the minute window containing it."""
    if not math.isfinite(ts):
        raise DataError(f"non-finite timestamp {ts!r}")
    return WindowKey(math.floor(ts / SECONDS_PER_WINDOW))


@dataclass(frozen=True)
class Tweet:
    """One social-media post with the author-influence metadata used for weighting."""

    id: str
    text: str
    follower_count: int
    like_count: int
    retweet_count: int
    created_at: float  # UTC epoch seconds

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("tweet id must be non-empty")
        for name in ("follower_count", "like_count", "retweet_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise DataError(f"tweet {name} must be a non-negative integer, got {value!r}")
        if not math.isfinite(self.created_at):
            raise DataError("tweet created_at must be finite")


@dataclass(frozen=True)
class PriceBar:
    """One-minute OHLC record in USD."""

    window: WindowKey
    open: float
    high: float
    low: float
    close: float

    def __post_init__(self) -> None:
        prices = (self.open, self.high, self.low, self.close)
        if not all(math.isfinite(p) and p >= 0 for p in prices):
            raise DataError(f"price bar fields must be finite non-negative, got {prices}")
        if not (self.low <= self.open <= self.high and self.low <= self.close <= self.high):
            raise DataError(
                f"price bar violates low <= open/close <= high: "
                f"o={self.open} h={self.high} l={self.low} c={self.close}"
            )


@dataclass(frozen=True)
class AlignedWindow:
    """One minute's summed normalized score joined with its price bar.

    ``bar`` is None for minutes where no bar was observed; downstream
    feature building fills such gaps by carrying the last close forward.
    """

    window: WindowKey
    score_sum: float
    tweet_count: int
    bar: Optional[PriceBar] = None

    def __post_init__(self) -> None:
        if self.tweet_count < 0:
            raise DataError("tweet_count must be non-negative")
        if self.tweet_count == 0 and self.score_sum != 0.0:
            raise DataError("score_sum must be 0 when tweet_count is 0")
        if not math.isfinite(self.score_sum):
            raise DataError("score_sum must be finite")
        if self.bar is not None and self.bar.window != self.window:
            raise DataError(
                f"bar window {self.bar.window} does not match aligned window {self.window}"
            )


def align(
    tweet_scores: Iterable[tuple[WindowKey, float]],
    bars: Iterable[PriceBar],
) -> list[AlignedWindow]:
    """Join per-tweet normalized scores with price bars on minute windows.

    Produces one AlignedWindow per window in the union of the inputs,
    sorted ascending. Windows with no tweets get score_sum 0; windows
    with no bar keep ``bar=None``. Duplicate bar windows are rejected.
    """
    sums: dict[WindowKey, float] = {}
    counts: dict[WindowKey, int] = {}
    for window, score in tweet_scores:
        if not math.isfinite(score):
            raise DataError(f"non-finite tweet score {score!r} in window {window}")
        sums[window] = sums.get(window, 0.0) + score
        counts[window] = counts.get(window, 0) + 1

    by_window: dict[WindowKey, PriceBar] = {}
    for bar in bars:
        if bar.window in by_window:
            raise DataError(f"duplicate price bar for window {bar.window}")
        by_window[bar.window] = bar

    out = []
    for window in sorted(set(sums) | set(by_window)):
        count = counts.get(window, 0)
        out.append(
            AlignedWindow(
                window=window,
                score_sum=sums.get(window, 0.0) if count else 0.0,
                tweet_count=count,
                bar=by_window.get(window),
            )
        )
    return out
