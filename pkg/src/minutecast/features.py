"""Feature engineering over the aligned window stream.

Turns aligned windows into the four model inputs: the window's summed
sentiment score, the previous window's close, and rolling means (n=100)
of past closes and past window scores. The training target for a
feature vector at window W is the close of window W+1.

The stateful FeatureBuilder is owned by a single pipeline stage (one
writer); its snapshot() output is a plain JSON-safe dict used for
checkpointing.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import AlignedWindow, PriceBar, WindowKey
from .errors import DataError, NotWarmedUpError

DEFAULT_ROLLING_WINDOW = 100


@dataclass(frozen=True)
class FeatureVector:
    """The four model inputs for one window."""

    window: WindowKey
    score_sum: float
    previous_close: float
    ma_close: float
    ma_score: float

    def __post_init__(self) -> None:
        for name in ("score_sum", "previous_close", "ma_close", "ma_score"):
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"feature {name} must be finite")

    def as_list(self) -> list[float]:
        return [self.score_sum, self.previous_close, self.ma_close, self.ma_score]


FEATURE_NAMES = ("score_sum", "previous_close", "ma_close", "ma_score")


@dataclass(frozen=True)
class LabeledExample:
    """A feature vector paired with the next window's close."""

    features: FeatureVector
    target: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.target) or self.target < 0:
            raise DataError(f"target must be finite and non-negative, got {self.target!r}")


def rolling_mean(series: Sequence[float], n: int) -> float:
    """Mean of the last min(n, len(series)) values."""
    if n <= 0:
        raise DataError(f"rolling window must be positive, got {n}")
    if len(series) == 0:
        raise DataError("rolling_mean of an empty series")
    tail = list(series)[-n:] if len(series) > n else series
    return math.fsum(tail) / len(tail)


def fill_gaps(windows: Sequence[AlignedWindow]) -> list[AlignedWindow]:
    """Make a sorted window sequence contiguous with a bar on every window.

    Windows with a missing bar get a synthetic flat bar at the previous
    close, and missing window keys are inserted the same way (score 0).
    Leading windows before the first real bar are dropped. Score data is
    never modified.
    """
    ordered = list(windows)
    for a, b in zip(ordered, ordered[1:]):
        if b.window <= a.window:
            raise DataError("fill_gaps input must be sorted with unique windows")
    first_bar = next((i for i, w in enumerate(ordered) if w.bar is not None), None)
    if first_bar is None:
        raise DataError("cannot fill gaps: no window has a price bar")

    out: list[AlignedWindow] = []
    last_close: float | None = None
    expected: WindowKey | None = None
    for w in ordered[first_bar:]:
        while expected is not None and expected < w.window:
            out.append(
                AlignedWindow(
                    window=expected,
                    score_sum=0.0,
                    tweet_count=0,
                    bar=_flat_bar(expected, last_close),
                )
            )
            expected = expected.next()
        if w.bar is None:
            w = AlignedWindow(
                window=w.window,
                score_sum=w.score_sum,
                tweet_count=w.tweet_count,
                bar=_flat_bar(w.window, last_close),
            )
        out.append(w)
        last_close = w.bar.close
        expected = w.window.next()
    return out


def _flat_bar(window: WindowKey, close: float) -> PriceBar:
    return PriceBar(window=window, open=close, high=close, low=close, close=close)


def _vector(
    window: WindowKey,
    score_sum: float,
    closes: Sequence[float],
    scores: Sequence[float],
    n: int,
) -> FeatureVector:
    return FeatureVector(
        window=window,
        score_sum=score_sum,
        previous_close=closes[-1],
        ma_close=rolling_mean(closes, n),
        ma_score=rolling_mean(scores, n),
    )


def build_features(
    history: Sequence[AlignedWindow],
    current: AlignedWindow,
    n: int = DEFAULT_ROLLING_WINDOW,
) -> FeatureVector:
    """Build the feature vector for ``current`` from gap-filled history.

    ``history`` must be non-empty, contiguous, bar-complete, and end at
    the window immediately before ``current``.
    """
    if len(history) == 0:
        raise NotWarmedUpError("feature history is empty")
    if history[-1].window.next() != current.window:
        raise DataError(
            f"current window {current.window} does not follow history end "
            f"{history[-1].window}"
        )
    tail = history[-n:]
    closes = []
    for w in tail:
        if w.bar is None:
            raise DataError(f"history window {w.window} has no price bar")
        closes.append(w.bar.close)
    scores = [w.score_sum for w in tail]
    return _vector(current.window, current.score_sum, closes, scores, n)


class FeatureBuilder:
    """Streaming feature builder with carry-forward gap filling.

    push() accepts consecutive aligned windows (bars may be absent) and
    returns the feature vector for each window once at least one window
    of history exists. Exactly one pipeline stage may mutate a builder.
    """

    def __init__(self, n: int = DEFAULT_ROLLING_WINDOW):
        if n <= 0:
            raise DataError(f"rolling window must be positive, got {n}")
        self.n = n
        self._closes: deque[float] = deque(maxlen=n)
        self._scores: deque[float] = deque(maxlen=n)
        self._last_window: Optional[WindowKey] = None
        self._last_close: Optional[float] = None

    @property
    def last_window(self) -> Optional[WindowKey]:
        return self._last_window

    @property
    def last_close(self) -> Optional[float]:
        return self._last_close

    @property
    def warm(self) -> bool:
        return self._last_window is not None

    def fill(self, w: AlignedWindow) -> Optional[AlignedWindow]:
        """Return ``w`` with a bar, carrying the last close forward.

        Returns None for a bar-less window when no close has been seen
        yet (the leading-gap drop rule).
        """
        if w.bar is not None:
            return w
        if self._last_close is None:
            return None
        return AlignedWindow(
            window=w.window,
            score_sum=w.score_sum,
            tweet_count=w.tweet_count,
            bar=_flat_bar(w.window, self._last_close),
        )

    def push(self, w: AlignedWindow) -> Optional[FeatureVector]:
        """Consume one closed window; return its feature vector if warm.

        The vector is built before ``w`` joins the history, so its
        previous_close and rolling means cover strictly earlier windows.
        """
        if self._last_window is not None and w.window != self._last_window.next():
            raise DataError(
                f"window {w.window} does not follow {self._last_window}; "
                "the builder requires a contiguous stream"
            )
        filled = self.fill(w)
        if filled is None:
            return None  # leading bar-less window: drop
        vector = None
        if self._closes:
            vector = _vector(
                filled.window, filled.score_sum, self._closes, self._scores, self.n
            )
        self._closes.append(filled.bar.close)
        self._scores.append(filled.score_sum)
        self._last_window = filled.window
        self._last_close = filled.bar.close
        return vector

    def snapshot(self) -> dict:
        """JSON-safe copy of the builder state for checkpointing."""
        return {
            "n": self.n,
            "closes": list(self._closes),
            "scores": list(self._scores),
            "last_window": None
            if self._last_window is None
            else self._last_window.epoch_minute,
            "last_close": self._last_close,
        }

    @classmethod
    def restore(cls, snapshot: dict) -> "FeatureBuilder":
        builder = cls(n=int(snapshot["n"]))
        builder._closes.extend(float(c) for c in snapshot["closes"])
        builder._scores.extend(float(s) for s in snapshot["scores"])
        if snapshot["last_window"] is not None:
            builder._last_window = WindowKey(int(snapshot["last_window"]))
        if snapshot["last_close"] is not None:
            builder._last_close = float(snapshot["last_close"])
        return builder
