"""Event sources and watermark-based window closing.

Three sources produce one merged, time-ordered FeedEvent stream: replay
of tweet/price files, a seeded synthetic generator, and (contract only)
live feed clients. Price-bar events carry the event time of their
window start and sort before tweets at the same instant, so a window's
bar is already attached when its tweets aggregate. Heartbeats carry the
clock forward across minutes with no other events.

Window closing is watermark-driven: window W closes once an event with
event_time >= end(W) + allowed_lateness has been seen; tweets for
already-closed windows are counted as dropped-late and excluded.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
import time as _time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .core import (
    SECONDS_PER_WINDOW,
    AlignedWindow,
    PriceBar,
    Tweet,
    WindowKey,
    format_timestamp,
    parse_timestamp,
    window_key,
)
from .errors import DataError
from .sentiment import Lexicon, bundled_lexicon, clean_text, compound_score

logger = logging.getLogger(__name__)

KIND_TWEET = "tweet"
KIND_PRICE = "price_bar"
KIND_HEARTBEAT = "heartbeat"

# Tie-break priority at equal event times: clock carriers first, then
# bars, then tweets, so a window's bar is complete before its tweets.
_PRIORITY = {KIND_HEARTBEAT: 0, KIND_PRICE: 1, KIND_TWEET: 2}

PRICE_HEADER = ["time", "open", "high", "low", "close"]

# Twitter API limits honored by live clients: 450 requests per 15
# minutes, history no older than 7 days.
RATE_LIMIT_REQUESTS = 450
RATE_LIMIT_WINDOW_S = 900.0
HISTORY_CAP_DAYS = 7


@dataclass(frozen=True)
class FeedEvent:
    kind: str
    payload: Optional[object]
    event_time: float

    def __post_init__(self) -> None:
        if self.kind not in _PRIORITY:
            raise DataError(f"unknown event kind {self.kind!r}")
        if self.kind == KIND_TWEET and not isinstance(self.payload, Tweet):
            raise DataError("tweet event needs a Tweet payload")
        if self.kind == KIND_PRICE and not isinstance(self.payload, PriceBar):
            raise DataError("price_bar event needs a PriceBar payload")
        if self.kind == KIND_HEARTBEAT and self.payload is not None:
            raise DataError("heartbeat carries no payload")
        if not math.isfinite(self.event_time):
            raise DataError("event_time must be finite")


@dataclass
class ReplayStats:
    parsed_tweets: int = 0
    malformed_tweets: int = 0
    parsed_bars: int = 0
    malformed_bars: int = 0


@dataclass
class WatermarkStats:
    included_tweets: int = 0
    dropped_late: int = 0
    replay_skipped: int = 0


def parse_tweet_line(line: str) -> Tweet:
    """Parse one JSONL tweet record; raises DataError on any defect."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"bad JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError("tweet record must be a JSON object")
    try:
        return Tweet(
            id=str(obj["id"]),
            text=str(obj["text"]),
            follower_count=int(obj["user_followers"]),
            like_count=int(obj["likes"]),
            retweet_count=int(obj["retweets"]),
            created_at=parse_timestamp(str(obj["created_at"])),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad tweet record: {exc}") from exc


def parse_price_row(row: dict[str, str]) -> PriceBar:
    """Parse one price CSV row; raises DataError on any defect."""
    try:
        ts = parse_timestamp(row["time"])
        return PriceBar(
            window=window_key(ts),
            open=float(row["open"]),
            high=float(row["high"]),
            low=float(row["low"]),
            close=float(row["close"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"bad price row: {exc}") from exc


def _tweet_events(path: str | Path, stats: ReplayStats) -> Iterator[FeedEvent]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read tweet file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tweet = parse_tweet_line(line)
            except DataError as exc:
                stats.malformed_tweets += 1
                logger.warning("%s:%d skipped: %s", path, lineno, exc)
                continue
            stats.parsed_tweets += 1
            yield FeedEvent(KIND_TWEET, tweet, tweet.created_at)


def _price_events(path: str | Path, stats: ReplayStats) -> Iterator[FeedEvent]:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read price file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != PRICE_HEADER:
            raise DataError(
                f"price file {path} must start with header {','.join(PRICE_HEADER)}"
            )
        for row in reader:
            try:
                bar = parse_price_row(row)
            except DataError as exc:
                stats.malformed_bars += 1
                logger.warning("%s:%d skipped: %s", path, reader.line_num, exc)
                continue
            stats.parsed_bars += 1
            yield FeedEvent(KIND_PRICE, bar, bar.window.start())


def _with_heartbeats(events: Iterable[FeedEvent]) -> Iterator[FeedEvent]:
    """Insert a heartbeat at every minute boundary the stream crosses."""
    next_beat: float | None = None
    for ev in events:
        if next_beat is None:
            next_beat = window_key(ev.event_time).start()
        while next_beat <= ev.event_time:
            yield FeedEvent(KIND_HEARTBEAT, None, next_beat)
            next_beat += float(SECONDS_PER_WINDOW)
        yield ev


def replay(
    tweet_file: str | Path,
    price_file: str | Path,
    speed: float | str = "max",
    stats: ReplayStats | None = None,
    sleep: Callable[[float], None] = _time.sleep,
) -> Iterator[FeedEvent]:
    """Merge replay files into one ordered event stream.

    ``speed`` is a real-time multiplier (1.0 = original pacing) or
    ``"max"`` for no pacing; pacing never changes stream content.
    Malformed lines are skipped and counted in ``stats``.
    """
    if speed != "max" and (not isinstance(speed, (int, float)) or speed <= 0):
        raise DataError(f"speed must be a positive number or 'max', got {speed!r}")
    if stats is None:
        stats = ReplayStats()
    merged = heapq.merge(
        _price_events(price_file, stats),
        _tweet_events(tweet_file, stats),
        key=lambda ev: (ev.event_time, _PRIORITY[ev.kind]),
    )
    last_time: float | None = None
    for ev in _with_heartbeats(merged):
        if speed != "max":
            if last_time is not None and ev.event_time > last_time:
                sleep((ev.event_time - last_time) / float(speed))
            last_time = ev.event_time
        yield ev


@dataclass(frozen=True)
class SyntheticConfig:
    """Desk-scale generator of a sentiment-led price stream.

    ``lag_k`` is how many minutes sentiment leads price. The price level
    responds transiently to the lagged standardized sentiment on top of
    a seeded multiplicative noise walk, so a lag sweep of scores against
    closes peaks at lag_k.
    """

    n_windows: int
    lag_k: int = 1
    signal_strength: float = 0.005
    noise_sigma: float = 0.0005
    tweets_per_window_mean: float = 8.0
    base_price: float = 10_000.0
    seed: int = 0
    start_minute: int = 26_076_960  # 2019-08-01T00:00Z

    def __post_init__(self) -> None:
        if self.n_windows < self.lag_k + 2:
            raise DataError("n_windows must be >= lag_k + 2")
        if self.lag_k < 0:
            raise DataError("lag_k must be >= 0")
        if not (0.0 <= self.signal_strength and math.isfinite(self.signal_strength)):
            raise DataError("signal_strength must be finite and >= 0")
        if not (0.0 <= self.noise_sigma and math.isfinite(self.noise_sigma)):
            raise DataError("noise_sigma must be finite and >= 0")
        if not (self.tweets_per_window_mean > 0):
            raise DataError("tweets_per_window_mean must be positive")
        if not (self.base_price > 0 and math.isfinite(self.base_price)):
            raise DataError("base_price must be finite and positive")


_SCORE_SCALE = 60.0  # intended window score sum per unit of sentiment
_TWEET_TEMPLATE = "market update the coin is {word} this minute"


class SyntheticStream:
    """Fully deterministic synthetic feed with accessible ground truth.

    ``sentiment`` holds the standardized per-window sentiment driving
    the prices; ``closes`` the generated close series. ``events()`` can
    be called repeatedly and always regenerates the identical stream.
    """

    def __init__(self, config: SyntheticConfig, lexicon: Lexicon | None = None):
        self.config = config
        self.lexicon = lexicon if lexicon is not None else bundled_lexicon()
        self._positive = sorted(t for t, v in self.lexicon.entries.items() if v > 0)
        self._negative = sorted(t for t, v in self.lexicon.entries.items() if v < 0)
        if not self._positive or not self._negative:
            raise DataError("synthetic generator needs both positive and negative words")
        self._compound = {
            word: compound_score(clean_text(_TWEET_TEMPLATE.format(word=word)), self.lexicon).compound
            for word in self._positive + self._negative
        }
        cfg = config
        rng = np.random.RandomState(cfg.seed)
        self.sentiment, eps = self._draw_header(rng)
        walk = cfg.base_price * np.cumprod(1.0 + eps)
        response = np.ones(cfg.n_windows)
        if cfg.lag_k < cfg.n_windows:
            lagged = np.concatenate(
                [np.zeros(cfg.lag_k), self.sentiment[: cfg.n_windows - cfg.lag_k]]
            )
            response = np.maximum(1.0 + cfg.signal_strength * lagged, 0.05)
        self.closes = walk * response

    def _draw_header(self, rng: np.random.RandomState) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        sentiment = np.clip(rng.standard_normal(cfg.n_windows), -3.0, 3.0)
        if cfg.noise_sigma > 0:
            eps = rng.normal(0.0, cfg.noise_sigma, cfg.n_windows)
        else:
            eps = np.zeros(cfg.n_windows)
        return sentiment, eps

    def _body_rng(self) -> np.random.RandomState:
        """RNG positioned just past the header draws, for per-window draws."""
        rng = np.random.RandomState(self.config.seed)
        self._draw_header(rng)
        return rng

    def windows(self) -> list[WindowKey]:
        return [
            WindowKey(self.config.start_minute + t) for t in range(self.config.n_windows)
        ]

    def events(self) -> Iterator[FeedEvent]:
        cfg = self.config
        rng = self._body_rng()
        prev_close = cfg.base_price
        for t in range(cfg.n_windows):
            window = WindowKey(cfg.start_minute + t)
            yield FeedEvent(KIND_HEARTBEAT, None, window.start())
            close = float(self.closes[t])
            bar = PriceBar(
                window=window,
                open=prev_close,
                high=max(prev_close, close),
                low=min(prev_close, close),
                close=close,
            )
            yield FeedEvent(KIND_PRICE, bar, window.start())
            prev_close = close

            s = float(self.sentiment[t])
            n_tweets = int(rng.poisson(cfg.tweets_per_window_mean))
            if n_tweets == 0:
                continue
            offsets = np.sort(rng.randint(0, SECONDS_PER_WINDOW * 1000, n_tweets))
            magnitude = _SCORE_SCALE * abs(s) / n_tweets
            words = self._positive if s >= 0 else self._negative
            for i in range(n_tweets):
                word = words[int(rng.randint(0, len(words)))]
                likes = int(rng.poisson(1.0))
                retweets = int(rng.poisson(0.5))
                compound = self._compound[word]
                followers = max(
                    1,
                    int(
                        round(
                            magnitude * magnitude
                            / (abs(compound) * (likes + 1) * (retweets + 1))
                        )
                    ),
                )
                created_at = window.start() + float(offsets[i]) / 1000.0
                tweet = Tweet(
                    id=f"synth-{t}-{i}",
                    text=_TWEET_TEMPLATE.format(word=word),
                    follower_count=followers,
                    like_count=likes,
                    retweet_count=retweets,
                    created_at=created_at,
                )
                yield FeedEvent(KIND_TWEET, tweet, created_at)
        yield FeedEvent(
            KIND_HEARTBEAT, None, WindowKey(cfg.start_minute + cfg.n_windows).start()
        )


def synthesize(
    config: SyntheticConfig, lexicon: Lexicon | None = None
) -> Iterator[FeedEvent]:
    """Ordered synthetic FeedEvent stream, fully deterministic per seed."""
    return SyntheticStream(config, lexicon).events()


def write_replay_files(
    stream: SyntheticStream,
    tweet_path: str | Path,
    price_path: str | Path,
) -> tuple[int, int]:
    """Write a synthetic stream out as replay files; returns (tweets, bars)."""
    n_tweets = 0
    n_bars = 0
    with open(tweet_path, "w", encoding="utf-8", newline="\n") as tf, open(
        price_path, "w", encoding="utf-8", newline=""
    ) as pf:
        writer = csv.writer(pf)
        writer.writerow(PRICE_HEADER)
        for ev in stream.events():
            if ev.kind == KIND_PRICE:
                bar = ev.payload
                writer.writerow(
                    [
                        bar.window.iso(),
                        repr(bar.open),
                        repr(bar.high),
                        repr(bar.low),
                        repr(bar.close),
                    ]
                )
                n_bars += 1
            elif ev.kind == KIND_TWEET:
                tweet = ev.payload
                tf.write(
                    json.dumps(
                        {
                            "id": tweet.id,
                            "text": tweet.text,
                            "user_followers": tweet.follower_count,
                            "likes": tweet.like_count,
                            "retweets": tweet.retweet_count,
                            "created_at": format_timestamp(tweet.created_at),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                n_tweets += 1
    return n_tweets, n_bars


def watermark_close(
    events: Iterable[FeedEvent],
    allowed_lateness: float = 60.0,
    score_fn: Callable[[Tweet], float] | None = None,
    start_after: WindowKey | None = None,
    stats: WatermarkStats | None = None,
) -> Iterator[AlignedWindow]:
    """Aggregate the event stream into closed, contiguous aligned windows.

    A window closes when the watermark (max event_time seen) reaches its
    end plus ``allowed_lateness``; remaining open windows flush in order
    when the stream ends. Tweets are scored with ``score_fn`` (default:
    count each tweet as score 0). ``start_after`` seeds the emission
    cursor so a recovered pipeline never re-emits processed windows;
    tweets for those windows count as replay_skipped, not dropped-late.
    """
    if allowed_lateness < 0 or not math.isfinite(allowed_lateness):
        raise DataError("allowed_lateness must be finite and >= 0")
    if stats is None:
        stats = WatermarkStats()
    scores: dict[int, float] = {}
    counts: dict[int, int] = {}
    bars: dict[int, PriceBar] = {}
    next_emit: int | None = None if start_after is None else start_after.epoch_minute + 1
    emitted_up_to = -(1 << 62) if start_after is None else start_after.epoch_minute
    watermark = -math.inf

    def closable(minute: int) -> bool:
        return WindowKey(minute).end() + allowed_lateness <= watermark

    def emit(minute: int) -> AlignedWindow:
        count = counts.pop(minute, 0)
        return AlignedWindow(
            window=WindowKey(minute),
            score_sum=scores.pop(minute, 0.0) if count else 0.0,
            tweet_count=count,
            bar=bars.pop(minute, None),
        )

    for ev in events:
        watermark = max(watermark, ev.event_time)
        if ev.kind == KIND_TWEET:
            minute = window_key(ev.payload.created_at).epoch_minute
            if minute <= emitted_up_to:
                if start_after is not None and minute <= start_after.epoch_minute:
                    stats.replay_skipped += 1
                else:
                    stats.dropped_late += 1
            else:
                if score_fn is not None:
                    scores[minute] = scores.get(minute, 0.0) + score_fn(ev.payload)
                counts[minute] = counts.get(minute, 0) + 1
                stats.included_tweets += 1
                if next_emit is None:
                    next_emit = minute
        elif ev.kind == KIND_PRICE:
            minute = ev.payload.window.epoch_minute
            if minute <= emitted_up_to:
                if start_after is None or minute > start_after.epoch_minute:
                    raise DataError(f"price bar for already-closed window {minute}")
            else:
                if minute in bars:
                    raise DataError(f"duplicate price bar for window {minute}")
                bars[minute] = ev.payload
                if next_emit is None:
                    next_emit = minute
        else:
            if next_emit is None:
                next_emit = window_key(ev.event_time).epoch_minute
        while next_emit is not None and closable(next_emit):
            yield emit(next_emit)
            emitted_up_to = next_emit
            next_emit += 1

    # End of stream: flush everything still open, in order.
    if next_emit is not None:
        pending = scores.keys() | counts.keys() | bars.keys()
        last = max(pending) if pending else next_emit - 1
        while next_emit <= last:
            yield emit(next_emit)
            emitted_up_to = next_emit
            next_emit += 1


class TokenBucket:
    """Deterministic token bucket for live-feed rate limiting.

    Defaults honor the public API limits (450 requests / 15 min). The
    clock is injectable so the bucket is testable without real time.
    """

    def __init__(
        self,
        capacity: int = RATE_LIMIT_REQUESTS,
        refill_window_s: float = RATE_LIMIT_WINDOW_S,
        clock: Callable[[], float] = _time.monotonic,
    ):
        if capacity < 1 or refill_window_s <= 0:
            raise DataError("token bucket needs capacity >= 1 and a positive window")
        self.capacity = capacity
        self.rate = capacity / refill_window_s
        self._clock = clock
        self._tokens = float(capacity)
        self._last = clock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
        self._last = now

    def try_acquire(self, tokens: int = 1) -> bool:
        self._refill()
        if self._tokens >= tokens:
            self._tokens -= tokens
            return True
        return False

    def wait_time(self, tokens: int = 1) -> float:
        """Seconds until ``tokens`` would be available (0 if now)."""
        self._refill()
        missing = tokens - self._tokens
        return max(0.0, missing / self.rate)


class LiveFeedClient:
    """Contract for credentialed live sources; no implementation ships.

    Implementations must rate-limit through their bucket and may not
    request history older than HISTORY_CAP_DAYS.
    """

    def __init__(self, bucket: TokenBucket | None = None):
        self.bucket = bucket if bucket is not None else TokenBucket()

    def poll_tweets(self, since: float) -> list[Tweet]:
        raise NotImplementedError("live tweet polling requires credentials")

    def poll_bars(self, since: float) -> list[PriceBar]:
        raise NotImplementedError("live price polling requires credentials")
