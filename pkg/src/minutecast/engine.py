"""Pipeline orchestration: bootstrap, streaming, recovery, run data.

The engine's state transition for one closed window is a single
deterministic function used identically in live streaming and in
log-replay recovery:

    1. complete the pending prediction with the window's (gap-filled)
       close, log the actual, and retrain the model on the new example;
    2. push the window into the feature builder and, once warm, predict
       the next window's close and log the prediction.

The write-ahead log records closed windows (the pipeline's input) plus
the derived prediction/actual records. Recovery restores the newest
valid checkpoint, replays the log suffix through the same transition
(verifying that recomputed derived records match the logged ones), and
re-appends whatever a torn tail lost. Together with seeded sources this
makes recover-and-continue produce byte-identical output to an
uninterrupted run.

Everything runs on one thread: sources are generators merged into a
single ordered stream, and exactly one writer owns the log and the
learner state, which keeps replay bit-exact.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from . import persistence
from .analytics import CompletedPrediction, RunData
from .config import EngineConfig
from .core import AlignedWindow, PriceBar, WindowKey, format_timestamp
from .errors import CorruptionError, DataError, StorageError
from .features import FeatureBuilder, FeatureVector, LabeledExample
from .ingest import (
    FeedEvent,
    ReplayStats,
    SyntheticStream,
    WatermarkStats,
    replay,
    watermark_close,
)
from .persistence import (
    KIND_ACTUAL,
    KIND_CHECKPOINT_MARKER,
    KIND_CLOSED_WINDOW,
    KIND_PREDICTION,
    LOG_FILENAME,
    EventLog,
    LogRecord,
)
from .predictor import (
    ModelState,
    bootstrap_train,
    canonical_json,
    naive_predict,
    predict,
    state_from_dict,
    state_to_dict,
    update,
)
from .sentiment import Lexicon, bundled_lexicon, load_lexicon, score_tweet

logger = logging.getLogger(__name__)

ProgressFn = Callable[[dict], None]
StopFn = Callable[[], bool]


def window_to_payload(w: AlignedWindow) -> dict:
    bar = None
    if w.bar is not None:
        bar = {
            "open": w.bar.open,
            "high": w.bar.high,
            "low": w.bar.low,
            "close": w.bar.close,
        }
    return {
        "window": w.window.epoch_minute,
        "score_sum": w.score_sum,
        "tweet_count": w.tweet_count,
        "bar": bar,
    }


def window_from_payload(data: dict) -> AlignedWindow:
    window = WindowKey(int(data["window"]))
    bar = None
    if data["bar"] is not None:
        bar = PriceBar(
            window=window,
            open=float(data["bar"]["open"]),
            high=float(data["bar"]["high"]),
            low=float(data["bar"]["low"]),
            close=float(data["bar"]["close"]),
        )
    return AlignedWindow(
        window=window,
        score_sum=float(data["score_sum"]),
        tweet_count=int(data["tweet_count"]),
        bar=bar,
    )


@dataclass
class Pending:
    """An outstanding prediction waiting for its actual close."""

    window: int  # epoch minute the prediction targets
    features: FeatureVector
    predicted: float
    naive: float
    model_version: int

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "features": {
                "window": self.features.window.epoch_minute,
                "score_sum": self.features.score_sum,
                "previous_close": self.features.previous_close,
                "ma_close": self.features.ma_close,
                "ma_score": self.features.ma_score,
            },
            "predicted": self.predicted,
            "naive": self.naive,
            "model_version": self.model_version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Pending":
        f = data["features"]
        return cls(
            window=int(data["window"]),
            features=FeatureVector(
                window=WindowKey(int(f["window"])),
                score_sum=float(f["score_sum"]),
                previous_close=float(f["previous_close"]),
                ma_close=float(f["ma_close"]),
                ma_score=float(f["ma_score"]),
            ),
            predicted=float(data["predicted"]),
            naive=float(data["naive"]),
            model_version=int(data["model_version"]),
        )


@dataclass
class PipelineState:
    """Everything the per-window transition reads and writes."""

    model: Optional[ModelState]
    builder: FeatureBuilder
    pending: Optional[Pending]
    windows_processed: int

    @classmethod
    def fresh(cls, rolling_window: int) -> "PipelineState":
        return cls(
            model=None,
            builder=FeatureBuilder(rolling_window),
            pending=None,
            windows_processed=0,
        )

    def model_blob(self) -> Optional[dict]:
        return None if self.model is None else state_to_dict(self.model)

    def feature_blob(self) -> dict:
        return {
            "builder": self.builder.snapshot(),
            "pending": None if self.pending is None else self.pending.to_dict(),
            "windows_processed": self.windows_processed,
        }

    @classmethod
    def restore(cls, model_blob: Optional[dict], feature_blob: dict) -> "PipelineState":
        return cls(
            model=None if model_blob is None else state_from_dict(model_blob),
            builder=FeatureBuilder.restore(feature_blob["builder"]),
            pending=None
            if feature_blob["pending"] is None
            else Pending.from_dict(feature_blob["pending"]),
            windows_processed=int(feature_blob["windows_processed"]),
        )


def step(state: PipelineState, cw: AlignedWindow) -> list[tuple[str, dict]]:
    """Apply one closed window to the pipeline state.

    Returns the derived (kind, payload) records in append order. This is
    the single update path shared by live streaming and log replay.
    """
    derived: list[tuple[str, dict]] = []
    filled = state.builder.fill(cw)
    if filled is None:
        return derived  # leading bar-less window: dropped
    if state.pending is not None:
        if state.pending.window != cw.window.epoch_minute:
            raise CorruptionError(
                f"pending prediction targets window {state.pending.window} "
                f"but window {cw.window.epoch_minute} closed"
            )
        actual = filled.bar.close
        derived.append(
            (
                KIND_ACTUAL,
                {
                    "window": state.pending.window,
                    "actual": actual,
                    "abs_error": abs(state.pending.predicted - actual),
                },
            )
        )
        if state.model is not None:
            example = LabeledExample(features=state.pending.features, target=actual)
            state.model = update(state.model, example)
        state.pending = None
    vector = state.builder.push(cw)
    state.windows_processed += 1
    if vector is not None and state.model is not None:
        predicted = predict(state.model, vector)
        naive = naive_predict(vector.previous_close)
        state.pending = Pending(
            window=cw.window.next().epoch_minute,
            features=vector,
            predicted=predicted,
            naive=naive,
            model_version=state.model.version,
        )
        derived.append(
            (
                KIND_PREDICTION,
                {
                    "window": state.pending.window,
                    "predicted": predicted,
                    "naive": naive,
                    "model_version": state.pending.model_version,
                },
            )
        )
    return derived


class _Replayer:
    """Routes log records through step(), verifying derived echoes.

    Recomputed actual/prediction records must match the logged bytes;
    any leftover expected records at the end of the log are the ones a
    torn tail lost, and get re-appended by open_pipeline().
    """

    def __init__(self) -> None:
        self.expected: deque[tuple[str, dict]] = deque()

    def apply(self, state: PipelineState, record: LogRecord) -> PipelineState:
        if record.kind == KIND_CLOSED_WINDOW:
            if self.expected:
                raise CorruptionError(
                    f"incomplete record group before sequence {record.sequence_no}"
                )
            self.expected.extend(step(state, window_from_payload(record.data)))
        elif record.kind in (KIND_ACTUAL, KIND_PREDICTION):
            if not self.expected:
                raise CorruptionError(
                    f"stray {record.kind} record at sequence {record.sequence_no}"
                )
            kind, data = self.expected.popleft()
            if kind != record.kind or canonical_json(data) != canonical_json(record.data):
                raise CorruptionError(
                    f"deterministic replay diverged at sequence {record.sequence_no}"
                )
        elif record.kind == KIND_CHECKPOINT_MARKER:
            if self.expected:
                raise CorruptionError(
                    f"checkpoint marker inside record group at sequence {record.sequence_no}"
                )
        return state


def _load_engine_lexicon(cfg: EngineConfig) -> Lexicon:
    cfg.validate_lexicon_paths()
    if cfg.lexicon_file is None:
        return bundled_lexicon()
    return load_lexicon(
        str(cfg.lexicon_file), str(cfg.boosters_file), str(cfg.negators_file)
    )


def _data_clock(state: PipelineState) -> str:
    """Deterministic checkpoint timestamp from the data clock."""
    if state.builder.last_window is not None:
        return format_timestamp(state.builder.last_window.end())
    return format_timestamp(0.0)


def _write_state_checkpoint(
    state: PipelineState, log: EventLog, data_dir: Path
) -> None:
    """Flush the log, snapshot state atomically, then append the marker.

    A snapshot IO failure downgrades to a warning: the log remains the
    authority and a later checkpoint will cover the same state.
    """
    log.sync(force=True)
    up_to = log.next_sequence - 1
    try:
        persistence.write_checkpoint(
            data_dir, up_to, state.model_blob(), state.feature_blob(), _data_clock(state)
        )
    except StorageError as exc:
        logger.warning("checkpoint skipped: %s", exc)
        return
    log.append(KIND_CHECKPOINT_MARKER, {"up_to_sequence": up_to})


@dataclass
class StreamSummary:
    windows: int
    completed_predictions: int
    replay: ReplayStats
    watermark: WatermarkStats
    stopped: bool = False


def open_pipeline(
    cfg: EngineConfig, allow_fresh: bool = False
) -> tuple[PipelineState, EventLog]:
    """Recover pipeline state and open the log for appending.

    Replays the log suffix after the newest valid checkpoint through
    step(), truncates any torn tail, re-appends derived records the tear
    lost, and restores a checkpoint marker lost between a snapshot
    rename and its marker append.
    """
    data_dir = Path(cfg.data_dir)
    log_path = data_dir / LOG_FILENAME
    if not log_path.exists():
        if not allow_fresh:
            raise DataError(
                f"no bootstrap state in {data_dir}; run the bootstrap command first"
            )
        logger.warning("starting from empty state in %s", data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        log = EventLog.create(data_dir, durable=not cfg.relaxed_durability)
        return PipelineState.fresh(cfg.rolling_window), log

    replayer = _Replayer()
    state, records, _, loaded_up_to = persistence.recover(
        data_dir,
        make_initial=lambda: PipelineState.fresh(cfg.rolling_window),
        restore=PipelineState.restore,
        apply=replayer.apply,
    )
    log, _ = EventLog.open_existing(data_dir, durable=not cfg.relaxed_durability)

    for kind, data in replayer.expected:
        logger.info("re-appending %s record lost to a torn tail", kind)
        log.append(kind, data)

    cadence_due = (
        state.windows_processed > 0
        and state.windows_processed % cfg.checkpoint_every == 0
    )
    if cadence_due and log.last_kind != KIND_CHECKPOINT_MARKER:
        _write_state_checkpoint(state, log, data_dir)
    elif (
        loaded_up_to == log.next_sequence - 1
        and log.last_kind != KIND_CHECKPOINT_MARKER
    ):
        # Snapshot rename survived but its marker append did not.
        log.append(KIND_CHECKPOINT_MARKER, {"up_to_sequence": loaded_up_to})
    log.sync(force=True)
    return state, log


def _build_source(
    cfg: EngineConfig, lexicon: Lexicon, stats: ReplayStats
) -> Iterator[FeedEvent]:
    cfg.validate_source()
    if cfg.source_kind == "replay":
        return replay(cfg.tweet_file, cfg.price_file, cfg.speed, stats)
    return SyntheticStream(cfg.synthetic, lexicon).events()


def run_stream(
    cfg: EngineConfig,
    allow_fresh: bool = False,
    progress: ProgressFn | None = None,
    stop: StopFn | None = None,
) -> StreamSummary:
    """Stream from the configured source with online learning.

    Per closed window: log the window, complete the previous prediction
    (log actual, update the model), predict the next close and log it,
    checkpoint on cadence, then make the window durable before moving
    on. Resumes cleanly over windows already in the log.
    """
    lexicon = _load_engine_lexicon(cfg)
    state, log = open_pipeline(cfg, allow_fresh=allow_fresh)
    if not allow_fresh and state.model is None:
        log.close()
        raise DataError("data_dir has no bootstrapped model; run bootstrap first")

    replay_stats = ReplayStats()
    watermark_stats = WatermarkStats()
    events = _build_source(cfg, lexicon, replay_stats)

    def score_fn(tweet) -> float:
        return score_tweet(tweet, lexicon).normalized

    closed = watermark_close(
        events,
        allowed_lateness=cfg.allowed_lateness_s,
        score_fn=score_fn,
        start_after=state.builder.last_window,
        stats=watermark_stats,
    )

    windows = 0
    completed = 0
    stopped = False
    try:
        for cw in closed:
            if stop is not None and stop():
                logger.info("stop requested; shutting down cleanly")
                stopped = True
                break
            pre_pending = state.pending
            log.append(KIND_CLOSED_WINDOW, window_to_payload(cw))
            derived = step(state, cw)
            for kind, data in derived:
                log.append(kind, data)
                if kind == KIND_ACTUAL:
                    completed += 1
                    if progress is not None:
                        progress(
                            {
                                "window": WindowKey(data["window"]).iso(),
                                "predicted": pre_pending.predicted,
                                "actual": data["actual"],
                                "error": data["abs_error"],
                            }
                        )
            windows += 1
            if (
                state.windows_processed > 0
                and state.windows_processed % cfg.checkpoint_every == 0
            ):
                _write_state_checkpoint(state, log, Path(cfg.data_dir))
            log.sync()
        if log.next_sequence > 0 and log.last_kind != KIND_CHECKPOINT_MARKER:
            _write_state_checkpoint(state, log, Path(cfg.data_dir))
        log.sync(force=True)
    finally:
        log.close()
    if watermark_stats.dropped_late:
        logger.warning("dropped %d late tweets", watermark_stats.dropped_late)
    return StreamSummary(
        windows=windows,
        completed_predictions=completed,
        replay=replay_stats,
        watermark=watermark_stats,
        stopped=stopped,
    )


@dataclass
class BootstrapSummary:
    examples: int
    training_rmse: float
    windows: int
    replay: ReplayStats
    watermark: WatermarkStats


def run_bootstrap(
    cfg: EngineConfig, tweet_file: str | Path, price_file: str | Path
) -> BootstrapSummary:
    """Train the initial model from historical files and persist state.

    Runs the same clean/score/align/feature path as streaming, fits the
    bootstrap ensemble, and writes the initial checkpoint plus a fresh
    log so streaming can resume exactly after the training history.
    """
    lexicon = _load_engine_lexicon(cfg)
    data_dir = Path(cfg.data_dir)
    if (data_dir / LOG_FILENAME).exists():
        raise DataError(f"{data_dir} already contains a log; refusing to overwrite")
    data_dir.mkdir(parents=True, exist_ok=True)

    replay_stats = ReplayStats()
    watermark_stats = WatermarkStats()
    events = replay(tweet_file, price_file, "max", replay_stats)

    def score_fn(tweet) -> float:
        return score_tweet(tweet, lexicon).normalized

    builder = FeatureBuilder(cfg.rolling_window)
    examples: list[LabeledExample] = []
    previous_vector: Optional[FeatureVector] = None
    windows = 0
    for cw in watermark_close(
        events,
        allowed_lateness=cfg.allowed_lateness_s,
        score_fn=score_fn,
        stats=watermark_stats,
    ):
        filled = builder.fill(cw)
        if filled is None:
            continue
        if previous_vector is not None:
            examples.append(
                LabeledExample(features=previous_vector, target=filled.bar.close)
            )
        previous_vector = builder.push(cw)
        windows += 1

    if len(examples) < 2:
        raise DataError(
            f"insufficient bootstrap data: {len(examples)} labeled examples "
            f"from {windows} windows (need at least 2)"
        )
    model = bootstrap_train(examples, cfg.hyperparams, cfg.seed)
    sq = math.fsum((predict(model, ex.features) - ex.target) ** 2 for ex in examples)
    training_rmse = math.sqrt(sq / len(examples))

    state = PipelineState(
        model=model, builder=builder, pending=None, windows_processed=0
    )
    log = EventLog.create(data_dir, durable=not cfg.relaxed_durability)
    try:
        persistence.write_checkpoint(
            data_dir, -1, state.model_blob(), state.feature_blob(), _data_clock(state)
        )
        log.append(KIND_CHECKPOINT_MARKER, {"up_to_sequence": -1})
        log.sync(force=True)
    finally:
        log.close()
    return BootstrapSummary(
        examples=len(examples),
        training_rmse=training_rmse,
        windows=windows,
        replay=replay_stats,
        watermark=watermark_stats,
    )


def build_run_data(records: Iterable[LogRecord], rolling_window: int = 1) -> RunData:
    """Assemble report inputs from the persisted log."""
    builder = FeatureBuilder(max(1, rolling_window))
    windows: list[AlignedWindow] = []
    predictions: dict[int, dict] = {}
    completions: list[CompletedPrediction] = []
    for record in records:
        if record.kind == KIND_CLOSED_WINDOW:
            cw = window_from_payload(record.data)
            filled = builder.fill(cw)
            if filled is None:
                continue
            builder.push(cw)
            windows.append(filled)
        elif record.kind == KIND_PREDICTION:
            predictions[int(record.data["window"])] = record.data
        elif record.kind == KIND_ACTUAL:
            minute = int(record.data["window"])
            made = predictions.get(minute)
            if made is None:
                raise CorruptionError(f"actual for window {minute} has no prediction")
            completions.append(
                CompletedPrediction(
                    window=WindowKey(minute),
                    predicted=float(made["predicted"]),
                    actual=float(record.data["actual"]),
                    naive=float(made["naive"]),
                    model_version=int(made["model_version"]),
                )
            )
    return RunData(windows=windows, predictions=completions)
