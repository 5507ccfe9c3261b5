"""Online-learning regressor: gradient-boosted regression trees.

The ensemble is built natively (no ML dependency) so that training is
bit-for-bit deterministic: exact greedy splits with fixed tie-breaking,
float64 throughout, and a fixed accumulation order for predictions.
Online operation appends each new labeled example to a ring buffer,
warm-starts a few trees against current residuals, and periodically
rebuilds the whole ensemble from the buffer.

update()/bootstrap_train() return new ModelState values; callers treat
states as immutable snapshots, so prediction and checkpointing can read
a state while the pipeline's single learner stage produces the next one.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import WindowKey
from .errors import DataError
from .features import FeatureVector, LabeledExample

N_FEATURES = 4
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    max_depth: int = 3
    learning_rate: float = 0.1
    bootstrap_trees: int = 100
    trees_per_update: int = 1
    full_retrain_period: int = 60
    buffer_capacity: int = 10_000

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise DataError("max_depth must be >= 1")
        if not (0.0 < self.learning_rate <= 1.0):
            raise DataError("learning_rate must be in (0, 1]")
        if self.bootstrap_trees < 1:
            raise DataError("bootstrap_trees must be >= 1")
        if self.trees_per_update < 0:
            raise DataError("trees_per_update must be >= 0")
        if self.full_retrain_period < 0:
            raise DataError("full_retrain_period must be >= 0")
        if self.buffer_capacity < 2:
            raise DataError("buffer_capacity must be >= 2")

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "bootstrap_trees": self.bootstrap_trees,
            "trees_per_update": self.trees_per_update,
            "full_retrain_period": self.full_retrain_period,
            "buffer_capacity": self.buffer_capacity,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Hyperparams":
        return cls(
            max_depth=int(data["max_depth"]),
            learning_rate=float(data["learning_rate"]),
            bootstrap_trees=int(data["bootstrap_trees"]),
            trees_per_update=int(data["trees_per_update"]),
            full_retrain_period=int(data["full_retrain_period"]),
            buffer_capacity=int(data["buffer_capacity"]),
        )


@dataclass(frozen=True)
class Tree:
    """One regression tree in flat-array form.

    feature[i] is the split feature index or -1 for a leaf; left/right
    hold child node indices; value[i] is the leaf output in USD.
    """

    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    value: tuple[float, ...]

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X), dtype=np.float64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            if self.feature[node] < 0:
                out[idx] = self.value[node]
                continue
            mask = X[idx, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], idx[mask]))
            stack.append((self.right[node], idx[~mask]))
        return out

    def to_dict(self) -> dict:
        return {
            "feature": list(self.feature),
            "threshold": list(self.threshold),
            "left": list(self.left),
            "right": list(self.right),
            "value": list(self.value),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        return cls(
            feature=tuple(int(v) for v in data["feature"]),
            threshold=tuple(float(v) for v in data["threshold"]),
            left=tuple(int(v) for v in data["left"]),
            right=tuple(int(v) for v in data["right"]),
            value=tuple(float(v) for v in data["value"]),
        )


def _best_split(X: np.ndarray, r: np.ndarray) -> Optional[tuple[int, float, float]]:
    """Exact greedy SSE-reduction split; ties go to the lowest feature
    index, then the smallest threshold. Returns (feature, threshold, gain)."""
    n = len(r)
    total_sum = float(r.sum())
    best: Optional[tuple[int, float, float]] = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        rs = r[order]
        if xs[0] == xs[-1]:
            continue
        prefix = np.cumsum(rs)
        k = np.arange(1, n)
        left_sum = prefix[:-1]
        right_sum = total_sum - left_sum
        # SSE reduction = sum_l^2/n_l + sum_r^2/n_r - total^2/n
        gain = left_sum**2 / k + right_sum**2 / (n - k) - total_sum**2 / n
        valid = xs[1:] != xs[:-1]
        gain = np.where(valid, gain, -np.inf)
        best_k = int(np.argmax(gain))
        best_gain = float(gain[best_k])
        if best_gain > _MIN_GAIN and (best is None or best_gain > best[2]):
            threshold = (float(xs[best_k]) + float(xs[best_k + 1])) / 2.0
            best = (f, threshold, best_gain)
    return best


def _fit_tree(X: np.ndarray, r: np.ndarray, max_depth: int) -> Tree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def build(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        rs = r[idx]
        if depth >= max_depth or len(idx) < 2:
            value[node] = float(rs.mean()) if len(idx) else 0.0
            return node
        split = _best_split(X[idx], rs)
        if split is None:
            value[node] = float(rs.mean())
            return node
        f, thr, _ = split
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(idx[mask], depth + 1)
        right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(len(X)), 0)
    return Tree(
        feature=tuple(feature),
        threshold=tuple(threshold),
        left=tuple(left),
        right=tuple(right),
        value=tuple(value),
    )


@dataclass(frozen=True)
class ModelState:
    """Versioned, serializable learner state.

    The prediction-over-buffer cache is derived state: it is rebuilt on
    demand and excluded from serialization, with the accumulation order
    fixed so cached and rebuilt values agree bit-for-bit.
    """

    hyperparams: Hyperparams
    seed: int
    version: int
    n_updates: int
    base: float
    trees: tuple[Tree, ...]
    buffer: tuple[LabeledExample, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def _matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(X, y, pred) over the buffer, built lazily and cached."""
        if "X" not in self._cache:
            X = np.array([ex.features.as_list() for ex in self.buffer], dtype=np.float64)
            X = X.reshape(len(self.buffer), N_FEATURES)
            y = np.array([ex.target for ex in self.buffer], dtype=np.float64)
            pred = np.full(len(self.buffer), self.base, dtype=np.float64)
            for tree in self.trees:
                pred += self.hyperparams.learning_rate * tree.predict(X)
            self._cache.update(X=X, y=y, pred=pred)
        return self._cache["X"], self._cache["y"], self._cache["pred"]


@dataclass(frozen=True)
class PredictionRecord:
    """One one-window-ahead prediction and, once known, its outcome."""

    window: WindowKey
    predicted: float
    model_version: int
    actual: Optional[float] = None
    abs_error: Optional[float] = None

    def completed(self) -> bool:
        return self.actual is not None

    def complete(self, actual: float) -> "PredictionRecord":
        return replace(self, actual=actual, abs_error=abs(self.predicted - actual))


def _validate_example(ex: LabeledExample) -> None:
    values = ex.features.as_list() + [ex.target]
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"non-finite labeled example at window {ex.features.window}")


def _fit_ensemble(
    hp: Hyperparams, X: np.ndarray, y: np.ndarray, n_trees: int
) -> tuple[float, list[Tree], np.ndarray]:
    base = float(y.mean())
    pred = np.full(len(y), base, dtype=np.float64)
    trees: list[Tree] = []
    for _ in range(n_trees):
        tree = _fit_tree(X, y - pred, hp.max_depth)
        pred += hp.learning_rate * tree.predict(X)
        trees.append(tree)
    return base, trees, pred


def bootstrap_train(
    examples: Sequence[LabeledExample],
    hyperparams: Hyperparams = Hyperparams(),
    seed: int = 0,
) -> ModelState:
    """Fit the initial ensemble on historical examples.

    Deterministic for fixed inputs and seed. The training buffer is
    initialized with the tail of ``examples``.
    """
    if len(examples) < 2:
        raise DataError(f"bootstrap needs at least 2 examples, got {len(examples)}")
    for ex in examples:
        _validate_example(ex)
    X = np.array([ex.features.as_list() for ex in examples], dtype=np.float64)
    y = np.array([ex.target for ex in examples], dtype=np.float64)
    base, trees, pred = _fit_ensemble(hyperparams, X, y, hyperparams.bootstrap_trees)
    buffer = tuple(examples[-hyperparams.buffer_capacity :])
    state = ModelState(
        hyperparams=hyperparams,
        seed=seed,
        version=1,
        n_updates=0,
        base=base,
        trees=tuple(trees),
        buffer=buffer,
    )
    k = len(buffer)
    state._cache.update(X=X[-k:], y=y[-k:], pred=pred[-k:])
    return state


def predict(state: ModelState, features: FeatureVector) -> float:
    """Pure one-window-ahead prediction in USD."""
    if not state.trees:
        raise DataError("predict on an unbootstrapped model")
    x = np.array([features.as_list()], dtype=np.float64)
    out = state.base
    for tree in state.trees:
        out += state.hyperparams.learning_rate * float(tree.predict(x)[0])
    return float(out)


def update(state: ModelState, example: LabeledExample) -> ModelState:
    """Learn from one observed (features, actual) pair.

    Appends to the ring buffer (evicting the oldest at capacity), fits
    trees_per_update warm-start trees to current residuals, and every
    full_retrain_period updates rebuilds the ensemble from the buffer.
    """
    _validate_example(example)
    hp = state.hyperparams
    X_old, y_old, pred_old = state._matrices()

    x_new = np.array(example.features.as_list(), dtype=np.float64)
    pred_new = state.base
    for tree in state.trees:
        pred_new += hp.learning_rate * float(tree.predict(x_new.reshape(1, -1))[0])

    X = np.vstack([X_old, x_new.reshape(1, -1)])
    y = np.append(y_old, example.target)
    pred = np.append(pred_old, pred_new)
    buffer = state.buffer + (example,)
    if len(buffer) > hp.buffer_capacity:
        drop = len(buffer) - hp.buffer_capacity
        buffer = buffer[drop:]
        X, y, pred = X[drop:], y[drop:], pred[drop:]

    n_updates = state.n_updates + 1
    if hp.full_retrain_period > 0 and n_updates % hp.full_retrain_period == 0:
        base, trees, pred = _fit_ensemble(hp, X, y, hp.bootstrap_trees)
    else:
        base = state.base
        trees = list(state.trees)
        for _ in range(hp.trees_per_update):
            tree = _fit_tree(X, y - pred, hp.max_depth)
            pred = pred + hp.learning_rate * tree.predict(X)
            trees.append(tree)

    new_state = ModelState(
        hyperparams=hp,
        seed=state.seed,
        version=state.version + 1,
        n_updates=n_updates,
        base=base,
        trees=tuple(trees),
        buffer=buffer,
    )
    new_state._cache.update(X=X, y=y, pred=pred)
    return new_state


def naive_predict(previous_close: float) -> float:
    """Previous-close baseline: predicts no change."""
    if not math.isfinite(previous_close):
        raise DataError("naive_predict needs a finite previous close")
    return previous_close


def state_to_dict(state: ModelState) -> dict:
    """JSON-safe dict of the full learner state (no derived caches)."""
    return {
        "hyperparams": state.hyperparams.to_dict(),
        "seed": state.seed,
        "version": state.version,
        "n_updates": state.n_updates,
        "base": state.base,
        "trees": [tree.to_dict() for tree in state.trees],
        "buffer": [
            {
                "window": ex.features.window.epoch_minute,
                "features": ex.features.as_list(),
                "target": ex.target,
            }
            for ex in state.buffer
        ],
    }


def state_from_dict(data: dict) -> ModelState:
    buffer = []
    for row in data["buffer"]:
        fs = [float(v) for v in row["features"]]
        buffer.append(
            LabeledExample(
                features=FeatureVector(
                    window=WindowKey(int(row["window"])),
                    score_sum=fs[0],
                    previous_close=fs[1],
                    ma_close=fs[2],
                    ma_score=fs[3],
                ),
                target=float(row["target"]),
            )
        )
    return ModelState(
        hyperparams=Hyperparams.from_dict(data["hyperparams"]),
        seed=int(data["seed"]),
        version=int(data["version"]),
        n_updates=int(data["n_updates"]),
        base=float(data["base"]),
        trees=tuple(Tree.from_dict(t) for t in data["trees"]),
        buffer=tuple(buffer),
    )


def serialize_state(state: ModelState) -> bytes:
    """Canonical JSON bytes; identical states serialize identically."""
    return canonical_json(state_to_dict(state))


def deserialize_state(blob: bytes) -> ModelState:
    return state_from_dict(json.loads(blob.decode("utf-8")))


def canonical_json(obj) -> bytes:
    """Stable JSON encoding: sorted keys, no whitespace, exact floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode(
        "utf-8"
    )


def payload_crc(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF
