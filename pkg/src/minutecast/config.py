"""Engine configuration: an INI-style file with CLI-flag overrides.

Sections mirror the engine's knobs:

    [engine]     data_dir, checkpoint_every, allowed_lateness_s,
                 relaxed_durability
    [lexicon]    lexicon_file, boosters_file, negators_file
    [features]   rolling_window
    [predictor]  max_depth, learning_rate, bootstrap_trees,
                 trees_per_update, full_retrain_period, buffer_capacity,
                 seed
    [source]     kind (replay | synthetic), tweet_file, price_file, speed
    [synthetic]  n_windows, lag_k, signal_strength, noise_sigma,
                 tweets_per_window_mean, base_price, seed

Every CLI flag overrides its config-file value.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .features import DEFAULT_ROLLING_WINDOW
from .ingest import SyntheticConfig
from .predictor import Hyperparams


@dataclass
class EngineConfig:
    data_dir: Path = Path("./minutecast-data")
    checkpoint_every: int = 60
    allowed_lateness_s: float = 60.0
    relaxed_durability: bool = False
    lexicon_file: Optional[Path] = None  # None: bundled lexicon
    boosters_file: Optional[Path] = None
    negators_file: Optional[Path] = None
    rolling_window: int = DEFAULT_ROLLING_WINDOW
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    source_kind: Optional[str] = None
    tweet_file: Optional[Path] = None
    price_file: Optional[Path] = None
    speed: float | str = "max"
    synthetic: Optional[SyntheticConfig] = None
    json_progress: bool = False

    def validate_lexicon_paths(self) -> None:
        paths = [self.lexicon_file, self.boosters_file, self.negators_file]
        if any(paths) and not all(paths):
            raise ConfigError(
                "lexicon_file, boosters_file, and negators_file must be set together"
            )
        for path in paths:
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"lexicon path {path} does not exist")

    def validate_source(self) -> None:
        if self.source_kind == "replay":
            if self.tweet_file is None or self.price_file is None:
                raise ConfigError("replay source needs tweet_file and price_file")
            for path in (self.tweet_file, self.price_file):
                if not Path(path).is_file():
                    raise ConfigError(f"replay file {path} does not exist")
        elif self.source_kind == "synthetic":
            if self.synthetic is None:
                raise ConfigError("synthetic source needs a [synthetic] section")
        elif self.source_kind is None:
            raise ConfigError("no source configured: set [source] kind or use flags")
        else:
            raise ConfigError(f"unknown source kind {self.source_kind!r}")


def _get(parser: configparser.ConfigParser, section: str, option: str, cast, default):
    if not parser.has_option(section, option):
        return default
    raw = parser.get(section, option)
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {option} = {raw!r}: {exc}") from exc


def _bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _speed(raw: str) -> float | str:
    if raw.strip().lower() == "max":
        return "max"
    value = float(raw)
    if value <= 0:
        raise ValueError("speed must be positive")
    return value


def load_config(path: str | Path | None) -> EngineConfig:
    """Parse a config file into an EngineConfig (defaults when path is None)."""
    cfg = EngineConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc

    cfg.data_dir = Path(_get(parser, "engine", "data_dir", str, str(cfg.data_dir)))
    cfg.checkpoint_every = _get(parser, "engine", "checkpoint_every", int, cfg.checkpoint_every)
    cfg.allowed_lateness_s = _get(
        parser, "engine", "allowed_lateness_s", float, cfg.allowed_lateness_s
    )
    cfg.relaxed_durability = _get(
        parser, "engine", "relaxed_durability", _bool, cfg.relaxed_durability
    )
    if cfg.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    if cfg.allowed_lateness_s < 0:
        raise ConfigError("allowed_lateness_s must be >= 0")

    for name in ("lexicon_file", "boosters_file", "negators_file"):
        value = _get(parser, "lexicon", name, str, None)
        if value is not None:
            setattr(cfg, name, Path(value))

    cfg.rolling_window = _get(parser, "features", "rolling_window", int, cfg.rolling_window)
    if cfg.rolling_window < 1:
        raise ConfigError("rolling_window must be >= 1")

    hp = cfg.hyperparams
    try:
        cfg.hyperparams = Hyperparams(
            max_depth=_get(parser, "predictor", "max_depth", int, hp.max_depth),
            learning_rate=_get(parser, "predictor", "learning_rate", float, hp.learning_rate),
            bootstrap_trees=_get(parser, "predictor", "bootstrap_trees", int, hp.bootstrap_trees),
            trees_per_update=_get(
                parser, "predictor", "trees_per_update", int, hp.trees_per_update
            ),
            full_retrain_period=_get(
                parser, "predictor", "full_retrain_period", int, hp.full_retrain_period
            ),
            buffer_capacity=_get(
                parser, "predictor", "buffer_capacity", int, hp.buffer_capacity
            ),
        )
    except Exception as exc:
        raise ConfigError(f"bad [predictor] settings: {exc}") from exc
    cfg.seed = _get(parser, "predictor", "seed", int, cfg.seed)

    cfg.source_kind = _get(parser, "source", "kind", str, cfg.source_kind)
    tweet_file = _get(parser, "source", "tweet_file", str, None)
    price_file = _get(parser, "source", "price_file", str, None)
    if tweet_file is not None:
        cfg.tweet_file = Path(tweet_file)
    if price_file is not None:
        cfg.price_file = Path(price_file)
    cfg.speed = _get(parser, "source", "speed", _speed, cfg.speed)

    if parser.has_section("synthetic"):
        try:
            cfg.synthetic = SyntheticConfig(
                n_windows=_get(parser, "synthetic", "n_windows", int, 2000),
                lag_k=_get(parser, "synthetic", "lag_k", int, 1),
                signal_strength=_get(parser, "synthetic", "signal_strength", float, 0.005),
                noise_sigma=_get(parser, "synthetic", "noise_sigma", float, 0.0005),
                tweets_per_window_mean=_get(
                    parser, "synthetic", "tweets_per_window_mean", float, 8.0
                ),
                base_price=_get(parser, "synthetic", "base_price", float, 10_000.0),
                seed=_get(parser, "synthetic", "seed", int, 0),
            )
        except Exception as exc:
            raise ConfigError(f"bad [synthetic] settings: {exc}") from exc
    return cfg
