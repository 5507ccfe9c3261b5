"""Lexicon-and-rule sentiment scoring with influence weighting.

The scorer is a reduced rule set over a valence lexicon: token lookup,
a 3-token negation window with flip factor -0.74, increments from an
immediately preceding booster word, and compound normalization
S / sqrt(S^2 + 15). That keeps the compound score in [-1, +1] and makes
the whole path deterministic and dependency-free. Punctuation emphasis,
capitalization rules, emoji, and idiom handling are deliberately out of
scope.

A tweet's compound score is then weighted by author influence
(followers x (likes+1) x (retweets+1)) and normalized by a signed
square root before per-window summation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources

from .core import Tweet
from .errors import ConfigError, DataError

NEGATION_FACTOR = -0.74
NEGATION_WINDOW = 3
NORMALIZATION_ALPHA = 15.0
DEFAULT_BOOSTER_INCREMENT = 0.293
MAX_VALENCE = 4.0

_URL_RE = re.compile(
    r"(?:https?://\S+|\bwww\.\S+|\bt\.co/\S+|\bpic\.twitter\.com/\S+)", re.IGNORECASE
)
_HASHTAG_RE = re.compile(r"#\w+")
_MENTION_RE = re.compile(r"@\w+")
_MEDIA_RE = re.compile(r"\[(?:photo|image|video|gif|media)\]", re.IGNORECASE)
_WHITESPACE_RE = re.compile(r"\s+")
_TOKEN_RE = re.compile(r"[\w']+")


@dataclass(frozen=True)
class Lexicon:
    """Valence lexicon plus booster/negator word lists.

    Immutable after load; safe to share between any number of threads.
    """

    entries: dict[str, float]
    boosters: dict[str, float]
    negators: frozenset[str]


@dataclass(frozen=True)
class SentimentResult:
    """Compound sentiment in [-1, +1]; 0 for text with no lexicon hits."""

    compound: float


@dataclass(frozen=True)
class WeightedScore:
    """Influence-weighted score and its signed-root normalization."""

    raw: float
    normalized: float


def clean_text(text: str) -> str:
    """Strip URLs, hashtags, mentions, and media placeholders from tweet text.

    Runs of whitespace collapse to a single space and the result is
    trimmed. Idempotent.
    """
    text = _URL_RE.sub(" ", text)
    text = _HASHTAG_RE.sub(" ", text)
    text = _MENTION_RE.sub(" ", text)
    text = _MEDIA_RE.sub(" ", text)
    return _WHITESPACE_RE.sub(" ", text).strip()


def _parse_valence(token: str, raw: str, path: str, lineno: int) -> float:
    try:
        valence = float(raw)
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad valence {raw!r} for {token!r}") from exc
    if not math.isfinite(valence) or abs(valence) > MAX_VALENCE:
        raise ConfigError(
            f"{path}:{lineno}: valence {valence} for {token!r} outside [-4, +4]"
        )
    return valence


def load_lexicon(
    lexicon_path: str,
    boosters_path: str | None = None,
    negators_path: str | None = None,
) -> Lexicon:
    """Load a lexicon from disk.

    The lexicon file is UTF-8 with one ``token<TAB>valence`` pair per
    line. Booster and negator files are one word per line; a booster
    line may optionally carry ``word<TAB>increment``, otherwise the
    default increment 0.293 applies. Blank lines and ``#`` comments are
    ignored. An empty lexicon is a configuration error.
    """
    entries: dict[str, float] = {}
    try:
        with open(lexicon_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ConfigError(
                        f"{lexicon_path}:{lineno}: expected token<TAB>valence, got {line!r}"
                    )
                token = parts[0].strip().lower()
                entries[token] = _parse_valence(token, parts[1], lexicon_path, lineno)
    except OSError as exc:
        raise ConfigError(f"cannot read lexicon file {lexicon_path}: {exc}") from exc
    if not entries:
        raise ConfigError(f"lexicon file {lexicon_path} contains no entries")

    boosters: dict[str, float] = {}
    if boosters_path is not None:
        try:
            with open(boosters_path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    parts = line.split("\t")
                    word = parts[0].strip().lower()
                    if len(parts) == 1:
                        boosters[word] = DEFAULT_BOOSTER_INCREMENT
                    else:
                        boosters[word] = _parse_valence(word, parts[1], boosters_path, lineno)
        except OSError as exc:
            raise ConfigError(f"cannot read boosters file {boosters_path}: {exc}") from exc

    negators: set[str] = set()
    if negators_path is not None:
        try:
            with open(negators_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line and not line.startswith("#"):
                        negators.add(line.lower())
        except OSError as exc:
            raise ConfigError(f"cannot read negators file {negators_path}: {exc}") from exc

    return Lexicon(entries=entries, boosters=boosters, negators=frozenset(negators))


def bundled_lexicon() -> Lexicon:
    """Load the small lexicon that ships with the package.

    Meant for tests, demos, and the synthetic generator; production runs
    should point the engine config at a full lexicon.
    """
    data = resources.files("minutecast").joinpath("data")
    return load_lexicon(
        str(data / "lexicon.tsv"),
        str(data / "boosters.txt"),
        str(data / "negators.txt"),
    )


def compound_score(text: str, lex: Lexicon) -> SentimentResult:
    """Score already-cleaned text against the lexicon.

    Tokenizes on whitespace/punctuation and lowercases. Each lexicon hit
    contributes its valence, boosted by an immediately preceding booster
    word (increment applied toward the valence's sign) and flipped by
    -0.74 when a negator occurs within the 3 preceding tokens. The
    adjusted sum S is normalized to S / sqrt(S^2 + 15).
    """
    tokens = _TOKEN_RE.findall(text.lower())
    total = 0.0
    for i, token in enumerate(tokens):
        valence = lex.entries.get(token)
        if valence is None:
            continue
        if i > 0:
            increment = lex.boosters.get(tokens[i - 1])
            if increment is not None and valence != 0.0:
                valence += increment if valence > 0 else -increment
        for j in range(max(0, i - NEGATION_WINDOW), i):
            if tokens[j] in lex.negators:
                valence *= NEGATION_FACTOR
                break
        total += valence
    if total == 0.0:
        return SentimentResult(0.0)
    return SentimentResult(total / math.sqrt(total * total + NORMALIZATION_ALPHA))


def weight_score(
    compound: float, followers: int, likes: int, retweets: int
) -> WeightedScore:
    """Apply influence weighting and the signed-root normalization.

    raw = compound x followers x (likes+1) x (retweets+1). The +1 terms
    keep a zero-interaction tweet from zeroing out; followers has no +1
    so zero-follower accounts (bots) contribute nothing. normalized is
    sign(raw) x sqrt(|raw|).
    """
    if not (-1.0 <= compound <= 1.0):
        raise DataError(f"compound {compound!r} outside [-1, +1]")
    if min(followers, likes, retweets) < 0:
        raise DataError("influence counts must be non-negative")
    raw = compound * followers * (likes + 1) * (retweets + 1)
    magnitude = math.sqrt(abs(raw))
    normalized = -magnitude if raw < 0 else magnitude
    return WeightedScore(raw=raw, normalized=normalized)


def score_tweet(tweet: Tweet, lex: Lexicon) -> WeightedScore:
    """Full per-tweet path: clean, compound-score, influence-weight."""
    compound = compound_score(clean_text(tweet.text), lex).compound
    return weight_score(
        compound, tweet.follower_count, tweet.like_count, tweet.retweet_count
    )
