"""Characteristic tailoring: control tokens, attention boosts, style bins,
decoder-probability voting and reward functions."""

from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Example, Vocabulary, split_sentences
from .metrics import count_syllables, flesch_score, is_word, simplicity_score, topic_scores

__all__ = [
    "ControlToken", "TopicLexicon", "VotingTable", "RewardFn",
    "topic_token", "topic_scores", "select_boost_vector", "prepend_control_token",
    "strip_control_token", "median_bins", "voting_adjust", "make_reward",
    "load_lexicon", "load_synonyms", "load_frequency_table",
    "fewer_syllables", "more_frequent",
]


@dataclass(frozen=True)
class ControlToken:
    surface: str
    kind: str  # topic | readability | simplicity

    def __post_init__(self):
        if self.kind not in ("topic", "readability", "simplicity"):
            raise ValueError(f"unknown control token kind {self.kind!r}")
        if not (self.surface.startswith("<") and self.surface.endswith(">")):
            raise ValueError(f"control token {self.surface!r} must look like <...>")


def topic_token(topic: str) -> ControlToken:
    return ControlToken(f"<topic:{topic}>", "topic")


READABLE = ControlToken("<readable>", "readability")
NOT_READABLE = ControlToken("<not-readable>", "readability")
SIMPLE = ControlToken("<simple>", "simplicity")
NOT_SIMPLE = ControlToken("<not-simple>", "simplicity")


class TopicLexicon:
    def __init__(self, entries: Mapping[str, Sequence[tuple[str, float]]]):
        self.entries: dict[str, list[tuple[str, float]]] = {}
        for topic, words in entries.items():
            words = list(words)
            if not words:
                raise ValueError(f"topic {topic!r} has no words")
            for word, weight in words:
                if weight <= 0:
                    raise ValueError(f"non-positive weight for {word!r} in topic {topic!r}")
                if word != word.lower():
                    raise ValueError(f"lexicon word {word!r} is not lowercase")
            self.entries[topic] = words
        self.topics = sorted(self.entries)
        self.index: dict[str, list[tuple[str, float]]] = defaultdict(list)
        for topic in self.topics:
            for word, weight in self.entries[topic]:
                self.index[word].append((topic, weight))

    @classmethod
    def from_lines(cls, lines) -> "TopicLexicon":
        entries: dict[str, list[tuple[str, float]]] = defaultdict(list)
        for lineno, line in enumerate(lines, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"lexicon line {lineno}: expected topic<TAB>word<TAB>weight")
            entries[parts[0]].append((parts[1], float(parts[2])))
        return cls(entries)


def load_lexicon(path) -> TopicLexicon:
    with open(path, encoding="utf-8") as fh:
        return TopicLexicon.from_lines(fh)


def _two_column(path, convert):
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two tab-separated columns")
            table[parts[0]] = convert(parts[1])
    return table


def load_synonyms(path) -> dict[str, str]:
    return _two_column(path, str)


def load_frequency_table(path) -> dict[str, float]:
    table = _two_column(path, float)
    bad = [w for w, f in table.items() if f < 0]
    if bad:
        raise ValueError(f"negative frequencies for {bad[:3]}")
    return table


def select_boost_vector(article: Sequence[str], topic: str, lexicon: TopicLexicon,
                        k: int = 5, gamma: float = 1.0) -> np.ndarray:
    """Per-position boosts: ``1 + gamma * score`` inside the ``k`` sentences
    scoring highest for ``topic``, 1 elsewhere.  Ties keep article order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if topic not in lexicon.topics:
        raise ValueError(f"unknown topic {topic!r}")
    sentences = split_sentences(article)
    scores = [topic_scores(s, lexicon)[topic] for s in sentences]
    chosen = set(sorted(range(len(sentences)), key=lambda j: (-scores[j], j))[:k])
    beta = []
    for j, sent in enumerate(sentences):
        value = 1.0 + gamma * scores[j] if j in chosen else 1.0
        beta.extend([value] * len(sent))
    return np.array(beta)


def prepend_control_token(example: Example, token: ControlToken, vocab: Vocabulary | None = None) -> Example:
    if vocab is not None and token.surface not in vocab.controls:
        raise ValueError(f"control token {token.surface} is not registered in the vocabulary")
    return replace(example, article=(token.surface,) + example.article,
                   controls=(token.surface,) + example.controls)


def strip_control_token(example: Example) -> Example:
    if not example.controls or example.article[:1] != example.controls[:1]:
        raise ValueError("example does not start with a control token")
    return replace(example, article=example.article[1:], controls=example.controls[1:])


def median_bins(values: Sequence[float], positive: ControlToken = READABLE,
                negative: ControlToken = NOT_READABLE) -> tuple[float, Callable[[float], ControlToken]]:
    """Median threshold and a labeler; values at the threshold are positive."""
    if len(values) == 0:
        raise ValueError("median_bins needs at least one value")
    threshold = float(statistics.median(values))

    def label(value: float) -> ControlToken:
        return positive if value >= threshold else negative

    return threshold, label


def fewer_syllables(candidate: str, original: str) -> bool:
    return is_word(candidate) and is_word(original) and count_syllables(candidate) < count_syllables(original)


def more_frequent(freq: Mapping[str, float]) -> Callable[[str, str], bool]:
    def simpler(candidate: str, original: str) -> bool:
        return freq.get(candidate, 0.0) > freq.get(original, 0.0)
    return simpler


def voting_adjust(dist, pairs: Sequence[tuple[int, int]], lam: float) -> np.ndarray:
    """Move ``lam * p(w)`` from each word ``w`` to its simpler synonym.

    ``pairs`` lists ``(w, simpler_w)`` ids; transfers use the input masses, so
    chained synonyms do not cascade within one step.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    dist = np.asarray(dist, dtype=np.float64)
    out = dist.copy()
    if lam == 0.0 or not pairs:
        return out
    n = len(dist)
    for w, s in pairs:
        if not (0 <= w < n and 0 <= s < n):
            raise IndexError(f"synonym pair ({w}, {s}) outside distribution of size {n}")
        moved = lam * dist[w]
        out[w] -= moved
        out[s] += moved
    np.maximum(out, 0.0, out=out)
    total = out.sum()
    if total > 0:
        out *= dist.sum() / total
    return out


class VotingTable:
    """Synonym replacements filtered by a ``simpler(candidate, original)`` rule."""

    def __init__(self, synonyms: Mapping[str, str], simpler: Callable[[str, str], bool] = fewer_syllables):
        self.pairs = {w: s for w, s in synonyms.items() if w != s and simpler(s, w)}

    def pairs_for(self, vocab: Vocabulary, oovs: Sequence[str] = ()) -> list[tuple[int, int]]:
        ids = dict(vocab.stoi)
        for k, tok in enumerate(oovs):
            ids.setdefault(tok, len(vocab) + k)
        return [(ids[w], ids[s]) for w, s in sorted(self.pairs.items()) if w in ids and s in ids]


@dataclass(frozen=True)
class RewardFn:
    name: str
    evaluator: Callable[[Sequence[str]], float]

    def __call__(self, tokens: Sequence[str]) -> float:
        return float(self.evaluator(list(tokens)))

    def on_ids(self, vocab: Vocabulary) -> Callable:
        """Adapter for training: ``(ids, encoded_example) -> reward``."""
        def reward(ids, ex) -> float:
            return self(vocab.decode_ids(ids, ex.oovs))
        return reward


def make_reward(kind: str, freq: Mapping[str, float] | None = None) -> RewardFn:
    """Readability (Flesch) or simplicity reward over a decoded token sequence.

    A sequence with no alphabetic word earns 0.
    """
    if kind == "readability":
        def readability(tokens):
            return flesch_score(tokens) if any(is_word(t) for t in tokens) else 0.0
        return RewardFn("readability", readability)
    if kind == "simplicity":
        if freq is None:
            raise ValueError("simplicity reward needs a frequency table")

        def simplicity(tokens):
            words = [t for t in tokens if is_word(t)]
            return simplicity_score(words, freq) if words else 0.0
        return RewardFn("simplicity", simplicity)
    raise ValueError(f"unknown reward kind {kind!r}")
