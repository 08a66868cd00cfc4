"""Readability, simplicity, ROUGE and topic-accuracy evaluators."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

_VOWEL_GROUP = re.compile(r"[aeiouy]+")
_WORD = re.compile(r"[a-z]+")
_CONSONANT_LE = re.compile(r"[^aeiouy]le$")
TERMINATORS = frozenset({".", "!", "?"})


def count_syllables(word: str) -> int:
    """Vowel groups (a e i o u y), less one for a silent final 'e'.

    A final consonant + "le" (peo-ple, ta-ble) is voiced and keeps its count.
    """
    if not word:
        raise ValueError("empty word")
    word = word.lower()
    n = len(_VOWEL_GROUP.findall(word))
    if n > 1 and word.endswith("e") and word[-2] not in "aeiouy" and not _CONSONANT_LE.search(word):
        n -= 1
    return max(1, n)


def _tokens(text) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def is_word(token: str) -> bool:
    return _WORD.fullmatch(token) is not None


def flesch_score(text) -> float:
    """Flesch reading ease over pre-tokenized text (str or token list).

    Words are purely alphabetic tokens; sentences are counted by terminator
    tokens, with a minimum of one.
    """
    toks = [t.lower() for t in _tokens(text)]
    words = [t for t in toks if is_word(t)]
    if not words:
        raise ValueError("no words in text")
    sentences = max(1, sum(t in TERMINATORS for t in toks))
    syllables = sum(count_syllables(w) for w in words)
    return 206.835 - 1.015 * (len(words) / sentences) - 84.6 * (syllables / len(words))


def simplicity_score(tokens: Sequence[str], freq: Mapping[str, float]) -> float:
    """Mean corpus frequency per thousand; unknown words count as 0."""
    if len(tokens) == 0:
        raise ValueError("empty token list")
    return sum(freq.get(t, 0.0) for t in tokens) / 1000.0 / len(tokens)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n_f1(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> float:
    if n not in (1, 2):
        raise ValueError(f"ROUGE-N supports n in (1, 2), got {n}")
    cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
    overlap = sum((cand & ref).values())
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    return _f1(lcs_length(candidate, reference), len(candidate), len(reference))


def topic_scores(tokens: Sequence[str], lexicon) -> dict[str, float]:
    """Lexicon weight mass per topic, divided by the token count."""
    if not lexicon.topics:
        raise ValueError("empty lexicon")
    denom = max(1, len(tokens))
    scores = dict.fromkeys(lexicon.topics, 0.0)
    for tok in tokens:
        for topic, weight in lexicon.index.get(tok, ()):
            scores[topic] += weight
    return {t: s / denom for t, s in scores.items()}


def rank_topics(tokens: Sequence[str], lexicon) -> list[str]:
    scores = topic_scores(tokens, lexicon)
    return sorted(scores, key=lambda t: (-scores[t], t))


def topk_topic_accuracy(summaries: Sequence[Sequence[str]], targets: Sequence[str], lexicon, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(summaries) != len(targets):
        raise ValueError("summaries and targets differ in length")
    if not summaries:
        return 0.0
    hits = 0
    for toks, target in zip(summaries, targets):
        if target not in lexicon.topics:
            raise ValueError(f"unknown target topic {target!r}")
        hits += target in rank_topics(toks, lexicon)[:k]
    return hits / len(summaries)


@dataclass
class MetricReport:
    name: str
    values: list[float]

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")


def write_report(reports: Sequence[MetricReport], path, ids: Sequence[str] | None = None) -> None:
    """Tab-separated per-example rows followed by a ``mean`` row."""
    if not reports:
        raise ValueError("no metrics to report")
    n = reports[0].count
    if any(r.count != n for r in reports):
        raise ValueError("metric reports cover different example counts")
    ids = list(ids) if ids is not None else [str(k) for k in range(n)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\t" + "\t".join(r.name for r in reports) + "\n")
        for k in range(n):
            fh.write(ids[k] + "\t" + "\t".join(f"{r.values[k]:.6f}" for r in reports) + "\n")
        fh.write("mean\t" + "\t".join(f"{r.mean:.6f}" for r in reports) + "\n")
