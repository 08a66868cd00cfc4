"""Greedy and beam-search decoding with boosts, voting and attention traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import START_ID, STOP_ID, Vocabulary, detokenize
from .model import (
    DecoderState,
    ModelParams,
    decoder_step,
    encode,
    initial_coverage,
    initial_state,
)
from .tailoring import ControlToken, VotingTable, voting_adjust


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float
    state: DecoderState
    coverage: np.ndarray
    trace: list[np.ndarray] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == STOP_ID

    @property
    def score(self) -> float:
        """Length-normalized log-probability."""
        return self.log_prob / len(self.tokens) if self.tokens else 0.0

    def extend(self, token: int, logp: float, state, coverage, attention) -> "Hypothesis":
        return Hypothesis(self.tokens + [token], self.log_prob + logp, state, coverage, self.trace + [attention])


@dataclass
class DecodeConfig:
    beam_width: int = 1
    max_len: int = 100
    min_len: int = 0
    boost: np.ndarray | None = None       # one entry per article token
    voting: VotingTable | None = None
    voting_lambda: float = 0.0
    control: ControlToken | None = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.min_len > self.max_len:
            raise ValueError("min length exceeds max length")


@dataclass
class DecodeResult:
    best: Hypothesis
    nbest: list[Hypothesis]
    source_tokens: list[str]
    oovs: tuple[str, ...]
    partial: bool = False

    def words(self, vocab: Vocabulary) -> list[str]:
        return vocab.decode_ids(self.best.tokens, self.oovs)

    def record(self, vocab: Vocabulary, with_attention: bool = False) -> dict:
        rec = {"text": detokenize(self.words(vocab)), "score": self.best.score, "partial": self.partial}
        if with_attention:
            rec["source"] = self.source_tokens
            rec["attention"] = [[round(float(x), 8) for x in row] for row in self.best.trace]
        return rec


class _Decoder:
    def __init__(self, params: ModelParams, vocab: Vocabulary, article: Sequence[str], config: DecodeConfig):
        if not article:
            raise ValueError("empty article")
        tokens = list(article)
        boost = None if config.boost is None else np.asarray(config.boost, dtype=np.float64)
        if boost is not None and len(boost) != len(tokens):
            raise ValueError(f"boost has length {len(boost)}, article has {len(tokens)} tokens")
        if config.control is not None:
            if config.control.surface not in vocab.controls:
                raise ValueError(f"control token {config.control.surface} is not registered in the vocabulary")
            tokens = [config.control.surface] + tokens
            if boost is not None:
                boost = np.concatenate(([1.0], boost))
        self.params = params
        self.config = config
        self.source_tokens = tokens
        src, self.oovs = vocab.encode_source(tokens)
        self.ext_size = len(vocab) + len(self.oovs)
        self.enc = encode(params, src)
        self.boost = boost
        self.forbidden = list(vocab.forbidden_ids)
        self.pairs = config.voting.pairs_for(vocab, self.oovs) if config.voting is not None else []

    def root(self) -> Hypothesis:
        return Hypothesis([], 0.0, initial_state(self.enc), initial_coverage(self.enc))

    def expand(self, hyp: Hypothesis):
        prev = hyp.tokens[-1] if hyp.tokens else START_ID
        out = decoder_step(self.params, self.enc, hyp.state, prev, self.boost, hyp.coverage, self.ext_size)
        dist = voting_adjust(out.final_dist, self.pairs, self.config.voting_lambda) if self.pairs else out.final_dist
        with np.errstate(divide="ignore"):
            logp = np.log(dist)
        logp[self.forbidden] = -np.inf
        if len(hyp.tokens) < self.config.min_len:
            logp[STOP_ID] = -np.inf
        return out, logp


def greedy_decode(params: ModelParams, vocab: Vocabulary, article: Sequence[str],
                  config: DecodeConfig | None = None) -> DecodeResult:
    """Argmax decoding; ``config.beam_width`` is ignored."""
    config = config or DecodeConfig()
    dec = _Decoder(params, vocab, article, config)
    hyp = dec.root()
    while len(hyp.tokens) < config.max_len and not hyp.finished:
        out, logp = dec.expand(hyp)
        tok = int(np.argmax(logp))
        hyp = hyp.extend(tok, float(logp[tok]), out.state, out.coverage, out.attention)
    return DecodeResult(hyp, [hyp], dec.source_tokens, dec.oovs, partial=not hyp.finished)


def beam_search(params: ModelParams, vocab: Vocabulary, article: Sequence[str],
                config: DecodeConfig | None = None) -> DecodeResult:
    """Width-W beam over the extended vocabulary.

    Finished hypotheses are ranked by log-probability per token; equal scores
    prefer the lower token id at the first difference.
    """
    config = config or DecodeConfig()
    W = config.beam_width
    dec = _Decoder(params, vocab, article, config)
    live = [dec.root()]
    finished: list[Hypothesis] = []
    for _ in range(config.max_len):
        candidates = []
        for hyp in live:
            out, logp = dec.expand(hyp)
            top = sorted(np.flatnonzero(np.isfinite(logp)), key=lambda k: (-logp[k], k))[:W]
            for k in top:
                candidates.append((hyp.log_prob + float(logp[k]), hyp.tokens + [int(k)], hyp, int(k), float(logp[k]), out))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for _, _, hyp, k, step_logp, out in candidates[:W]:
            new = hyp.extend(k, step_logp, out.state, out.coverage, out.attention)
            (finished if k == STOP_ID else live).append(new)
        if not live or len(finished) >= W:
            break
    partial = not finished
    pool = finished if finished else live
    ranked = sorted(pool, key=lambda h: (-h.score, h.tokens))
    return DecodeResult(ranked[0], ranked, dec.source_tokens, dec.oovs, partial=partial)


def decode(params: ModelParams, vocab: Vocabulary, article: Sequence[str], config: DecodeConfig) -> DecodeResult:
    if config.beam_width == 1:
        return greedy_decode(params, vocab, article, config)
    return beam_search(params, vocab, article, config)


def write_decodes(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
