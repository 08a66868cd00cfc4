"""Corpora, tokenization, vocabularies, corpus mixing and synthetic corpora."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .metrics import count_syllables
from .numerics import substream

PAD, UNK, START, STOP = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, START, STOP)
PAD_ID, UNK_ID, START_ID, STOP_ID = range(4)

SENTENCE_END = frozenset({".", "!", "?"})
MAX_ARTICLE_TOKENS = 400
MAX_SUMMARY_TOKENS = 100

# control tokens like <topic:politics> stay whole; other punctuation splits off
_TOKEN_RE = re.compile(r"<[^<>\s]+>|[^\W_]+(?:[-'][^\W_]+)*|[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    """Split on terminator tokens; the terminator stays with its sentence."""
    sentences, current = [], []
    for tok in tokens:
        current.append(tok)
        if tok in SENTENCE_END:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


@dataclass(frozen=True)
class Example:
    article: tuple[str, ...]
    summary: tuple[str, ...]
    topic: str | None = None
    controls: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "article", tuple(self.article))
        object.__setattr__(self, "summary", tuple(self.summary))
        object.__setattr__(self, "controls", tuple(self.controls))


@dataclass
class Corpus:
    examples: list[Example]
    provenance: str = "real"

    def __post_init__(self):
        if self.provenance not in ("real", "mixed", "synthetic"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for k, ex in enumerate(self.examples):
            if not ex.article or not ex.summary:
                raise ValueError(f"example {k} has an empty article or summary")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def topics(self) -> list[str]:
        return sorted({ex.topic for ex in self.examples if ex.topic is not None})


def read_corpus(path, provenance: str = "real") -> Corpus:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                article, summary = rec["article"], rec["summary"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from None
            examples.append(Example(
                article=tokenize(article)[:MAX_ARTICLE_TOKENS],
                summary=tokenize(summary)[:MAX_SUMMARY_TOKENS],
                topic=rec.get("topic"),
            ))
    return Corpus(examples, provenance)


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in corpus:
            rec = {"article": detokenize(ex.article), "summary": detokenize(ex.summary)}
            if ex.topic is not None:
                rec["topic"] = ex.topic
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass(frozen=True)
class EncodedExample:
    """Ids over the per-example extended vocabulary.

    ``source_ids`` keep extended ids for source OOVs so they can be copied;
    ``oovs[k]`` is the surface form of id ``vocab_size + k``.
    """
    source_ids: np.ndarray
    target_ids: np.ndarray
    oovs: tuple[str, ...]
    extended_size: int


class Vocabulary:
    def __init__(self, tokens: Sequence[str], controls: Sequence[str] = ()):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: k for k, t in enumerate(tokens)}
        self.controls = tuple(controls)
        missing = [c for c in self.controls if c not in self.stoi]
        if missing:
            raise ValueError(f"control tokens not in vocabulary: {missing}")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int, oovs: Sequence[str] = ()) -> str:
        if idx < len(self.itos):
            return self.itos[idx]
        return oovs[idx - len(self.itos)]

    @property
    def control_ids(self) -> tuple[int, ...]:
        return tuple(self.stoi[c] for c in self.controls)

    @property
    def forbidden_ids(self) -> tuple[int, ...]:
        """Ids the decoder must never emit."""
        return (PAD_ID, START_ID) + self.control_ids

    def encode_source(self, tokens: Sequence[str]) -> tuple[np.ndarray, tuple[str, ...]]:
        oovs: list[str] = []
        ids = []
        for tok in tokens:
            if tok in self.stoi:
                ids.append(self.stoi[tok])
            else:
                if tok not in oovs:
                    oovs.append(tok)
                ids.append(len(self.itos) + oovs.index(tok))
        return np.array(ids, dtype=np.int64), tuple(oovs)

    def encode_target(self, tokens: Sequence[str], oovs: Sequence[str]) -> np.ndarray:
        ids = []
        for tok in tokens:
            if tok in self.stoi:
                ids.append(self.stoi[tok])
            elif tok in oovs:
                ids.append(len(self.itos) + list(oovs).index(tok))
            else:
                ids.append(UNK_ID)
        ids.append(STOP_ID)
        return np.array(ids, dtype=np.int64)

    def encode(self, example: Example) -> EncodedExample:
        src, oovs = self.encode_source(example.article)
        tgt = self.encode_target(example.summary, oovs)
        return EncodedExample(src, tgt, oovs, len(self.itos) + len(oovs))

    def decode_ids(self, ids: Iterable[int], oovs: Sequence[str] = ()) -> list[str]:
        out = []
        for idx in ids:
            if idx == STOP_ID:
                break
            out.append(self.token(int(idx), oovs))
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for k, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{k}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if not tok:
                    raise ValueError(f"{path}:{lineno}: expected token<TAB>id")
                pairs.append((int(idx), tok))
        pairs.sort()
        if [k for k, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not contiguous from 0")
        tokens = [t for _, t in pairs]
        controls = [t for t in tokens if is_control_token(t)]
        return cls(tokens, controls)


def is_control_token(token: str) -> bool:
    return token.startswith("<") and token.endswith(">") and token not in RESERVED


def build_vocab(corpus: Corpus, max_size: int, controls: Sequence[str] = ()) -> Vocabulary:
    """Keep the most frequent tokens; ties go to the lexicographically smaller token."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    controls = list(dict.fromkeys(controls))
    for ex in corpus:
        for tok in ex.article:
            if is_control_token(tok) and tok not in controls:
                controls.append(tok)
    fixed = list(RESERVED) + controls
    if max_size <= len(fixed):
        raise ValueError(f"max_size {max_size} leaves no room beyond {len(fixed)} reserved/control tokens")
    counts = Counter()
    for ex in corpus:
        counts.update(t for t in ex.article if t not in fixed)
        counts.update(t for t in ex.summary if t not in fixed)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [t for t, _ in ranked[:max_size - len(fixed)]]
    return Vocabulary(fixed + words, controls)


def _sentence_blocks(tokens: Sequence[str], size: int) -> list[list[str]]:
    sents = split_sentences(tokens)
    return [sum(sents[k:k + size], []) for k in range(0, len(sents), size)]


def intersperse(a: Sequence[str], b: Sequence[str], a_first: bool, block: int = 2) -> list[str]:
    blocks_a, blocks_b = _sentence_blocks(a, block), _sentence_blocks(b, block)
    first, second = (blocks_a, blocks_b) if a_first else (blocks_b, blocks_a)
    out: list[str] = []
    for k in range(max(len(first), len(second))):
        if k < len(first):
            out += first[k]
        if k < len(second):
            out += second[k]
    return out


def mix_corpus(corpus: Corpus, seed: int, pairs: Sequence[tuple[int, int]] | None = None,
               block: int = 2) -> Corpus:
    """Build two-topic articles with one reference summary per topic.

    ``pairs`` are example indices with distinct topics; when omitted, examples
    are shuffled and greedily paired across topics.
    """
    if len(corpus.topics()) < 2:
        raise ValueError("mixing needs at least 2 topics in the corpus")
    rng = substream(seed, "mixing")
    examples = corpus.examples
    if pairs is None:
        pairs = _pair_across_topics(examples, rng)
    out = []
    for ia, ib in pairs:
        a, b = examples[ia], examples[ib]
        if a.topic is None or b.topic is None or a.topic == b.topic:
            raise ValueError(f"pair ({ia}, {ib}) does not span two distinct topics")
        mixed = intersperse(a.article, b.article, a_first=bool(rng.integers(2)), block=block)
        mixed = mixed[:MAX_ARTICLE_TOKENS]
        out.append(Example(mixed, a.summary, a.topic))
        out.append(Example(mixed, b.summary, b.topic))
    return Corpus(out, "mixed")


def _pair_across_topics(examples, rng) -> list[tuple[int, int]]:
    pool = [k for k in rng.permutation(len(examples)) if examples[k].topic is not None]
    pairs, waiting = [], []
    for k in pool:
        for j, w in enumerate(waiting):
            if examples[w].topic != examples[k].topic:
                pairs.append((int(w), int(k)))
                del waiting[j]
                break
        else:
            waiting.append(k)
    return pairs


# Synthetic corpora for end-to-end checks.  Words are real English words with
# a spread of syllable counts so readability rewards have something to act on.
COPY_WORDS = (
    "cat", "dog", "sun", "red", "big", "run", "tree", "book", "hat", "cup",
    "water", "happy", "garden", "yellow", "river", "pencil", "window", "monkey",
    "banana", "animal", "computer", "tomato", "umbrella", "elephant",
    "hospital", "gigantic", "beautiful", "dictionary", "information", "university",
)

TOPIC_WORDS = {
    "business": ("market", "profit", "shares", "company", "investor", "trade", "bank", "sales"),
    "health": ("doctor", "patient", "virus", "hospital", "disease", "nurse", "vaccine", "clinic"),
    "military": ("army", "soldier", "troops", "weapon", "missile", "navy", "defense", "battle"),
    "politics": ("election", "senator", "vote", "president", "campaign", "party", "congress", "law"),
    "sports": ("team", "coach", "match", "season", "player", "goal", "league", "score"),
    "technology": ("software", "robot", "internet", "device", "data", "chip", "app", "network"),
}


def synthetic_lexicon_lines() -> list[str]:
    return [f"{topic}\t{word}\t1" for topic, words in TOPIC_WORDS.items() for word in words]


# longer copy words paired with a shorter, more frequent stand-in
COPY_SYNONYMS = {
    "gigantic": "big", "dictionary": "book", "umbrella": "hat", "beautiful": "happy", "yellow": "red",
}


def synthetic_frequency_lines() -> list[str]:
    """Frequency table for the copy vocabulary; fewer syllables means more frequent."""
    return [f"{w}\t{8000 // 2 ** count_syllables(w)}" for w in COPY_WORDS]


def synthetic_synonym_lines() -> list[str]:
    return [f"{w}\t{s}" for w, s in sorted(COPY_SYNONYMS.items())]


def gen_synthetic(kind: str, size: int, seed: int, max_len: int = 10, oov_rate: float = 0.0) -> Corpus:
    """``copy``: summary equals a random article.  ``two_topic``: a two-segment
    article emitted twice, once per segment's topic.

    With ``oov_rate > 0`` copy articles draw that fraction of tokens from a
    large pool of one-off words that will not survive vocabulary truncation.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = substream(seed, f"synthetic:{kind}")
    if kind == "copy":
        examples = []
        for _ in range(size):
            n = int(rng.integers(3, max_len + 1))
            toks = []
            for _ in range(n):
                if oov_rate > 0 and rng.random() < oov_rate:
                    toks.append(_rare_word(rng))
                else:
                    toks.append(COPY_WORDS[int(rng.integers(len(COPY_WORDS)))])
            examples.append(Example(toks, toks))
        return Corpus(examples, "synthetic")
    if kind == "two_topic":
        topics = sorted(TOPIC_WORDS)
        examples = []
        for _ in range(size):
            t1, t2 = (topics[k] for k in rng.choice(len(topics), size=2, replace=False))
            seg_a = _segment(rng, TOPIC_WORDS[t1])
            seg_b = _segment(rng, TOPIC_WORDS[t2])
            article = seg_a + seg_b
            examples.append(Example(article, seg_a, t1))
            examples.append(Example(article, seg_b, t2))
        return Corpus(examples, "synthetic")
    raise ValueError(f"unknown synthetic corpus kind {kind!r}")


def _segment(rng, words) -> list[str]:
    n = int(rng.integers(3, 6))
    return [words[int(k)] for k in rng.integers(len(words), size=n)] + ["."]


_LETTERS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"


def _rare_word(rng) -> str:
    sylls = int(rng.integers(2, 4))
    return "".join(_LETTERS[int(rng.integers(16))] + _VOWELS[int(rng.integers(5))] for _ in range(sylls))

