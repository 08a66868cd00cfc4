"""Pointer-generator forward pass.

Dimension table (V vocab, D embedding, H hidden, A attention):

    embedding   (V, D)        word vectors; OOV inputs use the UNK row
    enc_W       (4H, D+H)     encoder LSTM, gates i, f, g, o
    enc_b       (4H,)
    dec_W       (4H, D+H)     decoder LSTM, input is the previous token
    dec_b       (4H,)
    att_v       (A,)
    att_Wh      (A, H)
    att_Ws      (A, H)
    att_b       (A,)
    att_wcov    (A,)          coverage feature inside the tanh
    gen_wh      (H,)          switch weight on the context vector
    gen_ws      (H,)          switch weight on the decoder state
    gen_wy      (D,)          switch weight on the decoder input embedding
    gen_b       (1,)
    out_W       (V, 2H)       vocabulary logits from [s_t; context]
    out_b       (V,)

The flat parameter vector concatenates these tensors in this order, each
raveled row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import UNK_ID
from .numerics import (
    recurrent_step_cached,
    scalar_sigmoid,
    softmax,
    uniform_init,
)

CHECKPOINT_MAGIC = b"TAILORSUM-CKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    vocab: int
    emb: int
    hidden: int
    attn: int

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        V, D, H, A = self.vocab, self.emb, self.hidden, self.attn
        return [
            ("embedding", (V, D)),
            ("enc_W", (4 * H, D + H)),
            ("enc_b", (4 * H,)),
            ("dec_W", (4 * H, D + H)),
            ("dec_b", (4 * H,)),
            ("att_v", (A,)),
            ("att_Wh", (A, H)),
            ("att_Ws", (A, H)),
            ("att_b", (A,)),
            ("att_wcov", (A,)),
            ("gen_wh", (H,)),
            ("gen_ws", (H,)),
            ("gen_wy", (D,)),
            ("gen_b", (1,)),
            ("out_W", (V, 2 * H)),
            ("out_b", (V,)),
        ]

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())


PARAM_GROUPS = {
    "embedding": ("embedding",),
    "encoder": ("enc_W", "enc_b"),
    "decoder": ("dec_W", "dec_b"),
    "attention": ("att_v", "att_Wh", "att_Ws", "att_b", "att_wcov"),
    "switch": ("gen_wh", "gen_ws", "gen_wy", "gen_b"),
    "output": ("out_W", "out_b"),
}


class ModelParams:
    """Named float64 tensors backed by one flat vector (views share memory)."""

    def __init__(self, dims: Dims, flat: np.ndarray | None = None):
        self.dims = dims
        if flat is None:
            flat = np.zeros(dims.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (dims.size,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({dims.size},)")
        self.flat = flat
        self.tensors: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in dims.layout():
            n = int(np.prod(shape))
            self.tensors[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __getattr__(self, name):
        try:
            return self.__dict__["tensors"][name]
        except KeyError:
            raise AttributeError(name) from None

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.flat.copy())

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.dims)

    def group_slices(self) -> dict[str, np.ndarray]:
        """Flat index arrays per parameter group."""
        offsets, offset = {}, 0
        for name, shape in self.dims.layout():
            n = int(np.prod(shape))
            offsets[name] = np.arange(offset, offset + n)
            offset += n
        return {g: np.concatenate([offsets[n] for n in names]) for g, names in PARAM_GROUPS.items()}

    @classmethod
    def init(cls, dims: Dims, rng: np.random.Generator, scale: float = 0.1) -> "ModelParams":
        params = cls(dims, uniform_init(rng, dims.size, scale))
        H = dims.hidden
        params.enc_b[:] = 0.0
        params.dec_b[:] = 0.0
        params.enc_b[H:2 * H] = 1.0
        params.dec_b[H:2 * H] = 1.0
        return params

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.flat)):
            bad = [n for n, t in self.tensors.items() if not np.all(np.isfinite(t))]
            raise FloatingPointError(f"non-finite parameters in {bad}")


def save_checkpoint(params: ModelParams, path) -> None:
    """Header line, JSON dimension table, then little-endian float64 data."""
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": {"vocab": params.dims.vocab, "emb": params.dims.emb,
                 "hidden": params.dims.hidden, "attn": params.dims.attn},
        "tensors": [[name, list(shape)] for name, shape in params.dims.layout()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.readline().split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {int(magic[1])}")
        header = json.loads(fh.readline())
        data = fh.read()
    dims = Dims(**header["dims"])
    expected = [[n, list(s)] for n, s in dims.layout()]
    if header["tensors"] != expected:
        raise ValueError(f"{path}: tensor table does not match dimensions")
    flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
    return ModelParams(dims, flat)


@dataclass
class EncoderStates:
    states: np.ndarray        # (n, H)
    source_ids: np.ndarray    # extended ids
    final_cell: np.ndarray
    features: np.ndarray      # states @ att_Wh.T, reused by every attention step
    caches: list | None = None

    def __len__(self):
        return self.states.shape[0]


def embed_id(params: ModelParams, token_id: int) -> int:
    return token_id if token_id < params.dims.vocab else UNK_ID


def encode(params: ModelParams, source_ids, keep_cache: bool = False) -> EncoderStates:
    source_ids = np.asarray(source_ids, dtype=np.int64)
    if source_ids.size == 0:
        raise ValueError("empty source")
    H = params.dims.hidden
    h, c = np.zeros(H), np.zeros(H)
    rows = np.where(source_ids < params.dims.vocab, source_ids, UNK_ID)
    inputs = params.embedding[rows]
    states = np.empty((len(source_ids), H))
    caches = [] if keep_cache else None
    W, b = params.enc_W, params.enc_b
    for i in range(len(source_ids)):
        h, c, cache = recurrent_step_cached(W, b, inputs[i], h, c)
        states[i] = h
        if keep_cache:
            caches.append(cache)
    return EncoderStates(states, source_ids, c, states @ params.att_Wh.T, caches)


def attend(params: ModelParams, enc: EncoderStates, s_t, boost=None, coverage=None):
    """Return ``(attention, context, raw_scores)``.

    Scores are ``boost_i * v . tanh(W_h h_i + W_s s_t + w_cov cov_i + b_att)``;
    the boost scales the signed score, so boosting a negatively scored
    position lowers its attention.
    """
    a, ctx, raw, _ = _attend_cached(params, enc, s_t, boost, coverage)
    return a, ctx, raw


def _attend_cached(params, enc, s_t, boost, coverage):
    n = len(enc)
    if boost is None:
        boost = np.ones(n)
    if coverage is None:
        coverage = np.zeros(n)
    if len(boost) != n:
        raise ValueError(f"boost has length {len(boost)}, expected {n}")
    if len(coverage) != n:
        raise ValueError(f"coverage has length {len(coverage)}, expected {n}")
    if s_t.shape != (params.dims.hidden,):
        raise ValueError(f"decoder state has shape {s_t.shape}, expected ({params.dims.hidden},)")
    pre = enc.features + (params.att_Ws @ s_t + params.att_b) + np.outer(coverage, params.att_wcov)
    tt = np.tanh(pre)
    raw = tt @ params.att_v
    a = softmax(boost * raw)
    ctx = a @ enc.states
    return a, ctx, raw, tt


def generation_switch(params: ModelParams, context, s_t, y_emb) -> float:
    z = params.gen_wh @ context + params.gen_ws @ s_t + params.gen_wy @ y_emb + params.gen_b[0]
    return scalar_sigmoid(float(z))


def vocab_distribution(params: ModelParams, s_t, context) -> np.ndarray:
    return softmax(params.out_W @ np.concatenate((s_t, context)) + params.out_b)


def final_distribution(p_gen: float, p_vocab, attention, source_ids, extended_size: int) -> np.ndarray:
    """Mix generation and copy mass over the extended vocabulary."""
    source_ids = np.asarray(source_ids, dtype=np.int64)
    if source_ids.size and source_ids.max() >= extended_size:
        raise ValueError(f"source id {int(source_ids.max())} outside extended size {extended_size}")
    if len(p_vocab) > extended_size:
        raise ValueError("extended size smaller than the base vocabulary")
    dist = np.zeros(extended_size)
    dist[:len(p_vocab)] = p_gen * np.asarray(p_vocab)
    dist += (1.0 - p_gen) * np.bincount(source_ids, weights=attention, minlength=extended_size)
    return dist


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class DecoderStepOut:
    attention: np.ndarray
    context: np.ndarray
    p_gen: float
    final_dist: np.ndarray
    state: DecoderState
    coverage: np.ndarray
    raw_scores: np.ndarray
    p_vocab: np.ndarray


def initial_state(enc: EncoderStates) -> DecoderState:
    return DecoderState(enc.states[-1].copy(), enc.final_cell.copy())


def initial_coverage(enc: EncoderStates) -> np.ndarray:
    return np.zeros(len(enc))


def decoder_step(params: ModelParams, enc: EncoderStates, state: DecoderState, prev_token: int,
                 boost=None, coverage=None, extended_size: int | None = None) -> DecoderStepOut:
    if prev_token < 0:
        raise ValueError(f"invalid previous token id {prev_token}")
    if coverage is None:
        coverage = initial_coverage(enc)
    if extended_size is None:
        extended_size = max(params.dims.vocab, int(enc.source_ids.max()) + 1)
    x = params.embedding[embed_id(params, prev_token)]
    h, c, _ = recurrent_step_cached(params.dec_W, params.dec_b, x, state.h, state.c)
    a, ctx, raw, _ = _attend_cached(params, enc, h, boost, coverage)
    p_gen = generation_switch(params, ctx, h, x)
    p_vocab = vocab_distribution(params, h, ctx)
    dist = final_distribution(p_gen, p_vocab, a, enc.source_ids, extended_size)
    return DecoderStepOut(a, ctx, p_gen, dist, DecoderState(h, c), coverage + a, raw, p_vocab)
