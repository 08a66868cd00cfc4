"""Losses, the analytic backward pass, Adagrad, and the training loops.

A single cached forward over a target sequence serves all three objectives:
teacher-forced NLL (with coverage penalty), and the log-likelihood of a
sampled rollout that the self-critical loss scales by a reward difference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import START_ID, STOP_ID, UNK_ID, EncodedExample
from .model import (
    ModelParams,
    _attend_cached,
    encode,
    initial_state,
    save_checkpoint,
)
from .numerics import recurrent_step_backward, recurrent_step_cached, scalar_sigmoid, softmax, substream

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class _Step:
    in_row: int
    x: np.ndarray
    cell: tuple
    h: np.ndarray
    a: np.ndarray
    ctx: np.ndarray
    tt: np.ndarray
    cov: np.ndarray
    p_gen: float
    p_vocab: np.ndarray
    target: int
    prob: float


@dataclass
class SequencePass:
    tokens: list[int]
    log_probs: np.ndarray
    nll: float                # -sum log p over steps (floored)
    coverage_loss: float      # sum_t sum_i min(a_i, cov_i)
    floored: bool
    steps: list[_Step] = field(repr=False, default_factory=list)
    enc: object = field(repr=False, default=None)
    boost: np.ndarray | None = field(repr=False, default=None)


def _choose(dist: np.ndarray, forbidden: Sequence[int], mode: str, rng) -> int:
    masked = dist.copy()
    masked[list(forbidden)] = 0.0
    if mode == "greedy":
        return int(np.argmax(masked))
    total = masked.sum()
    if total <= 0:
        return int(np.argmax(dist))
    return int(rng.choice(len(masked), p=masked / total))


def sequence_pass(params: ModelParams, source_ids, extended_size: int, *, targets=None,
                  mode: str = "teacher", teacher_forcing: bool = True, rng=None,
                  max_len: int = 100, forbidden: Sequence[int] = (), boost=None) -> SequencePass:
    """Run the decoder over a sequence and keep everything the backward needs.

    ``mode="teacher"`` scores ``targets``; ``"greedy"``/``"sample"`` pick each
    token from the step distribution (forbidden ids masked) until STOP or
    ``max_len``.  Recorded log-probabilities always come from the unmasked
    model distribution, which is what the backward pass differentiates.
    """
    V, H = params.dims.vocab, params.dims.hidden
    enc = encode(params, source_ids, keep_cache=True)
    src = enc.source_ids
    n = len(src)
    if boost is None:
        boost = np.ones(n)
    state = initial_state(enc)
    h, c = state.h, state.c
    cov = np.zeros(n)
    prev = START_ID
    steps: list[_Step] = []
    tokens: list[int] = []
    log_probs = []
    nll = cov_loss = 0.0
    floored = False
    T = len(targets) if mode == "teacher" else max_len
    if mode == "teacher" and T < 1:
        raise ValueError("target length must be >= 1")
    for t in range(T):
        row = prev if prev < V else UNK_ID
        x = params.embedding[row]
        h, c, cell = recurrent_step_cached(params.dec_W, params.dec_b, x, h, c)
        a, ctx, _, tt = _attend_cached(params, enc, h, boost, cov)
        p_gen = scalar_sigmoid(float(params.gen_wh @ ctx + params.gen_ws @ h + params.gen_wy @ x + params.gen_b[0]))
        p_vocab = softmax(params.out_W @ np.concatenate((h, ctx)) + params.out_b)
        if mode == "teacher":
            y = int(targets[t])
            if y >= extended_size:
                raise ValueError(f"target id {y} outside extended size {extended_size}")
            prob = (p_gen * p_vocab[y] if y < V else 0.0) + (1.0 - p_gen) * a[src == y].sum()
        else:
            dist = np.zeros(extended_size)
            dist[:V] = p_gen * p_vocab
            dist += (1.0 - p_gen) * np.bincount(src, weights=a, minlength=extended_size)
            y = _choose(dist, forbidden, mode, rng)
            prob = dist[y]
        if prob < LOG_FLOOR:
            floored = True
            lp = math.log(LOG_FLOOR)
        else:
            lp = math.log(prob)
        nll -= lp
        cov_loss += float(np.minimum(a, cov).sum())
        steps.append(_Step(row, x, cell, h, a, ctx, tt, cov, p_gen, p_vocab, y, prob))
        tokens.append(y)
        log_probs.append(lp)
        cov = cov + a
        if mode == "teacher":
            if teacher_forcing:
                prev = y
            else:
                dist = np.zeros(extended_size)
                dist[:V] = p_gen * p_vocab
                dist += (1.0 - p_gen) * np.bincount(src, weights=a, minlength=extended_size)
                prev = _choose(dist, forbidden, "greedy", None)
        else:
            prev = y
            if y == STOP_ID:
                break
    return SequencePass(tokens, np.array(log_probs), nll, cov_loss, floored, steps, enc, boost)


def sequence_backward(params: ModelParams, sp: SequencePass, step_weights, coverage_weight: float = 0.0,
                      grads: ModelParams | None = None) -> ModelParams:
    """Gradient of ``sum_t w_t * (-log p_t) + coverage_weight * coverage_loss``."""
    V, H = params.dims.vocab, params.dims.hidden
    g = params.zeros_like() if grads is None else grads
    enc = sp.enc
    src = enc.source_ids
    states = enc.states
    n = len(src)
    boost = sp.boost
    d_states = np.zeros_like(states)
    d_feat = np.zeros((n, params.dims.attn))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    dcov_future = np.zeros(n)
    step_weights = np.broadcast_to(np.asarray(step_weights, dtype=np.float64), (len(sp.steps),))
    Ws, v, wcov = params.att_Ws, params.att_v, params.att_wcov
    out_W = params.out_W

    for t in range(len(sp.steps) - 1, -1, -1):
        st = sp.steps[t]
        y = st.target
        w = step_weights[t]
        dprob = 0.0 if st.prob < LOG_FLOOR else -w / st.prob
        da = dcov_future.copy()
        dh = dh_next.copy()
        dctx = np.zeros(H)
        dx = np.zeros(params.dims.emb)

        if dprob != 0.0:
            copy_mask = src == y
            pv_y = st.p_vocab[y] if y < V else 0.0
            copy_mass = st.a[copy_mask].sum()
            dpg = dprob * (pv_y - copy_mass)
            da[copy_mask] += dprob * (1.0 - st.p_gen)
            if y < V:
                dlogits = -dprob * st.p_gen * pv_y * st.p_vocab
                dlogits[y] += dprob * st.p_gen * pv_y
                g.out_W += np.outer(dlogits, np.concatenate((st.h, st.ctx)))
                g.out_b += dlogits
                du = out_W.T @ dlogits
                dh += du[:H]
                dctx += du[H:]
            dz = dpg * st.p_gen * (1.0 - st.p_gen)
            g.gen_wh += dz * st.ctx
            g.gen_ws += dz * st.h
            g.gen_wy += dz * st.x
            g.gen_b[0] += dz
            dctx += dz * params.gen_wh
            dh += dz * params.gen_ws
            dx += dz * params.gen_wy

        dcov = dcov_future.copy()
        if coverage_weight:
            a_smaller = st.a < st.cov
            da += coverage_weight * a_smaller
            dcov += coverage_weight * ~a_smaller

        # context = a @ states
        da += states @ dctx
        d_states += np.outer(st.a, dctx)
        # softmax over boosted scores
        de = st.a * (da - st.a @ da)
        draw = boost * de
        g.att_v += st.tt.T @ draw
        dpre = np.outer(draw, v) * (1.0 - st.tt * st.tt)
        d_feat += dpre
        dsum = dpre.sum(axis=0)
        g.att_Ws += np.outer(dsum, st.h)
        g.att_b += dsum
        g.att_wcov += dpre.T @ st.cov
        dcov += dpre @ wcov
        dh += Ws.T @ dsum

        dx_cell, dh_next, dc_next = recurrent_step_backward(params.dec_W, st.cell, dh, dc_next, g.dec_W, g.dec_b)
        dx += dx_cell
        g.embedding[st.in_row] += dx
        dcov_future = dcov

    g.att_Wh += d_feat.T @ states
    d_states += d_feat @ params.att_Wh

    # encoder BPTT; decoder starts from the final encoder state
    dh = dh_next
    dc = dc_next
    rows = np.where(src < V, src, UNK_ID)
    for i in range(n - 1, -1, -1):
        dh = dh + d_states[i]
        dx, dh, dc = recurrent_step_backward(params.enc_W, enc.caches[i], dh, dc, g.enc_W, g.enc_b)
        g.embedding[rows[i]] += dx
    return g


def _nll_pass(params, ex, coverage_weight, teacher_forcing=True, boost=None):
    sp = sequence_pass(params, ex.source_ids, ex.extended_size, targets=ex.target_ids,
                       teacher_forcing=teacher_forcing, boost=boost)
    grads = sequence_backward(params, sp, 1.0, coverage_weight)
    if sp.floored:
        log.debug("log-floor hit while scoring a target")
    return sp, grads


def nll_loss(params: ModelParams, ex: EncodedExample, coverage_weight: float = 1.0,
             teacher_forcing: bool = True, boost=None):
    """Return ``(loss, grads, floored)`` for ``-sum log p(y*_t) + cov_w * coverage``."""
    sp, grads = _nll_pass(params, ex, coverage_weight, teacher_forcing, boost)
    return sp.nll + coverage_weight * sp.coverage_loss, grads, sp.floored


def nll_value(params: ModelParams, ex: EncodedExample, coverage_weight: float = 1.0) -> float:
    sp = sequence_pass(params, ex.source_ids, ex.extended_size, targets=ex.target_ids)
    return sp.nll + coverage_weight * sp.coverage_loss


@dataclass
class Rollout:
    tokens: list[int]
    step_log_probs: np.ndarray
    mode: str
    seq: SequencePass | None = field(default=None, repr=False)

    @property
    def log_prob(self) -> float:
        return float(self.step_log_probs.sum())


def scst_rollout(params: ModelParams, ex: EncodedExample, rng: np.random.Generator,
                 max_len: int = 100, forbidden: Sequence[int] = ()) -> tuple[Rollout, Rollout]:
    """Sampled rollout (seeded draws) and greedy baseline for the same article."""
    s = sequence_pass(params, ex.source_ids, ex.extended_size, mode="sample", rng=rng,
                      max_len=max_len, forbidden=forbidden)
    g = sequence_pass(params, ex.source_ids, ex.extended_size, mode="greedy",
                      max_len=max_len, forbidden=forbidden)
    return Rollout(s.tokens, s.log_probs, "sampled", s), Rollout(g.tokens, g.log_probs, "greedy", g)


def rl_loss(reward_fn: Callable[[list[int]], float], sampled: Rollout, greedy: Rollout,
            article_id=None) -> tuple[float, float, float, float]:
    """Self-critical loss ``(r(greedy) - r(sampled)) * sum_t log p(sampled_t)``.

    Returns ``(loss, scale, r_sampled, r_greedy)`` where ``scale`` is the
    constant reward difference multiplying the sampled log-likelihood.
    """
    try:
        r_s = float(reward_fn(sampled.tokens))
        r_b = float(reward_fn(greedy.tokens))
    except Exception as exc:
        raise RuntimeError(f"reward function failed on article {article_id}: {exc}") from exc
    scale = r_b - r_s
    return scale * sampled.log_prob, scale, r_s, r_b


def rl_gradient(params: ModelParams, sampled: Rollout, scale: float) -> ModelParams:
    # d/dθ [scale * sum log p] == gradient of sum_t (-scale) * (-log p_t)
    return sequence_backward(params, sampled.seq, -scale, 0.0)


def combined_loss(nll: float, rl: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * nll + alpha * rl


@dataclass
class AdagradState:
    accumulators: np.ndarray
    learning_rate: float = 0.15
    initial_accumulator: float = 0.1

    @classmethod
    def create(cls, size: int, learning_rate: float = 0.15, initial_accumulator: float = 0.1) -> "AdagradState":
        if initial_accumulator <= 0:
            raise ValueError("initial accumulator must be positive")
        return cls(np.full(size, initial_accumulator), learning_rate, initial_accumulator)


def clip_gradient(grads: ModelParams, max_norm: float | None) -> float:
    """Rescale ``grads`` in place so its L2 norm is at most ``max_norm``; return the original norm."""
    norm = float(np.linalg.norm(grads.flat))
    if max_norm is not None and norm > max_norm:
        grads.flat *= max_norm / norm
    return norm


def adagrad_step(params: ModelParams, grads, state: AdagradState) -> None:
    """In-place update: ``acc += g**2; theta -= lr * g / sqrt(acc)``."""
    g = grads.flat if isinstance(grads, ModelParams) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {params.flat.shape}")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise FloatingPointError(f"non-finite gradient at {bad.size} coordinates (first {int(bad[0])}); step rejected")
    state.accumulators += g * g
    params.flat -= state.learning_rate * g / np.sqrt(state.accumulators)


@dataclass
class TrainConfig:
    alpha: float = 0.9
    learning_rate: float = 0.15
    initial_accumulator: float = 0.1
    iterations: int = 2000           # teacher-forced (alpha = 0) phase
    scst_iterations: int = 0         # fine-tuning phase at ``alpha``
    seed: int = 0
    coverage_weight: float = 1.0
    teacher_forcing: bool = True
    max_decode_len: int = 100
    checkpoint_every: int = 500
    target_nll: float | None = None  # stop the first phase once the trailing mean per-token NLL is below this
    nll_window: int = 500
    max_grad_norm: float | None = 2.0  # global gradient-norm clip before each update

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.iterations < 0 or self.scst_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")


@dataclass
class CurveRecord:
    iteration: int
    nll: float
    rl: float
    combined: float
    mean_reward: float
    per_token_nll: float


@dataclass
class TrainResult:
    params: ModelParams
    state: AdagradState
    curve: list[CurveRecord]
    checkpoints: dict[int, ModelParams]
    stopped_at: int


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: ModelParams, iteration: int):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


def _epoch_order(rng, n):
    while True:
        yield from rng.permutation(n)


def train(examples: Sequence[EncodedExample], config: TrainConfig, params: ModelParams,
          reward_fn: Callable[[list[int], EncodedExample], float] | None = None,
          state: AdagradState | None = None, forbidden: Sequence[int] = (),
          checkpoint_path=None) -> TrainResult:
    """Teacher-forced phase, then optional self-critical phase at ``config.alpha``.

    ``reward_fn(ids, example)`` scores a rollout; it is never called when
    ``alpha == 0``.  ``params`` is copied, never mutated.  ``state`` continues an existing
    Adagrad accumulator (used when fine-tuning a pre-trained checkpoint).
    """
    if not examples:
        raise ValueError("empty training corpus")
    params = params.copy()
    if state is None:
        state = AdagradState.create(params.dims.size, config.learning_rate, config.initial_accumulator)
    curve: list[CurveRecord] = []
    checkpoints = {0: params.copy()}
    last_good = params.copy()
    order = _epoch_order(substream(config.seed, "order"), len(examples))
    sampler = substream(config.seed, "sampling")
    window: list[float] = []
    it = 0

    def diverged(message: str, iteration: int, cause=None):
        if checkpoint_path is not None:
            save_checkpoint(last_good, checkpoint_path)
        raise TrainingDiverged(message, last_good, iteration) from cause

    def record(rec: CurveRecord):
        nonlocal last_good
        if not math.isfinite(rec.combined):
            diverged(f"loss became non-finite at iteration {rec.iteration}", rec.iteration)
        curve.append(rec)
        if rec.iteration % config.checkpoint_every == 0:
            last_good = params.copy()
            checkpoints[rec.iteration] = last_good

    for _ in range(config.iterations):
        ex = examples[next(order)]
        sp, grads = _nll_pass(params, ex, config.coverage_weight, config.teacher_forcing)
        it += 1
        clip_gradient(grads, config.max_grad_norm)
        try:
            adagrad_step(params, grads, state)
        except FloatingPointError as exc:
            diverged(str(exc), it, exc)
        record(CurveRecord(it, sp.nll, 0.0, sp.nll + config.coverage_weight * sp.coverage_loss, 0.0,
                           sp.nll / len(ex.target_ids)))
        if config.target_nll is not None:
            window.append(curve[-1].per_token_nll)
            if len(window) > config.nll_window:
                window.pop(0)
            if len(window) == config.nll_window and sum(window) / len(window) < config.target_nll:
                break

    alpha = config.alpha
    if config.scst_iterations and alpha > 0.0 and reward_fn is None:
        raise ValueError("the self-critical phase needs a reward function")
    for _ in range(config.scst_iterations if alpha > 0.0 else 0):
        ex = examples[next(order)]
        it += 1
        grads = params.zeros_like()
        nll = 0.0
        if alpha < 1.0:
            sp, g_nll = _nll_pass(params, ex, config.coverage_weight, config.teacher_forcing)
            nll = sp.nll + config.coverage_weight * sp.coverage_loss
            grads.flat += (1.0 - alpha) * g_nll.flat
        sampled, greedy = scst_rollout(params, ex, sampler, config.max_decode_len, forbidden)
        rl, scale, r_s, r_b = rl_loss(lambda ids: reward_fn(ids, ex), sampled, greedy, article_id=it)
        if scale != 0.0:
            grads.flat += alpha * rl_gradient(params, sampled, scale).flat
        clip_gradient(grads, config.max_grad_norm)
        try:
            adagrad_step(params, grads, state)
        except FloatingPointError as exc:
            diverged(str(exc), it, exc)
        per_tok = sp.nll / len(ex.target_ids) if alpha < 1.0 else float("nan")
        record(CurveRecord(it, nll, rl, combined_loss(nll, rl, alpha), 0.5 * (r_s + r_b), per_tok))

    checkpoints[it] = params.copy()
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return TrainResult(params, state, curve, checkpoints, it)


def write_loss_curve(curve: Sequence[CurveRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("iteration\tnll\trl\tcombined\tmean_reward\n")
        for r in curve:
            fh.write(f"{r.iteration}\t{r.nll:.10g}\t{r.rl:.10g}\t{r.combined:.10g}\t{r.mean_reward:.10g}\n")


def mean_token_nll(params: ModelParams, examples: Sequence[EncodedExample]) -> float:
    """Corpus per-token NLL without the coverage penalty."""
    total = tokens = 0.0
    for ex in examples:
        sp = sequence_pass(params, ex.source_ids, ex.extended_size, targets=ex.target_ids)
        total += sp.nll
        tokens += len(ex.target_ids)
    return total / tokens
