"""Dense kernels, the LSTM cell, and the finite-difference gradient oracle.

Everything here works on float64 numpy arrays.  Backward functions are
hand-derived and paired with a ``*_cached`` forward that keeps exactly what
the backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import zlib
from typing import Callable

import numpy as np


def softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score vector")
    z = np.exp(scores - scores.max())
    return z / z.sum()


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def scalar_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    ex = np.exp(x)
    return ex / (1.0 + ex)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named consumer so adding one never shifts another."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.1) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def _check_len(name: str, vec: np.ndarray, expected: int) -> None:
    if vec.ndim != 1 or vec.shape[0] != expected:
        raise ValueError(f"{name} has shape {vec.shape}, expected ({expected},)")


def recurrent_step(weights: np.ndarray, bias: np.ndarray, x, h_prev, c_prev):
    """One LSTM step with gates stacked as (input, forget, candidate, output).

    ``weights`` has shape (4H, D + H) and multiplies ``[x; h_prev]``.
    Returns ``(h, c)``.
    """
    h, c, _ = recurrent_step_cached(weights, bias, x, h_prev, c_prev)
    return h, c


def recurrent_step_cached(weights, bias, x, h_prev, c_prev):
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] % 4:
        raise ValueError(f"cell weights have shape {weights.shape}, expected (4H, D+H)")
    hidden = weights.shape[0] // 4
    _check_len("cell bias", bias, 4 * hidden)
    _check_len("prev_hidden", h_prev, hidden)
    _check_len("prev_cell", c_prev, hidden)
    _check_len("input", x, weights.shape[1] - hidden)

    xh = np.concatenate((x, h_prev))
    z = weights @ xh + bias
    i = sigmoid(z[:hidden])
    f = sigmoid(z[hidden:2 * hidden])
    g = np.tanh(z[2 * hidden:3 * hidden])
    o = sigmoid(z[3 * hidden:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, c_prev, i, f, g, o, tc)


def recurrent_step_backward(weights, cache, dh, dc, dweights, dbias):
    """Accumulate into ``dweights``/``dbias``; return ``(dx, dh_prev, dc_prev)``."""
    xh, c_prev, i, f, g, o, tc = cache
    hidden = i.shape[0]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate((
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        do * o * (1.0 - o),
    ))
    dweights += np.outer(dz, xh)
    dbias += dz
    dxh = weights.T @ dz
    n_in = xh.shape[0] - hidden
    return dxh[:n_in], dxh[n_in:], dc * f


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float], params, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    theta = np.array(params, dtype=np.float64)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        orig = theta[k]
        theta[k] = orig + epsilon
        up = float(loss_fn(theta))
        theta[k] = orig - epsilon
        down = float(loss_fn(theta))
        theta[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss while probing coordinate {k}")
        grad[k] = (up - down) / (2.0 * epsilon)
    return grad


@dataclass
class GradCheckReport:
    passed: bool
    max_error: float
    tol: float
    count: int
    worst: list[tuple[int, float, float, float]] = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} max_rel_error={self.max_error:.3e} tol={self.tol:.1e} n={self.count}"]
        for idx, a, n, err in self.worst:
            lines.append(f"  [{idx}] analytic={a:.10e} numeric={n:.10e} rel={err:.3e}")
        return "\n".join(lines)


def relative_errors(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def check_gradients(analytic, numeric, tol: float, n_worst: int = 5) -> GradCheckReport:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"length mismatch: analytic {a.shape} vs numeric {n.shape}")
    err = relative_errors(a, n)
    max_err = float(err.max()) if err.size else 0.0
    order = np.argsort(-err, kind="stable")[:n_worst]
    worst = [(int(k), float(a[k]), float(n[k]), float(err[k])) for k in order if err[k] > 0]
    return GradCheckReport(passed=bool(max_err <= tol), max_error=max_err, tol=tol,
                           count=int(a.size), worst=worst)
