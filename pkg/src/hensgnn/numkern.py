"""Small deterministic numerical kernel.

Dense matrices are plain ``float64`` numpy arrays and sparse matrices are
canonical CSR matrices from :mod:`scipy.sparse`.  Everything that needs
gradients (softmax, cross-entropy, ReLU, dropout) has a hand-written backward
here; the layer code in :mod:`hensgnn.models` composes them.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random numbers


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed: int, *keys) -> int:
    """Map ``(seed, *keys)`` to a 63-bit seed.  Keys may be ints or strings."""
    ss = np.random.SeedSequence([_key_int(seed)] + [_key_int(k) for k in keys])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


class Rng:
    """Counter-based generator (Philox) keyed by a seed and a stream path.

    ``Rng(7, "proxy", 3)`` and ``Rng(7).child("proxy", 3)`` give the same
    stream, so parallel workers can build their own generator from a task id.
    """

    def __init__(self, seed: int, *stream):
        self.seed = int(seed)
        self.stream = tuple(stream)
        ss = np.random.SeedSequence([_key_int(seed)] + [_key_int(k) for k in stream])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *stream) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)


# ---------------------------------------------------------------------------
# sparse / dense products


def as_csr(a) -> sp.csr_matrix:
    """Canonical CSR: float64, duplicates summed, column indices sorted."""
    m = sp.csr_matrix(a, dtype=np.float64)
    m.sum_duplicates()
    m.sort_indices()
    return m


def spmm(a: sp.csr_matrix, h: np.ndarray) -> np.ndarray:
    if a.shape[1] != h.shape[0]:
        raise ShapeError(f"spmm: {a.shape} x {h.shape}")
    return np.asarray(a @ h)


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: {x.shape} x {w.shape}")
    return x @ w


# ---------------------------------------------------------------------------
# activations and losses


def softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the scores of ``p = softmax(scores)`` (row-wise)."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return grad * np.where(x > 0, 1.0, slope)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes))
    ok = labels >= 0
    out[np.flatnonzero(ok), labels[ok]] = 1.0
    return out


def _check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("cross_entropy: empty mask")
    return mask


def cross_entropy(pred: np.ndarray, labels: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class over ``mask`` rows.

    ``pred`` is assumed to be ``softmax(scores)``; the returned gradient is
    with respect to those scores, zero outside the mask.
    """
    mask = _check_mask(mask)
    p = np.maximum((pred[mask] * labels[mask]).sum(axis=1), PROB_FLOOR)
    loss = float(-np.log(p).mean())
    grad = np.zeros_like(pred)
    grad[mask] = (pred[mask] - labels[mask]) / mask.size
    return loss, grad


def cross_entropy_prob_grad(pred: np.ndarray, labels: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Same loss as :func:`cross_entropy`, gradient w.r.t. the probabilities.

    Needed when ``pred`` is a mixture of softmax outputs (the ensembles).
    """
    mask = _check_mask(mask)
    p = np.maximum((pred[mask] * labels[mask]).sum(axis=1), PROB_FLOOR)
    loss = float(-np.log(p).mean())
    grad = np.zeros_like(pred)
    grad[mask] = -labels[mask] / (p[:, None] * mask.size)
    return loss, grad


def accuracy(pred: np.ndarray, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return 0.0
    return float((pred[idx].argmax(axis=1) == np.asarray(labels)[idx]).mean())


# ---------------------------------------------------------------------------
# dropout


def dropout_mask(shape, rate: float, rng: Rng) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped entries, 1/(1-rate) otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(m: np.ndarray, rate: float, rng: Rng | None, training: bool) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return m
    return m * dropout_mask(m.shape, rate, rng)


# ---------------------------------------------------------------------------
# init and optimizer


def glorot(shape, rng: Rng) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AdamState:
    """Adam moments for a dict of named parameters.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` happens before
    the moment-based update and never enters the moments.
    """

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> dict:
    """Update ``params`` in place (only keys present in ``grads``) and return it."""
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"adam: {name} param {p.shape} vs grad {g.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"adam: {name} moment {m.shape} vs param {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
