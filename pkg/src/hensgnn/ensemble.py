"""Hierarchical ensemble: self-ensembles within a family, a weighted
combination across families, accuracy-tempered weights and split bagging.

All inputs and outputs are row-stochastic ``n x C`` probability matrices;
ensembles average probabilities, never logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkern import ShapeError, derive_seed, softmax_rows


def _softmax_vec(v: np.ndarray) -> np.ndarray:
    return softmax_rows(np.asarray(v, dtype=np.float64)[None, :])[0]


@dataclass(eq=False)
class AlphaParams:
    """Layer-selection logits of one submodel; ``weights`` is their softmax."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return _softmax_vec(self.logits)

    @classmethod
    def uniform(cls, n_layers: int) -> "AlphaParams":
        return cls(np.zeros(n_layers))


@dataclass(eq=False)
class BetaParams:
    """Cross-family ensemble logits; ``weights`` is their softmax."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return _softmax_vec(self.logits)

    @classmethod
    def uniform(cls, n: int) -> "BetaParams":
        return cls(np.zeros(n))


@dataclass(frozen=True)
class AdaptiveConfig:
    epsilon: float = 3.0
    gamma: float = 8000.0
    lam: float = 5.0

    def __post_init__(self):
        if self.gamma <= 0 or self.lam < 0:
            raise ValueError("AdaptiveConfig needs gamma > 0 and lam >= 0")


@dataclass(frozen=True)
class GseConfig:
    k: int = 3
    seeds: tuple = ()

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("GSE needs k >= 1")
        if self.seeds and (len(self.seeds) != self.k or len(set(self.seeds)) != self.k):
            raise ValueError("GSE seeds must be k pairwise distinct values")

    def member_seeds(self, base_seed: int) -> tuple:
        if self.seeds:
            return tuple(self.seeds)
        return tuple(derive_seed(base_seed, "member", k) for k in range(self.k))


def _stack(preds, what: str) -> np.ndarray:
    preds = list(preds)
    if not preds:
        raise ValueError(f"{what}: no member predictions")
    shape = preds[0].shape
    for p in preds:
        if p.shape != shape:
            raise ShapeError(f"{what}: member shapes differ ({p.shape} vs {shape})")
    return np.stack(preds)


def gse_predict(member_predictions) -> np.ndarray:
    """Unweighted mean of the K member predictions of one family."""
    return _stack(member_predictions, "gse_predict").mean(axis=0)


def weighted_ensemble(gse_predictions, beta) -> np.ndarray:
    """sum_j beta_j Y_j.  ``beta`` is BetaParams or simplex weights."""
    stack = _stack(gse_predictions, "weighted_ensemble")
    w = beta.weights if isinstance(beta, BetaParams) else np.asarray(beta, dtype=np.float64)
    if w.shape != (stack.shape[0],):
        raise ShapeError(f"weighted_ensemble: {w.shape[0]} weights for {stack.shape[0]} members")
    return np.tensordot(w, stack, axes=1)


def bagging_predict(bag_predictions) -> np.ndarray:
    """Unweighted mean over bags; take ``argmax(axis=1)`` for the class."""
    return _stack(bag_predictions, "bagging_predict").mean(axis=0)


def annealing_temperature(n_edges: int, n_nodes: int, cfg: AdaptiveConfig = AdaptiveConfig()) -> float:
    density = math.log(n_edges / max(n_nodes, 1) + 1.0)
    return 1.0 + (1.0 + min(cfg.epsilon, 1.0 + density)) ** cfg.lam / cfg.gamma


def adaptive_beta(accuracies, g=None, cfg: AdaptiveConfig = AdaptiveConfig(), *, n_edges=None, n_nodes=None) -> BetaParams:
    """beta = softmax(acc / tau) with a density-dependent temperature tau >= 1.

    ``g`` supplies the edge-record and node counts; they can also be passed
    directly.  Accuracies are used as raw fractions in [0, 1].
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.ndim != 1 or acc.size < 1:
        raise ValueError("adaptive_beta: need a non-empty accuracy vector")
    if np.any((acc < 0) | (acc > 1)):
        raise ValueError("adaptive_beta: accuracies must lie in [0, 1]")
    if g is not None:
        n_edges, n_nodes = g.n_edges, g.n_nodes
    tau = annealing_temperature(n_edges, n_nodes, cfg)
    return BetaParams(acc / tau)
