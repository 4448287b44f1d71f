"""Reference ensembles used for comparison rows in evaluation reports."""
from __future__ import annotations

import numpy as np

from . import numkern as nk
from .ensemble import BetaParams, weighted_ensemble

L_ENSEMBLE_LRS = (1e-3, 1e-2, 1e-1)


def d_ensemble(predictions) -> np.ndarray:
    """Plain average of the models' probabilities."""
    return weighted_ensemble(predictions, BetaParams.uniform(len(predictions)))


def _fit_weights(stack, y, idx, lr, max_steps, tol):
    logits = np.zeros(stack.shape[0])
    state = nk.AdamState(lr=lr)
    prev = np.inf
    loss = np.inf
    for _ in range(max_steps):
        w = BetaParams(logits).weights
        mix = np.tensordot(w, stack, axes=1)
        loss, g = nk.cross_entropy_prob_grad(mix, y, idx)
        dw = np.array([np.sum(g * p) for p in stack])
        nk.adam_step({"b": logits}, {"b": w * (dw - w @ dw)}, state)
        if abs(prev - loss) < tol:
            break
        prev = loss
    return logits, loss


def learn_ensemble_weights(predictions, labels, val_idx, n_classes: int, *,
                           lrs=L_ENSEMBLE_LRS, max_steps: int = 500, tol: float = 1e-8) -> BetaParams:
    """Fit softmax ensemble weights on the validation nodes with frozen models.

    Adam without weight decay; the learning rate with the lowest final
    validation loss wins (ties to the smaller rate).
    """
    stack = np.stack(predictions)
    y = nk.one_hot(np.where(np.isin(np.arange(labels.shape[0]), val_idx), labels, -1), n_classes)
    best = None
    for lr in sorted(lrs):
        logits, loss = _fit_weights(stack, y, val_idx, lr, max_steps, tol)
        if best is None or loss < best[1]:
            best = (logits, loss)
    return BetaParams(best[0])


def l_ensemble(predictions, labels, val_idx, n_classes: int) -> np.ndarray:
    beta = learn_ensemble_weights(predictions, labels, val_idx, n_classes)
    return weighted_ensemble(predictions, beta)
