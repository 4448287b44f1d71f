"""Cheap proxy evaluation of candidate families and pool selection."""
from __future__ import annotations

import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import multiprocessing as mp
import numpy as np

from . import numkern as nk
from .graphio import GraphDataset, ProxyConfig, random_split
from .models import Candidate, HyperParams, ModelFamily, TrainedModel, TrainingDivergence, grid_search, DROPOUT_GRID, LR_GRID

log = logging.getLogger(__name__)

HOLDOUT_FRAC = 0.2
ACCURATE_BAGS = 10


def accurate_config(bags: int = ACCURATE_BAGS) -> ProxyConfig:
    """Full data, full width: the reference the proxy ranking is judged against."""
    return ProxyConfig(d_proxy=1.0, b_proxy=bags, m_proxy=1.0)


def as_candidate(c) -> Candidate:
    if isinstance(c, Candidate):
        return c
    return Candidate(ModelFamily(c))


@dataclass(eq=False)
class ProxyScore:
    candidate: Candidate
    mean_acc: float
    rep_accs: list
    seconds: float
    hp: HyperParams | None = None
    epochs: int = 0
    model: TrainedModel | None = field(default=None, repr=False)

    @property
    def family(self) -> ModelFamily:
        return self.candidate.family

    @property
    def tag(self) -> str:
        return self.candidate.tag


@dataclass(eq=False)
class PoolSelection:
    ranking: list
    selected: list

    @property
    def families(self) -> list:
        return [s.family for s in self.selected]

    def __len__(self):
        return len(self.selected)


def parallel_map(fn, tasks, workers: int = 1):
    """Ordered map; results never depend on ``workers``."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, tasks))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("HENSGNN_WORKERS", "1")))
    except ValueError:
        return 1


def carve_holdout(g: GraphDataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the labeled nodes into (selection pool, frozen internal test set)."""
    s = random_split(g.train_indices, HOLDOUT_FRAC, seed=nk.derive_seed(seed, "holdout"), labels=g.labels)
    return s.train, s.val


@dataclass
class _RepTask:
    candidate: Candidate
    rep: int
    g: GraphDataset
    pool: np.ndarray
    holdout: np.ndarray
    proxy: ProxyConfig
    seed: int
    base_hp: HyperParams
    lrs: tuple
    dropouts: tuple
    deadline: float | None
    keep_model: bool


@dataclass
class _RepResult:
    tag: str
    rep: int
    acc: float
    seconds: float
    hp: HyperParams | None
    epochs: int
    model: TrainedModel | None


def _run_rep(task: _RepTask) -> _RepResult:
    t0 = time.perf_counter()
    c = task.candidate
    rep_seed = nk.derive_seed(task.seed, c.tag, task.rep)
    split = random_split(task.pool, 0.2, seed=rep_seed, labels=task.g.labels)
    try:
        res = grid_search(
            c.family, task.g, split, rep_seed, task.proxy,
            base_hp=task.base_hp, n_layers=c.n_layers,
            lrs=task.lrs, dropouts=task.dropouts, deadline=task.deadline,
        )
    except TrainingDivergence as exc:
        warnings.warn(f"{c.tag} repetition {task.rep} diverged, scored 0: {exc}", stacklevel=2)
        return _RepResult(c.tag, task.rep, 0.0, time.perf_counter() - t0, None, 0, None)
    probs = res.model.predict(task.g)
    acc = nk.accuracy(probs, task.g.labels, task.holdout)
    hp = replace(res.hp, hidden_size=task.base_hp.hidden_size)
    return _RepResult(
        c.tag, task.rep, acc, time.perf_counter() - t0, hp, res.epochs,
        res.model if task.keep_model else None,
    )


def proxy_evaluate(
    candidates,
    g: GraphDataset,
    proxy: ProxyConfig = ProxyConfig(),
    seed: int = 0,
    *,
    base_hp: HyperParams | None = None,
    lrs=LR_GRID,
    dropouts=DROPOUT_GRID,
    workers: int = 1,
    deadline: float | None = None,
    keep_models: bool = False,
    holdout: tuple | None = None,
) -> list:
    """Score every candidate on ``proxy.b_proxy`` bagged repetitions.

    Each repetition re-splits the selection pool, subsamples its training
    mask, grid-searches at the reduced width and is scored on one internal
    test set shared by all candidates.  Past ``deadline`` no new
    repetitions start (the very first one always runs).
    """
    cands = [as_candidate(c) for c in candidates]
    if not cands:
        raise ValueError("proxy_evaluate: no candidates")
    tags = [c.tag for c in cands]
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate candidate tags: {tags}")
    base_hp = base_hp or HyperParams()
    pool, test = holdout if holdout is not None else carve_holdout(g, seed)
    tasks = [
        _RepTask(c, r, g, pool, test, proxy, seed, base_hp, tuple(lrs), tuple(dropouts), deadline, keep_models)
        for r in range(proxy.b_proxy)
        for c in cands
    ]
    if deadline is None or workers > 1:
        results = parallel_map(_run_rep, tasks, workers)
    else:
        results = []
        for t in tasks:
            if results and time.monotonic() > deadline:
                log.warning("time budget reached after %d of %d proxy runs", len(results), len(tasks))
                break
            results.append(_run_rep(t))

    scores = []
    for c in cands:
        mine = sorted((r for r in results if r.tag == c.tag), key=lambda r: r.rep)
        accs = [r.acc for r in mine]
        best = max(mine, key=lambda r: (r.acc, -r.rep), default=None)
        scores.append(ProxyScore(
            candidate=c,
            mean_acc=float(np.mean(accs)) if accs else 0.0,
            rep_accs=accs,
            seconds=float(sum(r.seconds for r in mine)),
            hp=best.hp if best is not None else None,
            epochs=int(sum(r.epochs for r in mine)),
            model=best.model if best is not None else None,
        ))
    return scores


def kendall_tau(rank_a, rank_b) -> float:
    """Kendall tau-a: (concordant - discordant) / (n(n-1)/2); tied pairs count 0."""
    a = np.asarray(rank_a, dtype=np.float64)
    b = np.asarray(rank_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("kendall_tau: inputs must be 1-d and the same length")
    n = a.size
    if n < 2:
        raise ValueError("kendall_tau: need at least 2 items")
    i, j = np.triu_indices(n, k=1)
    s = np.sign(a[i] - a[j]) * np.sign(b[i] - b[j])
    return float(s.sum() / (n * (n - 1) / 2))


def select_pool(scores, n: int = 3, tie_break: str = "seconds") -> PoolSelection:
    """Rank by mean accuracy and keep the top ``n``.

    Ties go to the cheaper candidate (wall-clock ``seconds``, or training
    ``epochs`` with ``tie_break="work"``, which is reproducible), then to
    the lexically smaller tag.
    """
    if n < 1:
        raise ValueError("select_pool: n must be >= 1")
    if tie_break not in ("seconds", "work"):
        raise ValueError(f"unknown tie_break {tie_break!r}")

    def key(s):
        cost = s.seconds if tie_break == "seconds" else s.epochs
        return (-s.mean_acc, cost, s.tag)

    ranking = sorted(scores, key=key)
    return PoolSelection(ranking=ranking, selected=ranking[:n])


def ranking_report(scores) -> str:
    lines = ["family\tmean_accuracy\trepetition_accuracies\tseconds"]
    for s in scores:
        reps = ",".join(f"{a:.4f}" for a in s.rep_accs)
        lines.append(f"{s.tag}\t{s.mean_acc:.4f}\t{reps}\t{s.seconds:.3f}")
    return "\n".join(lines) + "\n"
