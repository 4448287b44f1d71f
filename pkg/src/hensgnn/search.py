"""Searching the hierarchical-ensemble configuration.

Two strategies are provided:

* :func:`gradient_search` trains all N x K submodels jointly with relaxed
  layer weights and a shared cross-family weight vector, alternating a model
  step on the training loss with an architecture step on the validation loss.
* :func:`adaptive_search` grid-searches each member's depth independently and
  sets the cross-family weights from validation accuracy.

Both return a :class:`SearchResult` that :func:`retrain_final` turns into the
final ensemble.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkern as nk
from .ensemble import AdaptiveConfig, AlphaParams, BetaParams, GseConfig, adaptive_beta, gse_predict, weighted_ensemble
from .graphio import GraphDataset, SplitSpec
from .models import (
    LR_GRID,
    HyperParams,
    ModelFamily,
    TrainedModel,
    TrainingDivergence,
    decayed_lr,
    graph_ops,
    init_params,
    masked_onehot,
    network_backward,
    network_forward,
    train_model,
)
from .proxy import PoolSelection, parallel_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientSearchConfig:
    arch_lr: float = 3e-4
    interval: int = 1
    patience: int = 5
    width_ratio: float = 0.5
    max_epochs: int = 200
    # model-weight learning rates tried; the run with the best validation
    # accuracy wins.  Empty means each family keeps its proxy-stage rate.
    learning_rates: tuple = LR_GRID

    def __post_init__(self):
        if self.interval < 1 or self.patience < 0:
            raise nk.ConfigError("interval must be >= 1 and patience >= 0")
        object.__setattr__(self, "learning_rates", tuple(float(x) for x in self.learning_rates))
        if any(x <= 0 for x in self.learning_rates):
            raise nk.ConfigError("learning rates must be positive")


@dataclass
class MemberResult:
    family: ModelFamily
    member: int
    seed: int
    n_layers: int
    val_acc: float = float("nan")
    alpha_logits: list | None = None


@dataclass
class SearchResult:
    variant: str
    tags: list
    families: list
    hps: list
    members: list
    beta: BetaParams
    trace: list = field(default_factory=list)
    seconds: float = 0.0
    runs: int = 0
    family_val_acc: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.families)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "tags": list(self.tags),
            "families": [f.value for f in self.families],
            "hps": [h.__dict__ for h in self.hps],
            "members": [[{**m.__dict__, "family": m.family.value} for m in ms] for ms in self.members],
            "beta_logits": self.beta.logits.tolist(),
            "trace": list(self.trace),
            "seconds": self.seconds,
            "runs": self.runs,
            "family_val_acc": list(self.family_val_acc),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResult":
        return cls(
            variant=d["variant"],
            tags=d["tags"],
            families=[ModelFamily(f) for f in d["families"]],
            hps=[HyperParams(**h) for h in d["hps"]],
            members=[[MemberResult(**{**m, "family": ModelFamily(m["family"])}) for m in ms] for ms in d["members"]],
            beta=BetaParams(np.array(d["beta_logits"])),
            trace=d["trace"],
            seconds=d["seconds"],
            runs=d["runs"],
            family_val_acc=d.get("family_val_acc", []),
        )

    def report(self) -> str:
        lines = [f"variant\t{self.variant}", "family\tmember\tseed\tlayers\tval_accuracy"]
        for tag, ms in zip(self.tags, self.members):
            for m in ms:
                lines.append(f"{tag}\t{m.member}\t{m.seed}\t{m.n_layers}\t{m.val_acc:.4f}")
        lines.append("beta\t" + "\t".join(f"{b:.6f}" for b in self.beta.weights))
        lines.append(f"search_seconds\t{self.seconds:.3f}")
        return "\n".join(lines) + "\n"


def derive_layers(alpha) -> int:
    """1-based index of the largest layer weight; ties go to fewer layers."""
    logits = alpha.logits if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=np.float64)
    return int(np.argmax(logits)) + 1


def _pool_entries(pool: PoolSelection):
    if not pool.selected:
        raise ValueError("search: empty pool")
    tags = [s.tag for s in pool.selected]
    fams = [s.family for s in pool.selected]
    hps = [s.hp or HyperParams() for s in pool.selected]
    return tags, fams, hps


def _scaled(hp: HyperParams, ratio: float) -> HyperParams:
    return replace(hp, hidden_size=max(1, int(round(hp.hidden_size * ratio))))


# ---------------------------------------------------------------------------
# gradient search


@dataclass(eq=False)
class _Member:
    family: ModelFamily
    seed: int
    hp: HyperParams
    params: dict
    alpha: np.ndarray
    state: nk.AdamState
    rng: nk.Rng


class JointEnsemble:
    """All N x K relaxed submodels plus the shared beta logits.

    ``model_step`` touches only model weights; ``arch_step`` touches only the
    alpha and beta logits.
    """

    def __init__(self, members: list, k: int, n_layers: int, lr_scale: float = 1.0):
        self.members = members
        self.k = k
        self.n_layers = n_layers
        self.n = len(members) // k
        self.beta = np.zeros(self.n)
        self.lr_scale = lr_scale
        self.arch_state = None

    @classmethod
    def build(cls, fams, hps, seeds, in_dim, n_classes, k, n_layers, width_ratio, lr_scale=1.0):
        members = []
        for fam, hp, fam_seeds in zip(fams, hps, seeds):
            hp_s = _scaled(hp, width_ratio)
            for s in fam_seeds:
                params = init_params(fam, in_dim, hp_s.hidden_size, n_classes, n_layers, nk.Rng(s, "init"))
                members.append(_Member(
                    family=fam, seed=s, hp=hp_s, params=params, alpha=np.zeros(n_layers),
                    state=nk.AdamState(lr=hp.learning_rate * lr_scale, weight_decay=hp.weight_decay),
                    rng=nk.Rng(s, "dropout"),
                ))
        return cls(members, k, n_layers, lr_scale)

    def arch_params(self) -> dict:
        d = {"beta": self.beta}
        d.update({f"alpha{i}": m.alpha for i, m in enumerate(self.members)})
        return d

    def forward(self, ops, training: bool):
        probs, caches = [], []
        for m in self.members:
            aw = AlphaParams(m.alpha).weights
            p, c = network_forward(m.family, m.params, self.n_layers, ops, aw, m.hp.dropout, m.rng, training)
            probs.append(p)
            caches.append(c)
        gse = [gse_predict(probs[j * self.k:(j + 1) * self.k]) for j in range(self.n)]
        y = weighted_ensemble(gse, BetaParams(self.beta))
        return y, probs, caches, gse

    def loss_grads(self, ops, y_onehot, idx, training: bool):
        """Loss on ``idx`` and its gradients w.r.t. every member's scores,
        alpha weights and beta logits (model-weight grads are not formed)."""
        y, probs, caches, gse = self.forward(ops, training)
        loss, g = nk.cross_entropy_prob_grad(y, y_onehot, idx)
        bw = BetaParams(self.beta).weights
        d_scores = []
        for i, (p, m) in enumerate(zip(probs, self.members)):
            d_scores.append(nk.softmax_backward(p, g * (bw[i // self.k] / self.k)))
        d_bw = np.array([np.sum(g * yj) for yj in gse])
        d_beta = bw * (d_bw - bw @ d_bw)
        return loss, y, caches, d_scores, d_beta

    def model_step(self, ops, y_onehot, idx, epoch: int) -> float:
        loss, _, caches, d_scores, _ = self.loss_grads(ops, y_onehot, idx, training=True)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite joint training loss at epoch {epoch}")
        for m, c, ds in zip(self.members, caches, d_scores):
            grads, _ = network_backward(m.family, m.params, self.n_layers, ops, c, ds)
            nk.adam_step(m.params, grads, m.state, lr=decayed_lr(m.state.lr, epoch))
            if not all(np.all(np.isfinite(v)) for v in m.params.values()):
                raise TrainingDivergence(f"non-finite weights at epoch {epoch}")
        return loss

    def arch_gradients(self, ops, y_onehot, idx):
        """Validation loss, predictions and grads for alpha/beta logits."""
        loss, y, caches, d_scores, d_beta = self.loss_grads(ops, y_onehot, idx, training=False)
        grads = {"beta": d_beta}
        for i, (m, c, ds) in enumerate(zip(self.members, caches, d_scores)):
            d_mixed = ds @ m.params["out.W"].T
            d_aw = np.array([np.sum(d_mixed * h) for h in c.outputs[1:]])
            aw = c.alpha
            grads[f"alpha{i}"] = aw * (d_aw - aw @ d_aw)
        return loss, y, grads

    def arch_step(self, ops, y_onehot, idx, arch_lr: float):
        loss, y, grads = self.arch_gradients(ops, y_onehot, idx)
        if self.arch_state is None:
            self.arch_state = nk.AdamState(lr=arch_lr)
        nk.adam_step(self.arch_params(), grads, self.arch_state)
        return loss, y


def _gradient_search_once(fams, hps, seeds, g, split, k, n_layers, cfg, lr_scale):
    ops = graph_ops(g)
    je = JointEnsemble.build(fams, hps, seeds, ops.x.shape[1], g.n_classes, k, n_layers, cfg.width_ratio, lr_scale)
    y_train = masked_onehot(g.labels, split.train, g.n_classes)
    y_val = masked_onehot(g.labels, split.val, g.n_classes)
    best = (-1.0, np.inf)
    best_arch = ([m.alpha.copy() for m in je.members], je.beta.copy())
    bad = 0
    trace = []
    for epoch in range(cfg.max_epochs):
        je.model_step(ops, y_train, split.train, epoch)
        if (epoch + 1) % cfg.interval == 0:
            snapshot = ([m.alpha.copy() for m in je.members], je.beta.copy())
            val_loss, y = je.arch_step(ops, y_val, split.val, cfg.arch_lr)
        else:
            snapshot = ([m.alpha.copy() for m in je.members], je.beta.copy())
            y, _, _, _ = je.forward(ops, training=False)
            val_loss, _ = nk.cross_entropy(y, y_val, split.val)
        if not np.isfinite(val_loss):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        acc = nk.accuracy(y, g.labels, split.val)
        trace.append(acc)
        if acc > best[0] or (acc == best[0] and val_loss < best[1]):
            best = (acc, val_loss)
            best_arch = snapshot
            bad = 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    return je, best_arch, trace, best[0]


def gradient_search(
    pool: PoolSelection,
    g: GraphDataset,
    split: SplitSpec,
    gse: GseConfig = GseConfig(),
    cfg: GradientSearchConfig = GradientSearchConfig(),
    seed: int = 0,
    *,
    max_layers: int | None = None,
) -> SearchResult:
    """Joint first-order bi-level search over layer weights and beta.

    Model weights follow the training loss every epoch; every
    ``cfg.interval`` epochs the alpha/beta logits take one Adam step on the
    validation loss with the weights held fixed.  The architecture snapshot
    at the best validation accuracy (patience ``cfg.patience``) is kept.
    The whole search is repeated for each model learning rate in
    ``cfg.learning_rates`` and the run with the best validation accuracy
    wins (ties to the smaller rate).
    """
    if split.val.size == 0:
        raise ValueError("gradient_search: empty validation set")
    t0 = time.perf_counter()
    tags, fams, hps = _pool_entries(pool)
    n_layers = max_layers or hps[0].max_layers
    seeds = [gse.member_seeds(nk.derive_seed(seed, "search", t)) for t in tags]
    grid = [[replace(h, learning_rate=lr) for h in hps] for lr in sorted(cfg.learning_rates)] or [hps]
    best = None
    for run_hps in grid:
        try:
            out = _gradient_search_once(fams, run_hps, seeds, g, split, gse.k, n_layers, cfg, 1.0)
        except TrainingDivergence as exc:
            log.warning("gradient search diverged (%s); restarting with halved learning rate", exc)
            try:
                out = _gradient_search_once(fams, run_hps, seeds, g, split, gse.k, n_layers, cfg, 0.5)
            except TrainingDivergence as exc2:
                log.warning("gradient search diverged again (%s); skipping this learning rate", exc2)
                continue
        if best is None or out[3] > best[3]:
            best = out
    if best is None:
        raise TrainingDivergence("gradient search diverged at every learning rate")
    je, (alphas, beta), trace, best_acc = best
    members = []
    for j, fam in enumerate(fams):
        row = []
        for k in range(gse.k):
            a = alphas[j * gse.k + k]
            row.append(MemberResult(fam, k, seeds[j][k], derive_layers(a), best_acc, a.tolist()))
        members.append(row)
    return SearchResult(
        variant="gradient", tags=tags, families=fams, hps=hps, members=members,
        beta=BetaParams(beta), trace=trace, seconds=time.perf_counter() - t0,
        runs=len(grid), family_val_acc=[],
    )


# ---------------------------------------------------------------------------
# adaptive search


@dataclass
class _DepthTask:
    family: ModelFamily
    hp: HyperParams
    g: GraphDataset
    split: SplitSpec
    seed: int
    depth: int
    deadline: float | None


def _train_depth(t: _DepthTask) -> TrainedModel:
    return train_model(t.family, t.hp, t.g, t.split, t.seed, n_layers=t.depth, deadline=t.deadline)


def assign_depths(acc: np.ndarray) -> list:
    """Greedy depth assignment from a (members x depths) accuracy table.

    Highest accuracy first; each member takes a depth no other member has
    taken while unused depths remain, then its own best depth.  Returns
    1-based depths.
    """
    k, n_depths = acc.shape
    order = sorted(((acc[m, d], -d, -m) for m in range(k) for d in range(n_depths)), reverse=True)
    chosen = [None] * k
    used = set()
    for _, nd, nm in order:
        m, d = -nm, -nd
        if chosen[m] is None and d not in used:
            chosen[m] = d
            used.add(d)
    for m in range(k):
        if chosen[m] is None:
            chosen[m] = int(np.argmax(acc[m]))
    return [c + 1 for c in chosen]


def adaptive_search(
    pool: PoolSelection,
    g: GraphDataset,
    split: SplitSpec,
    gse: GseConfig = GseConfig(),
    adaptive: AdaptiveConfig = AdaptiveConfig(),
    seed: int = 0,
    *,
    max_layers: int | None = None,
    width_ratio: float = 0.5,
    workers: int = 1,
    deadline: float | None = None,
) -> SearchResult:
    """Per-member depth search (K x L runs per family) plus accuracy-tempered beta."""
    t0 = time.perf_counter()
    tags, fams, hps = _pool_entries(pool)
    n_layers = max_layers or hps[0].max_layers
    seeds = [gse.member_seeds(nk.derive_seed(seed, "search", t)) for t in tags]
    tasks = [
        _DepthTask(fam, _scaled(hp, width_ratio), g, split, s, d, deadline)
        for fam, hp, fam_seeds in zip(fams, hps, seeds)
        for s in fam_seeds
        for d in range(1, n_layers + 1)
    ]
    models = parallel_map(_train_depth, tasks, workers)
    members, fam_acc = [], []
    per_fam = gse.k * n_layers
    for j, fam in enumerate(fams):
        block = models[j * per_fam:(j + 1) * per_fam]
        acc = np.array([[block[k * n_layers + d].best_val_acc for d in range(n_layers)] for k in range(gse.k)])
        depths = assign_depths(acc)
        picked = [block[k * n_layers + depths[k] - 1] for k in range(gse.k)]
        y = gse_predict([m.predict(g) for m in picked])
        fam_acc.append(nk.accuracy(y, g.labels, split.val))
        members.append([
            MemberResult(fam, k, seeds[j][k], depths[k], float(acc[k, depths[k] - 1]))
            for k in range(gse.k)
        ])
    beta = adaptive_beta(fam_acc, g, adaptive)
    return SearchResult(
        variant="adaptive", tags=tags, families=fams, hps=hps, members=members, beta=beta,
        trace=list(fam_acc), seconds=time.perf_counter() - t0, runs=len(tasks),
        family_val_acc=list(fam_acc),
    )


# ---------------------------------------------------------------------------
# final ensemble


@dataclass(eq=False)
class FinalEnsemble:
    tags: list
    members: list
    beta: BetaParams

    def member_predictions(self, g) -> list:
        return [[m.predict(g) for m in ms] for ms in self.members]

    def family_predictions(self, g) -> list:
        return [gse_predict(ps) for ps in self.member_predictions(g)]

    def predict(self, g) -> np.ndarray:
        return weighted_ensemble(self.family_predictions(g), self.beta)


@dataclass
class _RetrainTask:
    family: ModelFamily
    hp: HyperParams
    g: GraphDataset
    split: SplitSpec
    seed: int
    depth: int
    deadline: float | None


def _retrain(t: _RetrainTask) -> TrainedModel:
    return train_model(t.family, t.hp, t.g, t.split, t.seed, n_layers=t.depth, deadline=t.deadline)


def retrain_final(
    result: SearchResult,
    pool: PoolSelection | None,
    g: GraphDataset,
    split: SplitSpec,
    gse: GseConfig | None = None,
    seed: int = 0,
    *,
    workers: int = 1,
    deadline: float | None = None,
) -> FinalEnsemble:
    """Retrain every member from scratch at full width with its searched depth.

    The searched beta is carried over unchanged.  ``pool`` and ``gse`` are
    accepted for symmetry with the search calls; the result already records
    the families, hyperparameters and member count.
    """
    tasks = [
        _RetrainTask(m.family, hp, g, split, nk.derive_seed(seed, "final", tag, m.member), m.n_layers, deadline)
        for tag, hp, ms in zip(result.tags, result.hps, result.members)
        for m in ms
    ]
    models = parallel_map(_retrain, tasks, workers)
    out, i = [], 0
    for ms in result.members:
        out.append(models[i:i + len(ms)])
        i += len(ms)
    return FinalEnsemble(tags=list(result.tags), members=out, beta=BetaParams(result.beta.logits.copy()))


def save_search_result(result: SearchResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=1, sort_keys=True)


def load_search_result(path) -> SearchResult:
    with open(path) as fh:
        return SearchResult.from_dict(json.load(fh))
