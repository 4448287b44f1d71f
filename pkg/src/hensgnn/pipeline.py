"""End-to-end orchestration: selection, search, retraining and bagging under
a wall-clock budget, with per-stage checkpoints."""
from __future__ import annotations

import json
import logging
import resource
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numkern as nk
from .baselines import d_ensemble, l_ensemble
from .ensemble import AdaptiveConfig, GseConfig, bagging_predict
from .graphio import GraphDataset, ProxyConfig, load_dataset, load_dataset_dir, random_split
from .models import (
    DROPOUT_GRID,
    LR_GRID,
    BudgetExceeded,
    Candidate,
    HyperParams,
    ModelFamily,
    TrainedModel,
    train_model,
)
from .proxy import PoolSelection, ProxyScore, default_workers, proxy_evaluate, ranking_report, select_pool
from .search import (
    GradientSearchConfig,
    SearchResult,
    adaptive_search,
    gradient_search,
    load_search_result,
    retrain_final,
    save_search_result,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DEGRADED = 2
BUDGET_RESERVE = 0.10
VARIANTS = ("adaptive", "gradient")


@dataclass
class PipelineConfig:
    """Every knob of a run.  Nested sections map to the sub-configs."""

    dataset_dir: str | None = None
    node_file: str | None = None
    train_nodes: str | None = None
    test_nodes: str | None = None
    edge_file: str | None = None
    feature_file: str | None = None
    label_file: str | None = None
    metadata_file: str | None = None
    output: str = "predictions.tsv"
    workdir: str | None = None
    variant: str = "adaptive"
    n_pool: int = 3
    k: int = 3
    max_layers: int = 4
    n_bags: int = 2
    candidates: list = field(default_factory=lambda: [f.value for f in ModelFamily])
    hidden_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    learning_rates: list = field(default_factory=lambda: list(LR_GRID))
    dropouts: list = field(default_factory=lambda: list(DROPOUT_GRID))
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    gradient: GradientSearchConfig = field(default_factory=GradientSearchConfig)
    seed: int = 0
    workers: int = field(default_factory=default_workers)
    time_budget: float | None = None
    compare: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise nk.ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("n_pool", "k", "max_layers", "n_bags", "hidden_size", "workers"):
            if getattr(self, name) < 1:
                raise nk.ConfigError(f"{name} must be >= 1")
        if isinstance(self.proxy, dict):
            self.proxy = ProxyConfig(**self.proxy)
        if isinstance(self.adaptive, dict):
            self.adaptive = AdaptiveConfig(**self.adaptive)
        if isinstance(self.gradient, dict):
            self.gradient = GradientSearchConfig(**self.gradient)

    @classmethod
    def from_mapping(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise nk.ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_mapping(self) -> dict:
        d = asdict(self)
        return d

    @property
    def base_hp(self) -> HyperParams:
        return HyperParams(hidden_size=self.hidden_size, max_layers=self.max_layers,
                           max_epochs=self.max_epochs, patience=self.patience)

    def load(self) -> GraphDataset:
        if self.dataset_dir:
            return load_dataset_dir(self.dataset_dir)
        return load_dataset(
            node_file=self.node_file, edge_file=self.edge_file, feature_file=self.feature_file,
            label_file=self.label_file, metadata_file=self.metadata_file,
            train_nodes_file=self.train_nodes, test_nodes_file=self.test_nodes,
        )


def load_config(path) -> dict:
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise nk.ConfigError(f"{path}: top level must be a mapping")
    return data


@dataclass
class RunReport:
    ranking: list
    pool: list
    plan: dict
    searches: list
    bag_val_acc: list
    predictions_path: str
    stage_seconds: dict
    total_seconds: float
    peak_memory_mb: float
    status: int = EXIT_OK
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path) as fh:
            return cls(**json.load(fh))


# ---------------------------------------------------------------------------
# checkpoints


class _Checkpoints:
    def __init__(self, workdir):
        self.dir = Path(workdir) if workdir else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return None if self.dir is None else self.dir / name

    def has(self, *names) -> bool:
        return self.dir is not None and all((self.dir / n).exists() for n in names)


def _score_to_dict(s: ProxyScore) -> dict:
    return {
        "tag": s.tag, "family": s.family.value, "n_layers": s.candidate.n_layers,
        "mean_acc": s.mean_acc, "rep_accs": s.rep_accs, "seconds": s.seconds,
        "epochs": s.epochs, "hp": None if s.hp is None else asdict(s.hp),
    }


def _score_from_dict(d: dict) -> ProxyScore:
    c = Candidate(ModelFamily(d["family"]), d["n_layers"], d["tag"] if d["tag"] != d["family"] else None)
    hp = HyperParams(**d["hp"]) if d["hp"] else None
    return ProxyScore(c, d["mean_acc"], d["rep_accs"], d["seconds"], hp, d["epochs"])


def parse_candidates(spec) -> list:
    """``"GcnConv"`` or ``"GcnConv:3"`` (family at a fixed default depth)."""
    out = []
    for item in spec:
        if isinstance(item, Candidate):
            out.append(item)
            continue
        name, _, depth = str(item).partition(":")
        fam = ModelFamily(name)
        out.append(Candidate(fam, int(depth), str(item)) if depth else Candidate(fam))
    return out


# ---------------------------------------------------------------------------
# budget planning


def plan_bags(remaining: float | None, run_seconds: float, cfg: PipelineConfig, n_candidates: int) -> dict:
    """Largest (n_bags, K, N) whose forecast fits ``remaining`` seconds.

    Shrinks bags first, then K, then N.  ``fits`` is False when even a single
    bag of one member from one family is forecast not to fit.
    """
    n_max = min(cfg.n_pool, n_candidates)
    plan = {"n_bags": cfg.n_bags, "k": cfg.k, "n_pool": n_max, "fits": True, "forecast": 0.0}
    if remaining is None:
        return plan

    def cost(bags, k, n):
        search_runs = n * k * cfg.max_layers if cfg.variant == "adaptive" else n * k
        retrain = 2 * n * k
        extra = 2 * n if cfg.compare else 0
        return bags * run_seconds * (search_runs + retrain + extra)

    bags, k, n = plan["n_bags"], plan["k"], plan["n_pool"]
    while cost(bags, k, n) > remaining:
        if bags > 1:
            bags -= 1
        elif k > 1:
            k -= 1
        elif n > 1:
            n -= 1
        else:
            plan["fits"] = False
            break
    plan.update(n_bags=bags, k=k, n_pool=n, forecast=cost(bags, k, n))
    return plan


# ---------------------------------------------------------------------------
# run


def _bag_split(g: GraphDataset, seed: int, bag: int):
    return random_split(g.train_indices, 0.2, seed=nk.derive_seed(seed, "bag", bag), labels=g.labels)


def _run_bag(g, cfg, pool, plan, bag, deadline):
    split = _bag_split(g, cfg.seed, bag)
    gse = GseConfig(k=plan["k"])
    bag_seed = nk.derive_seed(cfg.seed, "bag-search", bag)
    t0 = time.perf_counter()
    if cfg.variant == "gradient":
        result = gradient_search(pool, g, split, gse, cfg.gradient, bag_seed, max_layers=cfg.max_layers)
    else:
        result = adaptive_search(pool, g, split, gse, cfg.adaptive, bag_seed, max_layers=cfg.max_layers,
                                 width_ratio=cfg.proxy.m_proxy, workers=cfg.workers, deadline=deadline)
    t_search = time.perf_counter() - t0
    if deadline is not None and time.monotonic() > deadline:
        raise BudgetExceeded("time budget exhausted after search")
    t0 = time.perf_counter()
    final = retrain_final(result, pool, g, split, gse, nk.derive_seed(cfg.seed, "bag-final", bag),
                          workers=cfg.workers, deadline=deadline)
    fam_preds = final.family_predictions(g)
    probs = final.predict(g)
    methods = {"ensemble": probs}
    if cfg.compare:
        singles = []
        for s in pool.selected:
            hp = replace(s.hp or cfg.base_hp, hidden_size=cfg.hidden_size)
            m = train_model(s.family, hp, g, split, nk.derive_seed(cfg.seed, "single", bag, s.tag),
                            n_layers=s.candidate.n_layers, deadline=deadline)
            p = m.predict(g)
            singles.append(p)
            methods[f"single:{s.tag}"] = p
        for tag, p in zip(final.tags, fam_preds):
            methods[f"gse:{tag}"] = p
        methods["D-ensemble"] = d_ensemble(singles)
        methods["L-ensemble"] = l_ensemble(singles, g.labels, split.val, g.n_classes)
    t_train = time.perf_counter() - t0
    val_acc = nk.accuracy(probs, g.labels, split.val)
    return result, methods, val_acc, t_search, t_train


def write_predictions(path, test_indices, classes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("node_index\tclass\n")
        fh.writelines(f"{i}\t{c}\n" for i, c in zip(test_indices, classes))


def read_labels_file(path) -> dict:
    out = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.replace(",", "\t").split()
            if parts:
                out[int(parts[0])] = int(parts[1])
    return out


def _prior_probs(g: GraphDataset) -> np.ndarray:
    """Class prior of the labeled nodes, used when no model survived."""
    counts = np.bincount(g.labels[g.train_indices], minlength=g.n_classes).astype(np.float64)
    return np.tile(counts / counts.sum(), (g.n_nodes, 1))


def run(cfg: PipelineConfig, g: GraphDataset | None = None) -> RunReport:
    """Load, select, search, retrain, bag and write the predictions file."""
    t_start = time.monotonic()
    stage = {"load": 0.0, "selection": 0.0, "search": 0.0, "train": 0.0, "predict": 0.0}
    notes = []
    status = EXIT_OK
    ck = _Checkpoints(cfg.workdir)

    t0 = time.perf_counter()
    if g is None:
        g = cfg.load()
    stage["load"] = time.perf_counter() - t0
    budget = cfg.time_budget if cfg.time_budget is not None else g.time_budget_seconds
    deadline = None if budget is None else t_start + (1.0 - BUDGET_RESERVE) * budget

    candidates = parse_candidates(cfg.candidates)
    base_hp = cfg.base_hp

    # -- selection
    t0 = time.perf_counter()
    if ck.has("proxy.json", "proxy_best.model"):
        with open(ck.path("proxy.json")) as fh:
            saved = json.load(fh)
        scores = [_score_from_dict(d) for d in saved["scores"]]
        blob = ck.path("proxy_best.model").read_bytes()
        fallback = TrainedModel.from_bytes(blob) if blob else None
        plan = saved["plan"]
        notes.extend(saved.get("notes", []))
        status = max(status, saved.get("status", EXIT_OK))
    else:
        scores = proxy_evaluate(
            candidates, g, cfg.proxy, cfg.seed, base_hp=base_hp, lrs=cfg.learning_rates,
            dropouts=cfg.dropouts, workers=cfg.workers, deadline=deadline, keep_models=True,
        )
        ranked = select_pool(scores, len(scores), tie_break="work").ranking
        fallback = next((s.model for s in ranked if s.model is not None), None)
        runs = sum(len(s.rep_accs) for s in scores) * len(cfg.learning_rates) * len(cfg.dropouts)
        run_seconds = sum(s.seconds for s in scores) / max(runs, 1)
        complete = all(len(s.rep_accs) == cfg.proxy.b_proxy for s in scores)
        remaining = None if deadline is None else deadline - time.monotonic()
        plan = plan_bags(remaining, run_seconds, cfg, len(candidates))
        if not complete:
            plan["fits"] = False
            notes.append("time budget exhausted during proxy evaluation")
        degraded = (plan["n_bags"], plan["k"], plan["n_pool"]) != (cfg.n_bags, cfg.k, min(cfg.n_pool, len(candidates)))
        if degraded or not plan["fits"]:
            status = EXIT_DEGRADED
            notes.append(f"budget plan: {plan}")
        if ck.dir is not None:
            with open(ck.path("proxy.json"), "w") as fh:
                json.dump({"scores": [_score_to_dict(s) for s in scores], "plan": plan,
                           "notes": notes, "status": status}, fh, indent=1, sort_keys=True)
            ck.path("proxy_best.model").write_bytes(fallback.to_bytes() if fallback is not None else b"")
    pool = select_pool(scores, plan["n_pool"], tie_break="work")
    stage["selection"] = time.perf_counter() - t0

    # -- bags
    bag_probs, bag_methods, bag_val, searches = [], [], [], []
    if plan["fits"]:
        for b in range(plan["n_bags"]):
            names = (f"bag{b}.search.json", f"bag{b}.methods.npz", f"bag{b}.json")
            if ck.has(*names):
                result = load_search_result(ck.path(names[0]))
                with np.load(ck.path(names[1])) as z:
                    methods = {k: z[k] for k in z.files}
                with open(ck.path(names[2])) as fh:
                    val_acc = json.load(fh)["val_acc"]
            else:
                try:
                    result, methods, val_acc, t_s, t_t = _run_bag(g, cfg, pool, plan, b, deadline)
                except BudgetExceeded as exc:
                    notes.append(f"bag {b} abandoned: {exc}")
                    status = EXIT_DEGRADED
                    break
                stage["search"] += t_s
                stage["train"] += t_t
                if ck.dir is not None:
                    save_search_result(result, ck.path(names[0]))
                    np.savez(ck.path(names[1]), **methods)
                    with open(ck.path(names[2]), "w") as fh:
                        json.dump({"val_acc": val_acc}, fh)
            searches.append(result.to_dict())
            bag_probs.append(methods["ensemble"])
            bag_methods.append(methods)
            bag_val.append(val_acc)

    # -- predict
    t0 = time.perf_counter()
    if bag_probs:
        probs = bagging_predict(bag_probs)
    else:
        notes.append("no bag completed; predicting with the strongest proxy model")
        status = EXIT_DEGRADED
        probs = fallback.predict(g) if fallback is not None else _prior_probs(g)
    classes = probs[g.test_indices].argmax(axis=1)
    write_predictions(cfg.output, g.test_indices, classes)
    if cfg.compare and bag_methods:
        names = bag_methods[0].keys()
        merged = {k: bagging_predict([m[k] for m in bag_methods])[g.test_indices] for k in names}
        np.savez(str(cfg.output) + ".methods.npz", test_indices=g.test_indices, **merged)
    stage["predict"] = time.perf_counter() - t0

    report = RunReport(
        ranking=[_score_to_dict(s) for s in pool.ranking],
        pool=[s.tag for s in pool.selected],
        plan=plan,
        searches=searches,
        bag_val_acc=bag_val,
        predictions_path=str(cfg.output),
        stage_seconds=stage,
        total_seconds=time.monotonic() - t_start,
        peak_memory_mb=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
        status=status,
        notes=notes,
    )
    report.save(str(cfg.output) + ".report.json")
    return report


def proxy_rank(cfg: PipelineConfig, g: GraphDataset | None = None) -> str:
    g = g if g is not None else cfg.load()
    scores = proxy_evaluate(parse_candidates(cfg.candidates), g, cfg.proxy, cfg.seed, base_hp=cfg.base_hp,
                            lrs=cfg.learning_rates, dropouts=cfg.dropouts, workers=cfg.workers)
    return ranking_report(select_pool(scores, len(scores), tie_break="work").ranking)


# ---------------------------------------------------------------------------
# evaluation and reporting


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict
    methods: dict = field(default_factory=dict)

    def format(self) -> str:
        lines = [f"accuracy\t{self.accuracy:.4f}", "class\taccuracy"]
        lines += [f"{c}\t{a:.4f}" for c, a in sorted(self.per_class.items())]
        if self.methods:
            lines.append("method\taccuracy")
            lines += [f"{m}\t{a:.4f}" for m, a in self.methods.items()]
        return "\n".join(lines) + "\n"


def evaluate(cfg: PipelineConfig, gold_path) -> EvalReport:
    """Score the predictions file (and any saved comparison methods) against gold."""
    gold = read_labels_file(gold_path)
    pred = read_labels_file(cfg.output)
    missing = sorted(set(pred) - set(gold))
    if missing:
        raise ValueError(f"gold labels missing for test nodes: {missing[:20]}{' ...' if len(missing) > 20 else ''}")
    idx = np.array(sorted(pred))
    y = np.array([gold[i] for i in idx])
    yhat = np.array([pred[i] for i in idx])
    per_class = {int(c): float((yhat[y == c] == c).mean()) for c in np.unique(y)}
    methods = {}
    mpath = Path(str(cfg.output) + ".methods.npz")
    if mpath.exists():
        with np.load(mpath) as z:
            order = z["test_indices"]
            yy = np.array([gold[i] for i in order])
            for k in z.files:
                if k != "test_indices":
                    methods[k] = float((z[k].argmax(axis=1) == yy).mean())
    return EvalReport(accuracy=float((y == yhat).mean()) if idx.size else 0.0, per_class=per_class, methods=methods)


def report_runtime(report: RunReport) -> str:
    """Selection / search / train breakdown plus total, as a small table."""
    s = report.stage_seconds
    cols = [("Model Selection", s.get("selection", 0.0)), ("Search", s.get("search", 0.0)),
            ("Training", s.get("train", 0.0)), ("Total", report.total_seconds)]

    def fmt(v):
        return "0" if v == 0 else f"{v:.2f}"

    header = "\t".join(c for c, _ in cols)
    row = "\t".join(fmt(v) for _, v in cols)
    staged = sum(v for _, v in cols[:3])
    ok = staged <= report.total_seconds + 1e-9
    footer = f"stage sum {fmt(staged)} <= total {fmt(report.total_seconds)}: {'ok' if ok else 'VIOLATED'}"
    return f"{header}\n{row}\n{footer}\n"
