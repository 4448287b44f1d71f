"""Graph datasets: file loading/writing, adjacency normalization, splits and
a stochastic-block-model generator used as a test fixture."""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numkern import ConfigError, Rng, as_csr, softmax_rows  # noqa: F401

IDENTITY_FEATURE_WIDTH = 1024


class ParseError(ValueError):
    pass


class DatasetValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """An immutable node-classification graph.

    ``labels`` has one entry per node; it is -1 everywhere except the
    training nodes.  ``gold_labels`` optionally holds the full ground truth
    for evaluation and is never read by training code.
    """

    n_nodes: int
    adjacency: sp.csr_matrix
    features: np.ndarray | None
    labels: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    n_classes: int
    time_budget_seconds: int | None = None
    directed: bool = False
    gold_labels: np.ndarray | None = None
    name: str = "graph"

    def __post_init__(self):
        validate_dataset(self)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz)

    @property
    def labeled_indices(self) -> np.ndarray:
        return self.train_indices

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        if self.features is not None:
            return self.features
        return identity_features(self.n_nodes)

    @cached_property
    def ops(self):
        from .models import GraphOps

        return GraphOps.build(self)


def identity_features(n: int, width: int = IDENTITY_FEATURE_WIDTH) -> np.ndarray:
    """One-hot node identity, folded by index modulo ``min(n, width)``."""
    w = max(1, min(n, width))
    x = np.zeros((n, w))
    x[np.arange(n), np.arange(n) % w] = 1.0
    return x


def validate_dataset(g: GraphDataset) -> None:
    n = g.n_nodes
    if g.adjacency.shape != (n, n):
        raise DatasetValidationError(f"adjacency shape {g.adjacency.shape} != ({n}, {n})")
    if not np.all(np.isfinite(g.adjacency.data)):
        raise DatasetValidationError("non-finite edge weight")
    tr, te = g.train_indices, g.test_indices
    for name, idx in (("train", tr), ("test", te)):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DatasetValidationError(f"{name} index out of range [0, {n})")
    overlap = np.intersect1d(tr, te)
    if overlap.size:
        raise DatasetValidationError(f"train and test overlap: {overlap[:10].tolist()}")
    if g.labels.shape != (n,):
        raise DatasetValidationError("labels must have one entry per node")
    lab = g.labels[tr]
    bad = tr[(lab < 0) | (lab >= g.n_classes)]
    if bad.size:
        raise DatasetValidationError(f"training nodes without a valid label: {bad[:10].tolist()}")
    if g.features is not None:
        if g.features.shape[0] != n:
            raise DatasetValidationError("feature rows != n_nodes")
        if not np.all(np.isfinite(g.features)):
            raise DatasetValidationError("non-finite feature value")


# ---------------------------------------------------------------------------
# file format


def _split_line(line: str) -> list[str]:
    if "\t" in line or "," in line:
        parts = [p.strip() for p in line.replace(",", "\t").split("\t")]
        return [p for p in parts if p != ""]
    return line.split()


def _read_table(path, min_cols: int = 1) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Return (header, [(line_number, fields)]) for a delimited text file."""
    rows = []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = _split_line(line)
            if header is None:
                header = parts
                continue
            if len(parts) < min_cols:
                raise ParseError(f"{path}:{lineno}: expected {min_cols} columns, got {len(parts)}")
            rows.append((lineno, parts))
    if header is None:
        raise ParseError(f"{path}: missing header row")
    return header, rows


def _int(tok: str, path, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        try:
            f = float(tok)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: expected integer, got {tok!r}") from None
        if not f.is_integer():
            raise ParseError(f"{path}:{lineno}: expected integer, got {tok!r}") from None
        return int(f)


def _float(tok: str, path, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected float, got {tok!r}") from None


def _read_index_file(path) -> np.ndarray:
    _, rows = _read_table(path)
    return np.array([_int(r[0], path, ln) for ln, r in rows], dtype=np.int64)


def _read_node_file(path) -> tuple[np.ndarray, np.ndarray]:
    header, rows = _read_table(path, min_cols=2)
    if len(header) < 2 or header[1].lower() != "role":
        raise ParseError(f"{path}:1: combined node file needs header 'node_index role'")
    train, test = [], []
    for ln, r in rows:
        idx = _int(r[0], path, ln)
        role = r[1].lower()
        if role == "train":
            train.append(idx)
        elif role == "test":
            test.append(idx)
        else:
            raise ParseError(f"{path}:{ln}: unknown role {r[1]!r}")
    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


def _read_metadata(path) -> dict:
    meta = {}
    lines = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                lines.append((lineno, _split_line(line)))
    if len(lines) == 2 and len(lines[0][1]) > 2 and len(lines[0][1]) == len(lines[1][1]):
        # tabular form: a header row of keys, then one row of values
        pairs = [(lines[1][0], k, v) for k, v in zip(lines[0][1], lines[1][1])]
    else:
        pairs = []
        for ln, parts in lines:
            if len(parts) != 2:
                raise ParseError(f"{path}:{ln}: expected 'key value'")
            pairs.append((ln, parts[0], parts[1]))
    for ln, k, v in pairs:
        if k in ("key", "name"):
            continue
        meta[k] = _int(v, path, ln) if k in ("time_budget", "n_class", "n_nodes") else v
    return meta


def load_dataset(
    node_file=None,
    edge_file=None,
    feature_file=None,
    label_file=None,
    metadata_file=None,
    *,
    train_nodes_file=None,
    test_nodes_file=None,
    gold_file=None,
    n_classes: int | None = None,
    name: str | None = None,
) -> GraphDataset:
    """Load a dataset from the delimited-text file set.

    Either ``node_file`` (columns ``node_index role``) or the pair
    ``train_nodes_file``/``test_nodes_file`` must be given.
    """
    if node_file is not None:
        train, test = _read_node_file(node_file)
    elif train_nodes_file is not None and test_nodes_file is not None:
        train, test = _read_index_file(train_nodes_file), _read_index_file(test_nodes_file)
    else:
        raise ValueError("need node_file or train_nodes_file + test_nodes_file")

    meta = _read_metadata(metadata_file) if metadata_file is not None else {}
    if n_classes is None:
        n_classes = meta.get("n_class")

    feats = None
    feat_rows = None
    if feature_file is not None and os.path.exists(feature_file):
        header, rows = _read_table(feature_file)
        width = len(header) - 1
        feat_rows = {}
        for ln, r in rows:
            if len(r) != width + 1:
                raise ParseError(f"{feature_file}:{ln}: expected {width + 1} columns, got {len(r)}")
            idx = _int(r[0], feature_file, ln)
            if idx < 0:
                raise ParseError(f"{feature_file}:{ln}: negative node index")
            feat_rows[idx] = [_float(t, feature_file, ln) for t in r[1:]]

    candidates = [train, test]
    if feat_rows:
        candidates.append(np.fromiter(feat_rows.keys(), dtype=np.int64))
    allidx = np.concatenate(candidates) if any(c.size for c in candidates) else np.array([0])
    if allidx.size and allidx.min() < 0:
        raise DatasetValidationError("negative node index in node file")
    n = int(allidx.max()) + 1 if allidx.size else 0
    if "n_nodes" in meta:
        if meta["n_nodes"] < n:
            raise DatasetValidationError(f"metadata n_nodes={meta['n_nodes']} but node index {n - 1} is used")
        n = meta["n_nodes"]

    if feat_rows is not None:
        feats = np.zeros((n, width))
        for idx, vals in feat_rows.items():
            feats[idx] = vals
        missing = n - len(feat_rows)
        if missing:
            warnings.warn(f"{missing} nodes have no feature row; filled with zeros", stacklevel=2)

    src, dst, w = [], [], []
    if edge_file is not None:
        _, rows = _read_table(edge_file, min_cols=2)
        for ln, r in rows:
            s, d = _int(r[0], edge_file, ln), _int(r[1], edge_file, ln)
            wt = _float(r[2], edge_file, ln) if len(r) > 2 else 1.0
            if not (0 <= s < n and 0 <= d < n):
                raise DatasetValidationError(
                    f"{edge_file}:{ln}: edge ({s}, {d}) references a node outside [0, {n})"
                )
            src.append(s)
            dst.append(d)
            w.append(wt)
    src_a = np.array(src, dtype=np.int64)
    dst_a = np.array(dst, dtype=np.int64)
    if src_a.size:
        key = src_a * max(n, 1) + dst_a
        if np.unique(key).size != key.size:
            warnings.warn("duplicate (src, dst) edges; weights summed", stacklevel=2)
    adj = as_csr(sp.coo_matrix((np.array(w, dtype=np.float64), (src_a, dst_a)), shape=(n, n)))

    labels = np.full(n, -1, dtype=np.int64)
    if label_file is not None:
        _, rows = _read_table(label_file, min_cols=2)
        for ln, r in rows:
            idx = _int(r[0], label_file, ln)
            if not 0 <= idx < n:
                raise DatasetValidationError(f"{label_file}:{ln}: node {idx} out of range")
            labels[idx] = _int(r[1], label_file, ln)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if (labels >= 0).any() else 1

    gold = None
    if gold_file is not None and os.path.exists(gold_file):
        gold = np.full(n, -1, dtype=np.int64)
        _, rows = _read_table(gold_file, min_cols=2)
        for ln, r in rows:
            gold[_int(r[0], gold_file, ln)] = _int(r[1], gold_file, ln)

    directed = bool(adj.nnz) and (abs(adj - adj.T) > 0).nnz > 0
    return GraphDataset(
        n_nodes=n,
        adjacency=adj,
        features=feats,
        labels=labels,
        train_indices=train,
        test_indices=test,
        n_classes=int(n_classes),
        time_budget_seconds=meta.get("time_budget"),
        directed=directed,
        gold_labels=gold,
        name=name or (Path(edge_file).parent.name if edge_file else "graph"),
    )


FILE_NAMES = {
    "node_file": "node.tsv",
    "edge_file": "edge.tsv",
    "feature_file": "feature.tsv",
    "label_file": "label.tsv",
    "metadata_file": "meta.tsv",
    "gold_file": "gold.tsv",
}


def dataset_paths(directory) -> dict:
    d = Path(directory)
    return {k: d / v for k, v in FILE_NAMES.items()}


def load_dataset_dir(directory) -> GraphDataset:
    paths = dataset_paths(directory)
    return load_dataset(**{k: (p if p.exists() else None) for k, p in paths.items()},
                        name=Path(directory).name)


def write_dataset(g: GraphDataset, directory) -> dict:
    """Write the five-file layout (plus ``gold.tsv`` if gold labels exist)."""
    paths = dataset_paths(directory)
    Path(directory).mkdir(parents=True, exist_ok=True)
    with open(paths["node_file"], "w") as fh:
        fh.write("node_index\trole\n")
        fh.writelines(f"{i}\ttrain\n" for i in g.train_indices)
        fh.writelines(f"{i}\ttest\n" for i in g.test_indices)
    coo = g.adjacency.tocoo()
    with open(paths["edge_file"], "w") as fh:
        fh.write("src_idx\tdst_idx\tedge_weight\n")
        fh.writelines(f"{s}\t{d}\t{w!r}\n" for s, d, w in zip(coo.row, coo.col, coo.data.tolist()))
    if g.features is not None:
        with open(paths["feature_file"], "w") as fh:
            fh.write("node_index\t" + "\t".join(f"f{j}" for j in range(g.features.shape[1])) + "\n")
            for i, row in enumerate(g.features.tolist()):
                fh.write(f"{i}\t" + "\t".join(repr(v) for v in row) + "\n")
    elif paths["feature_file"].exists():
        paths["feature_file"].unlink()
    with open(paths["label_file"], "w") as fh:
        fh.write("node_index\tclass\n")
        fh.writelines(f"{i}\t{g.labels[i]}\n" for i in g.train_indices)
    with open(paths["metadata_file"], "w") as fh:
        if g.time_budget_seconds is not None:
            fh.write(f"time_budget\t{g.time_budget_seconds}\n")
        fh.write(f"n_class\t{g.n_classes}\n")
        fh.write(f"n_nodes\t{g.n_nodes}\n")
    if g.gold_labels is not None:
        with open(paths["gold_file"], "w") as fh:
            fh.write("node_index\tclass\n")
            fh.writelines(f"{i}\t{c}\n" for i, c in enumerate(g.gold_labels) if c >= 0)
    return paths


# ---------------------------------------------------------------------------
# adjacency normalization


def symmetrize(a: sp.csr_matrix) -> sp.csr_matrix:
    return as_csr(a.maximum(a.T))


def normalize_adjacency(a: sp.csr_matrix, directed: bool = False) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2, with A symmetrized by max(A, A^T) when directed.

    Existing self loops are replaced by weight 1 so the pattern is exactly
    that of A + I.
    """
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    a = as_csr(a)
    if directed:
        a = symmetrize(a)
    a = a.tolil()
    a.setdiag(0.0)
    a = as_csr(a)
    a.eliminate_zeros()
    a_hat = as_csr(a + sp.identity(a.shape[0], format="csr"))
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    return as_csr(d @ a_hat @ d)


def mean_adjacency(a: sp.csr_matrix, directed: bool = False) -> sp.csr_matrix:
    """Row-normalized neighbour averaging (no self loop); isolated rows are zero."""
    a = as_csr(a)
    if directed:
        a = symmetrize(a)
    a = a.tolil()
    a.setdiag(0.0)
    a = as_csr(a)
    a.eliminate_zeros()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return as_csr(sp.diags(inv) @ a)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True, eq=False)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    seed: int = 0
    frac_val: float = 0.2

    @property
    def labeled(self) -> np.ndarray:
        return np.union1d(self.train, self.val)


@dataclass(frozen=True)
class ProxyConfig:
    d_proxy: float = 0.30
    b_proxy: int = 6
    m_proxy: float = 0.50

    def __post_init__(self):
        for name in ("d_proxy", "m_proxy"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.b_proxy < 1:
            raise ConfigError("b_proxy must be >= 1")


def _allocate(counts: np.ndarray, target: int, cap: np.ndarray) -> np.ndarray:
    """Split ``target`` across classes proportionally to ``counts``.

    Each class gets floor or ceil of its exact share (largest remainder,
    ties to the lower class index), never more than ``cap``.
    """
    total = counts.sum()
    if total == 0 or target <= 0:
        return np.zeros_like(counts)
    exact = counts * (target / total)
    alloc = np.minimum(np.floor(exact).astype(np.int64), cap)
    rem = exact - np.floor(exact)
    order = sorted(range(len(counts)), key=lambda c: (-rem[c], c))
    left = target - alloc.sum()
    for c in order * 2:
        if left <= 0:
            break
        if alloc[c] < cap[c] and alloc[c] < math.ceil(exact[c]):
            alloc[c] += 1
            left -= 1
    return alloc


def _labels_of(idx: np.ndarray, labels) -> np.ndarray:
    if labels is None:
        return np.zeros(idx.size, dtype=np.int64)
    return np.asarray(labels)[idx]


def random_split(labeled, frac_val: float = 0.2, seed: int = 0, labels=None) -> SplitSpec:
    """Stratified train/validation split of ``labeled`` node indices.

    ``labels`` is a node-indexed class array; classes with a single labeled
    node stay in training.
    """
    labeled = np.sort(np.asarray(labeled, dtype=np.int64))
    if labeled.size == 0:
        raise ValueError("random_split: empty labeled set")
    if not 0.0 < frac_val < 1.0:
        raise ConfigError(f"frac_val must be in (0, 1), got {frac_val}")
    rng = Rng(seed, "split")
    y = _labels_of(labeled, labels)
    classes = np.unique(y)
    groups = [labeled[y == c] for c in classes]
    counts = np.array([g.size for g in groups])
    single = counts < 2
    if single.any():
        warnings.warn(
            f"classes {classes[single].tolist()} have one labeled node; kept in training",
            stacklevel=2,
        )
    eligible = np.where(single, 0, counts)
    target = int(round(frac_val * eligible.sum()))
    n_val = _allocate(eligible, target, np.maximum(eligible - 1, 0))
    train, val = [], []
    for grp, k in zip(groups, n_val):
        perm = grp[rng.permutation(grp.size)]
        val.append(perm[:k])
        train.append(perm[k:])
    return SplitSpec(
        train=np.sort(np.concatenate(train)),
        val=np.sort(np.concatenate(val)),
        seed=seed,
        frac_val=frac_val,
    )


def proxy_subsample(split: SplitSpec, d_proxy: float, seed: int = 0, labels=None) -> np.ndarray:
    """Keep ceil(d_proxy * |train|) training nodes, stratified by class."""
    if not 0.0 < d_proxy <= 1.0:
        raise ConfigError(f"d_proxy must be in (0, 1], got {d_proxy}")
    train = split.train
    if d_proxy == 1.0:
        return train.copy()
    target = math.ceil(d_proxy * train.size - 1e-9)
    rng = Rng(seed, "proxy-subsample")
    y = _labels_of(train, labels)
    classes = np.unique(y)
    groups = [train[y == c] for c in classes]
    counts = np.array([g.size for g in groups])
    keep = _allocate(counts, target, counts)
    out = [grp[rng.permutation(grp.size)][:k] for grp, k in zip(groups, keep)]
    return np.sort(np.concatenate(out))


# ---------------------------------------------------------------------------
# synthetic graphs


def synthesize_sbm(
    blocks: int,
    nodes_per_block: int,
    p_in: float,
    p_out: float,
    feature_noise: float = 1.0,
    seed: int = 0,
    feature_dim: int = 16,
    train_frac: float = 0.5,
) -> GraphDataset:
    """Stochastic block model graph; block id is the label.

    Features are a per-block Gaussian mean vector plus isotropic noise of
    scale ``feature_noise``.  Half the nodes are training nodes.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"{name} must be a probability, got {p}")
    if p_in <= p_out:
        raise ConfigError("synthesize_sbm requires p_in > p_out")
    rng = Rng(seed, "sbm")
    n = blocks * nodes_per_block
    block = np.repeat(np.arange(blocks), nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    s, d = iu[hit], ju[hit]
    rows = np.concatenate([s, d])
    cols = np.concatenate([d, s])
    adj = as_csr(sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)))
    means = rng.normal(0.0, 1.0, size=(blocks, feature_dim))
    feats = means[block] + feature_noise * rng.normal(0.0, 1.0, size=(n, feature_dim))
    perm = rng.permutation(n)
    n_train = int(round(train_frac * n))
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    labels = np.full(n, -1, dtype=np.int64)
    labels[train] = block[train]
    return GraphDataset(
        n_nodes=n,
        adjacency=adj,
        features=feats,
        labels=labels,
        train_indices=train,
        test_indices=test,
        n_classes=blocks,
        gold_labels=block.astype(np.int64),
        name=f"sbm{blocks}x{nodes_per_block}",
    )


def synthesize_hub_sbm(
    blocks: int = 4,
    nodes_per_block: int = 150,
    hubs_per_block: int = 10,
    feature_noise: float = 3.0,
    cross_edges: int = 1,
    seed: int = 0,
    feature_dim: int = 16,
    train_frac: float = 0.5,
) -> GraphDataset:
    """Block graph whose class signal lives two hops away.

    Every regular node attaches to one featureless hub of its own block and
    to ``cross_edges`` random regular nodes of other blocks.  One hop sees
    only noisy own features plus a wrong-class neighbour, two hops reach the
    hub's whole block, and three or more hops pull in the wrong-class
    neighbours' blocks.  Hubs are neither training nor test nodes.
    """
    if min(blocks, nodes_per_block, hubs_per_block) < 1 or cross_edges < 0:
        raise ConfigError("synthesize_hub_sbm: counts must be positive")
    if blocks < 2 and cross_edges:
        raise ConfigError("cross edges need at least two blocks")
    rng = Rng(seed, "hub-sbm")
    n_reg = blocks * nodes_per_block
    n = n_reg + blocks * hubs_per_block
    block = np.repeat(np.arange(blocks), nodes_per_block)
    hub_block = np.repeat(np.arange(blocks), hubs_per_block)
    hub = n_reg + block * hubs_per_block + rng.gen.integers(0, hubs_per_block, n_reg)
    src = [np.arange(n_reg)]
    dst = [hub]
    for _ in range(cross_edges):
        # a uniformly random node from a different block
        other = (block + rng.gen.integers(1, blocks, n_reg)) % blocks
        dst.append(other * nodes_per_block + rng.gen.integers(0, nodes_per_block, n_reg))
        src.append(np.arange(n_reg))
    s, d = np.concatenate(src), np.concatenate(dst)
    adj = as_csr(sp.coo_matrix((np.ones(2 * s.size), (np.concatenate([s, d]), np.concatenate([d, s]))), shape=(n, n)))
    adj.data[:] = 1.0
    means = rng.normal(0.0, 1.0, size=(blocks, feature_dim))
    feats = np.zeros((n, feature_dim))
    feats[:n_reg] = means[block] + feature_noise * rng.normal(0.0, 1.0, size=(n_reg, feature_dim))
    perm = rng.permutation(n_reg)
    n_train = int(round(train_frac * n_reg))
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    labels = np.full(n, -1, dtype=np.int64)
    labels[train] = block[train]
    return GraphDataset(
        n_nodes=n,
        adjacency=adj,
        features=feats,
        labels=labels,
        train_indices=train,
        test_indices=test,
        n_classes=blocks,
        gold_labels=np.concatenate([block, hub_block]).astype(np.int64),
        name=f"hubsbm{blocks}x{nodes_per_block}",
    )


def with_split(g: GraphDataset, train, test) -> GraphDataset:
    """Copy of ``g`` with different train/test node sets (labels from gold)."""
    labels = np.full(g.n_nodes, -1, dtype=np.int64)
    src = g.gold_labels if g.gold_labels is not None else g.labels
    train = np.sort(np.asarray(train, dtype=np.int64))
    labels[train] = src[train]
    return GraphDataset(
        n_nodes=g.n_nodes,
        adjacency=g.adjacency,
        features=g.features,
        labels=labels,
        train_indices=train,
        test_indices=np.sort(np.asarray(test, dtype=np.int64)),
        n_classes=g.n_classes,
        time_budget_seconds=g.time_budget_seconds,
        directed=g.directed,
        gold_labels=g.gold_labels,
        name=g.name,
    )
