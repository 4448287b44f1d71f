"""Candidate GNN families, full-batch training and hyperparameter search.

Every family follows the same layout::

    H0 = dropout(X) W_in + b_in                      (input projection)
    Hl = f_l(A, dropout(H_{l-1}))   for l = 1..L     (family-specific layer)
    Y  = softmax(dropout(sum_l alpha_l Hl) W_out)

so the per-layer outputs all share one width and can be mixed by ``alpha``.
Gradients are written by hand for each layer type.
"""
from __future__ import annotations

import enum
import io
import json
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import numkern as nk
from .ensemble import AlphaParams
from .graphio import GraphDataset, ProxyConfig, SplitSpec, mean_adjacency, normalize_adjacency, proxy_subsample

DROPOUT_GRID = (0.5, 0.25, 0.1)
LR_GRID = (5e-2, 3e-2, 1e-2, 7.5e-3, 5e-3, 3e-3, 1e-3, 5e-4)
KHOP_HOPS = 2
ATTN_SLOPE = 0.2


class TrainingDivergence(RuntimeError):
    pass


class BudgetExceeded(RuntimeError):
    pass


class ModelFamily(str, enum.Enum):
    GCN = "GcnConv"
    SAGE = "SageMean"
    KHOP = "KHopProp"
    ATTN = "AttnLite"

    def __str__(self):
        return self.value


ALL_FAMILIES = tuple(ModelFamily)


@dataclass(frozen=True)
class HyperParams:
    hidden_size: int = 64
    max_layers: int = 4
    dropout: float = 0.5
    learning_rate: float = 1e-2
    weight_decay: float = 5e-4
    max_epochs: int = 200
    patience: int = 20

    def __post_init__(self):
        if self.hidden_size < 1 or self.max_layers < 1:
            raise nk.ConfigError("hidden_size and max_layers must be >= 1")
        if self.dropout not in DROPOUT_GRID:
            raise nk.ConfigError(f"dropout {self.dropout} not in {DROPOUT_GRID}")
        if self.learning_rate not in LR_GRID:
            raise nk.ConfigError(f"learning rate {self.learning_rate} not in {LR_GRID}")
        if self.patience < 0 or self.max_epochs < 1:
            raise nk.ConfigError("patience must be >= 0 and max_epochs >= 1")


def decayed_lr(base: float, epoch: int) -> float:
    """Learning rate for a 0-based epoch: x0.9 every 3 epochs."""
    return base * 0.9 ** (epoch // 3)


@dataclass(frozen=True, eq=False)
class Candidate:
    """A model family at a default depth, the unit ranked by proxy evaluation."""

    family: ModelFamily
    n_layers: int = 2
    name: str | None = None

    @property
    def tag(self) -> str:
        return self.name or self.family.value


# ---------------------------------------------------------------------------
# graph operators shared by all layers


@dataclass(frozen=True, eq=False)
class GraphOps:
    x: np.ndarray
    a_norm: sp.csr_matrix
    a_norm_t: sp.csr_matrix
    a_mean: sp.csr_matrix
    a_mean_t: sp.csr_matrix
    edge_row: np.ndarray
    edge_col: np.ndarray
    indptr: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @classmethod
    def build(cls, g: GraphDataset) -> "GraphOps":
        return cls.from_arrays(g.feature_matrix, g.adjacency)

    @classmethod
    def from_arrays(cls, x, adjacency) -> "GraphOps":
        # edges are always treated as undirected for message passing
        a_norm = normalize_adjacency(adjacency, directed=True)
        a_mean = mean_adjacency(adjacency, directed=True)
        # attention runs over the pattern of A + I, rows are targets
        indptr = a_norm.indptr.copy()
        row = np.repeat(np.arange(a_norm.shape[0]), np.diff(indptr))
        return cls(
            x=np.asarray(x, dtype=np.float64),
            a_norm=a_norm,
            a_norm_t=nk.as_csr(a_norm.T),
            a_mean=a_mean,
            a_mean_t=nk.as_csr(a_mean.T),
            edge_row=row,
            edge_col=a_norm.indices.copy(),
            indptr=indptr,
        )


def graph_ops(g) -> GraphOps:
    return g if isinstance(g, GraphOps) else g.ops


# ---------------------------------------------------------------------------
# layers


def layer_param_shapes(family: ModelFamily, width: int) -> dict:
    if family is ModelFamily.GCN:
        return {"W": (width, width), "b": (width,)}
    if family is ModelFamily.SAGE:
        return {"Ws": (width, width), "Wn": (width, width), "b": (width,)}
    if family is ModelFamily.KHOP:
        shapes = {f"W{k}": (width, width) for k in range(KHOP_HOPS + 1)}
        shapes["b"] = (width,)
        return shapes
    if family is ModelFamily.ATTN:
        return {"W": (width, width), "a_src": (width, 1), "a_dst": (width, 1), "b": (width,)}
    raise ValueError(family)


def _segment_sum(values, indptr):
    return np.add.reduceat(values, indptr[:-1], axis=0)


def layer_forward(family: ModelFamily, p: dict, ops: GraphOps, h: np.ndarray):
    if family is ModelFamily.GCN:
        z = nk.spmm(ops.a_norm, h @ p["W"]) + p["b"]
        return nk.relu(z), (h, z)
    if family is ModelFamily.SAGE:
        z = h @ p["Ws"] + nk.spmm(ops.a_mean, h @ p["Wn"]) + p["b"]
        return nk.relu(z), (h, z)
    if family is ModelFamily.KHOP:
        hops = [h]
        for _ in range(KHOP_HOPS):
            hops.append(nk.spmm(ops.a_norm, hops[-1]))
        z = sum(t @ p[f"W{k}"] for k, t in enumerate(hops)) + p["b"]
        return nk.relu(z), (hops, z)
    if family is ModelFamily.ATTN:
        zh = h @ p["W"]
        s_src = (zh @ p["a_src"]).ravel()
        s_dst = (zh @ p["a_dst"]).ravel()
        u = s_dst[ops.edge_row] + s_src[ops.edge_col]
        e = nk.leaky_relu(u, ATTN_SLOPE)
        emax = np.maximum.reduceat(e, ops.indptr[:-1])
        ex = np.exp(e - emax[ops.edge_row])
        att = ex / _segment_sum(ex, ops.indptr)[ops.edge_row]
        att_m = sp.csr_matrix((att, ops.edge_col, ops.indptr), shape=(ops.n, ops.n))
        z = att_m @ zh + p["b"]
        return nk.relu(z), (h, zh, u, att, att_m, z)
    raise ValueError(family)


def layer_backward(family: ModelFamily, p: dict, ops: GraphOps, cache, grad_out):
    """Return (grad wrt layer input, {param name: grad})."""
    if family is ModelFamily.GCN:
        h, z = cache
        dz = nk.relu_backward(z, grad_out)
        dhw = nk.spmm(ops.a_norm_t, dz)
        return dhw @ p["W"].T, {"W": h.T @ dhw, "b": dz.sum(axis=0)}
    if family is ModelFamily.SAGE:
        h, z = cache
        dz = nk.relu_backward(z, grad_out)
        dnb = nk.spmm(ops.a_mean_t, dz)
        grads = {"Ws": h.T @ dz, "Wn": h.T @ dnb, "b": dz.sum(axis=0)}
        return dz @ p["Ws"].T + dnb @ p["Wn"].T, grads
    if family is ModelFamily.KHOP:
        hops, z = cache
        dz = nk.relu_backward(z, grad_out)
        grads = {f"W{k}": t.T @ dz for k, t in enumerate(hops)}
        grads["b"] = dz.sum(axis=0)
        dt = dz @ p[f"W{KHOP_HOPS}"].T
        for k in range(KHOP_HOPS - 1, -1, -1):
            dt = dz @ p[f"W{k}"].T + nk.spmm(ops.a_norm_t, dt)
        return dt, grads
    if family is ModelFamily.ATTN:
        h, zh, u, att, att_m, z = cache
        dz = nk.relu_backward(z, grad_out)
        dzh = att_m.T @ dz
        datt = np.einsum("ef,ef->e", dz[ops.edge_row], zh[ops.edge_col])
        s = _segment_sum(att * datt, ops.indptr)
        du = nk.leaky_relu_backward(u, att * (datt - s[ops.edge_row]), ATTN_SLOPE)
        d_dst = np.bincount(ops.edge_row, weights=du, minlength=ops.n)
        d_src = np.bincount(ops.edge_col, weights=du, minlength=ops.n)
        dzh += np.outer(d_src, p["a_src"]) + np.outer(d_dst, p["a_dst"])
        grads = {
            "W": h.T @ dzh,
            "a_src": (zh.T @ d_src)[:, None],
            "a_dst": (zh.T @ d_dst)[:, None],
            "b": dz.sum(axis=0),
        }
        return dzh @ p["W"].T, grads
    raise ValueError(family)


# ---------------------------------------------------------------------------
# network


def init_params(family: ModelFamily, in_dim: int, width: int, n_classes: int, n_layers: int, rng: nk.Rng) -> dict:
    params = {"in.W": nk.glorot((in_dim, width), rng), "in.b": np.zeros(width)}
    for l in range(1, n_layers + 1):
        for name, shape in layer_param_shapes(family, width).items():
            params[f"l{l}.{name}"] = np.zeros(shape) if name == "b" else nk.glorot(shape, rng)
    params["out.W"] = nk.glorot((width, n_classes), rng)
    return params


def _layer_params(params: dict, l: int) -> dict:
    prefix = f"l{l}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class ForwardCache:
    masks: list
    layer_caches: list
    outputs: list
    alpha: np.ndarray
    mixed: np.ndarray
    mixed_dropped: np.ndarray
    probs: np.ndarray


def network_forward(family, params, n_layers, ops, alpha_weights, dropout_rate=0.0, rng=None, training=False):
    """Full forward pass; returns ``(probs, cache)``."""
    def mask(shape):
        if training and dropout_rate > 0.0:
            return nk.dropout_mask(shape, dropout_rate, rng)
        return None

    x = ops.x
    m0 = mask(x.shape)
    xd = x if m0 is None else x * m0
    outputs = [xd @ params["in.W"] + params["in.b"]]
    masks, caches = [m0], []
    for l in range(1, n_layers + 1):
        m = mask(outputs[-1].shape)
        h_in = outputs[-1] if m is None else outputs[-1] * m
        h, c = layer_forward(family, _layer_params(params, l), ops, h_in)
        masks.append(m)
        caches.append(c)
        outputs.append(h)
    mixed = mix_layers(outputs, alpha_weights)
    mo = mask(mixed.shape)
    mixed_d = mixed if mo is None else mixed * mo
    masks.append(mo)
    probs = nk.softmax_rows(mixed_d @ params["out.W"])
    return probs, ForwardCache(masks, caches, outputs, alpha_weights, mixed, mixed_d, probs)


def mix_layers(outputs, alpha_weights) -> np.ndarray:
    """sum_{l>=1} alpha_l H^(l); ``outputs`` includes H^(0) at index 0."""
    hs = outputs[1:]
    if len(alpha_weights) != len(hs):
        raise nk.ShapeError(f"alpha has {len(alpha_weights)} entries for {len(hs)} layers")
    mixed = np.zeros_like(hs[0])
    for a, h in zip(alpha_weights, hs):
        if a != 0.0:
            mixed += a * h
    return mixed


def network_backward(family, params, n_layers, ops, cache: ForwardCache, grad_scores):
    """Backprop ``grad_scores`` (w.r.t. pre-softmax scores).

    Returns ``(param_grads, grad_alpha_weights)``; the second is the gradient
    w.r.t. the simplex weights, not the logits.
    """
    grads = {"out.W": cache.mixed_dropped.T @ grad_scores}
    d_mixed = grad_scores @ params["out.W"].T
    if cache.masks[-1] is not None:
        d_mixed = d_mixed * cache.masks[-1]
    outs = cache.outputs
    d_alpha = np.array([np.sum(d_mixed * h) for h in outs[1:]])
    d_h = [None] + [a * d_mixed for a in cache.alpha]
    for l in range(n_layers, 0, -1):
        d_in, g = layer_backward(family, _layer_params(params, l), ops, cache.layer_caches[l - 1], d_h[l])
        for k, v in g.items():
            grads[f"l{l}.{k}"] = v
        m = cache.masks[l]
        if m is not None:
            d_in = d_in * m
        if l - 1 >= 1:
            d_h[l - 1] = d_h[l - 1] + d_in
        else:
            d_h0 = d_in
    xd = ops.x if cache.masks[0] is None else ops.x * cache.masks[0]
    grads["in.W"] = xd.T @ d_h0
    grads["in.b"] = d_h0.sum(axis=0)
    return grads, d_alpha


# ---------------------------------------------------------------------------
# trained model


@dataclass(eq=False)
class TrainedModel:
    family: ModelFamily
    hp: HyperParams
    n_layers: int
    params: dict
    in_dim: int
    n_classes: int
    seed: int
    alpha_logits: np.ndarray | None = None
    best_val_acc: float = 0.0
    best_epoch: int = -1
    epochs_run: int = 0

    @property
    def width(self) -> int:
        return self.params["in.W"].shape[1]

    def alpha_weights(self) -> np.ndarray:
        if self.alpha_logits is None:
            w = np.zeros(self.n_layers)
            w[-1] = 1.0
            return w
        return AlphaParams(self.alpha_logits).weights

    def predict(self, g) -> np.ndarray:
        probs, _ = network_forward(self.family, self.params, self.n_layers, graph_ops(g), self.alpha_weights())
        return probs

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- checkpoint blob ---------------------------------------------------
    # layout: b"HENSGNN\0" | u16 version | u32 header length | JSON header |
    #         each array as little-endian f8, in header order
    MAGIC = b"HENSGNN\x00"
    VERSION = 1

    def to_bytes(self) -> bytes:
        arrays = dict(self.params)
        if self.alpha_logits is not None:
            arrays["__alpha__"] = self.alpha_logits
        header = {
            "family": self.family.value,
            "hp": asdict(self.hp),
            "n_layers": self.n_layers,
            "in_dim": self.in_dim,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "best_val_acc": self.best_val_acc,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        buf.write(struct.pack("<HI", self.VERSION, len(hb)))
        buf.write(hb)
        for v in arrays.values():
            buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrainedModel":
        if blob[:8] != cls.MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<HI", blob, 8)
        if version != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 14
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
        alpha = arrays.pop("__alpha__", None)
        return cls(
            family=ModelFamily(header["family"]),
            hp=HyperParams(**header["hp"]),
            n_layers=header["n_layers"],
            params=arrays,
            in_dim=header["in_dim"],
            n_classes=header["n_classes"],
            seed=header["seed"],
            alpha_logits=alpha,
            best_val_acc=header["best_val_acc"],
            best_epoch=header["best_epoch"],
            epochs_run=header["epochs_run"],
        )


def forward_all_layers(model: TrainedModel, g, training: bool = False, rng: nk.Rng | None = None) -> list:
    """H^(0)..H^(L) of ``model`` on ``g`` (dropout applied when training)."""
    ops = graph_ops(g)
    if ops.x.shape[1] != model.in_dim:
        raise nk.ShapeError(f"model expects {model.in_dim} features, graph has {ops.x.shape[1]}")
    if training and rng is None:
        rng = nk.Rng(model.seed, "forward")
    _, cache = network_forward(
        model.family, model.params, model.n_layers, ops, model.alpha_weights(),
        dropout_rate=model.hp.dropout, rng=rng, training=training,
    )
    return cache.outputs


def predict_with_alpha(outputs, alpha, w: np.ndarray) -> np.ndarray:
    """softmax((sum_l alpha_l H^(l)) W).  ``alpha`` is AlphaParams or simplex weights."""
    weights = alpha.weights if isinstance(alpha, AlphaParams) else np.asarray(alpha, dtype=np.float64)
    return nk.softmax_rows(mix_layers(outputs, weights) @ w)


# ---------------------------------------------------------------------------
# training


def masked_onehot(labels, idx, n_classes: int) -> np.ndarray:
    """One-hot rows for ``idx`` only; labels elsewhere are never read."""
    y = np.zeros((labels.shape[0], n_classes))
    idx = np.asarray(idx, dtype=np.int64)
    y[idx, labels[idx]] = 1.0
    return y


@dataclass
class _Best:
    acc: float = -1.0
    loss: float = np.inf
    epoch: int = -1
    bad: int = 0

    def update(self, acc: float, loss: float, epoch: int) -> bool:
        if acc > self.acc or (acc == self.acc and loss < self.loss):
            self.acc, self.loss, self.epoch, self.bad = acc, loss, epoch, 0
            return True
        self.bad += 1
        return False


def train_model(
    family: ModelFamily,
    hp: HyperParams,
    g: GraphDataset,
    split: SplitSpec,
    seed: int,
    loss_mask=None,
    n_layers: int | None = None,
    deadline: float | None = None,
) -> TrainedModel:
    """Full-batch training with early stopping on validation accuracy.

    Ties in validation accuracy are resolved by validation loss.  The
    returned model holds the weights of the best epoch.
    """
    family = ModelFamily(family)
    ops = graph_ops(g)
    loss_mask = split.train if loss_mask is None else np.asarray(loss_mask, dtype=np.int64)
    if loss_mask.size == 0:
        raise ValueError("train_model: empty training mask")
    if split.val.size == 0:
        raise ValueError("train_model: empty validation set")
    if not np.isin(loss_mask, split.train).all():
        raise ValueError("loss_mask must be a subset of split.train")
    n_layers = hp.max_layers if n_layers is None else n_layers
    labels = g.labels
    y_train = masked_onehot(labels, loss_mask, g.n_classes)
    y_val = masked_onehot(labels, split.val, g.n_classes)
    val_labels = np.full(g.n_nodes, -1)
    val_labels[split.val] = labels[split.val]

    params = init_params(family, ops.x.shape[1], hp.hidden_size, g.n_classes, n_layers, nk.Rng(seed, "init"))
    drop_rng = nk.Rng(seed, "dropout")
    state = nk.AdamState(lr=hp.learning_rate, weight_decay=hp.weight_decay)
    alpha = np.zeros(n_layers)
    alpha[-1] = 1.0
    best = _Best()
    best_params = {k: v.copy() for k, v in params.items()}
    epoch = -1
    for epoch in range(hp.max_epochs):
        if deadline is not None and time.monotonic() > deadline:
            raise BudgetExceeded("time budget exhausted during training")
        probs, cache = network_forward(family, params, n_layers, ops, alpha, hp.dropout, drop_rng, training=True)
        loss, d_scores = nk.cross_entropy(probs, y_train, loss_mask)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"{family.value}: non-finite training loss at epoch {epoch}")
        grads, _ = network_backward(family, params, n_layers, ops, cache, d_scores)
        nk.adam_step(params, grads, state, lr=decayed_lr(hp.learning_rate, epoch))
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingDivergence(f"{family.value}: non-finite weights at epoch {epoch}")

        probs, _ = network_forward(family, params, n_layers, ops, alpha)
        val_loss, _ = nk.cross_entropy(probs, y_val, split.val)
        val_acc = nk.accuracy(probs, val_labels, split.val)
        if best.update(val_acc, val_loss, epoch):
            best_params = {k: v.copy() for k, v in params.items()}
        elif best.bad > hp.patience:
            break
    return TrainedModel(
        family=family,
        hp=hp,
        n_layers=n_layers,
        params=best_params,
        in_dim=ops.x.shape[1],
        n_classes=g.n_classes,
        seed=seed,
        best_val_acc=best.acc,
        best_epoch=best.epoch,
        epochs_run=epoch + 1,
    )


@dataclass
class GridRecord:
    learning_rate: float
    dropout: float
    val_acc: float
    epochs: int
    diverged: bool = False


@dataclass
class GridResult:
    hp: HyperParams
    model: TrainedModel
    records: list = field(default_factory=list)
    truncated: bool = False

    @property
    def epochs(self) -> int:
        return sum(r.epochs for r in self.records)


def grid_search(
    family: ModelFamily,
    g: GraphDataset,
    split: SplitSpec,
    seed: int,
    proxy: ProxyConfig | None = None,
    *,
    base_hp: HyperParams | None = None,
    n_layers: int = 2,
    lrs=LR_GRID,
    dropouts=DROPOUT_GRID,
    deadline: float | None = None,
) -> GridResult:
    """Exhaustive dropout x learning-rate search, best by validation accuracy.

    With ``proxy`` the hidden size is scaled by ``m_proxy`` and the loss mask
    is a ``d_proxy`` subsample of the training split.  Ties go to the smaller
    learning rate, then the smaller dropout.
    """
    base_hp = base_hp or HyperParams()
    hp0 = base_hp
    loss_mask = split.train
    if proxy is not None:
        hp0 = replace(base_hp, hidden_size=max(1, int(round(base_hp.hidden_size * proxy.m_proxy))))
        loss_mask = proxy_subsample(split, proxy.d_proxy, seed, labels=g.labels)
    best = None
    records = []
    truncated = False
    for lr in lrs:
        if truncated:
            break
        for dr in dropouts:
            if deadline is not None and best is not None and time.monotonic() > deadline:
                truncated = True
                break
            hp = replace(hp0, learning_rate=lr, dropout=dr)
            try:
                model = train_model(family, hp, g, split, seed, loss_mask=loss_mask, n_layers=n_layers)
            except TrainingDivergence as exc:
                warnings.warn(str(exc), stacklevel=2)
                records.append(GridRecord(lr, dr, 0.0, 0, diverged=True))
                continue
            records.append(GridRecord(lr, dr, model.best_val_acc, model.epochs_run))
            key = (model.best_val_acc, -lr, -dr)
            if best is None or key > best[0]:
                best = (key, hp, model)
    if best is None:
        raise TrainingDivergence(f"{ModelFamily(family).value}: every grid point diverged")
    return GridResult(hp=best[1], model=best[2], records=records, truncated=truncated)
