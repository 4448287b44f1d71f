import warnings
from collections import Counter

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hensgnn import numkern as nk
from hensgnn.graphio import (
    DatasetValidationError,
    GraphDataset,
    ParseError,
    ProxyConfig,
    identity_features,
    load_dataset,
    load_dataset_dir,
    normalize_adjacency,
    proxy_subsample,
    random_split,
    synthesize_sbm,
    write_dataset,
)
from hensgnn.models import HyperParams, ModelFamily, train_model


def _write(path, text):
    path.write_text(text)
    return path


def small_graph(n=10, seed=0, features=True):
    rng = np.random.default_rng(seed)
    a = sp.random(n, n, density=0.3, format="csr", random_state=seed)
    train = np.arange(0, n, 2)
    test = np.arange(1, n, 2)
    labels = np.full(n, -1)
    labels[train] = rng.integers(0, 3, train.size)
    return GraphDataset(
        n_nodes=n,
        adjacency=nk.as_csr(a),
        features=rng.normal(size=(n, 4)) if features else None,
        labels=labels,
        train_indices=train,
        test_indices=test,
        n_classes=3,
        time_budget_seconds=120,
        directed=True,
    )


def assert_same(a: GraphDataset, b: GraphDataset):
    assert a.n_nodes == b.n_nodes and a.n_classes == b.n_classes
    assert (a.adjacency != b.adjacency).nnz == 0
    assert a.adjacency.nnz == b.adjacency.nnz
    if a.features is None:
        assert b.features is None
    else:
        assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.train_indices, b.train_indices)
    assert np.array_equal(a.test_indices, b.test_indices)
    assert a.time_budget_seconds == b.time_budget_seconds


# -- loading


def test_three_edge_sample(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n" + "".join(f"{i}\ttest\n" for i in range(1, 63)))
    edges = _write(tmp_path / "edge.tsv", "src_idx\tdst_idx\tedge_weight\n0\t62\t1\n0\t40\t1\n1\t41\t2\n")
    labels = _write(tmp_path / "label.tsv", "node_index\tclass\n0\t0\n")
    g = load_dataset(node_file=nodes, edge_file=edges, label_file=labels)
    assert g.adjacency.nnz == 3
    assert g.adjacency[0, 62] == 1 and g.adjacency[0, 40] == 1 and g.adjacency[1, 41] == 2


def test_comma_delimiter_and_separate_node_files(tmp_path):
    tr = _write(tmp_path / "train.csv", "node_index\n0\n1\n")
    te = _write(tmp_path / "test.csv", "node_index\n2\n")
    edges = _write(tmp_path / "edge.csv", "src_idx,dst_idx,edge_weight\n0,1,0.5\n1,2,1.5\n")
    labels = _write(tmp_path / "label.csv", "node_index,class\n0,1\n1,0\n")
    g = load_dataset(edge_file=edges, label_file=labels, train_nodes_file=tr, test_nodes_file=te)
    assert g.n_nodes == 3 and g.n_classes == 2
    assert g.adjacency[1, 2] == 1.5
    assert g.labels.tolist() == [1, 0, -1]


def test_empty_edge_file(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n1\ttrain\n2\ttest\n")
    edges = _write(tmp_path / "edge.tsv", "src_idx\tdst_idx\tedge_weight\n")
    labels = _write(tmp_path / "label.tsv", "node_index\tclass\n0\t0\n1\t1\n")
    g = load_dataset(node_file=nodes, edge_file=edges, label_file=labels)
    assert g.adjacency.nnz == 0 and g.adjacency.shape == (3, 3)
    assert g.feature_matrix.shape == (3, 3)


def test_malformed_row_reports_line(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n1\ttest\n")
    edges = _write(tmp_path / "edge.tsv", "src_idx\tdst_idx\tedge_weight\n0\t1\t1\n0\tx\t1\n")
    with pytest.raises(ParseError, match=":3"):
        load_dataset(node_file=nodes, edge_file=edges)


def test_dangling_edge(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n1\ttest\n")
    edges = _write(tmp_path / "edge.tsv", "src_idx\tdst_idx\tedge_weight\n0\t5\t1\n")
    with pytest.raises(DatasetValidationError):
        load_dataset(node_file=nodes, edge_file=edges)


def test_duplicate_edges_summed(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttest\n1\ttest\n")
    edges = _write(tmp_path / "edge.tsv", "src_idx\tdst_idx\tedge_weight\n0\t1\t1\n0\t1\t2.5\n")
    with pytest.warns(UserWarning, match="duplicate"):
        g = load_dataset(node_file=nodes, edge_file=edges)
    assert g.adjacency[0, 1] == 3.5 and g.adjacency.nnz == 1


def test_metadata_key_value(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n1\ttest\n")
    meta = _write(tmp_path / "meta.tsv", "time_budget\t300\nn_class\t4\n")
    labels = _write(tmp_path / "label.tsv", "node_index\tclass\n0\t3\n")
    g = load_dataset(node_file=nodes, label_file=labels, metadata_file=meta)
    assert g.time_budget_seconds == 300 and g.n_classes == 4


def test_metadata_tabular_form(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n1\ttest\n")
    meta = _write(tmp_path / "meta.tsv", "name\ttime_budget\tn_class\nx\t50\t2\n")
    labels = _write(tmp_path / "label.tsv", "node_index\tclass\n0\t1\n")
    g = load_dataset(node_file=nodes, label_file=labels, metadata_file=meta)
    assert g.time_budget_seconds == 50 and g.n_classes == 2


def test_label_out_of_range_rejected(tmp_path):
    nodes = _write(tmp_path / "node.tsv", "node_index\trole\n0\ttrain\n1\ttest\n")
    meta = _write(tmp_path / "meta.tsv", "n_class\t2\n")
    labels = _write(tmp_path / "label.tsv", "node_index\tclass\n0\t5\n")
    with pytest.raises(DatasetValidationError):
        load_dataset(node_file=nodes, label_file=labels, metadata_file=meta)


def test_overlapping_train_test_rejected():
    with pytest.raises(DatasetValidationError):
        GraphDataset(
            n_nodes=2, adjacency=sp.csr_matrix((2, 2)), features=None, labels=np.array([0, -1]),
            train_indices=np.array([0]), test_indices=np.array([0, 1]), n_classes=1,
        )


def test_identity_features_width():
    f = identity_features(5)
    assert np.array_equal(f, np.eye(5))
    f = identity_features(3000)
    assert f.shape == (3000, 1024) and np.all(f.sum(axis=1) == 1)


@pytest.mark.parametrize("features", [True, False])
def test_round_trip_ten_nodes(tmp_path, features):
    g = small_graph(10, features=features)
    write_dataset(g, tmp_path / "d")
    assert_same(g, load_dataset_dir(tmp_path / "d"))


@settings(max_examples=15, deadline=None)
@given(n=st.integers(2, 30), seed=st.integers(0, 10_000))
def test_round_trip_property(tmp_path_factory, n, seed):
    g = small_graph(n, seed=seed, features=seed % 2 == 0)
    d = tmp_path_factory.mktemp("rt")
    write_dataset(g, d)
    assert_same(g, load_dataset_dir(d))


# -- normalization


def test_normalize_one_node():
    assert normalize_adjacency(sp.csr_matrix((1, 1))).toarray().tolist() == [[1.0]]


def test_normalize_single_edge():
    a = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(normalize_adjacency(a).toarray(), 0.5)


def test_normalize_directed_symmetrizes():
    a = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert np.allclose(normalize_adjacency(a, directed=True).toarray(), 0.5)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_normalize_properties(n, seed):
    a = sp.random(n, n, density=0.2, format="csr", random_state=seed)
    a = nk.as_csr(a + a.T)
    an = normalize_adjacency(a)
    assert abs(an - an.T).max() < 1e-12 if an.nnz else True
    pattern = nk.as_csr(a + sp.identity(n))
    pattern.data[:] = 1
    got = an.copy()
    got.data[:] = 1
    assert (got != pattern).nnz == 0
    assert np.all(an.data > 0) and np.all(an.data <= 1 + 1e-12)


# -- splits


def test_random_split_sizes_and_determinism():
    labeled = np.arange(100)
    s1 = random_split(labeled, 0.2, seed=3)
    s2 = random_split(labeled, 0.2, seed=3)
    assert s1.train.size == 80 and s1.val.size == 20
    assert np.intersect1d(s1.train, s1.val).size == 0
    assert np.array_equal(s1.labeled, labeled)
    assert np.array_equal(s1.train, s2.train) and np.array_equal(s1.val, s2.val)


def test_random_split_stratified_exhaustive():
    labels = np.repeat(np.arange(5), 20)
    for seed in range(10):
        s = random_split(np.arange(100), 0.2, seed=seed, labels=labels)
        per = Counter(labels[s.val])
        assert all(abs(per[c] - 4) <= 1 for c in range(5))


def test_random_split_singleton_class_stays_in_train():
    labels = np.array([0, 0, 0, 0, 1])
    with pytest.warns(UserWarning):
        s = random_split(np.arange(5), 0.5, seed=0, labels=labels)
    assert 4 in s.train


def test_proxy_subsample():
    labels = np.repeat(np.arange(4), 25)
    from hensgnn.graphio import SplitSpec

    split = SplitSpec(train=np.arange(100), val=np.array([], dtype=np.int64))
    assert np.array_equal(proxy_subsample(split, 1.0, labels=labels), split.train)
    sub = proxy_subsample(split, 0.30, seed=1, labels=labels)
    assert sub.size == 30
    assert set(sub) <= set(split.train)
    per = Counter(labels[sub])
    assert all(abs(per[c] - 7.5) <= 1 for c in range(4))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 80), d=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
def test_proxy_subsample_subset_and_size(n, d, seed):
    from hensgnn.graphio import SplitSpec

    labels = np.random.default_rng(seed).integers(0, 3, n)
    split = SplitSpec(train=np.arange(n), val=np.array([], dtype=np.int64))
    sub = proxy_subsample(split, d, seed=seed, labels=labels)
    assert set(sub) <= set(split.train)
    assert sub.size == int(np.ceil(d * n - 1e-9))


def test_proxy_config_validation():
    assert ProxyConfig() == ProxyConfig(0.30, 6, 0.50)
    with pytest.raises(nk.ConfigError):
        ProxyConfig(d_proxy=0.0)
    with pytest.raises(nk.ConfigError):
        ProxyConfig(b_proxy=0)


# -- synthetic graphs


def test_sbm_no_inter_block_edges():
    g = synthesize_sbm(3, 20, 0.3, 0.0, seed=1)
    coo = g.adjacency.tocoo()
    assert np.all(g.gold_labels[coo.row] == g.gold_labels[coo.col])


def test_sbm_deterministic():
    a = synthesize_sbm(3, 20, 0.3, 0.05, seed=4)
    b = synthesize_sbm(3, 20, 0.3, 0.05, seed=4)
    assert_same(a, b)


def test_sbm_bad_probabilities():
    with pytest.raises(nk.ConfigError):
        synthesize_sbm(2, 10, 1.5, 0.1)
    with pytest.raises(nk.ConfigError):
        synthesize_sbm(2, 10, 0.1, 0.2)


def test_sbm_gcn_reaches_95_percent():
    g = synthesize_sbm(4, 50, 0.2, 0.01, seed=0)
    split = random_split(g.train_indices, 0.2, seed=0, labels=g.labels)
    m = train_model(ModelFamily.GCN, HyperParams(), g, split, seed=0, n_layers=2)
    p = m.predict(g)
    assert nk.accuracy(p, g.gold_labels, g.test_indices) >= 0.95
