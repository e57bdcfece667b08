import numpy as np
import pytest

from dsgas import numkernel as nk
from dsgas.graphio import (FactorSpec, Graph, Variant, batch_graphs, default_factor_specs,
                           make_synthetic_factors, parse_node_dataset, parse_tudataset,
                           write_tudataset)
from dsgas.numkernel import Tensor
from dsgas.ops import AGG_OPS, apply_agg, init_weights
from tests.conftest import write_files

# triangle (nodes 1-3) and a single edge (nodes 4-5), both directions listed as TUDataset does
TINY = {
    "T_A.txt": "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n",
    "T_graph_indicator.txt": "1\n1\n1\n2\n2\n",
    "T_graph_labels.txt": "1\n-1\n",
    "T_node_labels.txt": "0\n1\n0\n2\n2\n",
}


def test_tiny_fixture_counts(tmp_path):
    ds = parse_tudataset(write_files(tmp_path, TINY), "T")
    assert [g.num_nodes for g in ds.graphs] == [3, 2]
    assert [g.num_edges for g in ds.graphs] == [3, 1]
    assert ds.num_classes == 2 and ds.num_features == 3
    assert [g.label for g in ds.graphs] == [1, 0]
    np.testing.assert_array_equal(ds.graphs[1].x, [[0, 0, 1], [0, 0, 1]])
    # adjacency is symmetric
    dense = ds.graphs[0].adj.to_dense()
    np.testing.assert_array_equal(dense, dense.T)


def test_attributes_take_precedence_and_constant_fallback(tmp_path):
    files = dict(TINY)
    files["T_node_attributes.txt"] = "0.5, 1\n1, 1\n2, 1\n3, 1\n4, 1\n"
    ds = parse_tudataset(write_files(tmp_path / "a", files), "T")
    assert ds.num_features == 2
    files.pop("T_node_attributes.txt")
    files.pop("T_node_labels.txt")
    ds = parse_tudataset(write_files(tmp_path / "b", files), "T")
    assert ds.num_features == 1 and np.all(ds.graphs[0].x == 1)
    deg = parse_tudataset(tmp_path / "b", "T", degree_features=True)
    np.testing.assert_array_equal(deg.graphs[0].x.argmax(1), [2, 2, 2])


def test_missing_file_is_named(tmp_path):
    files = dict(TINY)
    files.pop("T_graph_labels.txt")
    with pytest.raises(FileNotFoundError, match="T_graph_labels.txt"):
        parse_tudataset(write_files(tmp_path, files), "T")


def test_empty_indicator(tmp_path):
    files = dict(TINY, **{"T_graph_indicator.txt": ""})
    with pytest.raises(ValueError, match="empty"):
        parse_tudataset(write_files(tmp_path, files), "T")


def test_dangling_index_reports_line(tmp_path):
    files = dict(TINY, **{"T_A.txt": "1, 2\n2, 9\n"})
    with pytest.raises(ValueError, match="line 2"):
        parse_tudataset(write_files(tmp_path, files), "T")


def test_duplicate_edges_are_merged(tmp_path):
    files = dict(TINY, **{"T_A.txt": TINY["T_A.txt"] + "1, 2\n1, 2\n"})
    ds = parse_tudataset(write_files(tmp_path, files), "T")
    assert ds.graphs[0].num_edges == 3


def test_mutag_matches_table(mutag_dir):
    ds = parse_tudataset(mutag_dir, "MUTAG")
    assert (len(ds), ds.num_features, ds.num_classes) == (188, 7, 2)
    stats = ds.stats()
    assert abs(stats["avg_nodes"] - 17.93) < 0.01
    assert stats["avg_edges_directed"] == pytest.approx(2 * stats["avg_edges_undirected"], rel=1e-9)
    assert ds.label_coverage() == 1.0


def test_parse_is_idempotent(mutag_dir):
    a, b = parse_tudataset(mutag_dir, "MUTAG"), parse_tudataset(mutag_dir, "MUTAG")
    for ga, gb in zip(a.graphs, b.graphs):
        assert np.array_equal(ga.x, gb.x) and np.array_equal(ga.edges, gb.edges) and ga.label == gb.label


def test_node_dataset(tmp_path):
    write_files(tmp_path, {"e.txt": "0 1\n1 2\n", "f.txt": "1 0\n0 1\n1 1\n", "l.txt": "0\n1\n0\n"})
    ds = parse_node_dataset(tmp_path / "e.txt", tmp_path / "f.txt", tmp_path / "l.txt")
    assert len(ds) == 1 and ds.graphs[0].num_nodes == 3 and ds.task == "node_level"
    np.testing.assert_array_equal(ds.labels(), [0, 1, 0])
    write_files(tmp_path, {"f4.txt": "1\n2\n3\n4\n"})
    with pytest.raises(ValueError, match="differ"):
        parse_node_dataset(tmp_path / "e.txt", tmp_path / "f4.txt", tmp_path / "l.txt")


def test_cora_node_dataset(cora_dir):
    ds = parse_node_dataset(cora_dir / "edges.txt", cora_dir / "features.txt", cora_dir / "labels.txt")
    assert ds.graphs[0].num_nodes == 2708 and ds.num_classes == 7


def test_synthetic_label_arithmetic_and_balance():
    ds = make_synthetic_factors(103, seed=3)
    assert ds.num_classes == 4
    counts = np.bincount(ds.labels(), minlength=4)
    assert counts.max() - counts.min() <= 1
    for g in ds.graphs:
        a, b = g.meta["variants"]
        assert g.label == 2 * a + b


def test_synthetic_determinism():
    a, b = make_synthetic_factors(20, seed=9), make_synthetic_factors(20, seed=9)
    for ga, gb in zip(a.graphs, b.graphs):
        assert np.array_equal(ga.x, gb.x) and np.array_equal(ga.edges, gb.edges)
    c = make_synthetic_factors(20, seed=10)
    assert any(not np.array_equal(ga.x, gc.x) for ga, gc in zip(a.graphs, c.graphs))


def test_synthetic_rule_classifier_oracle():
    """Each factor's feature column separates its own variants exactly and nothing else."""
    specs = default_factor_specs()
    ds = make_synthetic_factors(200, specs, seed=4)
    truth = np.array([g.meta["variants"] for g in ds.graphs])
    for f, spec in enumerate(specs):
        max_variant = [v.signal for v in spec.variants].index("max")
        rule = np.array([int(g.x[:, f].max() > 2 * spec.level) for g in ds.graphs])
        guess = np.where(rule == 1, max_variant, 1 - max_variant)
        assert np.mean(guess == truth[:, f]) == 1.0
        other = truth[:, 1 - f]
        assert abs(np.mean(guess == other) - 0.5) < 0.1


def test_synthetic_invalid_specs():
    with pytest.raises(ValueError):
        make_synthetic_factors(10, default_factor_specs()[:1])
    with pytest.raises(ValueError):
        FactorSpec((Variant("ring", "mean"),))
    with pytest.raises(ValueError):
        Variant("hexagon", "mean")


def test_write_then_parse_round_trip(tmp_path):
    ds = make_synthetic_factors(12, seed=1)
    write_tudataset(ds, tmp_path, "S")
    back = parse_tudataset(tmp_path, "S")
    assert len(back) == 12 and back.num_features == ds.num_features
    for ga, gb in zip(ds.graphs, back.graphs):
        np.testing.assert_array_equal(ga.x, gb.x)
        np.testing.assert_array_equal(ga.edges, gb.edges)
        assert ga.label == gb.label


def test_batch_segments_and_offsets():
    g1 = Graph(np.ones((3, 2)), [(0, 1), (1, 2)])
    g2 = Graph(np.ones((2, 2)), [(0, 1)])
    b = batch_graphs([g1, g2])
    np.testing.assert_array_equal(b.segments.ids, [0, 0, 0, 1, 1])
    np.testing.assert_array_equal(b.offsets, [0, 3])
    single = batch_graphs([g1])
    np.testing.assert_array_equal(single.adj.to_dense(), g1.adj.to_dense())
    assert not np.any(b.adj.to_dense()[:3, 3:]) and not np.any(b.adj.to_dense()[3:, :3])
    with pytest.raises(ValueError):
        batch_graphs([g1, Graph(np.ones((2, 3)), [])])


@pytest.mark.parametrize("kind", AGG_OPS)
def test_batching_commutes_with_message_passing(kind):
    ds = make_synthetic_factors(4, seed=2)
    rng = np.random.default_rng(0)
    w = init_weights(kind, ds.num_features, 5, rng)
    batch = batch_graphs(ds.graphs)
    out = apply_agg(kind, batch.x, batch.adj, w).data
    for g, off in zip(ds.graphs, batch.offsets):
        alone = apply_agg(kind, Tensor(g.x), g.adj, w).data
        np.testing.assert_allclose(out[off:off + g.num_nodes], alone, atol=1e-10)


def test_spmm_on_batch_equals_per_graph():
    ds = make_synthetic_factors(5, seed=6)
    batch = batch_graphs(ds.graphs)
    out = nk.spmm(batch.adj, batch.x).data
    ref = np.concatenate([g.adj.to_dense() @ g.x for g in ds.graphs])
    np.testing.assert_allclose(out, ref, atol=1e-10)
