"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a PASS/FAIL line that is echoed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from dsgas import numkernel as nk
from dsgas.archsearch import (ArchAugSpec, arch_discrimination_probs, augment_architecture,
                              contrastive_search_loss)
from dsgas.checks import TOLERANCE, gradcheck_suite
from dsgas.disentangle import factor_weighted_loss, infer_factor_probs
from dsgas.evaluate import ProbeProtocol, linear_probe
from dsgas.graphio import FactorSpec, batch_graphs, default_factor_specs, make_synthetic_factors, parse_tudataset
from dsgas.numkernel import SparseAdj, Tensor
from dsgas.ops import apply_agg
from dsgas.pretext import nt_xent
from dsgas.supernet import SuperNet, SupernetSpec, mix
from dsgas.trainer import CHECKPOINT_NAME, SearchConfig, run_unsupervised_search
from tests.conftest import ACCEPTANCE
from tests.test_archsearch import scalar_probs
from tests.test_disentangle import scalar_posterior
from tests.test_pretext import scalar_nt_xent

# planted-factor benchmark for criteria 6 and 7: weaker signals and heavier noise than the
# generator defaults, where a single shared architecture is already at ceiling
ABLATION_SEEDS = range(5)
ABLATION = dict(data_format="synthetic", synthetic_graphs=400, synthetic_noise=0.5, hidden=16,
                epochs=60, lr_alpha=1.0)
ABLATION_LEVEL = 0.5


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def clean_digest(net, batch):
    return net.forward(batch).Z.data.tobytes()


# ---------------------------------------------------------------- 1

def test_criterion_1_gradients():
    start = time.perf_counter()
    cases = gradcheck_suite(range(10), max_coords=2)
    elapsed = time.perf_counter() - start
    worst = max(c.max_rel_error for c in cases)
    checked = sum(c.loss_w.checked + c.loss_alpha.checked for c in cases)
    record(1, worst < TOLERANCE and elapsed < 60,
           f"max rel. error {worst:.2e} < {TOLERANCE:g} over 10 seeds ({checked} coords), {elapsed:.1f} s < 60 s")


# ---------------------------------------------------------------- 2

def test_criterion_2_oracles():
    rng = np.random.default_rng(0)
    errors = {}

    data = make_synthetic_factors(4, seed=0)
    net = SuperNet(SupernetSpec(data.num_features, 6, 2, 2), seed=0)
    for t in net.theta.values():
        t.data[...] = rng.standard_normal(t.shape)
    g = data.graphs[0]
    outs = [apply_agg(op, Tensor(g.x), g.adj, net.op_weights["agg0"][op]) for op in net.spec.agg_ops]
    alpha = net.alphas()["agg0"]
    errors["mixed op"] = max(
        np.abs(mix(alpha, k, outs).data - sum(alpha.data[k, i] * o.data for i, o in enumerate(outs))).max()
        for k in range(2))

    edges = rng.integers(0, 5, (8, 2))
    adj = SparseAdj(5, edges)
    x = rng.standard_normal((5, 3))
    errors["spmm"] = np.abs(nk.spmm(adj, Tensor(x)).data - adj.to_dense() @ x).max()

    z = [rng.standard_normal((3, 2)) for _ in range(2)]
    enc, c = rng.standard_normal((2, 2)), rng.standard_normal((2, 4))
    post = infer_factor_probs([Tensor(a) for a in z], Tensor(enc), Tensor(c)).data
    errors["posterior"] = np.abs(post - scalar_posterior(z, enc, c)).max()

    za = [rng.standard_normal((3, 2)) for _ in range(2)]
    probs = arch_discrimination_probs([Tensor(a) for a in z], [Tensor(a) for a in za]).data
    errors["arch probs"] = np.abs(probs - scalar_probs(z, za, "architecture")).max()
    oracle_loss = sum(-math.log(sum(row) / len(row)) for row in probs.tolist())
    errors["L_alpha"] = abs(float(contrastive_search_loss(Tensor(probs)).data) - oracle_loss)

    z1, z2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    errors["NT-Xent"] = np.abs(nt_xent(Tensor(z1), Tensor(z2), 0.5, norm_floor=0.0).data
                               - scalar_nt_xent(z1, z2, 0.5)).max()
    limits = {"mixed op": 1e-10, "spmm": 1e-10}
    ok = all(err <= limits.get(name, 1e-9) for name, err in errors.items())
    record(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()))


# ---------------------------------------------------------------- 3

def test_criterion_3_invariants():
    rng = np.random.default_rng(3)
    worst_row = 0.0
    for _ in range(50):
        K, N, d = int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
        z = [Tensor(rng.standard_normal((N, d)) * 3) for _ in range(K)]
        p = infer_factor_probs(z, Tensor(rng.standard_normal((K, d))), Tensor(rng.standard_normal((K, 2 * d))))
        worst_row = max(worst_row, np.abs(p.data.sum(1) - 1).max())

    jensen_ok = 0
    for _ in range(100):
        N, K = int(rng.integers(1, 10)), int(rng.integers(1, 6))
        post = rng.dirichlet(np.ones(K), size=N)
        q = rng.uniform(1e-4, 1.0, (N, K))
        upper = float(factor_weighted_loss(Tensor(post), Tensor(-np.log(q))).data)
        lower = float(np.mean(-np.log(np.sum(post * q, axis=1))))
        jensen_ok += upper >= lower - 1e-12

    taus = rng.uniform(1 / 1.1, 1.1, 200)
    argmax_ok = 0
    for tau in taus:
        x = rng.standard_normal((4, 7)) * 5
        argmax_ok += np.array_equal(nk.softmax_rows(Tensor(x), float(tau)).data.argmax(1), x.argmax(1))
    ok = worst_row <= 1e-9 and jensen_ok == 100 and argmax_ok == len(taus)
    record(3, ok, f"row-sum error {worst_row:.1e}, Jensen {jensen_ok}/100, argmax {argmax_ok}/{len(taus)} τ")


# ---------------------------------------------------------------- 4

def test_criterion_4_parameter_sharing():
    counts = {K: SuperNet(SupernetSpec(7, 32, 3, K), seed=0).num_weight_parameters() for K in (1, 4)}
    record(4, counts[1] == counts[4], f"weights K=1 {counts[1]}, K=4 {counts[4]}")


# ---------------------------------------------------------------- 5

def fwd_bwd_seconds(net, batch, target):
    start = time.perf_counter()
    with nk.Tape() as tape:
        loss = nk.sum(net.forward(batch).Z * target)
    tape.backward(loss)
    return time.perf_counter() - start


def test_criterion_5_scaling(mutag_dir):
    ds = parse_tudataset(mutag_dir, "MUTAG")
    batch = batch_graphs(ds.graphs[:128])
    rng = np.random.default_rng(5)
    medians = {}
    for K in (1, 4):
        net = SuperNet(SupernetSpec(ds.num_features, 32, 3, K), seed=0)
        for t in net.theta.values():
            t.data[...] = rng.standard_normal(t.shape)
        target = Tensor(rng.standard_normal((batch.num_graphs, 32 * K)))
        fwd_bwd_seconds(net, batch, target)  # warm-up
        medians[K] = float(np.median([fwd_bwd_seconds(net, batch, target) for _ in range(10)]))
    ratio = medians[4] / medians[1]
    record(5, ratio <= 4.5, f"K=4/K=1 forward+backward {ratio:.2f}x ≤ 4.5x "
                            f"({1e3 * medians[1]:.0f} ms vs {1e3 * medians[4]:.0f} ms)")


# ---------------------------------------------------------------- 6, 7

@pytest.fixture(scope="module")
def ablation_runs():
    specs = [FactorSpec(f.variants, f.min_nodes, f.max_nodes, ABLATION_LEVEL) for f in default_factor_specs()]
    runs = {}
    start = time.perf_counter()
    for seed in ABLATION_SEEDS:
        for K in (1, 2):
            cfg = SearchConfig(**ABLATION, synthetic_factors=specs, synthetic_seed=seed, num_factors=K, seed=seed)
            result = run_unsupervised_search(cfg)
            acc = linear_probe(result.embeddings, result.labels, ProbeProtocol(repetitions=1, seed=seed)).mean
            runs[seed, K] = (result, acc)
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_ablation(ablation_runs):
    runs, elapsed = ablation_runs
    full = np.mean([runs[s, 2][1] for s in ABLATION_SEEDS])
    single = np.mean([runs[s, 1][1] for s in ABLATION_SEEDS])
    gap = 100 * (full - single)
    per_seed = " ".join(f"{100 * (runs[s, 2][1] - runs[s, 1][1]):+.1f}" for s in ABLATION_SEEDS)
    record(6, gap >= 5 and elapsed < 1800,
           f"K=2 {100 * full:.1f}% vs K=1 {100 * single:.1f}%, gap {gap:+.1f} ≥ 5 points "
           f"(per seed {per_seed}), {elapsed / 60:.1f} min < 30")


@pytest.mark.slow
def test_criterion_7_disentanglement(ablation_runs):
    runs, _ = ablation_runs
    sims = [(runs[s, 2][0].alpha_similarity[0], runs[s, 2][0].alpha_similarity[-1]) for s in ABLATION_SEEDS]
    fell = sum(end < begin for begin, end in sims)
    record(7, fell == len(sims), f"α similarity fell in {fell}/{len(sims)} seeds "
                                 + " ".join(f"{b:.4f}->{e:.4f}" for b, e in sims))


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_mutag(mutag_dir, tmp_path):
    ds = parse_tudataset(mutag_dir, "MUTAG")
    shape = (len(ds), ds.num_features, ds.num_classes)
    cfg = SearchConfig(data_path=str(mutag_dir), data_name="MUTAG", output_dir=str(tmp_path))
    result = run_unsupervised_search(cfg, dataset=ds)
    report = linear_probe(result.embeddings, result.labels, ProbeProtocol())
    ok = shape == (188, 7, 2) and result.wallclock_s < 1200 and report.mean >= 0.75
    record(8, ok, f"MUTAG {shape}, {cfg.epochs} epochs in {result.wallclock_s / 60:.1f} min < 20, "
                  f"probe {report} ≥ 75")


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism_and_resume(tmp_path):
    base = dict(data_format="synthetic", synthetic_graphs=40, hidden=8, num_factors=2, batch_size=16,
                num_negatives=16)
    a = run_unsupervised_search(SearchConfig(**base, epochs=6))
    b = run_unsupervised_search(SearchConfig(**base, epochs=6))
    same = a.embeddings.tobytes() == b.embeddings.tobytes() and a.loss_alpha == b.loss_alpha
    run_unsupervised_search(SearchConfig(**base, epochs=3, output_dir=str(tmp_path)))
    resumed = run_unsupervised_search(SearchConfig(**base, epochs=6, output_dir=str(tmp_path)),
                                      resume=tmp_path / CHECKPOINT_NAME)
    exact = resumed.embeddings.tobytes() == a.embeddings.tobytes() and resumed.loss_w == a.loss_w
    record(9, same and exact, f"repeat run bit-identical {same}, resumed 3+3 epochs bit-identical {exact}")


# ---------------------------------------------------------------- 10

def test_criterion_10_augmentation_safety():
    data = make_synthetic_factors(8, seed=10)
    net = SuperNet(SupernetSpec(data.num_features, 8, 2, 2), seed=1)
    rng = np.random.default_rng(10)
    for t in net.theta.values():
        t.data[...] = rng.standard_normal(t.shape)
    batch = batch_graphs(data.graphs)
    before = clean_digest(net, batch)
    restored = 0
    kinds = ("alpha", "weight", "embed", "compose")
    for kind in kinds:
        for seed in range(5):
            net.forward(batch, augment_architecture(net, ArchAugSpec(kind, 1.5, 0.3, 0.3), seed))
            restored += clean_digest(net, batch) == before
    identity = sum(
        net.forward(batch, augment_architecture(net, ArchAugSpec(kind, 1.0, 0.0, 0.0), 3)).Z.data.tobytes() == before
        for kind in kinds)
    ok = restored == 5 * len(kinds) and identity == len(kinds)
    record(10, ok, f"clean forward unchanged after {restored}/{5 * len(kinds)} augmented passes, "
                   f"zero-strength views exact {identity}/{len(kinds)}")
