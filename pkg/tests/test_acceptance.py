"""Acceptance checks, one test per numbered criterion.

Each test records a one-line verdict that is echoed in the terminal summary.
Run directly (``python3 tests/test_acceptance.py``) to get just these lines.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import CRITERIA  # noqa: E402
from oracles import entropy_mp, expected_depth, leaf_depths, loss_by_nodes  # noqa: E402

from adaptok.code_tree import (CodeTree, Objective, SearchMode, check_theorem3_bound,  # noqa: E402
                               depth_profile, expected_length, huffman, search_optimal_tree,
                               theorem2_gap, tree_loss)
from adaptok.codec import bpp16, deserialize, serialize_indices  # noqa: E402
from adaptok.compressor import TokenMask  # noqa: E402
from adaptok.fsq import FsqConfig, dequantize_digits, digits_to_index, index_to_digits, quantize_digits  # noqa: E402
from adaptok.model import grad_check  # noqa: E402
from adaptok.router import beta_from_bpp16, route_by_search  # noqa: E402
from adaptok.source import DiscreteSource, make_dataset  # noqa: E402
from adaptok.trainer import (TrainConfig, evaluate, evaluate_fixed, evaluate_search,  # noqa: E402
                             full_length_mse, loss_curves, oracle_mse, train)

DYADIC = DiscreteSource((0.5, 0.25, 0.125, 0.125))


def record(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[str(key)] = line
    print(line)
    assert ok, line


def random_tree(rng, n):
    nodes = list(range(n))
    while len(nodes) > 1:
        i, j = sorted(rng.choice(len(nodes), size=2, replace=False))
        b, a = nodes.pop(j), nodes.pop(i)
        nodes.append([a, b])
    return nodes[0]


def test_criterion_1_huffman_sandwich():
    rng = np.random.default_rng(1)
    sources = [DiscreteSource.from_counts(rng.uniform(0.001, 1.0, size=rng.integers(4, 65)))
               for _ in range(1000)]
    t0 = time.perf_counter()
    lengths = {c: [expected_length(huffman(s, c), s) for s in sources] for c in (2, 3)}
    elapsed = time.perf_counter() - t0
    violations = 0
    for c, ls in lengths.items():
        for s, length in zip(sources, ls):
            h = entropy_mp(s.probs, c)
            violations += not (h - 1e-12 <= length < h + 1)
    record(1, violations == 0 and elapsed < 5,
           f"{violations} violations over 1000 sources x arity 2,3; {elapsed:.2f}s")


def test_criterion_2_four_point_example():
    t0 = time.perf_counter()
    huff = huffman(DYADIC, 2)
    e_len = expected_length(huff, DYADIC)
    profile = sorted(huff.depths().tolist())
    best = search_optimal_tree(DYADIC, Objective.UNIFORM_LOSS, SearchMode.EXHAUSTIVE)
    balanced, chain = CodeTree(2, [[0, 1], [2, 3]]), CodeTree(2, [0, [1, [2, 3]]])
    l_bal, l_chain, l_best = (tree_loss(t, DYADIC) for t in (balanced, chain, best))
    elapsed = time.perf_counter() - t0

    p = DYADIC.probs
    ref_bal = loss_by_nodes([[0, 1], [2, 3]], p)
    ref_chain = loss_by_nodes([0, [1, [2, 3]]], p)
    ref_best = loss_by_nodes(best.to_list(), p)
    best_depths = set(leaf_depths(best.to_list()).values())
    ok = (e_len == 1.75 and profile == [1, 2, 3, 3]
          and best_depths == {2} and abs(expected_depth(best.to_list(), p) - 2.0) < 1e-12
          and abs(l_bal - ref_bal) < 1e-9 and abs(l_bal - 0.93872) < 1e-5
          and abs(l_chain - ref_chain) < 1e-9 and abs(l_chain - 1.0) < 1e-9
          and abs(l_best - ref_best) < 1e-9 and l_best <= l_bal < l_chain and elapsed < 1)
    record(2, ok, f"E[len]={e_len} depths={profile}; optimum {best.to_list()} E[depth]=2 "
                  f"loss {l_best:.5f}; balanced {l_bal:.5f} < chain {l_chain:.5f}; {elapsed:.3f}s")


def test_criterion_3_depth_entropy_ratio_trend():
    t0 = time.perf_counter()
    rows = theorem2_gap(3, exhaustive_max=3)
    elapsed = time.perf_counter() - t0
    ratios = [r.ratio for r in rows]
    ok = (abs(ratios[0] - 1.0) < 1e-12 and ratios[0] < ratios[1] < ratios[2]
          and not any(r.heuristic for r in rows) and elapsed < 60)
    record(3, ok, "ratios " + ", ".join(f"{r:.6f}" for r in ratios) + f"; {elapsed:.2f}s")


def test_criterion_4_depth_profile_identities():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        src = DiscreteSource.from_counts(rng.uniform(0.01, 1.0, size=n))
        nested = random_tree(rng, n)
        prof = depth_profile(CodeTree(2, nested), src)
        worst = max(worst, abs(prof.total() - entropy_mp(src.probs, 2)),
                    abs(tree_loss(CodeTree(2, nested), src) - loss_by_nodes(nested, src.probs)),
                    abs(prof.weighted() - sum(d * f for d, f in enumerate(prof.f))))
    record(4, worst < 1e-9, f"max deviation {worst:.2e} over 100 (tree, source) pairs")


def test_criterion_5_length_bound_checker():
    rng = np.random.default_rng(5)
    exact_dev = 0.0
    for _ in range(50):
        src = DiscreteSource.from_counts(rng.uniform(0.01, 1.0, size=rng.integers(2, 20)))
        arity = int(rng.integers(2, 4))
        beta = check_theorem3_bound(src, 1e300, None, arity).min_beta * rng.uniform(1.0, 4.0)
        res = check_theorem3_bound(src, beta, None, arity)
        exact_dev = max(exact_dev, abs(res.lhs - beta), abs(res.rhs - beta))
    fails = 0
    for _ in range(100):
        n = int(rng.integers(2, 20))
        src = DiscreteSource.from_counts(rng.uniform(0.01, 1.0, size=n))
        gap = rng.uniform(0.001, 2.0, size=n)
        beta = check_theorem3_bound(src, 1e300, gap).min_beta * rng.uniform(1.0, 4.0)
        res = check_theorem3_bound(src, beta, gap)
        fails += not (res.lhs <= res.rhs + 1e-9)
    record(5, exact_dev < 1e-9 and fails == 0,
           f"exact case max |lhs-beta|,|rhs-beta| = {exact_dev:.1e}; {fails}/100 gap cases fail")


def test_criterion_6_fsq():
    cfg = FsqConfig((8, 8, 8, 5, 5, 5))
    idx = np.arange(cfg.codebook_size)
    digits = index_to_digits(idx, cfg)
    bijective = (np.array_equal(digits_to_index(digits, cfg), idx)
                 and len({tuple(d) for d in digits.tolist()}) == 64000)
    rng = np.random.default_rng(6)
    z = rng.uniform(-1.0, 1.0, size=(100_000, cfg.dim))
    err = np.abs(dequantize_digits(quantize_digits(z, cfg), cfg) - z)
    bound = 1.0 / (cfg.as_array() - 1)
    worst = float((err / bound).max())
    record(6, bijective and worst <= 1.0 + 1e-12,
           f"bijection over {cfg.codebook_size} codes: {bijective}; max error / (1/(L-1)) = {worst:.6f}")


def test_criterion_7_bitstream():
    cfg = FsqConfig()
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        n_max = int(rng.integers(1, 300))
        kept = rng.random(n_max) < rng.random()
        if not kept.any():
            kept[rng.integers(n_max)] = True
        ind = rng.integers(0, cfg.codebook_size, size=int(kept.sum()))
        blob = serialize_indices(ind, TokenMask(kept), cfg)
        ts = deserialize(blob)
        again = serialize_indices(ts.indices, ts.mask, cfg)
        bad += not (np.array_equal(ts.mask.kept, kept) and np.array_equal(ts.indices, ind) and again == blob)
    overhead = max(abs(bpp16(n, 64) - bpp16(n, 64, include_mask=False) - 1 / 16) for n in range(65))
    worked = bpp16(0.5 * 9216, 9216)
    beta = beta_from_bpp16(0.5625, 9216)
    ok = bad == 0 and overhead == 0.0 and worked == 0.5625 and beta == 4608
    record(7, ok, f"{bad}/1000 roundtrip mismatches; mask overhead deviation {overhead}; "
                  f"bpp16(0.5,16 bits)={worked}; beta(9216,0.5625)={beta}")


def test_criterion_8_grad_check():
    t0 = time.perf_counter()
    worst = grad_check(seeds=range(10), step=1e-5, boundary=1e-3)
    elapsed = time.perf_counter() - t0
    record(8, worst < 1e-4 and elapsed < 30, f"max relative error {worst:.2e} over 10 seeds; {elapsed:.1f}s")


SEEDS = (0, 1, 2)
MATCHED_BPP16 = 0.5625   # mean N_x = 8 of 16


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    eval_set = make_dataset(1000, 10_000)
    runs = []
    for seed in SEEDS:
        elbo = train(TrainConfig(steps=12_000, router_mode="fixed_beta", seed=seed))
        base = train(TrainConfig(steps=12_000, router_mode="uniform_baseline", seed=seed))
        row = evaluate(elbo.params, elbo.router_state, eval_set, [MATCHED_BPP16])[0]
        runs.append({
            "seed": seed,
            "full_mse": full_length_mse(elbo.params, eval_set),
            "row": row,
            "uniform_mse": evaluate_fixed(base.params, eval_set, 8),
            "oracle_mse": oracle_mse(loss_curves(elbo.params, eval_set), row.mean_n_x),
        })
    return runs, time.perf_counter() - t0


def test_criterion_9a_full_length_mse(desk_runs):
    runs, _ = desk_runs
    worst = max(r["full_mse"] for r in runs)
    record("9a", worst < 0.01, f"held-out full-length MSE max {worst:.5f} over seeds {SEEDS}")


def test_criterion_9b_spearman(desk_runs):
    runs, _ = desk_runs
    rho = [r["row"].spearman for r in runs]
    record("9b", min(rho) > 0.5, "Spearman(segments, N_x) " + ", ".join(f"{v:.3f}" for v in rho))


def test_criterion_9c_elbo_vs_uniform(desk_runs):
    runs, _ = desk_runs
    wins = sum(r["row"].mse <= r["uniform_mse"] for r in runs)
    detail = "; ".join(f"seed {r['seed']}: mean N_x {r['row'].mean_n_x:.2f} elbo {r['row'].mse:.5f} "
                       f"vs uniform {r['uniform_mse']:.5f}" for r in runs)
    record("9c", wins == len(runs), f"{wins}/{len(runs)} seeds: {detail}")


def test_criterion_9d_elbo_vs_oracle(desk_runs):
    runs, _ = desk_runs
    rel = [r["row"].mse / r["oracle_mse"] - 1 for r in runs]
    detail = ", ".join(f"{r['row'].mse:.5f}/{r['oracle_mse']:.5f}" for r in runs)
    record("9d", max(rel) <= 0.10, f"elbo/oracle MSE {detail}; worst relative gap {max(rel):+.1%}")


def test_criterion_9_runtime(desk_runs):
    _, elapsed = desk_runs
    record("9e", elapsed < 15 * 60, f"3 seeds x 2 models at 12000 steps in {elapsed / 60:.1f} min")


def test_criterion_10_nfe_accounting():
    rng = np.random.default_rng(10)
    large, toy = set(), set()
    for _ in range(200):
        curve = np.sort(rng.uniform(0, 1, size=4096))[::-1]
        res = route_by_search(float(rng.uniform(0, 1)), lambda n: curve[n - 1], 4096)
        large.add((res.probes, res.extra_nfes))
        small = np.sort(rng.uniform(0, 1, size=16))[::-1]
        calls = []
        res = route_by_search(float(rng.uniform(0, 1)), lambda n: calls.append(n) or small[n - 1], 16)
        toy.add((res.probes, len(calls)))

    eval_set = make_dataset(64, 10_001)
    model = train(TrainConfig(steps=200, seed=3, train_size=500))
    elbo_extra = {r.extra_nfe for r in evaluate(model.params, model.router_state, eval_set,
                                                [0.3125, 0.5625, 0.8125])}
    search = evaluate_search(model.params, eval_set, 0.02, 16)
    ok = (large == {(12, 11)} and toy == {(4, 4)} and elbo_extra == {1.0} and search.extra_nfe == 4.0)
    record(10, ok, f"ELBO router extra decoder passes {sorted(elbo_extra)}; search at n_max=4096 "
                   f"(probes, extra) {sorted(large)}; toy n_max=16 probes {sorted(p for p, _ in toy)}; "
                   f"toy pipeline extra {search.extra_nfe}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
