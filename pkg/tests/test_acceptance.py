"""Acceptance gate: end-to-end robustness, oracles and property suites.

Each test prints exactly one ``[criterion N] PASS/FAIL`` line summarizing
the measured quantities against its pinned tolerance.
"""

import argparse
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from spurmeta import cli, model
from spurmeta.corpus import PosLexicon, extract_attributes, load_captions, load_lexicon
from spurmeta.data import read_dataset
from spurmeta.episodes import Episode, EpisodeConfig, build_episode
from spurmeta.groups import (METRICS, build_spuriousness_table,
                             read_spuriousness_csv, sampling_distribution,
                             spuriousness_score)
from spurmeta.model import episode_gradient, episode_loss, init_params
from spurmeta.train import TrainConfig
from util import (random_store, record_with_accuracy, single_attribute_index,
                  two_group_index)

SEEDS_MARGIN = (0, 1, 2)  # criterion 1
SEEDS_ORDERING = (0, 1, 2, 3, 4)  # criterion 2
RUNTIME_BUDGET_S = 300.0
WORST_GROUP_MARGIN = 0.10
FD_STEP = 1e-5
FD_TOLERANCE = 1e-4
METRIC_UNIT_TOLERANCE = 1e-9
CHI2_SIGNIFICANCE = 0.01
N_EPISODES = 1000
N_METRIC_PAIRS = 1000
TAU_SWEEP = (1.0, 5.0, 10.0, 50.0, 100.0)


def _report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\n[criterion {criterion}] {status}: {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


def _gendata(data_dir, seed):
    cli.cmd_gendata(argparse.Namespace(spec=None, seed=seed, out=str(data_dir)))


def _train_and_eval(method, seed, data_dir, out_dir, cfg=None):
    """Default-config run through the CLI pipeline; returns the test report."""
    start = time.monotonic()
    cli.run_training(cfg or TrainConfig(seed=seed), method, 10, data_dir, out_dir)
    seconds = time.monotonic() - start
    train = read_dataset(data_dir / "train.csv")
    test = read_dataset(data_dir / "test.csv")
    best = (out_dir / "best_checkpoint.txt").read_text().strip()
    params, tau, _ = model.load_checkpoint(out_dir / best)
    if method.startswith("erm"):
        from spurmeta.train import erm_predict
        head, mode = cli.load_head(out_dir / "head.json")
        preds = erm_predict(params, head, test.features, mode, tau)
        report = cli.evaluate_predictions(preds, test)
    else:
        report = cli.evaluate(params, train, test, tau)
    return report, seconds


@pytest.fixture(scope="module")
def bench_runs(tmp_path_factory):
    """Worst-group results for every (seed, method) the gate compares."""
    root = tmp_path_factory.mktemp("acceptance")
    results = {}
    for seed in SEEDS_ORDERING:
        data_dir = root / f"data{seed}"
        _gendata(data_dir, seed)
        for method in ("episodic", "episodic-random", "erm-linear"):
            out_dir = root / f"run_{method}_{seed}"
            report, seconds = _train_and_eval(method, seed, data_dir, out_dir)
            results[(seed, method)] = {"report": report, "seconds": seconds,
                                       "run_dir": out_dir}
    return results


def _mean(results, method, field, seeds):
    return float(np.mean([getattr(results[(s, method)]["report"], field)
                          for s in seeds]))


def test_criterion_1_worst_group_margin(bench_runs):
    worst_ep = _mean(bench_runs, "episodic", "worst_group", SEEDS_MARGIN)
    worst_erm = _mean(bench_runs, "erm-linear", "worst_group", SEEDS_MARGIN)
    gap_ep = _mean(bench_runs, "episodic", "gap", SEEDS_MARGIN)
    gap_erm = _mean(bench_runs, "erm-linear", "gap", SEEDS_MARGIN)
    slowest = max(r["seconds"] for r in bench_runs.values())
    margin = worst_ep - worst_erm
    ok = (margin >= WORST_GROUP_MARGIN and gap_ep <= 0.5 * gap_erm
          and slowest < RUNTIME_BUDGET_S)
    _report(1, ok,
            f"worst-group margin {margin:+.3f} (episodic {worst_ep:.3f} vs "
            f"erm-linear {worst_erm:.3f}, need >= {WORST_GROUP_MARGIN}); "
            f"gap {gap_ep:.3f} vs half-erm {0.5 * gap_erm:.3f}; "
            f"slowest run {slowest:.1f}s < {RUNTIME_BUDGET_S:.0f}s")


def test_criterion_2_ablation_ordering(bench_runs):
    w = {m: _mean(bench_runs, m, "worst_group", SEEDS_ORDERING)
         for m in ("episodic", "episodic-random", "erm-linear")}
    ok = w["episodic"] >= w["episodic-random"] >= w["erm-linear"]
    _report(2, ok,
            f"5-seed mean worst-group: episodic {w['episodic']:.3f} >= "
            f"random-episodes {w['episodic-random']:.3f} >= "
            f"erm-linear {w['erm-linear']:.3f}")


def test_criterion_3_spuriousness_mitigation(bench_runs):
    run_dir = bench_runs[(0, "episodic")]["run_dir"]
    initial = {(k, a): s for k, a, s, _, _ in
               read_spuriousness_csv(run_dir / "spuriousness_initial.csv")}
    final = {(k, a): s for k, a, s, _, _ in
             read_spuriousness_csv(run_dir / "spuriousness_final.csv")}
    ranked = sorted(initial, key=initial.get, reverse=True)
    top = ranked[:max(1, len(ranked) // 10)]
    mean_initial = float(np.mean([initial[key] for key in top]))
    mean_final = float(np.mean([final[key] for key in top]))
    drop = 1.0 - mean_final / mean_initial
    ok = drop >= 0.5
    _report(3, ok,
            f"top-decile mean spuriousness {mean_initial:.3f} -> "
            f"{mean_final:.3f} ({drop:.0%} drop, need >= 50%)")


def _fd_episode_configs():
    """FD-safe configurations: smooth activations keep the loss surface free
    of the kinks that make central differences meaningless for relu."""
    rng = np.random.default_rng(20240824)
    configs = []
    for i in range(12):
        activation = ("tanh", "linear")[i % 2]
        K = 2 + i % 2
        n_support = 2 + i % 3
        dim = 4 + i % 3
        dims = (dim, 5, 3) if i % 2 else (dim, 4)
        tau = (1.0, 5.0, 10.0)[i % 3]
        params = init_params(dims, activation, rng)
        n = K * n_support * 2
        labels = np.repeat(np.arange(K), n_support * 2)
        store = random_store([f"s{j}" for j in range(n)], dim, rng,
                             labels=labels, n_classes=K)
        support, query = [], []
        for k in range(K):
            ids = store.class_ids(k)
            support += [(sid, k) for sid in ids[:n_support]]
            query += [(sid, k) for sid in ids[n_support:]]
        episode = Episode(support=tuple(support), query=tuple(query))
        configs.append((params, episode, store, tau))
    return configs


def test_criterion_4_gradient_oracle():
    worst = 0.0
    configs = _fd_episode_configs()
    for params, episode, store, tau in configs:
        _, grads = episode_gradient(params, episode, store, tau)
        analytic = np.concatenate([a.ravel() for a in
                                   grads.d_weights + grads.d_biases])
        fd = np.empty_like(analytic)
        pos = 0
        for arr in params.weights + params.biases:
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = arr[i]
                arr[i] = old + FD_STEP
                hi = episode_loss(params, episode, store, tau)
                arr[i] = old - FD_STEP
                lo = episode_loss(params, episode, store, tau)
                arr[i] = old
                fd[pos] = (hi - lo) / (2 * FD_STEP)
                pos += 1
        rel = np.abs(fd - analytic).max() / max(np.abs(analytic).max(), 1e-12)
        worst = max(worst, rel)
    ok = worst < FD_TOLERANCE and len(configs) >= 10
    _report(4, ok,
            f"max relative FD error {worst:.2e} over {len(configs)} configs "
            f"(step {FD_STEP:g}, need < {FD_TOLERANCE:g})")


def test_criterion_5_metric_unit_suite():
    idx = two_group_index(50, 50)
    failures = []

    # edge cases
    rec = record_with_accuracy(idx, 0, 0, 0.6, 0.6)
    for metric in ("tanh-abs-log-ratio", "abs-delta", "delta", "tanh-log-ratio"):
        if spuriousness_score(0, 0, idx, rec, metric) != 0.0:
            failures.append(f"{metric} nonzero for equal accuracies")
    # attribute 1 appears in no row, so members(0, 1) is empty; attribute 0
    # covers every sample, so its complement is empty too
    empty_rows = {f"e{i}": {0} for i in range(4)}
    from util import make_group_index
    idx_empty = make_group_index(empty_rows, {sid: 0 for sid in empty_rows},
                                 n_attributes=2, classes=[0])
    rec2 = record_with_accuracy(idx_empty, 0, 0, 1.0, 1.0)
    for metric in METRICS:
        if spuriousness_score(0, 1, idx_empty, rec2, metric) != 0.0:
            failures.append(f"{metric} nonzero for an empty member set")
        if spuriousness_score(0, 0, idx_empty, rec2, metric) != 0.0:
            failures.append(f"{metric} nonzero for an empty complement")

    # worked ratio oracle: tanh(ln(0.8/0.2)) = (16-1)/(16+1) exactly
    rec = record_with_accuracy(idx, 0, 0, 0.8, 0.2)
    got = spuriousness_score(0, 0, idx, rec, "tanh-abs-log-ratio")
    if abs(got - 15.0 / 17.0) >= METRIC_UNIT_TOLERANCE:
        failures.append(f"tanh(ln 4) = {got!r}, off by {abs(got - 15/17):.2e}")

    # randomized invariants over the accuracy grid
    rng = np.random.default_rng(5)
    n = 50
    for _ in range(N_METRIC_PAIRS):
        p = int(rng.integers(0, n + 1)) / n
        q = int(rng.integers(0, n + 1)) / n
        fwd = record_with_accuracy(idx, 0, 0, p, q)
        rev = record_with_accuracy(idx, 0, 0, q, p)
        s = {m: spuriousness_score(0, 0, idx, fwd, m) for m in METRICS}
        r = {m: spuriousness_score(0, 0, idx, rev, m) for m in METRICS}
        # ratio metrics compare p/q against q/p, which are not exact
        # float reciprocals, so their symmetry holds to rounding error only
        checks = [
            s["constant"] == 1.0,
            abs(s["tanh-abs-log-ratio"] - r["tanh-abs-log-ratio"]) < 1e-12,
            0.0 <= s["tanh-abs-log-ratio"] < 1.0,
            s["abs-delta"] == r["abs-delta"],
            0.0 <= s["abs-delta"] <= 1.0,
            s["delta"] == -r["delta"],
            -1.0 <= s["delta"] <= 1.0,
            abs(s["tanh-log-ratio"] + r["tanh-log-ratio"]) < 1e-12,
            -1.0 < s["tanh-log-ratio"] < 1.0,
        ]
        if not all(checks):
            failures.append(f"invariant violated at p={p}, q={q}")
            break
    ok = not failures
    _report(5, ok,
            f"edge cases, tanh(ln 4) within {METRIC_UNIT_TOLERANCE:g}, and "
            f"{N_METRIC_PAIRS} randomized invariant checks"
            + (f"; failures: {failures}" if failures else ""))


def test_criterion_6_episode_property_suite():
    index = single_attribute_index(n_classes=2, n_attributes=4, per_group=30)
    rec = record_with_accuracy(index, 0, 0, 0.0, 0.0)  # placeholder table below
    table = build_spuriousness_table(index, rec, "constant")
    table = replace(table, scores=np.array([[0.4, 0.3, 0.2, 0.1],
                                            [0.1, 0.2, 0.3, 0.4]]))
    cfg = EpisodeConfig(n_support=10)
    first_draws = {k: np.zeros(4) for k in (0, 1)}
    failures = []
    for i in range(N_EPISODES):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=6,
                                                           spawn_key=(i,)))
        ep = build_episode(index, table, cfg, rng)
        support, query = set(ep.support_ids()), set(ep.query_ids())
        if support & query:
            failures.append(f"episode {i}: support/query overlap")
        if len(ep.support) != 20 or len(ep.query) != 20:
            failures.append(f"episode {i}: wrong sizes")
        for k, (a1, a2) in ep.chosen_pairs.items():
            if a1 == a2:
                failures.append(f"episode {i}: identical pair for class {k}")
            first_draws[k][a1] += 1
            for sid, y in ep.support:
                if y == k and (sid not in index.members(k, a1)
                               or sid in index.members(k, a2)):
                    failures.append(f"episode {i}: correlation shift broken")
        if failures:
            break
    p_values = []
    for k in (0, 1):
        expected = sampling_distribution(table, k, index) * N_EPISODES
        p_values.append(stats.chisquare(first_draws[k], expected).pvalue)
    chi2_ok = all(p >= CHI2_SIGNIFICANCE for p in p_values)
    ok = not failures and chi2_ok
    _report(6, ok,
            f"{N_EPISODES} episodes: disjointness, sizes, pair distinctness, "
            f"correlation shift all hold; chi-squared p-values "
            f"{[f'{p:.3f}' for p in p_values]} >= {CHI2_SIGNIFICANCE}"
            + (f"; failures: {failures[:3]}" if failures else ""))


def test_criterion_7_determinism(bench_runs, tmp_path):
    data_dir = bench_runs[(0, "episodic")]["run_dir"].parent / "data0"
    cfg = TrainConfig(seed=7, epochs=3, tasks_per_epoch=20)
    artifacts = []
    for name in ("first", "second"):
        out = tmp_path / name
        cli.run_training(cfg, "episodic", 10, data_dir, out)
        artifacts.append({
            "history": (out / "history.csv").read_bytes(),
            "final_ckpt": (out / f"ckpt_epoch_{cfg.epochs}.json").read_bytes(),
            "best": (out / "best_checkpoint.txt").read_bytes(),
        })
    same = {key: artifacts[0][key] == artifacts[1][key] for key in artifacts[0]}
    ok = all(same.values())
    _report(7, ok, f"byte-identical reruns: {same}")


def test_criterion_8_caption_pipeline_fidelity(bench_runs):
    lexicon = PosLexicon({
        "green": {"ADJ"}, "vase": {"NOUN"}, "top": {"NOUN"},
        "wooden": {"ADJ"}, "table": {"NOUN"},
        "a": {"OTHER"}, "sitting": {"OTHER"}, "on": {"OTHER"}, "of": {"OTHER"},
    })
    example = extract_attributes(
        "a green vase sitting on top of a wooden table", lexicon)
    example_ok = example == {"green", "vase", "top", "wooden", "table"}

    data_dir = bench_runs[(0, "episodic")]["run_dir"].parent / "data0"
    store = read_dataset(data_dir / "train.csv")
    caps = load_captions(data_dir / "captions_train.jsonl")
    bench_lex = load_lexicon(data_dir / "lexicon.tsv")
    from spurmeta.synthbench import BenchSpec
    spec = BenchSpec()
    class_words = spec.class_words[:spec.n_classes]
    attr_words = spec.attribute_words[:spec.n_attributes]
    recovered = 0
    for rec in caps.records:
        i = store.index_of(rec.sample_id)
        attrs = extract_attributes(rec.caption, bench_lex)
        if (attrs & set(class_words) == {class_words[store.labels[i]]}
                and attrs & set(attr_words) == {attr_words[store.groups[i]]}):
            recovered += 1
    rate = recovered / len(caps)
    ok = example_ok and rate == 1.0
    _report(8, ok,
            f"worked example -> {sorted(example)}; benchmark caption "
            f"recoverability {rate:.1%} (need 100%)")


def test_criterion_9_tau_sweep(bench_runs, tmp_path):
    data_dir = bench_runs[(0, "episodic")]["run_dir"].parent / "data0"
    sweep_csv = tmp_path / "tau_sweep.csv"
    rows = []
    for tau in TAU_SWEEP:
        out = tmp_path / f"tau_{tau:g}"
        report, _ = _train_and_eval("episodic", 0, data_dir, out,
                                    cfg=TrainConfig(seed=0, tau=tau))
        rows.append((tau, report.average, report.worst_group, report.gap))
    # the comparison artifact the sweep harness emits
    with open(sweep_csv, "w", encoding="utf-8") as fh:
        fh.write("tau,average,worst_group,gap\n")
        for tau, avg, worst, gap in rows:
            fh.write(f"{tau!r},{avg!r},{worst!r},{gap!r}\n")
    loaded = [tuple(float(v) for v in line.split(","))
              for line in sweep_csv.read_text().splitlines()[1:]]
    ok = (len(loaded) == len(TAU_SWEEP)
          and [r[0] for r in loaded] == list(TAU_SWEEP)
          and all(math.isfinite(v) and 0.0 <= v <= 1.0
                  for r in loaded for v in r[1:]))
    _report(9, ok,
            "tau sweep completed for "
            f"{[f'{t:g}' for t in TAU_SWEEP]}; worst-group accuracies "
            f"{[f'{r[2]:.3f}' for r in loaded]}")
