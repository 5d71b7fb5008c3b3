import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracedet import net
from tracedet.errors import UndefinedMetricError
from tracedet.evaluation import (
    METHOD_NAMES,
    RocResult,
    auroc,
    auroc_bruteforce,
    ave_entropy_auroc,
    ave_entropy_score,
    compare_report,
    e_bar_variance,
    evaluate_model,
    mask_diagnostics,
)
from tracedet.kernels import mann_whitney_auc_loop, mann_whitney_auc_numpy
from tracedet.sim import SimConfig, synthesize_dataset
from tracedet.traces import ActionTrace, LabeledTrace


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]).auroc == 1.0
    assert auroc([0.9, 0.2, 0.8, 0.3], [1, 0, 0, 1]).auroc == 0.75
    r = auroc([0.4] * 6, [1, 0, 1, 0, 0, 1])
    assert r.auroc == 0.5 and r.n_pos == 3 and r.n_neg == 3 and r.tie_count == 9
    for s, y in (([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]), ([0.9, 0.2, 0.8, 0.3], [1, 0, 0, 1]), ([0.4] * 4, [1, 0, 1, 0])):
        assert auroc_bruteforce(s, y) == auroc(s, y).auroc


def test_auroc_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc_bruteforce([0.1, 0.2], [0, 0])


def test_auroc_oracle_equivalence_1000_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        N = int(rng.integers(2, 201))
        y = rng.integers(0, 2, size=N)
        y[0], y[1] = 0, 1
        # coarse grid injects ties
        s = np.round(rng.normal(size=N), int(rng.integers(0, 3)))
        assert auroc(s, y).auroc == auroc_bruteforce(s, y)


def test_kernel_paths_agree():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = np.round(rng.uniform(size=60), 1)
        y = rng.integers(0, 2, size=60)
        assert mann_whitney_auc_loop(s, y) == mann_whitney_auc_numpy(s, y)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.integers(0, 1)), min_size=2, max_size=60, unique_by=lambda t: t[0]))
def test_auroc_complement_without_ties(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert auroc(-s, y).auroc == pytest.approx(1.0 - auroc(s, y).auroc, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.integers(0, 1)), min_size=2, max_size=60))
def test_auroc_rank_invariance(pairs):
    # integer scores keep these transforms exactly strictly monotone in floating point
    s = np.array([p[0] for p in pairs], dtype=np.float64)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    base = auroc(s, y).auroc
    assert auroc(3 * s + 7, y).auroc == base
    assert auroc(s ** 3, y).auroc == base
    assert auroc(np.arctan(s / 1000), y).auroc == base


def test_ave_entropy_examples():
    assert ave_entropy_score(ActionTrace(np.full((3, 2), 0.2 * math.log(8)), 8, "c")) == pytest.approx(0.2, abs=1e-15)
    assert ave_entropy_score(ActionTrace(np.array([[0.0, 1.0], [1.0, 0.0]]) * math.log(4), 4, "x")) == 0.5
    ds = synthesize_dataset(SimConfig(T=16, n=8, V=16), {"faithful": 20, "inconsistent_guesses": 20}, seed=0)
    assert ave_entropy_auroc(list(ds.items)).auroc > 0.5


def _item(i, ent, label, window=None):
    return LabeledTrace(ActionTrace(np.asarray(ent, dtype=float), 16, f"e{i}"), label, window)


def test_mask_diagnostics_consistency():
    rng = np.random.default_rng(0)
    items = [_item(i, rng.uniform(0, 2.0, size=(10, 4)), i % 2, (2, 3, 4) if i % 2 else None) for i in range(6)]
    mask = (rng.uniform(size=(10, 6)) < 0.4).astype(float)
    mask[:, 0] = 0
    d = mask_diagnostics(items, mask)
    assert math.isnan(d.e_bar[0])
    for b in range(1, 6):
        S = list(d.selected[b])
        assert S == list(np.flatnonzero(mask[:, b]))
        assert abs(d.e_bar[b] - np.mean(d.h_max[b, S])) <= 1e-12
        assert d.selection_rate[b] == len(S) / 10
    for b, it in enumerate(items):
        if it.planted_window:
            w = set(it.planted_window)
            assert d.window_recall[it.example_id] == len(w & set(d.selected[b])) / 3
    s = d.summary()
    assert s["empty_selection"] == 1
    assert s["e_bar_var"] == pytest.approx(np.var(d.e_bar[1:]))
    assert e_bar_variance(d, within_label=True) == pytest.approx(
        np.mean([np.var(d.e_bar[[2, 4]]), np.var(d.e_bar[[1, 3, 5]])]))
    plot = d.to_plot_json()
    assert plot["e_bar"][0] is None and len(plot["selected"]) == 6


def test_forced_on_selection_rate_is_one():
    ds = synthesize_dataset(SimConfig(T=8, n=6, V=8), {"faithful": 4, "interleaving": 4}, seed=3)
    items = ds.subset("test")
    cfg = net.ModelConfig(d_model=8, n_heads=2, d_ff=8, d_pe=4)
    params = net.init_params(cfg, 6, np.random.default_rng(0))
    roc, diag = evaluate_model(params, cfg, items, mask_mode="forced_on")
    assert np.all(diag.selection_rate == 1.0)
    assert METHOD_NAMES["forced_on"] == "tracedet_no_masking"
    again, _ = evaluate_model(params, cfg, items)
    assert again == evaluate_model(params, cfg, items)[0]


def test_compare_report_sorting_and_determinism(tmp_path):
    results = {
        "ave_entropy": RocResult(0.55, 10, 10, 0),
        "tracedet": RocResult(0.93, 10, 10, 1),
        "tracedet_no_masking": RocResult(0.81, 10, 10, 0),
    }
    rows = compare_report(results, tmp_path / "a")
    assert [r["method"] for r in rows] == ["tracedet", "tracedet_no_masking", "ave_entropy"]
    compare_report(results, tmp_path / "b")
    for name in ("report.json", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    one = compare_report({"tracedet": results["tracedet"]}, tmp_path / "c")
    assert len(one) == 1
    assert len((tmp_path / "c" / "report.txt").read_text().splitlines()) == 3
    with pytest.raises(ValueError):
        compare_report({}, tmp_path / "d")
