import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracedet.errors import ValidationError
from tracedet.sim import (
    PATTERNS,
    RemaskPolicy,
    ScenarioSpec,
    SimConfig,
    remask_select,
    simulate_trace,
    step_entropy,
    synthesize_dataset,
)
from tracedet.traces import write_traces


def rng(seed=0):
    return np.random.default_rng(seed)


def test_step_entropy_one_hot():
    assert step_entropy([0.0, 1.0, 0.0, 0.0]) == 0.0


def test_step_entropy_uniform():
    # closed form: -sum (1/16) ln(1/16) = ln 16
    assert step_entropy(np.full(16, 1 / 16)) == pytest.approx(2.772589, abs=1e-6)


def test_step_entropy_two_point():
    assert step_entropy([0.5, 0.5] + [0.0] * 6) == pytest.approx(0.693147, abs=1e-6)


def test_step_entropy_rejects_non_distribution():
    with pytest.raises(ValidationError):
        step_entropy([0.5, 0.6])


def test_remask_unique_max():
    assert remask_select([0.9, 0.1, 0.5], [0, 0, 0], 1, RemaskPolicy("low_confidence"), rng()) == {0}


def test_remask_tie_lowest_index():
    assert remask_select([0.7, 0.7], [0, 0], 1, RemaskPolicy("low_confidence"), rng()) == {0}


def test_remask_topk_margin():
    assert remask_select([0, 0, 0], [0.1, 0.4, 0.3], 2, RemaskPolicy("topk_margin"), rng()) == {1, 2}


def test_remask_entropy_keeps_lowest_entropy():
    ent = np.array([0.3, 0.1, 0.9])
    assert remask_select(-ent, ent, 1, RemaskPolicy("entropy"), rng()) == {1}


def test_remask_random_is_seeded_subset():
    a = remask_select(np.zeros(10), np.zeros(10), 4, RemaskPolicy("random"), rng(3))
    b = remask_select(np.zeros(10), np.zeros(10), 4, RemaskPolicy("random"), rng(3))
    assert a == b and len(a) == 4 and a <= set(range(10))


def test_remask_keep_too_large():
    with pytest.raises(ValidationError):
        remask_select([0.1], [0.1], 2, RemaskPolicy("low_confidence"), rng())


def test_unknown_policy():
    with pytest.raises(ValidationError):
        RemaskPolicy("greedy")


def test_retain_schedule_sums_to_n():
    for T, n in [(64, 32), (4, 10), (7, 7), (3, 1)]:
        sched = SimConfig(T=T, n=n).retain_schedule()
        assert sched.sum() == n and len(sched) == T
    assert SimConfig(T=4, n=10).retain_schedule().tolist() == [3, 2, 3, 2]
    assert SimConfig(T=4, n=10, step_length=2).retain_schedule().tolist() == [2, 2, 2, 4]


def test_faithful_rows_non_increasing():
    cfg = SimConfig(T=4, n=2, V=4)
    for seed in range(20):
        tr = simulate_trace(cfg, ScenarioSpec("faithful", answer_span=(0,)), rng(seed))
        e = tr.trace.entropies
        assert np.all(np.diff(e, axis=0) <= 1e-12)
        assert tr.label == 0 and tr.planted_window is None


def test_interleaving_window_exceeds_outside():
    cfg = SimConfig(T=4, n=4, V=16)
    for intensity in (0.5, 0.7, 1.0):
        scen = ScenarioSpec("interleaving", window=(1, 2), answer_span=(1, 2), intensity=intensity)
        for seed in range(20):
            tr = simulate_trace(cfg, scen, rng(seed))
            span_max = tr.trace.entropies[:, [1, 2]].max(axis=1)
            gap = min(span_max[1], span_max[2]) - max(span_max[0], span_max[3])
            assert gap >= intensity * math.log(16) / 2
            assert tr.planted_window == (1, 2) and tr.label == 1


def test_inconsistent_guesses_near_max_in_window():
    cfg = SimConfig(T=20, n=8, V=16)
    scen = ScenarioSpec("inconsistent_guesses", window=tuple(range(5, 10)), answer_span=(2, 3), intensity=0.9)
    tr = simulate_trace(cfg, scen, rng(1))
    assert tr.trace.entropies[5:10][:, [2, 3]].min() > 0.9 * math.log(16)


def test_persistent_error_is_confident_and_unwindowed():
    cfg = SimConfig(T=32, n=8, V=16)
    span = (2, 3)
    pers = simulate_trace(cfg, ScenarioSpec("persistent_error", answer_span=span, intensity=1.0), rng(2))
    assert pers.label == 1 and pers.planted_window is None
    assert pers.trace.entropies[8:, list(span)].max() < 0.05 * math.log(16)


def test_same_seed_same_trace():
    cfg = SimConfig(T=10, n=6, V=8)
    scen = ScenarioSpec("interleaving", window=(3, 4, 5), answer_span=(1, 2))
    a = simulate_trace(cfg, scen, rng(11))
    b = simulate_trace(cfg, scen, rng(11))
    assert a.trace.entropies.tobytes() == b.trace.entropies.tobytes()


@pytest.mark.parametrize("policy", ["low_confidence", "entropy", "random", "topk_margin"])
@pytest.mark.parametrize("pattern", PATTERNS)
def test_monotone_unmasking_and_bounds(policy, pattern):
    cfg = SimConfig(T=12, n=10, V=8, remask=policy)
    scen = ScenarioSpec(pattern, window=(3, 4, 5) if pattern in ("interleaving", "inconsistent_guesses") else (),
                        answer_span=(2, 3), intensity=0.8)
    tr, state, order = simulate_trace(cfg, scen, rng(4), return_state=True)
    positions = [p for _, p in order]
    assert len(positions) == len(set(positions)) == cfg.n
    assert np.all(state.decoded)
    steps = [t for t, _ in order]
    assert steps == sorted(steps)
    # answer positions are never retained while their window is active
    if scen.window:
        assert all(t > max(scen.window) for t, p in order if p in scen.answer_span)
    e = tr.trace.entropies
    assert e.min() >= 0.0 and e.max() <= math.log(cfg.V)
    np.testing.assert_allclose(state.dists.sum(axis=1), 1.0, atol=1e-9)


def test_frozen_decoded_entropy_toggle():
    scen = ScenarioSpec("faithful", answer_span=(0,))
    frozen = simulate_trace(SimConfig(T=6, n=3, V=8), scen, rng(0))
    zeroed = simulate_trace(SimConfig(T=6, n=3, V=8, frozen_decoded_entropy=False), scen, rng(0))
    assert zeroed.trace.entropies[-1].sum() == 0.0 or zeroed.trace.entropies[-1].sum() < frozen.trace.entropies[-1].sum()
    assert np.all(zeroed.trace.entropies <= frozen.trace.entropies + 1e-15)


def test_invalid_scenarios():
    with pytest.raises(ValidationError):
        ScenarioSpec("interleaving", answer_span=(0,))
    with pytest.raises(ValidationError):
        ScenarioSpec("faithful", answer_span=(0,), intensity=0.0)
    with pytest.raises(ValidationError):
        simulate_trace(SimConfig(T=3, n=2), ScenarioSpec("faithful", answer_span=(5,)), rng())


def test_label_bookkeeping():
    ds = synthesize_dataset(SimConfig(T=6, n=4, V=8), {"faithful": 2, "persistent_error": 2}, seed=1)
    assert [it.label for it in sorted(ds.items, key=lambda it: it.example_id)] == [0, 0, 1, 1]


def test_split_200_200():
    mix = {p: 100 for p in PATTERNS}
    ds = synthesize_dataset(SimConfig(T=8, n=4, V=8), mix, seed=2)
    assert len(ds) == 400
    assert ds.split_sizes() == {"train": 0, "val": 200, "test": 200}


def test_train_fraction_split():
    ds = synthesize_dataset(SimConfig(T=8, n=4, V=8), {"faithful": 50, "interleaving": 50}, seed=2, train_fraction=0.5)
    assert ds.split_sizes() == {"train": 50, "val": 25, "test": 25}


def test_zero_total_rejected():
    with pytest.raises(ValidationError):
        synthesize_dataset(SimConfig(), {"faithful": 0}, seed=0)


def test_dataset_file_is_byte_identical(tmp_path):
    cfg = SimConfig(T=10, n=6, V=16)
    mix = {"faithful": 5, "interleaving": 5, "inconsistent_guesses": 5, "persistent_error": 5}
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_traces(synthesize_dataset(cfg, mix, seed=9), a)
    write_traces(synthesize_dataset(cfg, mix, seed=9), b)
    assert a.read_bytes() == b.read_bytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), pattern=st.sampled_from(PATTERNS), V=st.integers(2, 40))
def test_entropy_bound_property(seed, pattern, V):
    cfg = SimConfig(T=9, n=5, V=V)
    scen = ScenarioSpec(pattern, window=(2, 3), answer_span=(1,), intensity=1.0)
    e = simulate_trace(cfg, scen, rng(seed)).trace.entropies
    assert e.min() >= 0.0 and e.max() <= math.log(V)
