import json
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from tracedet.errors import ParseError, ValidationError
from tracedet.sim import SimConfig, synthesize_dataset
from tracedet.traces import (
    ActionTrace,
    LabeledTrace,
    TraceDataset,
    normalize_entropy,
    read_traces,
    stack_batch,
    write_traces,
)


def make_item(ex_id, ent, label=0, V=16, window=None):
    return LabeledTrace(ActionTrace(np.asarray(ent, dtype=float), V, ex_id), label, window)


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.jsonl"
    write_traces(TraceDataset(), path)
    assert len(path.read_text().splitlines()) == 1
    assert read_traces(path) == TraceDataset()


def test_zero_matrix_round_trip(tmp_path):
    ds = TraceDataset(items=(make_item("a", [[0.0, 0.0], [0.0, 0.0]]),), split={"a": "val"})
    path = tmp_path / "z.jsonl"
    write_traces(ds, path)
    back = read_traces(path)
    assert back == ds
    assert back.items[0].trace.entropies.tobytes() == ds.items[0].trace.entropies.tobytes()


def test_simulator_dataset_round_trip(tmp_path):
    mix = {"faithful": 100, "persistent_error": 100, "interleaving": 100, "inconsistent_guesses": 100}
    ds = synthesize_dataset(SimConfig(T=16, n=8, V=16), mix, seed=5)
    path = tmp_path / "sim.jsonl"
    write_traces(ds, path)
    back = read_traces(path)
    assert len(back) == 400
    assert back.split == ds.split
    for a, b in zip(ds.items, back.items):
        assert a.label == b.label and a.planted_window == b.planted_window
        assert a.trace.meta == b.trace.meta
        assert np.array_equal(a.trace.entropies, b.trace.entropies)
    assert back == ds


def test_negative_entropy_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    rec = {"id": "x", "label": 0, "entropies": [[-0.1, 0.0]], "planted_window": None,
           "meta": {"remask_strategy": "low_confidence", "step_length": 1, "source": "export"}}
    path.write_text(json.dumps({"format": "tracedet-v1", "T": 1, "n": 2, "V": 4}) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ValidationError, match="entropies"):
        read_traces(path)


def test_entropy_above_log_v_rejected():
    with pytest.raises(ValidationError, match="entropies"):
        ActionTrace(np.array([[math.log(4) + 0.01]]), 4, "x")


def test_row_count_mismatch_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    rec = {"id": "x", "label": 1, "entropies": [[0.1, 0.2]], "planted_window": None,
           "meta": {"remask_strategy": "low_confidence", "step_length": 1, "source": "export"}}
    path.write_text(json.dumps({"format": "tracedet-v1", "T": 2, "n": 2, "V": 4}) + "\n" + json.dumps(rec) + "\n")
    with pytest.raises(ParseError) as info:
        read_traces(path)
    assert info.value.line == 2


def test_malformed_json_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"format": "tracedet-v1", "T": 1, "n": 1, "V": 4}) + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        read_traces(path)


def test_normalize_entropy_values():
    tr = ActionTrace(np.array([[math.log(16), 0.0, math.log(4)]]), 16, "x")
    out = normalize_entropy(tr)
    np.testing.assert_allclose(out.entropies[0], [1.0, 0.0, math.log(4) / math.log(16)], rtol=0, atol=1e-15)
    assert out.entropies[0, 2] == pytest.approx(0.5, abs=1e-15)
    assert out.vocab_size == 16 and out.normalized


def test_invariants():
    with pytest.raises(ValidationError):
        ActionTrace(np.zeros((0, 3)), 4, "x")
    with pytest.raises(ValidationError, match="vocab_size"):
        ActionTrace(np.zeros((2, 3)), 1, "x")
    with pytest.raises(ValidationError, match="label"):
        make_item("a", [[0.0]], label=2)
    with pytest.raises(ValidationError, match="planted_window"):
        make_item("a", [[0.0]], label=1, window=(1,))
    with pytest.raises(ValidationError, match="split"):
        TraceDataset(items=(make_item("a", [[0.0]]),), split={})


def test_stack_singleton():
    ent = [[0.1, 0.2], [0.3, 0.4]]
    b = stack_batch([make_item("a", ent)], normalize=False)
    assert b.shape == (2, 1, 2)
    np.testing.assert_array_equal(b.data[:, 0, :], ent)


def test_stack_shape_mismatch_lists_ids():
    with pytest.raises(ValidationError, match="b"):
        stack_batch([make_item("a", [[0.0, 0.0]]), make_item("b", [[0.0, 0.0, 0.0]])])


def test_stack_spot_check():
    rng = np.random.default_rng(0)
    items = [make_item(f"e{i}", rng.uniform(0, 1, size=(6, 4)), label=i % 2) for i in range(8)]
    b = stack_batch(items, normalize=False)
    assert b.data[3][5][2] == items[5].trace.entropies[3][2]
    assert b.labels.tolist() == [0, 1] * 4
    assert b.ids == tuple(f"e{i}" for i in range(8))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2**32 - 1), counts=st.lists(st.integers(0, 3), min_size=4, max_size=4))
def test_round_trip_property(tmp_path, seed, counts):
    if sum(counts) == 0:
        counts[0] = 1
    mix = dict(zip(("faithful", "interleaving", "inconsistent_guesses", "persistent_error"), counts))
    ds = synthesize_dataset(SimConfig(T=6, n=5, V=8), mix, seed=seed)
    path = tmp_path / f"rt_{seed}.jsonl"
    write_traces(ds, path)
    assert read_traces(path) == ds


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_stack_is_pure_reindexing(seed):
    ds = synthesize_dataset(SimConfig(T=8, n=6, V=16), {"faithful": 3, "interleaving": 3}, seed=seed)
    b = stack_batch(ds.items, normalize=False)
    assert math.fsum(b.data.ravel()) == pytest.approx(
        math.fsum(x for it in ds.items for x in it.trace.entropies.ravel()), abs=1e-12)
    nb = stack_batch(ds.items, normalize=True)
    assert nb.data.min() >= 0.0 and nb.data.max() <= 1.0
