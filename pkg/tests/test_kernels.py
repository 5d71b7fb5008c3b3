import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracedet import kernels
from tracedet.sim import SimConfig, synthesize_dataset
from tracedet.traces import read_traces, write_traces

SRC = Path(__file__).resolve().parents[1] / "src"


def test_entropy_paths_agree():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(12) * 0.3, size=200)
    probs[0] = np.eye(12)[3]
    np.testing.assert_allclose(kernels.entropy_rows_loop(probs), kernels.entropy_rows_numpy(probs), rtol=0, atol=1e-13)
    assert kernels.entropy_rows(probs[:1])[0] == 0.0


@settings(max_examples=40, deadline=None)
@given(h=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20), v=st.integers(2, 64))
def test_peak_mass_inverts_entropy(h, v):
    h = np.array(h)
    q = kernels.peak_mass_for_entropy(h, v)
    assert np.all((q >= 1.0 / v - 1e-12) & (q <= 1.0))
    rest = (1.0 - q) / (v - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -(q * np.log(q) + (v - 1) * np.where(rest > 0, rest * np.log(np.where(rest > 0, rest, 1.0)), 0.0))
    np.testing.assert_allclose(ent / math.log(v), h, atol=1e-9)
    np.testing.assert_allclose(kernels.peak_mass_for_entropy_loop(h, v), kernels.peak_mass_for_entropy_numpy(h, v),
                               rtol=0, atol=1e-15)


def test_mann_whitney_tie_count():
    u, n_pos, n_neg, ties = kernels.mann_whitney_auc(np.array([0.5, 0.5, 0.1]), np.array([1, 0, 0]))
    assert (n_pos, n_neg, ties) == (1, 2, 1)
    assert u == 1.5


@pytest.mark.parametrize("flag", ["0", "1"])
def test_numba_toggle_gives_identical_trace_files(tmp_path, flag):
    env = dict(os.environ, PYTHONPATH=str(SRC), TRACEDET_DISABLE_NUMBA=flag)
    out = tmp_path / f"d{flag}.jsonl"
    code = ("import sys; from tracedet._accel import HAS_NUMBA; from tracedet.sim import SimConfig, synthesize_dataset; "
            "from tracedet.traces import write_traces; "
            f"assert {flag!r} == '0' or not HAS_NUMBA; "
            "write_traces(synthesize_dataset(SimConfig(T=12, n=6, V=8), "
            "{'faithful': 3, 'interleaving': 3, 'persistent_error': 3}, seed=2), sys.argv[1])")
    subprocess.run([sys.executable, "-c", code, str(out)], env=env, check=True)
    reference = tmp_path / "ref.jsonl"
    write_traces(synthesize_dataset(SimConfig(T=12, n=6, V=8),
                                    {"faithful": 3, "interleaving": 3, "persistent_error": 3}, seed=2), reference)
    a, b = read_traces(out), read_traces(reference)
    for x, y in zip(a.items, b.items):
        np.testing.assert_allclose(x.trace.entropies, y.trace.entropies, rtol=0, atol=1e-12)
