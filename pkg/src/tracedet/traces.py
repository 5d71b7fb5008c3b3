"""Entropy traces, labels, datasets and the JSON-Lines trace file format."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError

FORMAT_TAG = "tracedet-v1"
SPLITS = ("train", "val", "test")
# entropies computed in floating point can overshoot ln(V) by a few ulps
_BOUND_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class ActionTrace:
    """Step-by-position entropy matrix of one denoising run.

    Row ``t`` holds the token-wise entropies (nats) of the predictive
    distributions at denoising step ``t``. ``normalized`` marks matrices that
    were divided by ``ln(vocab_size)``.
    """

    entropies: np.ndarray
    vocab_size: int
    example_id: str
    remask_strategy: str = "low_confidence"
    step_length: int = 1
    source: str = "sim"
    normalized: bool = False

    def __post_init__(self):
        ent = np.array(self.entropies, dtype=np.float64)
        if ent.ndim != 2 or ent.shape[0] < 1 or ent.shape[1] < 1:
            raise ValidationError("entropies", f"expected a non-empty T x n matrix, got shape {ent.shape}")
        if int(self.vocab_size) < 2:
            raise ValidationError("vocab_size", f"must be >= 2, got {self.vocab_size}")
        if int(self.step_length) < 1:
            raise ValidationError("step_length", f"must be >= 1, got {self.step_length}")
        upper = 1.0 if self.normalized else math.log(self.vocab_size)
        if not np.all(np.isfinite(ent)):
            raise ValidationError("entropies", "non-finite value")
        if ent.min() < 0.0:
            raise ValidationError("entropies", f"negative entropy {ent.min()!r}")
        if ent.max() > upper * (1.0 + _BOUND_SLACK):
            raise ValidationError("entropies", f"entropy {ent.max()!r} exceeds bound {upper!r}")
        ent.setflags(write=False)
        object.__setattr__(self, "entropies", ent)
        object.__setattr__(self, "vocab_size", int(self.vocab_size))
        object.__setattr__(self, "step_length", int(self.step_length))
        object.__setattr__(self, "example_id", str(self.example_id))

    @property
    def steps(self) -> int:
        return self.entropies.shape[0]

    @property
    def positions(self) -> int:
        return self.entropies.shape[1]

    @property
    def meta(self) -> dict:
        return {
            "remask_strategy": self.remask_strategy,
            "step_length": self.step_length,
            "source": self.source,
            "example_id": self.example_id,
        }

    def __eq__(self, other):
        if not isinstance(other, ActionTrace):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.vocab_size == other.vocab_size
            and self.normalized == other.normalized
            and self.entropies.shape == other.entropies.shape
            and bool(np.array_equal(self.entropies, other.entropies))
        )

    __hash__ = None


@dataclass(frozen=True, eq=True)
class LabeledTrace:
    trace: ActionTrace
    label: int
    planted_window: Optional[tuple] = None

    def __post_init__(self):
        if self.label not in (0, 1) or isinstance(self.label, bool):
            raise ValidationError("label", f"must be 0 or 1, got {self.label!r}")
        if self.planted_window is not None:
            window = tuple(sorted(int(t) for t in self.planted_window))
            if any(t < 0 or t >= self.trace.steps for t in window):
                raise ValidationError("planted_window", f"indices outside 0..{self.trace.steps - 1}")
            if len(set(window)) != len(window):
                raise ValidationError("planted_window", "duplicate step index")
            object.__setattr__(self, "planted_window", window)

    @property
    def example_id(self) -> str:
        return self.trace.example_id


@dataclass(frozen=True)
class TraceDataset:
    items: tuple = ()
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        ids = [it.example_id for it in items]
        if len(set(ids)) != len(ids):
            raise ValidationError("items", "duplicate example ids")
        if items:
            shape = (items[0].trace.steps, items[0].trace.positions)
            bad = [it.example_id for it in items if (it.trace.steps, it.trace.positions) != shape]
            if bad:
                raise ValidationError("items", f"(T, n) differs from {shape} for {bad[:5]}")
            if len({it.trace.vocab_size for it in items}) != 1:
                raise ValidationError("vocab_size", "items disagree on vocabulary size")
        split = dict(self.split)
        if set(split) != set(ids):
            raise ValidationError("split", "split must cover every item exactly once")
        for k, v in split.items():
            if v not in SPLITS:
                raise ValidationError("split", f"{k!r} assigned to unknown split {v!r}")
        object.__setattr__(self, "split", split)

    def __len__(self):
        return len(self.items)

    @property
    def shape(self) -> tuple:
        """(T, n, V), or zeros for an empty dataset."""
        if not self.items:
            return (0, 0, 0)
        tr = self.items[0].trace
        return (tr.steps, tr.positions, tr.vocab_size)

    def subset(self, name: str) -> list:
        return [it for it in self.items if self.split[it.example_id] == name]

    def split_sizes(self) -> dict:
        return {name: sum(1 for v in self.split.values() if v == name) for name in SPLITS}


@dataclass(frozen=True)
class TraceBatch:
    """Batch tensor laid out as (T, B, D) with D = token positions."""

    data: np.ndarray
    labels: np.ndarray
    ids: tuple

    @property
    def shape(self) -> tuple:
        return self.data.shape


def normalize_entropy(trace: ActionTrace) -> ActionTrace:
    """Scale a raw-nats trace into [0, 1] by dividing by ``ln(V)``."""
    if trace.vocab_size < 2:
        raise ValidationError("vocab_size", f"must be >= 2, got {trace.vocab_size}")
    if trace.normalized:
        return trace
    scaled = np.minimum(trace.entropies / math.log(trace.vocab_size), 1.0)
    return ActionTrace(
        entropies=scaled,
        vocab_size=trace.vocab_size,
        example_id=trace.example_id,
        remask_strategy=trace.remask_strategy,
        step_length=trace.step_length,
        source=trace.source,
        normalized=True,
    )


def stack_batch(traces, normalize: bool = True) -> TraceBatch:
    traces = list(traces)
    if not traces:
        raise ValidationError("traces", "cannot stack an empty list")
    shape = (traces[0].trace.steps, traces[0].trace.positions)
    bad = [lt.example_id for lt in traces if (lt.trace.steps, lt.trace.positions) != shape]
    if bad:
        raise ValidationError("traces", f"shape mismatch against {shape} for ids {bad}")
    mats = [normalize_entropy(lt.trace).entropies if normalize else lt.trace.entropies for lt in traces]
    data = np.stack(mats, axis=1)
    labels = np.array([lt.label for lt in traces], dtype=np.int64)
    return TraceBatch(data=data, labels=labels, ids=tuple(lt.example_id for lt in traces))


# ------------------------------------------------------------------ file I/O


def _item_record(item: LabeledTrace, split: str) -> dict:
    tr = item.trace
    return {
        "id": tr.example_id,
        "label": item.label,
        "entropies": tr.entropies.tolist(),
        "planted_window": list(item.planted_window) if item.planted_window is not None else None,
        "meta": {"remask_strategy": tr.remask_strategy, "step_length": tr.step_length, "source": tr.source},
        "split": split,
    }


def write_traces(dataset: TraceDataset, path) -> None:
    """Write ``dataset`` as JSON Lines; floats use shortest round-trip repr."""
    T, n, V = dataset.shape
    lines = [json.dumps({"format": FORMAT_TAG, "T": T, "n": n, "V": V})]
    for item in dataset.items:
        lines.append(json.dumps(_item_record(item, dataset.split[item.example_id]), allow_nan=False))
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write traces to {path}: {exc}") from exc


def read_traces(path) -> TraceDataset:
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().splitlines()
    if not raw_lines:
        raise ParseError(1, "missing header")
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise ParseError(1, f"expected format {FORMAT_TAG!r}")
    try:
        T, n, V = int(header["T"]), int(header["n"]), int(header["V"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(1, "header needs integer T, n, V") from exc

    items, split = [], {}
    for lineno, line in enumerate(raw_lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ent = rec["entropies"]
            meta = rec["meta"]
            label = rec["label"]
            ex_id = rec["id"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(lineno, f"malformed record: {exc}") from exc
        if not isinstance(ent, list) or len(ent) != T or any(not isinstance(r, list) or len(r) != n for r in ent):
            raise ParseError(lineno, f"entropies must be a {T} x {n} matrix")
        trace = ActionTrace(
            entropies=np.array(ent, dtype=np.float64),
            vocab_size=V,
            example_id=ex_id,
            remask_strategy=meta.get("remask_strategy", "low_confidence"),
            step_length=meta.get("step_length", 1),
            source=meta.get("source", "export"),
        )
        items.append(LabeledTrace(trace=trace, label=label, planted_window=rec.get("planted_window")))
        split[trace.example_id] = rec.get("split", "test")
    return TraceDataset(items=tuple(items), split=split)
