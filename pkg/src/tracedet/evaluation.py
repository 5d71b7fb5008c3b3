"""AUROC, the average-entropy baseline, mask diagnostics and comparison reports."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import net
from .errors import UndefinedMetricError
from .kernels import mann_whitney_auc
from .seeding import stream
from .traces import ActionTrace, normalize_entropy, stack_batch

REPORT_FORMAT = "tracedet-report-v1"
METHOD_NAMES = {"deterministic": "tracedet", "sampled": "tracedet", "forced_on": "tracedet_no_masking"}


@dataclass(frozen=True)
class RocResult:
    auroc: float
    n_pos: int
    n_neg: int
    tie_count: int


def _labels_array(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    return s, y


def auroc(scores, labels) -> RocResult:
    """Rank (Mann-Whitney) AUROC; tied scores across classes count one half."""
    s, y = _labels_array(scores, labels)
    u, n_pos, n_neg, ties = mann_whitney_auc(s, y)
    return RocResult(auroc=float(u) / (n_pos * n_neg), n_pos=int(n_pos), n_neg=int(n_neg), tie_count=int(ties))


def auroc_bruteforce(scores, labels) -> float:
    s, y = _labels_array(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)


def ave_entropy_score(trace: ActionTrace) -> float:
    return float(normalize_entropy(trace).entropies.mean())


@dataclass
class MaskDiagnostics:
    """Per-example step-selection statistics on raw-nats entropies.

    ``e_bar`` is NaN for examples whose selected set is empty.
    """

    ids: list
    labels: np.ndarray
    selected: list
    h_max: np.ndarray
    e_bar: np.ndarray
    selection_rate: np.ndarray
    window_recall: dict = field(default_factory=dict)
    window_precision: dict = field(default_factory=dict)

    def summary(self) -> dict:
        valid = ~np.isnan(self.e_bar)
        rec = list(self.window_recall.values())
        prec = [v for v in self.window_precision.values() if not math.isnan(v)]
        return {
            "mean_selection_rate": float(self.selection_rate.mean()),
            "e_bar_mean": float(np.nanmean(self.e_bar)) if valid.any() else None,
            "e_bar_var": e_bar_variance(self),
            "e_bar_within_label_var": e_bar_variance(self, within_label=True),
            "empty_selection": int((~valid).sum()),
            "window_recall": float(np.mean(rec)) if rec else None,
            "window_precision": float(np.mean(prec)) if prec else None,
        }

    def to_plot_json(self) -> dict:
        return {
            "ids": list(self.ids),
            "labels": self.labels.tolist(),
            "e_bar": [None if math.isnan(v) else float(v) for v in self.e_bar],
            "selection_rate": self.selection_rate.tolist(),
            "selected": [list(s) for s in self.selected],
        }


def e_bar_variance(diag: MaskDiagnostics, within_label: bool = False) -> Optional[float]:
    """Spread of E-bar across examples, optionally averaged within each label."""
    valid = ~np.isnan(diag.e_bar)
    if not valid.any():
        return None
    if not within_label:
        return float(np.var(diag.e_bar[valid]))
    parts = [np.var(diag.e_bar[valid & (diag.labels == c)]) for c in (0, 1) if np.any(valid & (diag.labels == c))]
    return float(np.mean(parts))


def mask_diagnostics(items, mask: np.ndarray) -> MaskDiagnostics:
    """Build diagnostics from items (LabeledTrace) and a (T, B) binary mask."""
    mask = np.asarray(mask) > 0.5
    T = mask.shape[0]
    h_max = np.stack([it.trace.entropies.max(axis=1) for it in items], axis=0)
    selected, e_bar, rates = [], [], []
    recall, precision = {}, {}
    for b, it in enumerate(items):
        S = tuple(int(t) for t in np.flatnonzero(mask[:, b]))
        selected.append(S)
        rates.append(len(S) / T)
        e_bar.append(float(h_max[b, list(S)].mean()) if S else math.nan)
        if it.planted_window:
            w = set(it.planted_window)
            hit = len(w & set(S))
            recall[it.example_id] = hit / len(w)
            precision[it.example_id] = hit / len(S) if S else math.nan
    return MaskDiagnostics(
        ids=[it.example_id for it in items],
        labels=np.array([it.label for it in items], dtype=np.int64),
        selected=selected,
        h_max=h_max,
        e_bar=np.array(e_bar),
        selection_rate=np.array(rates),
        window_recall=recall,
        window_precision=precision,
    )


def predict_scores(params, config, items, normalize: bool = True, mask_mode: Optional[str] = None, seed: int = 0):
    """Eval-mode forward over ``items``; returns (scores, probs, mask) as arrays.

    Sampled-mode masks are drawn from the "eval" stream of ``seed``.
    """
    cfg = config if mask_mode is None else config.with_mode(mask_mode)
    batch = stack_batch(items, normalize=normalize)
    y_hat, probs, mask = net.forward(batch, params, cfg, rng=stream(seed, "eval"), train=False)
    return y_hat.data.copy(), (None if probs is None else probs.data.copy()), mask.data.copy()


def evaluate_model(params, config, items, mask_mode: Optional[str] = None, normalize: bool = True, seed: int = 0):
    """AUROC of the detector on ``items`` plus selection diagnostics."""
    scores, _, mask = predict_scores(params, config, items, normalize=normalize, mask_mode=mask_mode, seed=seed)
    roc = auroc(scores, [it.label for it in items])
    return roc, mask_diagnostics(items, mask)


def ave_entropy_auroc(items) -> RocResult:
    return auroc([ave_entropy_score(it.trace) for it in items], [it.label for it in items])


def _render_table(rows) -> str:
    header = ("method", "variant", "auroc", "n_pos", "n_neg")
    body = [(r["method"], r["variant"], f"{r['auroc']:.4f}", str(r["n_pos"]), str(r["n_neg"])) for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines) + "\n"


def compare_report(results: dict, path, variant: str = "default", extra: Optional[dict] = None) -> list:
    """Write ``report.json`` and ``report.txt`` under directory ``path``.

    ``results`` maps method name to a RocResult, or variant names to such
    maps. Rows are sorted by AUROC descending, then method name.
    """
    if not results:
        raise ValueError("compare_report needs at least one method")
    nested = all(isinstance(v, dict) for v in results.values())
    groups = results if nested else {variant: results}
    rows = []
    for var, methods in groups.items():
        for method, roc in methods.items():
            rows.append({"method": method, "variant": var, **asdict(roc)})
    rows.sort(key=lambda r: (r["variant"], -r["auroc"], r["method"]))
    os.makedirs(path, exist_ok=True)
    payload = {"format": REPORT_FORMAT, "rows": rows}
    if extra:
        payload["extra"] = extra
    with open(os.path.join(path, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(_render_table(rows))
    return rows
