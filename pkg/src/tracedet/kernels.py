"""Hot numeric kernels with a numba loop path and a pure-numpy fallback.

The public names (``entropy_rows``, ``peak_mass_for_entropy``,
``mann_whitney_auc``) dispatch to the compiled loop versions when numba is
enabled and to the vectorized numpy versions otherwise. Both variants are kept
importable so they can be benchmarked and cross-checked against each other.
"""

import numpy as np

from ._accel import HAS_NUMBA, maybe_njit

# bisection steps for inverting the peak+uniform entropy; 2**-60 is far below f64 needs
_BISECT_ITERS = 60


# ---------------------------------------------------------------- entropies


@maybe_njit(cache=True, nogil=True)
def entropy_rows_loop(probs):
    n, v = probs.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(v):
            p = probs[i, j]
            if p > 0.0:
                acc -= p * np.log(p)
        # -0.0 and tiny negatives from rounding on one-hot rows
        out[i] = acc if acc > 0.0 else 0.0
    return out


def entropy_rows_numpy(probs):
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(np.where(probs > 0.0, probs, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


# ------------------------------------------------- peak + uniform inversion


@maybe_njit(cache=True, nogil=True)
def _peak_entropy(q, v):
    # entropy of [q, (1-q)/(v-1), ...] in nats
    r = (1.0 - q) / (v - 1)
    h = 0.0
    if q > 0.0:
        h -= q * np.log(q)
    if r > 0.0:
        h -= (1.0 - q) * np.log(r)
    return h


@maybe_njit(cache=True, nogil=True)
def peak_mass_for_entropy_loop(h_norm, v):
    hmax = np.log(v)
    out = np.empty(h_norm.shape[0])
    for i in range(h_norm.shape[0]):
        target = h_norm[i] * hmax
        lo = 1.0 / v
        hi = 1.0
        # entropy falls monotonically as the peak mass grows from 1/v to 1
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            if _peak_entropy(mid, v) > target:
                lo = mid
            else:
                hi = mid
        out[i] = 0.5 * (lo + hi)
    return out


def peak_mass_for_entropy_numpy(h_norm, v):
    h_norm = np.asarray(h_norm, dtype=np.float64)
    target = h_norm * np.log(v)
    lo = np.full(h_norm.shape, 1.0 / v)
    hi = np.ones(h_norm.shape)
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        r = (1.0 - mid) / (v - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -mid * np.log(mid) - np.where(r > 0.0, (1.0 - mid) * np.log(np.where(r > 0, r, 1.0)), 0.0)
        above = h > target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return 0.5 * (lo + hi)


# ------------------------------------------------------------------- AUROC


@maybe_njit(cache=True, nogil=True)
def mann_whitney_auc_loop(scores, labels):
    """Return (tie-corrected U numerator, n_pos, n_neg, tied pairs across classes)."""
    order = np.argsort(scores, kind="mergesort")
    n = scores.shape[0]
    rank_sum = 0.0
    n_pos = 0
    tie_pairs = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg_rank = 0.5 * (i + j) + 1.0
        pos_here = 0
        for k in range(i, j + 1):
            if labels[order[k]] == 1:
                pos_here += 1
        rank_sum += avg_rank * pos_here
        n_pos += pos_here
        tie_pairs += pos_here * (j - i + 1 - pos_here)
        i = j + 1
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u, n_pos, n - n_pos, tie_pairs


def mann_whitney_auc_numpy(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    y = labels[order] == 1
    n = s.shape[0]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], n] - 1
    group = np.repeat(np.arange(starts.size), ends - starts + 1)
    avg_rank = 0.5 * (starts + ends) + 1.0
    pos_per_group = np.bincount(group, weights=y.astype(np.float64), minlength=starts.size)
    size = ends - starts + 1
    n_pos = int(y.sum())
    u = float(np.sum(avg_rank * pos_per_group)) - n_pos * (n_pos + 1) / 2.0
    tie_pairs = int(np.sum(pos_per_group * (size - pos_per_group)))
    return u, n_pos, n - n_pos, tie_pairs


if HAS_NUMBA:
    entropy_rows = entropy_rows_loop
    peak_mass_for_entropy = peak_mass_for_entropy_loop
    mann_whitney_auc = mann_whitney_auc_loop
else:
    entropy_rows = entropy_rows_numpy
    peak_mass_for_entropy = peak_mass_for_entropy_numpy
    mann_whitney_auc = mann_whitney_auc_numpy
