"""Toy masked-diffusion sampler that emits labeled entropy traces.

Only the entropy-relevant dynamics are modelled. Every still-masked position
carries a parametric "peak + uniform" categorical whose entropy follows a
scenario-dependent schedule; each step records the entropy row *before*
remasking, then retains a scheduled number of positions according to the
remask policy. Retained positions never re-open.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .kernels import entropy_rows, peak_mass_for_entropy
from .traces import ActionTrace, LabeledTrace, TraceDataset

REMASK_POLICIES = ("low_confidence", "entropy", "random", "topk_margin")
PATTERNS = ("faithful", "interleaving", "inconsistent_guesses", "persistent_error")
HALLUCINATED = {"faithful": 0, "interleaving": 1, "inconsistent_guesses": 1, "persistent_error": 1}
# patterns whose evidence is confined to a window of steps
WINDOWED = ("interleaving", "inconsistent_guesses")

MASK = -1


@dataclass(frozen=True)
class RemaskPolicy:
    tag: str = "low_confidence"

    def __post_init__(self):
        if self.tag not in REMASK_POLICIES:
            raise ValidationError("remask", f"unknown policy {self.tag!r}; expected one of {REMASK_POLICIES}")


@dataclass(frozen=True)
class SimConfig:
    T: int = 64
    n: int = 32
    V: int = 16
    step_length: Optional[int] = None
    seed: int = 0
    remask: RemaskPolicy = field(default_factory=RemaskPolicy)
    frozen_decoded_entropy: bool = True

    def __post_init__(self):
        if isinstance(self.remask, str):
            object.__setattr__(self, "remask", RemaskPolicy(self.remask))
        for name in ("T", "n"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(name, "must be >= 1")
        if int(self.V) < 2:
            raise ValidationError("V", "must be >= 2")
        if self.step_length is not None and int(self.step_length) < 1:
            raise ValidationError("step_length", "must be >= 1")

    def retain_schedule(self) -> np.ndarray:
        """Number of positions retained at each step; sums to ``n``.

        Without a step length the n positions are spread as evenly as
        possible with the remainder falling on early steps. With a step
        length S, S positions are retained per step and whatever is left at
        the final step is retained there.
        """
        T, n = self.T, self.n
        if self.step_length is None:
            edges = np.array([math.ceil(t * n / T) for t in range(T + 1)])
            return np.diff(edges)
        counts = np.zeros(T, dtype=np.int64)
        left = n
        for t in range(T):
            take = min(self.step_length, left)
            counts[t] = take
            left -= take
        counts[-1] += left
        return counts

    @property
    def effective_step_length(self) -> int:
        if self.step_length is not None:
            return int(self.step_length)
        return max(1, int(self.retain_schedule().max()))


@dataclass(frozen=True)
class ScenarioSpec:
    pattern: str
    window: tuple = ()
    answer_span: tuple = ()
    intensity: float = 1.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValidationError("pattern", f"unknown pattern {self.pattern!r}")
        if not 0.0 < float(self.intensity) <= 1.0:
            raise ValidationError("intensity", "must lie in (0, 1]")
        object.__setattr__(self, "window", tuple(sorted(set(int(t) for t in self.window))))
        object.__setattr__(self, "answer_span", tuple(sorted(set(int(i) for i in self.answer_span))))
        if self.pattern in WINDOWED and not self.window:
            raise ValidationError("window", f"pattern {self.pattern!r} needs a non-empty window")
        if not self.answer_span:
            raise ValidationError("answer_span", "must name at least one position")

    @property
    def label(self) -> int:
        return HALLUCINATED[self.pattern]

    def validate_against(self, config: SimConfig) -> None:
        if any(t < 0 or t >= config.T for t in self.window):
            raise ValidationError("window", f"step indices must lie in 0..{config.T - 1}")
        if any(i < 0 or i >= config.n for i in self.answer_span):
            raise ValidationError("answer_span", f"positions must lie in 0..{config.n - 1}")


@dataclass
class SimSequenceState:
    """Mutable per-run state: decoded tokens and current predictive distributions."""

    tokens: np.ndarray
    step: int
    dists: np.ndarray

    @classmethod
    def fully_masked(cls, n: int, V: int) -> "SimSequenceState":
        return cls(tokens=np.full(n, MASK, dtype=np.int64), step=0, dists=np.full((n, V), 1.0 / V))

    @property
    def decoded(self) -> np.ndarray:
        return self.tokens != MASK


def step_entropy(dist) -> float:
    """Shannon entropy in nats of one categorical, with 0 ln 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError("dist", "expected a non-empty vector")
    if p.min() < 0.0 or abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError("dist", f"not a probability vector (sum={p.sum()!r})")
    h = float(entropy_rows(p[None, :])[0])
    return min(h, math.log(p.size))


def remask_select(confidences, margins, keep: int, policy, rng) -> set:
    """Pick ``keep`` candidate indices to retain under ``policy``.

    For the ``entropy`` policy callers pass negated entropies in the
    confidence slot, so "keep the largest" means "keep the lowest entropy".
    Ties go to the lowest index.
    """
    tag = policy.tag if isinstance(policy, RemaskPolicy) else RemaskPolicy(policy).tag
    conf = np.asarray(confidences, dtype=np.float64)
    k = conf.shape[0]
    if keep > k:
        raise ValidationError("keep", f"cannot retain {keep} of {k} candidates")
    if keep <= 0:
        return set()
    if tag == "random":
        return set(int(i) for i in rng.choice(k, size=keep, replace=False))
    key = np.asarray(margins, dtype=np.float64) if tag == "topk_margin" else conf
    # stable sort on the negated key keeps lower indices first among equals
    order = np.argsort(-key, kind="stable")
    return set(int(i) for i in order[:keep])


def _peak_dists(q: np.ndarray, argmax: np.ndarray, V: int) -> np.ndarray:
    d = np.repeat(((1.0 - q) / (V - 1))[:, None], V, axis=1)
    d[np.arange(q.size), argmax] = q
    return d


def _target_entropy_schedule(config, scenario, rng):
    """Normalized target entropies (T x n) for still-masked positions.

    Non-answer positions decay from a per-position level with a per-example
    speed; the answer span is shaped by the scenario pattern. All randomness
    here is label-independent nuisance except the pattern itself.
    """
    T, n = config.T, config.n
    u = np.arange(T) / max(T - 1, 1)
    span = np.array(scenario.answer_span, dtype=np.int64)
    inten = float(scenario.intensity)

    speed = rng.uniform(0.8, 3.0)
    levels = rng.uniform(0.15, 0.6, size=n)
    exps = speed * rng.uniform(0.7, 1.3, size=n)
    h = levels[None, :] * (1.0 - u[:, None]) ** exps[None, :]

    ans_level = rng.uniform(0.25, 0.45)
    ans_speed = rng.uniform(0.6, 1.8)
    ans = ans_level * (1.0 - u) ** ans_speed
    ans = np.repeat(ans[:, None], span.size, axis=1) * rng.uniform(0.9, 1.0, size=span.size)[None, :]

    window = np.array(scenario.window, dtype=np.int64)
    pattern = scenario.pattern
    if pattern == "persistent_error":
        # locks onto a wrong answer early and stays confident
        lock = rng.uniform(0.02, 0.12)
        ramp = np.clip(u / lock, 0.0, 1.0)
        ans = ans * (1.0 - inten * ramp)[:, None]
    elif pattern == "interleaving":
        high = min(1.0, ans_level + 0.6 * inten)
        low = ans_level * (1.0 - inten) * 0.5
        for j, t in enumerate(window):
            for k in range(span.size):
                # neighbouring answer tokens flip in opposite phase so the span never settles
                ans[t, k] = high if span.size == 1 or (j + k) % 2 == 0 else low
    elif pattern == "inconsistent_guesses":
        flat = 1.0 - 0.3 * (1.0 - inten)
        ans[window, :] = flat
    h[:, span] = ans
    h += np.clip(rng.normal(0.0, 0.01, size=h.shape), -0.02, 0.02)
    h = np.clip(h, 0.0, 1.0)
    if pattern in ("faithful", "persistent_error"):
        h = np.minimum.accumulate(h, axis=0)
    return h


def simulate_trace(config: SimConfig, scenario: ScenarioSpec, rng, example_id: str = "sim-0",
                   return_state: bool = False):
    """Run one toy denoising trajectory and return its labeled entropy trace."""
    scenario.validate_against(config)
    T, n, V = config.T, config.n, config.V
    schedule = config.retain_schedule()
    target = _target_entropy_schedule(config, scenario, rng)
    span = np.array(scenario.answer_span, dtype=np.int64)
    held_until = max(scenario.window) if scenario.pattern in WINDOWED else -1

    state = SimSequenceState.fully_masked(n, V)
    guess = rng.integers(0, V, size=n)
    frozen = np.zeros(n)
    ent = np.empty((T, n))
    decode_order = []
    carry = 0
    for t in range(T):
        state.step = t
        masked = ~state.decoded
        idx = np.flatnonzero(masked)
        if scenario.pattern == "inconsistent_guesses" and t in scenario.window:
            guess[span] = rng.integers(0, V, size=span.size)
        elif scenario.pattern == "interleaving" and t in scenario.window:
            guess[span] = (guess[span] + 1) % V
        if idx.size:
            q = peak_mass_for_entropy(target[t, idx], V)
            state.dists[idx] = _peak_dists(q, guess[idx], V)
        row = np.where(state.decoded, frozen if config.frozen_decoded_entropy else 0.0, 0.0)
        if idx.size:
            row[idx] = entropy_rows(state.dists[idx])
        ent[t] = np.clip(row, 0.0, math.log(V))

        # answer positions inside an active window keep being remasked
        eligible = idx if t > held_until else np.setdiff1d(idx, span)
        keep = int(schedule[t]) + carry
        if t == T - 1:
            eligible, keep = idx, idx.size
        take = min(keep, eligible.size)
        carry = keep - take
        if take:
            d = state.dists[eligible]
            top2 = np.sort(d, axis=1)[:, -2:] if V >= 2 else d
            conf = top2[:, -1]
            margin = top2[:, -1] - top2[:, 0]
            if config.remask.tag == "entropy":
                conf = -entropy_rows(d)
            chosen = remask_select(conf, margin, take, config.remask, rng)
            for c in sorted(chosen):
                pos = int(eligible[c])
                state.tokens[pos] = int(np.argmax(state.dists[pos]))
                frozen[pos] = ent[t, pos]
                decode_order.append((t, pos))

    trace = ActionTrace(
        entropies=ent,
        vocab_size=V,
        example_id=example_id,
        remask_strategy=config.remask.tag,
        step_length=config.effective_step_length,
        source="sim",
    )
    planted = scenario.window if scenario.pattern in WINDOWED else None
    labeled = LabeledTrace(trace=trace, label=scenario.label, planted_window=planted)
    if return_state:
        return labeled, state, decode_order
    return labeled


def default_windows(T: int, coverage: float = 0.2) -> dict:
    """Disjoint contiguous windows per windowed pattern, each ``coverage`` of T."""
    width = max(1, int(round(coverage * T)))
    start_a = max(0, int(round(0.25 * T)))
    start_b = min(T - width, start_a + width + max(1, T // 16))
    return {
        "interleaving": tuple(range(start_a, min(T, start_a + width))),
        "inconsistent_guesses": tuple(range(max(0, start_b), max(0, start_b) + width)),
    }


def default_answer_span(n: int) -> tuple:
    width = max(1, n // 8)
    start = min(n - width, n // 4)
    return tuple(range(start, start + width))


def synthesize_dataset(config: SimConfig, mix: dict, seed: Optional[int] = None, intensity: float = 0.7,
                       train_fraction: float = 0.0, windows: Optional[dict] = None,
                       answer_span: Optional[tuple] = None) -> TraceDataset:
    """Build a labeled dataset with ``mix[pattern]`` traces per pattern.

    Items are ordered by pattern in ``PATTERNS`` order restricted to the mix's
    key order, ids are zero-padded counters. Each item draws from its own
    stream spawned from ``(seed, index)``. The non-train part is split into
    halves val/test after a seeded shuffle.
    """
    seed = config.seed if seed is None else int(seed)
    for k, v in mix.items():
        if k not in PATTERNS:
            raise ValidationError("mix", f"unknown pattern {k!r}")
        if int(v) < 0:
            raise ValidationError("mix", f"negative count for {k!r}")
    total = sum(int(v) for v in mix.values())
    if total == 0:
        raise ValidationError("mix", "total count must be positive")
    if not 0.0 <= train_fraction < 1.0:
        raise ValidationError("train_fraction", "must lie in [0, 1)")
    windows = windows or default_windows(config.T)
    answer_span = answer_span or default_answer_span(config.n)
    width = len(str(total - 1))

    items = []
    idx = 0
    for pattern, count in mix.items():
        for _ in range(int(count)):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0, idx])))
            scen = ScenarioSpec(pattern=pattern, window=windows.get(pattern, ()), answer_span=answer_span,
                                intensity=intensity)
            items.append(simulate_trace(config, scen, rng, example_id=f"ex{idx:0{width}d}"))
            idx += 1

    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    order = split_rng.permutation(total)
    n_train = int(round(train_fraction * total))
    rest = total - n_train
    n_val = rest // 2 + rest % 2
    split = {}
    for rank, i in enumerate(order):
        name = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        split[items[i].example_id] = name
    return TraceDataset(items=tuple(items), split=split)
