"""Mini-batch training with Adam, validation-AUROC model selection and the
hyperparameter grid search."""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import net
from .errors import NumericalAbort, ValidationError
from .evaluation import auroc
from .objectives import LossConfig, total_loss
from .seeding import STREAMS, stream  # noqa: F401
from .traces import stack_batch

log = logging.getLogger(__name__)



@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: net.ModelConfig = field(default_factory=net.ModelConfig)
    normalize_inputs: bool = True
    clip_norm: float = 5.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs", "must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr", "must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size", "must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "model" in d:
            d["model"] = net.ModelConfig(**d["model"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class TrainHistory:
    L_cls: list = field(default_factory=list)
    L_ext: list = field(default_factory=list)
    total: list = field(default_factory=list)
    val_auroc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        epochs = [
            {"epoch": i, "L_cls": c, "L_ext": e, "total": t, "val_auroc": a, "val_loss": v}
            for i, (c, e, t, a, v) in enumerate(zip(self.L_cls, self.L_ext, self.total, self.val_auroc, self.val_loss))
        ]
        return {"epochs": epochs, "best_epoch": self.best_epoch, "wall_clock": self.wall_clock}


class Adam:
    """Bias-corrected Adam over a dict of leaf tensors, updated in place."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _clip_global(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def training_items(dataset):
    """Train split if present, else the validation split (200/200 protocol)."""
    train = dataset.subset("train")
    return train if train else dataset.subset("val")


def _param_grads(params, root):
    grads = ad.backward(root)
    return {k: grads[p] for k, p in params.items() if p in grads}


def _eval_loss_and_auc(params, cfg: TrainConfig, batch):
    # a fresh eval stream per call keeps validation masks identical across epochs
    y_hat, probs, _ = net.forward(batch, params, cfg.model, rng=stream(cfg.seed, "eval"),
                                  train=False, skip_extractor=True)
    loss = total_loss(y_hat, batch.labels, probs, cfg.loss)
    try:
        auc = auroc(y_hat.data, batch.labels).auroc
    except ValueError:
        auc = float("nan")
    return float(loss.total.data), auc


def train(dataset, cfg: TrainConfig, val_items=None):
    """Train a detector and return (params at best val-AUROC epoch, history).

    Validation AUROC uses eval-mode masks drawn from the fixed "eval" stream.
    Ties between epochs go to the lower validation loss, then the earlier
    epoch. In forced-on mode the extractor is bypassed and only the
    classification loss is optimized.
    """
    items = training_items(dataset)
    if not items:
        raise ValidationError("dataset", "no training items (train and val splits are empty)")
    val_items = dataset.subset("val") if val_items is None else val_items
    if not val_items:
        raise ValidationError("dataset", "validation split is empty")
    start = time.perf_counter()
    T, n, _ = dataset.shape
    params = net.init_params(cfg.model, n, stream(cfg.seed, "init"))
    opt = Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    shuffle_rng = stream(cfg.seed, "shuffle")
    noise_rng = stream(cfg.seed, "gumbel")
    forced = cfg.model.mask_mode == "forced_on"
    if forced:
        params_used = {k: p for k, p in params.items() if k.startswith("pred")}
        opt = Adam(params_used, cfg.lr, cfg.adam_betas, cfg.adam_eps)

    full = stack_batch(items, normalize=cfg.normalize_inputs)
    val_batch = stack_batch(val_items, normalize=cfg.normalize_inputs)
    hist = TrainHistory()
    best_key, best_params = None, None
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(items))
        sums = np.zeros(3)
        count = 0
        for bi, lo in enumerate(range(0, len(items), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            data = full.data[:, idx, :]
            labels = full.labels[idx]
            y_hat, probs, _ = net.forward(data, params, cfg.model, rng=noise_rng, train=True, skip_extractor=True)
            parts = total_loss(y_hat, labels, probs, cfg.loss)
            vals = parts.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {bi}: {vals}")
            grads = _param_grads(opt.params, parts.total)
            _clip_global(grads, cfg.clip_norm)
            opt.step(grads)
            sums += (vals["L_cls"], vals["L_ext"], vals["total"])
            count += 1
        means = sums / count
        v_loss, v_auc = _eval_loss_and_auc(params, cfg, val_batch)
        hist.L_cls.append(float(means[0]))
        hist.L_ext.append(float(means[1]))
        hist.total.append(float(means[2]))
        hist.val_auroc.append(v_auc)
        hist.val_loss.append(v_loss)
        key = (-(v_auc if math.isfinite(v_auc) else -1.0), v_loss, epoch)
        if best_key is None or key < best_key:
            best_key = key
            best_params = {k: p.data.copy() for k, p in params.items()}
            hist.best_epoch = epoch
        log.debug("epoch %d total=%.5f val_auroc=%.4f", epoch, means[2], v_auc)
    for k, p in params.items():
        p.data = best_params[k]
    hist.wall_clock = time.perf_counter() - start
    return params, hist


# ------------------------------------------------------------- grid search


def default_grid() -> dict:
    """The hyperparameter search space: 8 x 2 x 5 x 3 x 6 x 4 = 5760 points."""
    return {
        "lr": [float(x) for x in np.logspace(-5, -3, 8)],
        "batch_size": [8, 64],
        "dropout_rate": [float(x) for x in np.linspace(0.0, 0.4, 5)],
        "n_layers": [2, 3, 4],
        "beta": [float(x) for x in np.linspace(0.0, 2.0, 6)],
        "tau": [float(x) for x in np.linspace(0.1, 0.4, 4)],
    }


def grid_size(grid: dict) -> int:
    return int(np.prod([len(v) for v in grid.values()]))


def grid_points(grid: dict) -> list:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_point(base: TrainConfig, point: dict) -> TrainConfig:
    model_keys = {"dropout_rate", "n_layers", "d_model", "n_heads", "d_ff", "d_pe", "gumbel_temp"}
    loss_keys = {"beta", "tau"}
    model = replace(base.model, **{k: v for k, v in point.items() if k in model_keys})
    loss = replace(base.loss, **{k: v for k, v in point.items() if k in loss_keys})
    top = {k: v for k, v in point.items() if k not in model_keys | loss_keys}
    return replace(base, model=model, loss=loss, **top)


def _run_point(args):
    dataset, cfg, index, point = args
    _, hist = train(dataset, cfg)
    b = hist.best_epoch
    return {
        "index": index,
        "point": point,
        "val_auroc": hist.val_auroc[b],
        "total_loss": hist.total[b],
        "best_epoch": b,
        "config": cfg.to_dict(),
    }


def grid_search(dataset, grid: dict | None = None, budget: int = 1, seed: int = 0,
                base: TrainConfig | None = None, jobs: int = 1):
    """Train grid configurations and rank them by validation AUROC.

    The full product is used when ``budget`` covers it, otherwise a seeded
    uniform subsample of ``budget`` points. Returns (best TrainConfig,
    leaderboard rows sorted by AUROC desc, total loss asc, grid index asc).
    """
    if budget < 1:
        raise ValidationError("budget", "must be >= 1")
    grid = grid or default_grid()
    base = base or TrainConfig(seed=seed)
    points = grid_points(grid)
    if budget >= len(points):
        chosen = list(range(len(points)))
    else:
        chosen = sorted(int(i) for i in stream(seed, "grid").choice(len(points), size=budget, replace=False))
    tasks = [(dataset, apply_point(base, points[i]), i, points[i]) for i in chosen]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_point, tasks))
    else:
        rows = [_run_point(t) for t in tasks]
    rows.sort(key=lambda r: (-r["val_auroc"], r["total_loss"], r["index"]))
    best = TrainConfig.from_dict(rows[0]["config"])
    return best, rows
