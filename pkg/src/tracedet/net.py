"""Sub-trace extractor and predictor.

The extractor encodes the entropy trace with a small pre-norm Transformer over
the step axis, scores each step through cross-attention against the raw trace
and squashes the score into a selection probability. A binary step mask is
drawn from those probabilities with a binary-concrete relaxation and a
straight-through estimator. The predictor averages the masked trace over
steps and feeds the result through a ReLU MLP.

Inputs follow the (T, B, D) layout of ``TraceBatch``; internally the encoder
runs batch-first.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArtifactMismatch, ShapeError, ValidationError

CKPT_FORMAT = "tracedet-ckpt-v1"
MASK_MODES = ("sampled", "deterministic", "forced_on")
PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_pe: int = 16
    d_ff: int = 64
    dropout_rate: float = 0.0
    gumbel_temp: float = 0.5
    mask_mode: str = "sampled"
    hard_mask: bool = True

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_layers", "d_pe", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(name, "must be >= 1")
        if self.d_model % self.n_heads:
            raise ValidationError("n_heads", f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_pe % 2:
            raise ValidationError("d_pe", "time embedding width must be even")
        if not 0.0 <= self.dropout_rate <= 0.4:
            raise ValidationError("dropout_rate", "must lie in [0, 0.4]")
        if self.gumbel_temp <= 0:
            raise ValidationError("gumbel_temp", "must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ValidationError("mask_mode", f"expected one of {MASK_MODES}")

    def with_mode(self, mode: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "mask_mode": mode})


# ----------------------------------------------------------------- params


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(config: ModelConfig, D: int, rng) -> dict:
    """Fresh Glorot-initialized parameters, keyed by a dotted name."""
    dm, dff, dpe = config.d_model, config.d_ff, config.d_pe
    shapes = {
        "in.w": (D, dm), "in.b": (dm,),
        "mix.w": (dm + dpe, dm), "mix.b": (dm,),
    }
    for layer in range(config.n_layers):
        p = f"enc{layer}."
        shapes.update({
            p + "ln1.g": (dm,), p + "ln1.b": (dm,),
            p + "wq": (dm, dm), p + "wk": (dm, dm), p + "wv": (dm, dm),
            p + "wo": (dm, dm), p + "bo": (dm,),
            p + "ln2.g": (dm,), p + "ln2.b": (dm,),
            p + "ff1.w": (dm, dff), p + "ff1.b": (dff,),
            p + "ff2.w": (dff, dm), p + "ff2.b": (dm,),
        })
    shapes.update({
        "out.ln.g": (dm,), "out.ln.b": (dm,),
        "out.w": (dm, dff), "out.b": (dff,),
        "xq.w": (dff, dm), "xk.w": (D + dpe, dm), "xk.b": (dm,), "xv.w": (D, dm), "xv.b": (dm,),
        "head.w": (dm, 1), "head.b": (1,),
        "pred1.w": (D, dm), "pred1.b": (dm,),
        "pred2.w": (dm, 1), "pred2.b": (1,),
    })
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            value = _glorot(rng, *shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def extractor_param_names(params: dict) -> list:
    return [k for k in params if not k.startswith("pred")]


# -------------------------------------------------------------- pieces


def time_embedding(T: int, d_pe: int) -> np.ndarray:
    if d_pe % 2:
        raise ValidationError("d_pe", "time embedding width must be even")
    t = np.arange(T, dtype=np.float64)[:, None]
    k = np.arange(d_pe // 2, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, 2.0 * k / d_pe)
    out = np.empty((T, d_pe))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def _linear(x, w, b=None):
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


def _affine_norm(x, g, b):
    return ad.add(ad.mul(ad.layer_norm(x), g), b)


def _check_batch(data, params):
    if data.ndim != 3:
        raise ShapeError("encode", data.shape)
    D = params["in.w"].shape[0]
    if data.shape[2] != D:
        raise ShapeError("encode", data.shape, params["in.w"].shape)


def _batch_first(data) -> Tensor:
    arr = data.data if hasattr(data, "labels") else data
    arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
    return Tensor(np.ascontiguousarray(np.transpose(arr, (1, 0, 2))))


def _self_attention(x, params, prefix, config, train, rng):
    B, T, dm = x.shape
    H = config.n_heads
    dh = dm // H

    def heads(w):
        y = ad.matmul(x, params[prefix + w])
        return ad.transpose(ad.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.dropout(ad.softmax(scores, axis=-1), config.dropout_rate, train, rng)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, dm))
    return _linear(ctx, params[prefix + "wo"], params[prefix + "bo"])


def encode(batch, params: dict, config: ModelConfig, train: bool = False, rng=None) -> Tensor:
    """Contextual step embeddings of shape (T, B, d_ff)."""
    data = batch.data if hasattr(batch, "labels") else batch
    _check_batch(np.asarray(data.data if isinstance(data, Tensor) else data), params)
    x = _batch_first(data)
    B, T, _ = x.shape
    dr = config.dropout_rate
    pe = np.broadcast_to(time_embedding(T, config.d_pe), (B, T, config.d_pe))
    h = ad.concat([_linear(x, params["in.w"], params["in.b"]), Tensor(pe)], axis=-1)
    h = _linear(h, params["mix.w"], params["mix.b"])
    for layer in range(config.n_layers):
        p = f"enc{layer}."
        a = _affine_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        h = ad.add(h, ad.dropout(_self_attention(a, params, p, config, train, rng), dr, train, rng))
        f = _affine_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        f = _linear(ad.relu(_linear(f, params[p + "ff1.w"], params[p + "ff1.b"])), params[p + "ff2.w"], params[p + "ff2.b"])
        h = ad.add(h, ad.dropout(f, dr, train, rng))
    h = _affine_norm(h, params["out.ln.g"], params["out.ln.b"])
    emb = _linear(h, params["out.w"], params["out.b"])
    return ad.transpose(emb, (1, 0, 2))


def extract_mask_probs(emb: Tensor, batch, params: dict) -> Tensor:
    """Per-step selection probabilities, shape (T, B), clamped into the open interval.

    Queries come from ``emb``; keys are a linear projection of the trace rows
    stamped with their time embedding, values a linear projection of the raw
    rows.
    """
    data = batch.data if hasattr(batch, "labels") else batch
    arr = np.asarray(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
    T, B, D = arr.shape
    if emb.shape[:2] != (T, B):
        raise ShapeError("extract_mask_probs", emb.shape, arr.shape)
    if params["xv.w"].shape[0] != D:
        raise ShapeError("extract_mask_probs", arr.shape, params["xv.w"].shape)
    dpe = params["xk.w"].shape[0] - D
    x = _batch_first(arr)
    pe = np.broadcast_to(time_embedding(T, dpe), (B, T, dpe))
    q = ad.matmul(ad.transpose(emb, (1, 0, 2)), params["xq.w"])
    k = _linear(ad.concat([x, Tensor(pe)], axis=-1), params["xk.w"], params["xk.b"])
    v = _linear(x, params["xv.w"], params["xv.b"])
    dm = q.shape[-1]
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dm))
    att = ad.matmul(ad.softmax(scores, axis=-1), v)
    logits = ad.reshape(_linear(att, params["head.w"], params["head.b"]), (B, T))
    probs = ad.sigmoid(ad.transpose(logits, (1, 0)))
    return ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)


def relaxed_bernoulli(probs: np.ndarray, temp: float, u: np.ndarray) -> np.ndarray:
    """Binary-concrete sample sigma((logit p + logit u) / temp) in plain numpy."""
    probs = np.asarray(probs, dtype=np.float64)
    logit = np.log(probs) - np.log1p(-probs) + np.log(u) - np.log1p(-u)
    z = logit / temp
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sample_mask(probs: Tensor, config: ModelConfig, rng=None, train: bool = False, noise=None) -> Tensor:
    """Draw the temporal step mask (T, B) from selection probabilities.

    sampled + train: binary-concrete relaxation, hard forward with a
    straight-through backward. sampled + eval: the same hard rounding with
    no gradient, so test-time masks follow the training distribution; pass
    a fixed-seed ``rng`` for reproducible scores. deterministic: threshold
    at 0.5. ``noise`` overrides the uniform draws (tests pin u = 0.5).
    """
    if config.mask_mode == "forced_on":
        return Tensor(np.ones(probs.shape))
    if config.mask_mode == "deterministic":
        return Tensor((probs.data > 0.5).astype(np.float64))
    if noise is None and rng is None:
        raise ValidationError("rng", "sampled mask mode needs an rng or explicit noise")
    u = noise if noise is not None else rng.random(probs.shape)
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    logistic = np.log(u) - np.log1p(-u)
    if not train:
        p = probs.data
        z = np.log(p) - np.log1p(-p) + logistic
        if config.hard_mask:
            return Tensor((z > 0.0).astype(np.float64))
        return Tensor(relaxed_bernoulli(p, config.gumbel_temp, u))
    logit = ad.sub(ad.log(probs), ad.log(ad.sub(1.0, probs)))
    relaxed = ad.sigmoid(ad.scalar_mul(ad.add(logit, logistic), 1.0 / config.gumbel_temp))
    if not config.hard_mask:
        return relaxed
    return ad.straight_through((relaxed.data > 0.5).astype(np.float64), relaxed)


def apply_mask(batch, mask) -> Tensor:
    data = batch.data if hasattr(batch, "labels") else batch
    A = data if isinstance(data, Tensor) else Tensor(np.asarray(data, dtype=np.float64))
    M = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
    if A.ndim != 3 or M.shape != A.shape[:2]:
        raise ShapeError("apply_mask", M.shape, A.shape)
    return ad.mul(ad.reshape(M, M.shape + (1,)), A)


def predict(a_sub, params: dict) -> Tensor:
    """Hallucination probability per batch item from the masked trace (T, B, D)."""
    A = a_sub if isinstance(a_sub, Tensor) else Tensor(np.asarray(a_sub, dtype=np.float64))
    if A.ndim != 3 or A.shape[2] != params["pred1.w"].shape[0]:
        raise ShapeError("predict", A.shape, params["pred1.w"].shape)
    pooled = ad.mean(A, axis=0)
    hidden = ad.relu(_linear(pooled, params["pred1.w"], params["pred1.b"]))
    out = ad.reshape(_linear(hidden, params["pred2.w"], params["pred2.b"]), (A.shape[1],))
    return ad.clip(ad.sigmoid(out), PROB_CLAMP, 1.0 - PROB_CLAMP)


def forward(batch, params: dict, config: ModelConfig, rng=None, train: bool = False, skip_extractor: bool = False):
    """Full pipeline; returns (y_hat (B,), mask_probs (T, B), mask (T, B)).

    ``skip_extractor`` (forced-on mode only) skips the encoder when the mask
    probabilities are not needed, e.g. while training the no-masking ablation.
    """
    data = batch.data if hasattr(batch, "labels") else batch
    arr = np.asarray(data, dtype=np.float64)
    if config.mask_mode == "forced_on" and skip_extractor:
        probs = None
        mask = Tensor(np.ones(arr.shape[:2]))
    else:
        emb = encode(arr, params, config, train=train, rng=rng)
        probs = extract_mask_probs(emb, arr, params)
        mask = sample_mask(probs, config, rng=rng, train=train)
    a_sub = Tensor(arr) if config.mask_mode == "forced_on" else apply_mask(arr, mask)
    return predict(a_sub, params), probs, mask


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict, config: ModelConfig, extra: dict | None = None) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "config": asdict(config),
        "params": {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()} for k, v in params.items()},
    }
    if extra:
        payload["extra"] = extra
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (params, ModelConfig, extra); ArtifactMismatch on any format problem."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ArtifactMismatch(f"{path}: not a checkpoint ({exc.msg})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else None
        raise ArtifactMismatch(f"{path}: expected {CKPT_FORMAT}, found {found!r}")
    try:
        config = ModelConfig(**payload["config"])
        params = {
            k: Tensor(np.array(v["values"], dtype=np.float64).reshape(v["shape"]), requires_grad=True, name=k)
            for k, v in payload["params"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactMismatch(f"{path}: malformed checkpoint ({exc})") from exc
    return params, config, payload.get("extra", {})
