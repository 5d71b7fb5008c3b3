"""Training objective: cross-entropy on predictions plus a Bernoulli-KL
selection regularizer that pulls every step probability toward the prior
ratio ``tau``.

The cross-entropy is a variational upper bound on ``-I(Y; A_sub)`` and the
KL term an upper bound on ``I(A; A_sub)``; neither mutual information is
estimated directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .net import PROB_CLAMP

# "mean": average over every (step, item) entry; "sum_steps": sum over steps, mean over items
EXT_REDUCTIONS = ("mean", "sum_steps")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    tau: float = 0.25
    ext_reduction: str = "mean"

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta", "must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError("tau", "must lie strictly inside (0, 1)")
        if self.ext_reduction not in EXT_REDUCTIONS:
            raise ValidationError("ext_reduction", f"expected one of {EXT_REDUCTIONS}")


@dataclass(frozen=True)
class LossBreakdown:
    cls: Tensor
    ext: Tensor
    total: Tensor
    beta: float

    def values(self) -> dict:
        return {"L_cls": float(self.cls.data), "L_ext": float(self.ext.data), "total": float(self.total.data)}


def cls_loss(y_hat, labels) -> Tensor:
    """Mean binary cross-entropy."""
    y_hat = ad.as_tensor(y_hat)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y_hat.shape != y.shape:
        raise ValidationError("labels", f"length {y.shape} does not match predictions {y_hat.shape}")
    log_p = ad.log(y_hat)
    log_q = ad.log(ad.sub(1.0, y_hat))
    ll = ad.add(ad.mul(log_p, Tensor(y)), ad.mul(log_q, Tensor(1.0 - y)))
    return ad.scalar_mul(ad.mean(ll), -1.0)


def ext_loss(probs, tau: float, reduction: str = "mean") -> Tensor:
    """KL(Bernoulli(p) || Bernoulli(tau)) over all (step, item) entries.

    ``probs`` is (T, B); it is clamped into [1e-6, 1 - 1e-6] first.
    """
    if not 0.0 < tau < 1.0:
        raise ValidationError("tau", f"must lie strictly inside (0, 1), got {tau!r}")
    if reduction not in EXT_REDUCTIONS:
        raise ValidationError("reduction", f"expected one of {EXT_REDUCTIONS}")
    p = ad.clip(ad.as_tensor(probs), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = ad.sub(1.0, p)
    kl = ad.add(
        ad.mul(p, ad.sub(ad.log(p), math.log(tau))),
        ad.mul(q, ad.sub(ad.log(q), math.log(1.0 - tau))),
    )
    if reduction == "mean" or kl.ndim < 2:
        return ad.mean(kl)
    return ad.mean(ad.sum(kl, axis=0))


def total_loss(y_hat, labels, probs, config: LossConfig) -> LossBreakdown:
    """Classification loss plus ``beta`` times the selection regularizer.

    ``probs=None`` (no extractor, as in the no-masking ablation) leaves only
    the classification term.
    """
    lc = cls_loss(y_hat, labels)
    le = Tensor(0.0) if probs is None else ext_loss(probs, config.tau, config.ext_reduction)
    total = lc if config.beta == 0.0 or probs is None else ad.add(lc, ad.scalar_mul(le, config.beta))
    return LossBreakdown(cls=lc, ext=le, total=total, beta=config.beta)
