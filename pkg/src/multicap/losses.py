"""Training objectives: cross-entropy, symmetric KL consistency, and the
per-submodel composite objective.

All losses are per-token means over non-padding positions, so the KL
scaling coefficient keeps the same magnitude regardless of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (Tensor, gather_last, log_softmax, masked_mean, mul,
                     softmax, sub, tsum)


@dataclass(frozen=True)
class ObjectiveConfig:
    """Scaling constants of the joint objective."""

    alpha_big: float = 5.0
    alpha_small: float = 10.0
    balance_coeff: float = 0.01

    def __post_init__(self):
        if self.alpha_big < 0 or self.alpha_small < 0:
            raise ConfigError("alpha must be non-negative")
        if self.balance_coeff < 0:
            raise ConfigError("balancing coefficient must be non-negative")


def cross_entropy(logits: Tensor, targets, pad_mask) -> Tensor:
    """Mean negative log-likelihood of targets over non-padding positions."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"target ids must lie in [0, {vocab})")
    logp = log_softmax(logits, -1)
    picked = gather_last(logp, targets)
    return -masked_mean(picked, pad_mask)


def symmetric_kl(logits_a: Tensor, logits_b: Tensor, pad_mask) -> Tensor:
    """Mean of D_KL(p||q) + D_KL(q||p) per non-padding position.

    Gradient flows into both logit tensors; detach one side to form a
    one-directional consistency term.
    """
    if logits_a.shape != logits_b.shape:
        raise DimensionError(
            f"logit shapes differ: {logits_a.shape} vs {logits_b.shape}")
    p = softmax(logits_a, -1)
    lp = log_softmax(logits_a, -1)
    q = softmax(logits_b, -1)
    lq = log_softmax(logits_b, -1)
    pointwise = tsum(mul(p, sub(lp, lq)) + mul(q, sub(lq, lp)), axis=-1)
    return masked_mean(pointwise, pad_mask)


def symmetric_kl_value(logits_a, logits_b, pad_mask) -> float:
    """Gradient-free symmetric KL on plain arrays (stage-2 monitoring)."""
    return symmetric_kl(Tensor(np.asarray(logits_a), dtype=np.asarray(logits_a).dtype),
                        Tensor(np.asarray(logits_b), dtype=np.asarray(logits_b).dtype),
                        pad_mask).item()


def composite_objective(ce: Tensor, kl: Tensor | None, balancing: Tensor | None,
                        alpha: float, stage: int, balance_coeff: float = 0.01) -> Tensor:
    """Stage 1: ce + alpha*kl (+ coeff*balancing); stage 2 drops the KL term.

    balancing is only passed for submodels that have MoE layers.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    out = ce
    if stage == 1:
        if kl is None:
            raise ContractError("stage 1 requires a KL term")
        out = out + mul(kl, float(alpha))
    if balancing is not None:
        out = out + mul(balancing, float(balance_coeff))
    return out
