"""Loss terms: task CE, rehearsal CE, consistency, pairwise TAM discrepancy, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.2
    lam: float = 0.1
    pd_temperature: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not self.pd_temperature > 0:
            raise ValueError("pd_temperature must be positive")


@dataclass
class LossBreakdown:
    l_task: float
    l_rehearsal: float
    l_cr: float
    l_pd: float
    total: float


def loss_task(logits: Tensor, labels) -> Tensor:
    return nx.cross_entropy(logits, labels)


def loss_rehearsal(current_logits: Tensor, labels, buffer_logits: Tensor, buffer_labels, alpha: float) -> Tensor:
    """Current-task CE plus ``alpha`` times CE on the replayed batch."""
    if buffer_logits.shape[0] == 0:
        raise ValueError("empty buffer batch; skip rehearsal instead")
    cur = loss_task(current_logits, labels)
    return nx.add(cur, nx.scale(nx.cross_entropy(buffer_logits, buffer_labels), alpha))


def _masked_sq(z: np.ndarray, current: Tensor, mask: np.ndarray | None) -> Tensor:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("target logits must be finite")
    width = z.shape[1]
    if width > current.shape[1]:
        raise ValueError(f"target width {width} exceeds current logits width {current.shape[1]}")
    d = nx.sub(nx.take_columns(current, width), nx.tensor(z))
    sq = nx.mul(d, d)
    return nx.mul(sq, nx.tensor(mask)) if mask is not None else sq


def loss_consistency(z, current_logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Batch mean of per-sample squared L2 distance over the first ``z.shape[1]`` logits.

    ``mask`` (same shape as ``z``) drops padded components of shorter stored targets.
    """
    n = current_logits.shape[0]
    return nx.scale(nx.total(_masked_sq(z, current_logits, mask)), 1.0 / n)


def loss_der_logit_replay(z, current_logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Elementwise MSE against stored logits (DER++ style), truncated to the stored width."""
    sq = _masked_sq(z, current_logits, mask)
    count = float(mask.sum()) if mask is not None else float(np.asarray(z).size)
    if count == 0:
        return nx.scale(nx.total(sq), 0.0)
    return nx.scale(nx.total(sq), 1.0 / count)


def loss_pairwise_discrepancy(tams, r: Tensor, current: int, temperature: float = 1.0) -> Tensor:
    """Sum over earlier TAMs of the batch-mean L1 gap between softmaxed gates.

    Earlier TAM outputs go through ``stopgrad`` so only the current TAM (and
    the representation feeding it) receives gradient.
    """
    if current < 0 or current >= len(tams):
        raise IndexError(f"current TAM {current} outside [0, {len(tams)})")
    if current == 0:
        return nx.tensor(0.0)
    inv_t = 1.0 / temperature
    cur = nx.softmax(nx.scale(tams[current](r), inv_t))
    out = None
    for k in range(current):
        prev = nx.stopgrad(nx.softmax(nx.scale(tams[k](r), inv_t)))
        term = nx.mean(nx.l1_norm(nx.sub(cur, prev)))
        out = term if out is None else nx.add(out, term)
    return out


def loss_total(
    l_task: Tensor,
    cfg: LossConfig,
    l_rehearsal: Tensor | None = None,
    l_cr: Tensor | None = None,
    l_pd: Tensor | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """``l_task + alpha*l_rehearsal + beta*l_cr - lam*l_pd``; absent terms count as 0.

    Terms whose weight is zero are left out of the graph entirely.
    """
    total = l_task
    if l_rehearsal is not None and cfg.alpha != 0:
        total = nx.add(total, nx.scale(l_rehearsal, cfg.alpha))
    if l_cr is not None and cfg.beta != 0:
        total = nx.add(total, nx.scale(l_cr, cfg.beta))
    if l_pd is not None and cfg.lam != 0:
        total = nx.sub(total, nx.scale(l_pd, cfg.lam))

    def val(t):
        return 0.0 if t is None else t.item()

    return total, LossBreakdown(val(l_task), val(l_rehearsal), val(l_cr), val(l_pd), total.item())
