"""Contrastive objectives: InfoNCE against queued negatives, the anchored
two-term total loss, and the baseline/ablation loss modes.

Convention throughout: the positive is element 0 of each row's partition
function, logits are similarities divided by tau, and log-sum-exp with
max-subtraction (torch.logsumexp) keeps everything finite at small tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .encoders import EmbeddingBatch, ShapeError

VALID_MODES = ("leoclr", "moco_baseline", "end_to_end", "random_anchor",
               "attract_all", "end_to_end_baseline")

QUEUE_MODES = ("leoclr", "moco_baseline", "random_anchor", "attract_all")


class ContractError(ValueError):
    """Inputs violate the objective's numeric contract."""


class ConfigurationError(ValueError):
    """Loss mode and supplied inputs do not fit together."""


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    loss_mode: str = "leoclr"
    reduction: str = "mean"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.loss_mode not in VALID_MODES:
            raise ConfigurationError(f"unknown loss_mode {self.loss_mode!r} "
                                     f"(valid: {list(VALID_MODES)})")
        if self.reduction not in ("mean", "sum"):
            raise ConfigurationError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class LossBreakdown:
    """Per-step loss decomposition; total keeps the autograd graph."""

    total: torch.Tensor
    term1: float
    term2: float
    positive_logit_mean: float
    negative_logit_mean: float
    term3: Optional[float] = None


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ContractError(f"{name} contains non-finite values")


def _check_unit_rows(name: str, t: torch.Tensor) -> None:
    norms = t.detach().norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
        raise ContractError(f"{name} rows must be unit-norm")


def _nce_rows(u: torch.Tensor, v_plus: torch.Tensor, negatives: torch.Tensor,
              tau: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Row-wise InfoNCE vs a shared negatives matrix.

    Returns (per-row loss, positive logits B, negative logits B x N).
    """
    pos = (u * v_plus).sum(dim=1) / tau
    neg = (u @ negatives.T) / tau
    logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    loss = torch.logsumexp(logits, dim=1) - pos
    return loss, pos, neg


def info_nce(u: torch.Tensor, v_plus: torch.Tensor, negatives: torch.Tensor,
             tau: float) -> torch.Tensor:
    """Single-query InfoNCE; the positive participates in the partition function."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if u.ndim != 1 or v_plus.ndim != 1 or negatives.ndim != 2:
        raise ShapeError("expected u (D,), v_plus (D,), negatives (N, D)")
    if negatives.shape[0] == 0:
        raise ContractError("negatives must be non-empty")
    for name, t in (("u", u), ("v_plus", v_plus), ("negatives", negatives)):
        _check_finite(name, t)
        _check_unit_rows(name, t)
    loss, _, _ = _nce_rows(u.unsqueeze(0), v_plus.unsqueeze(0), negatives, tau)
    return loss[0]


def info_nce_batch(U: EmbeddingBatch, V_plus: EmbeddingBatch, negatives: torch.Tensor,
                   tau: float) -> torch.Tensor:
    """Row i is info_nce(U_i, V_plus_i, negatives, tau); no reduction."""
    if not (U.normalized and V_plus.normalized):
        raise ContractError("info_nce_batch requires normalized embedding batches")
    if U.vectors.shape != V_plus.vectors.shape:
        raise ShapeError(f"U {tuple(U.vectors.shape)} and V_plus "
                         f"{tuple(V_plus.vectors.shape)} must match")
    if negatives.ndim != 2 or negatives.shape[1] != U.vectors.shape[1]:
        raise ShapeError(f"negatives must be N x {U.vectors.shape[1]}, "
                         f"got {tuple(negatives.shape)}")
    if negatives.shape[0] == 0:
        raise ContractError("negatives must be non-empty")
    _check_finite("negatives", negatives)
    loss, _, _ = _nce_rows(U.vectors, V_plus.vectors, negatives, tau)
    return loss


def _reduce(per_row: torch.Tensor, reduction: str) -> torch.Tensor:
    return per_row.mean() if reduction == "mean" else per_row.sum()


def _require_stop_gradient(cfg: ContrastiveConfig, *batches: Optional[EmbeddingBatch]) -> None:
    for b in batches:
        if b is not None and b.vectors.requires_grad:
            raise ContractError(f"{cfg.loss_mode} mode expects stop-gradient key embeddings")


def total_loss(anchor: EmbeddingBatch, v1: Optional[EmbeddingBatch],
               v2: Optional[EmbeddingBatch], negatives: Optional[torch.Tensor],
               cfg: ContrastiveConfig,
               crop_query: Optional[EmbeddingBatch] = None) -> LossBreakdown:
    """Mode-dispatched training objective.

    leoclr / random_anchor: anchor attracted to both key crops, queue negatives.
    moco_baseline: single crop-to-crop term (anchor slot carries q(crop1)).
    attract_all: the two anchored terms plus a crop-to-crop term; needs
        crop_query = query-side embedding of crop1 so the third term trains.
    end_to_end: anchored pairing, in-batch negatives, no queue.
    end_to_end_baseline: symmetric two-crop objective, in-batch negatives.
    """
    mode = cfg.loss_mode
    if mode in QUEUE_MODES:
        if negatives is None:
            raise ConfigurationError(f"{mode} mode requires queue negatives")
        if negatives.shape[0] == 0:
            raise ContractError("negatives must be non-empty")
        _check_finite("negatives", negatives)
    else:
        if negatives is not None:
            raise ConfigurationError(f"{mode} mode uses in-batch negatives; "
                                     "no queue may be supplied")

    if mode in ("leoclr", "random_anchor"):
        _require_stop_gradient(cfg, v1, v2)
        return _anchored_queue_loss(anchor, v1, v2, negatives, cfg)
    if mode == "moco_baseline":
        _require_stop_gradient(cfg, v1)
        return _single_term_queue_loss(anchor, v1, negatives, cfg)
    if mode == "attract_all":
        if crop_query is None:
            raise ConfigurationError("attract_all mode requires crop_query "
                                     "(query embedding of crop1)")
        _require_stop_gradient(cfg, v1, v2)
        return _attract_all_loss(anchor, v1, v2, crop_query, negatives, cfg)
    if mode == "end_to_end":
        return _end_to_end_anchored_loss(anchor, v1, v2, cfg)
    if mode == "end_to_end_baseline":
        return _end_to_end_two_crop_loss(anchor, v1, cfg)
    raise ConfigurationError(f"unknown loss_mode {mode!r}")


def _shape_congruent(*batches: EmbeddingBatch) -> None:
    shapes = {tuple(b.vectors.shape) for b in batches}
    if len(shapes) != 1:
        raise ShapeError(f"embedding batches must be shape-congruent, got {sorted(shapes)}")


def _anchored_queue_loss(anchor, v1, v2, negatives, cfg) -> LossBreakdown:
    _shape_congruent(anchor, v1, v2)
    l1, p1, n1 = _nce_rows(anchor.vectors, v1.vectors, negatives, cfg.tau)
    l2, p2, n2 = _nce_rows(anchor.vectors, v2.vectors, negatives, cfg.tau)
    t1, t2 = _reduce(l1, cfg.reduction), _reduce(l2, cfg.reduction)
    return LossBreakdown(
        total=t1 + t2, term1=t1.item(), term2=t2.item(),
        positive_logit_mean=torch.cat([p1, p2]).mean().item(),
        negative_logit_mean=n1.mean().item(),  # n2 is the same matrix
    )


def _single_term_queue_loss(anchor, v1, negatives, cfg) -> LossBreakdown:
    _shape_congruent(anchor, v1)
    l1, p1, n1 = _nce_rows(anchor.vectors, v1.vectors, negatives, cfg.tau)
    t1 = _reduce(l1, cfg.reduction)
    return LossBreakdown(total=t1, term1=t1.item(), term2=0.0,
                         positive_logit_mean=p1.mean().item(),
                         negative_logit_mean=n1.mean().item())


def _attract_all_loss(anchor, v1, v2, crop_query, negatives, cfg) -> LossBreakdown:
    _shape_congruent(anchor, v1, v2, crop_query)
    l1, p1, n1 = _nce_rows(anchor.vectors, v1.vectors, negatives, cfg.tau)
    l2, p2, _ = _nce_rows(anchor.vectors, v2.vectors, negatives, cfg.tau)
    l3, p3, n3 = _nce_rows(crop_query.vectors, v2.vectors, negatives, cfg.tau)
    t1, t2, t3 = (_reduce(l, cfg.reduction) for l in (l1, l2, l3))
    return LossBreakdown(
        total=t1 + t2 + t3, term1=t1.item(), term2=t2.item(), term3=t3.item(),
        positive_logit_mean=torch.cat([p1, p2, p3]).mean().item(),
        negative_logit_mean=torch.cat([n1, n3]).mean().item(),
    )


def _end_to_end_anchored_loss(anchor, v1, v2, cfg) -> LossBreakdown:
    _shape_congruent(anchor, v1, v2)
    b = len(anchor)
    if b < 2:
        raise ConfigurationError("end_to_end mode needs batch size >= 2 for negatives")
    u = anchor.vectors
    V = torch.cat([v1.vectors, v2.vectors], dim=0)
    sims = (u @ V.T) / cfg.tau  # B x 2B
    idx = torch.arange(b, device=sims.device)
    pos1, pos2 = sims[idx, idx], sims[idx, idx + b]
    # term1: positive v1_i; v2_i (same image) is excluded, not a negative
    m1 = sims.clone()
    m1[idx, idx + b] = float("-inf")
    l1 = torch.logsumexp(m1, dim=1) - pos1
    m2 = sims.clone()
    m2[idx, idx] = float("-inf")
    l2 = torch.logsumexp(m2, dim=1) - pos2
    t1, t2 = _reduce(l1, cfg.reduction), _reduce(l2, cfg.reduction)
    neg_sum = sims.sum() - pos1.sum() - pos2.sum()
    return LossBreakdown(
        total=t1 + t2, term1=t1.item(), term2=t2.item(),
        positive_logit_mean=torch.cat([pos1, pos2]).mean().item(),
        negative_logit_mean=(neg_sum / (b * (2 * b - 2))).item(),
    )


def _end_to_end_two_crop_loss(anchor, v1, cfg) -> LossBreakdown:
    _shape_congruent(anchor, v1)
    b = len(anchor)
    if b < 2:
        raise ConfigurationError("end_to_end_baseline mode needs batch size >= 2")
    Z = torch.cat([anchor.vectors, v1.vectors], dim=0)
    sims = (Z @ Z.T) / cfg.tau  # 2B x 2B
    n = 2 * b
    idx = torch.arange(n, device=sims.device)
    pos_col = (idx + b) % n
    pos = sims[idx, pos_col]
    masked = sims.clone()
    masked[idx, idx] = float("-inf")  # self-similarity never participates
    losses = torch.logsumexp(masked, dim=1) - pos
    t1, t2 = _reduce(losses[:b], cfg.reduction), _reduce(losses[b:], cfg.reduction)
    neg_sum = sims.sum() - sims.diagonal().sum() - pos.sum()
    return LossBreakdown(
        total=t1 + t2, term1=t1.item(), term2=t2.item(),
        positive_logit_mean=pos.mean().item(),
        negative_logit_mean=(neg_sum / (n * (n - 2))).item(),
    )
