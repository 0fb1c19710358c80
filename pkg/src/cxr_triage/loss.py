"""Class-weighted binary cross-entropy over per-class sigmoid scores."""

from __future__ import annotations

from typing import Mapping, Sequence

import torch

from .classes import ClassConfig

EPS = 1e-7


def compute_class_weights(train_counts: Mapping[str, int] | Sequence[int],
                          total: int | None = None):
    """Per-class ``(w_pos, w_neg)`` from training-set counts.

    With ``P`` positives and ``N = total - P`` negatives for a class,
    ``w_pos = N / (N + P)`` and ``w_neg = P / (N + P)``: the rarer side of
    each binary problem gets the larger weight.  ``total`` defaults to the
    sum of counts (labels are mutually exclusive).
    """
    items = list(train_counts.items()) if isinstance(train_counts, Mapping) else list(enumerate(train_counts))
    total = sum(c for _, c in items) if total is None else total
    weights = {}
    for cls, pos in items:
        if pos < 1:
            raise ValueError(f"class {cls!r} has no positive training samples; weights are degenerate")
        neg = total - pos
        if neg < 1:
            raise ValueError(f"class {cls!r} has no negative training samples; weights are degenerate")
        weights[cls] = (neg / (neg + pos), pos / (neg + pos))
    return weights


def class_config_with_weights(class_cfg: ClassConfig, labels: Sequence[str]) -> ClassConfig:
    """Attach weights computed from raw training labels to ``class_cfg``."""
    counts = [0] * class_cfg.num_classes
    for lbl in labels:
        counts[class_cfg.index(lbl)] += 1
    for name, c in zip(class_cfg.classes, counts):
        if c == 0:
            raise ValueError(f"class {name} has no training images")
    w = compute_class_weights(counts)
    return class_cfg.with_weights([w[i][0] for i in range(len(counts))],
                                  [w[i][1] for i in range(len(counts))])


def weighted_bce_loss(scores: torch.Tensor, labels: torch.Tensor, pos_weight, neg_weight,
                      eps: float = EPS) -> torch.Tensor:
    """Batch mean of the per-sample class-weighted BCE.

    ``scores`` is ``(B, C)`` in (0, 1); ``labels`` holds ``B`` class indices.
    Each sample contributes ``sum_c -w_pos[c] [y=c] log p_c - w_neg[c] [y!=c] log(1-p_c)``.
    Scores are clamped to ``[eps, 1-eps]`` before the logs.
    """
    if scores.dim() != 2:
        raise ValueError(f"scores must be (B, C), got shape {tuple(scores.shape)}")
    num_classes = scores.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.long, device=scores.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label index out of range for {num_classes} classes")
    pos_weight = torch.as_tensor(pos_weight, dtype=scores.dtype, device=scores.device)
    neg_weight = torch.as_tensor(neg_weight, dtype=scores.dtype, device=scores.device)
    target = torch.nn.functional.one_hot(labels, num_classes).to(scores.dtype)
    p = scores.clamp(eps, 1 - eps)
    per_elem = -(pos_weight * target * torch.log(p) + neg_weight * (1 - target) * torch.log1p(-p))
    return per_elem.sum(dim=1).mean()


def loss_for_config(scores, labels, class_cfg: ClassConfig) -> torch.Tensor:
    if class_cfg.pos_weight is None or class_cfg.neg_weight is None:
        raise ValueError("class weights not computed; call class_config_with_weights first")
    return weighted_bce_loss(scores, labels, class_cfg.pos_weight, class_cfg.neg_weight)
