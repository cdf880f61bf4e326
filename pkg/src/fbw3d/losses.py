"""Training losses: regression, pairwise rank hinge, consistency, and total.

All losses operate in normalized weight space (predictions and labels in
[0, 1]); gram-space metrics live in the evaluation module.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.001
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


def _check_same_length(p: torch.Tensor, y: torch.Tensor) -> None:
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: predictions {tuple(p.shape)} vs labels {tuple(y.shape)}")


def reg_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predictions and labels."""
    _check_same_length(p, y)
    return ((p - y) ** 2).mean()


def rank_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pairwise hinge on prediction order, gated by the label order.

    (1/N^2) * sum_ij max(0, -(p_i - p_j)) * [y_i > y_j]. Zero exactly when
    predictions are weakly order-consistent with the labels. The label
    indicator carries no gradient.
    """
    _check_same_length(p, y)
    n = p.shape[0]
    diff = p[:, None] - p[None, :]
    active = (y[:, None] > y[None, :]).to(p.dtype)
    return (torch.relu(-diff) * active).sum() / (n * n)


def semi_loss(p_student: torch.Tensor, p_teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared consistency over the N(N-1) off-diagonal (synthetic) pairs."""
    if p_student.shape != p_teacher.shape:
        raise ValueError(
            f"matrix shapes differ: {tuple(p_student.shape)} vs {tuple(p_teacher.shape)}"
        )
    if p_student.dim() != 2 or p_student.shape[0] != p_student.shape[1]:
        raise ValueError(f"expected square matrices, got {tuple(p_student.shape)}")
    n = p_student.shape[0]
    if n < 2:
        raise ValueError("consistency loss needs N >= 2 (no synthetic pairs for N=1)")
    off = ~torch.eye(n, dtype=torch.bool, device=p_student.device)
    return ((p_student - p_teacher) ** 2)[off].mean()


def total_loss(
    l_reg: torch.Tensor, l_rank: torch.Tensor, l_semi: torch.Tensor, w: LossWeights
) -> torch.Tensor:
    """Weighted sum: reg + alpha * rank + beta * semi."""
    return l_reg + w.alpha * l_rank + w.beta * l_semi
