"""Synthetic-pair combinatorics and the mean-teacher apparatus.

A batch of N cases yields N real head/abdomen pairs (the diagonal of the
N x N prediction matrix) and N(N-1) synthetic mixes (off-diagonal). The
teacher shares the student's architecture and is written to only by an
exponential moving average of the student's parameters.
"""

from __future__ import annotations

import copy
import math

import torch
from torch import nn


def enumerate_pairs(n: int) -> list[tuple[int, int]]:
    """All ordered (i, j) with i != j: exactly N(N-1) synthetic combinations."""
    if n < 2:
        raise ValueError(f"need N >= 2 to form synthetic pairs, got N={n}")
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def prediction_matrix(
    model, head_embeddings: torch.Tensor, abd_embeddings: torch.Tensor
) -> torch.Tensor:
    """N x N predictions from cached embeddings; never re-runs the encoder."""
    return model.prediction_matrix(head_embeddings, abd_embeddings)


def make_teacher(student: nn.Module) -> nn.Module:
    """Exact copy of the student; gradients disabled, updated only via EMA."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """theta_T <- m * theta_T + (1 - m) * theta_S, elementwise.

    Applies to parameters and floating-point buffers (batch-norm running
    stats); integer buffers are copied. The student is untouched.
    """
    if not 0 <= m < 1:
        raise ValueError(f"momentum must be in [0, 1), got {m}")
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher/student state dict keys differ")
    for key, t_val in t_state.items():
        s_val = s_state[key]
        if t_val.shape != s_val.shape:
            raise ValueError(
                f"shape mismatch for {key}: {tuple(t_val.shape)} vs {tuple(s_val.shape)}"
            )
        if t_val.is_floating_point():
            t_val.mul_(m).add_(s_val, alpha=1.0 - m)
        else:
            t_val.copy_(s_val)


def momentum_at(step: int, total_steps: int, m_start: float = 0.99, m_end: float = 0.9999) -> float:
    """Momentum schedule: log(1 - m) interpolates linearly over training."""
    if total_steps <= 0:
        return m_end
    frac = min(max(step / total_steps, 0.0), 1.0)
    log_gap = (1 - frac) * math.log(1 - m_start) + frac * math.log(1 - m_end)
    return 1.0 - math.exp(log_gap)
