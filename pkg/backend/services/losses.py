"""Scalar objectives shared by task recovery and bi-level distillation.

All functions work row-wise: the last dimension holds class probabilities and
every leading dimension is treated as a batch.
"""

import torch

from config import Config
from services.errors import InputError


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def ce_loss(probs, y) -> torch.Tensor:
    """
    Cross-entropy of a probability vector against a class position.

    Args:
        probs: (..., N) probabilities
        y: (...) integer class positions in [0, N)

    Returns:
        -log(probs[y]) with probs clamped below at 1e-12
    """
    probs = _as_tensor(probs)
    y = torch.as_tensor(y, dtype=torch.long, device=probs.device)
    n = probs.shape[-1]
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= n):
        raise InputError(f"class position out of range for {n} classes")
    picked = probs.gather(-1, y.unsqueeze(-1).expand(*probs.shape[:-1], 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(Config.PROB_FLOOR))


def kl_divergence(p, q) -> torch.Tensor:
    """KL(p || q) over the last dimension, both arguments clamped at 1e-12."""
    p = _as_tensor(p)
    q = _as_tensor(q, like=p)
    if p.shape[-1] != q.shape[-1]:
        raise InputError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    log_p = torch.log(p.clamp_min(Config.PROB_FLOOR))
    log_q = torch.log(q.clamp_min(Config.PROB_FLOOR))
    return (p * (log_p - log_q)).sum(-1).clamp_min(0.0)


def boundary_eta(task_probs, api_probs) -> torch.Tensor:
    """1 where both argmaxes agree (first maximal index wins ties), else 0."""
    task_probs = _as_tensor(task_probs)
    api_probs = _as_tensor(api_probs, like=task_probs)
    if task_probs.shape[-1] != api_probs.shape[-1]:
        raise InputError("task and API predictions have different widths")
    agree = task_probs.argmax(-1) == api_probs.argmax(-1)
    return agree.to(api_probs.dtype)


def boundary_loss(api_probs, y, task_probs, lambda_q: float) -> torch.Tensor:
    """CE(api, y) - lambda_q * eta * KL(task || api), per datum."""
    api_probs = _as_tensor(api_probs)
    task_probs = _as_tensor(task_probs, like=api_probs)
    ce = ce_loss(api_probs, y)
    eta = boundary_eta(task_probs, api_probs)
    return ce - lambda_q * eta * kl_divergence(task_probs, api_probs)
