"""AdamW with decoupled weight decay, plus the divergence guard."""

from __future__ import annotations

import torch

from .errors import DivergenceError


def make_adamw(params, lr: float, weight_decay: float = 0.01,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def adamw_step(optimizer: torch.optim.Optimizer) -> None:
    """Apply one update from the populated gradients, then clear them."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                optimizer.zero_grad(set_to_none=True)
                raise DivergenceError("non-finite gradient encountered")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def step_count(optimizer: torch.optim.Optimizer) -> int:
    for state in optimizer.state.values():
        return int(state["step"])
    return 0
