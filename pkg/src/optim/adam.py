import math
from collections.abc import Iterable
from typing import Any

import torch
from torch.optim import Optimizer

from core.logger import logger


class Adam(Optimizer):
    """
    Bias-corrected Adam. A parameter group whose gradients contain a
    non-finite value is skipped for that step and counted in
    ``skipped_groups``; its moments are left untouched.
    """

    def __init__(
        self,
        params: Iterable[Any],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps))
        self.skipped_groups = 0

    def _group_is_finite(self, group: dict[str, Any]) -> bool:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                return False
        return True

    @torch.no_grad()
    def step(self, closure=None):  # type: ignore[override]
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for index, group in enumerate(self.param_groups):
            if not self._group_is_finite(group):
                self.skipped_groups += 1
                logger.warning(
                    f"Adam skipped parameter group {group.get('name', index)}: non-finite gradient "
                    f"({self.skipped_groups} skipped so far)"
                )
                continue

            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)

                state["step"] += 1
                t = state["step"]
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)

                bias1 = 1 - beta1**t
                bias2 = 1 - beta2**t
                denom = (exp_avg_sq / bias2).sqrt_().add_(group["eps"])
                p.addcdiv_(exp_avg, denom, value=-group["lr"] / bias1)

        return loss


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: dict[str, Any],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[torch.Tensor], dict[str, Any]]:
    """
    Functional form of one Adam update on plain tensors.
    ``state`` holds ``step`` and per-tensor moments; a fresh dict starts at zero.
    """
    if any(not torch.isfinite(g).all() for g in grads):
        skipped = dict(state)
        skipped["skipped"] = skipped.get("skipped", 0) + 1
        return [p.clone() for p in params], skipped

    beta1, beta2 = betas
    step = state.get("step", 0) + 1
    m = state.get("m") or [torch.zeros_like(p) for p in params]
    v = state.get("v") or [torch.zeros_like(p) for p in params]
    new_m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(m, grads)]
    new_v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(v, grads)]
    correction = math.sqrt(1 - beta2**step) / (1 - beta1**step)
    updated = [
        p - lr * correction * mi / (vi.sqrt() + eps * math.sqrt(1 - beta2**step))
        for p, mi, vi in zip(params, new_m, new_v)
    ]
    return updated, {**state, "step": step, "m": new_m, "v": new_v}
