"""A small deterministic Adam with per-group post-step constraints.

Written against plain tensors (no torch.optim state-dict machinery) so the
checkpoint format can serialize moments explicitly.  Groups may declare a
``quaternion`` flag (rows renormalized after each step) or a ``clamp``
range (applied elementwise after each step, used for the far-field depth
factor |f| <= 12).
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Tuple

import torch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15
LOG_FACTOR_LIMIT = 12.0


class Adam:
    """Decoupled-moment Adam over named parameter groups.

    Each group: {"name": str, "params": [tensor, ...], "lr": float,
    optional "quaternion": bool, optional "clamp": (lo, hi)}.
    Non-finite gradients skip the affected tensor's update for that step
    (the skip count is tracked in ``skipped_steps``).
    """

    def __init__(self, groups: Iterable[dict]) -> None:
        self.groups: List[dict] = []
        self.state: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = {}
        self.step_count = 0
        self.skipped_steps = 0
        for g in groups:
            group = dict(g)
            group["params"] = list(group["params"])
            if "lr" not in group:
                raise ValueError(f"group {group.get('name')!r} missing lr")
            for p in group["params"]:
                p.requires_grad_(True)
                self.state[id(p)] = (
                    torch.zeros_like(p, memory_format=torch.contiguous_format),
                    torch.zeros_like(p),
                )
            self.groups.append(group)

    def parameters(self) -> Iterable[torch.Tensor]:
        for g in self.groups:
            yield from g["params"]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - BETA1**t
        bc2 = 1.0 - BETA2**t
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                grad = p.grad
                m, v = self.state[id(p)]
                if grad is not None and not torch.isfinite(grad).all():
                    self.skipped_steps += 1
                    grad = None
                if grad is None:
                    # moments still decay so trajectories stay deterministic
                    m.mul_(BETA1)
                    v.mul_(BETA2)
                    continue
                m.mul_(BETA1).add_(grad, alpha=1.0 - BETA1)
                v.mul_(BETA2).addcmul_(grad, grad, value=1.0 - BETA2)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(EPS), value=-lr)
            if g.get("quaternion"):
                for p in g["params"]:
                    p /= p.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            if g.get("clamp") is not None:
                lo, hi = g["clamp"]
                for p in g["params"]:
                    p.clamp_(lo, hi)

    # -- explicit state for checkpointing ---------------------------------

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out: Dict[str, torch.Tensor] = {}
        for g in self.groups:
            for i, p in enumerate(g["params"]):
                m, v = self.state[id(p)]
                out[f"{g['name']}.{i}.m"] = m
                out[f"{g['name']}.{i}.v"] = v
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor], step_count: int) -> None:
        for g in self.groups:
            for i, p in enumerate(g["params"]):
                m = tensors[f"{g['name']}.{i}.m"]
                v = tensors[f"{g['name']}.{i}.v"]
                self.state[id(p)] = (
                    torch.as_tensor(m, dtype=p.dtype).reshape(p.shape).clone(),
                    torch.as_tensor(v, dtype=p.dtype).reshape(p.shape).clone(),
                )
        self.step_count = step_count
