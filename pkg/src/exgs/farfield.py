"""Far-field depth reparameterization: μ′ = e^f μ, s′ = e^f s.

The factor f scales position and size jointly about the node anchor, so a
Gaussian keeps its screen footprint (as seen from the anchor) while its
depth moves freely — multiplicative depth adaptation for distant content.
The custom autograd function below routes gradients through the stated
closed-form backward rule, which the finite-difference tests check.
"""

from __future__ import annotations

from typing import Tuple

import torch

F_LIMIT = 12.0  # e^12 ≈ 1.6e5 exceeds any plausible scene depth ratio


def _check_f(f: torch.Tensor) -> None:
    if not torch.isfinite(f).all():
        raise ValueError("non-finite far-field factor")
    if f.abs().max() > F_LIMIT + 1e-9:
        raise ValueError(f"|f| must be <= {F_LIMIT}")


def apply_ffg(mu: torch.Tensor, s: torch.Tensor, f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """μ′ = e^f μ and s′ = e^f s, elementwise over a batch.

    ``mu`` and ``s`` are node-local position and linear scale; ``f`` has one
    value per Gaussian (or is scalar).  Works on single vectors or batches.
    """
    mu = torch.as_tensor(mu)
    s = torch.as_tensor(s)
    f = torch.as_tensor(f, dtype=mu.dtype)
    _check_f(f)
    factor = torch.exp(f)
    fac = factor.unsqueeze(-1) if factor.dim() == mu.dim() - 1 else factor
    return mu * fac, s * fac


def ffg_backward(
    grad_mu_p: torch.Tensor,
    grad_s_p: torch.Tensor,
    mu_p: torch.Tensor,
    s_p: torch.Tensor,
    f: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Closed-form gradients of the reparameterization.

    grad_f = grad_μ′·μ′ + grad_s′·s′ (per-Gaussian dot products);
    grad_μ = e^f grad_μ′; grad_s = e^f grad_s′.
    """
    grad_mu_p = torch.as_tensor(grad_mu_p)
    grad_s_p = torch.as_tensor(grad_s_p)
    mu_p = torch.as_tensor(mu_p)
    s_p = torch.as_tensor(s_p)
    f = torch.as_tensor(f, dtype=mu_p.dtype)
    if grad_mu_p.shape != mu_p.shape or grad_s_p.shape != s_p.shape:
        raise ValueError("gradient/value shape mismatch")
    grad_f = (grad_mu_p * mu_p).sum(-1) + (grad_s_p * s_p).sum(-1)
    factor = torch.exp(f)
    fac = factor.unsqueeze(-1) if factor.dim() == mu_p.dim() - 1 else factor
    return grad_mu_p * fac, grad_s_p * fac, grad_f


class _ApplyFfg(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, s, f):
        _check_f(f)
        factor = torch.exp(f)
        fac = factor.unsqueeze(-1) if factor.dim() == mu.dim() - 1 else factor
        mu_p = mu * fac
        s_p = s * fac
        ctx.save_for_backward(mu_p, s_p, f)
        return mu_p, s_p

    @staticmethod
    def backward(ctx, grad_mu_p, grad_s_p):
        mu_p, s_p, f = ctx.saved_tensors
        grad_mu, grad_s, grad_f = ffg_backward(grad_mu_p, grad_s_p, mu_p, s_p, f)
        return grad_mu, grad_s, grad_f


def apply_ffg_autograd(mu: torch.Tensor, s: torch.Tensor, f: torch.Tensor):
    """apply_ffg wired through the manual backward rule for training graphs."""
    return _ApplyFfg.apply(mu, s, f)
