"""Wasserstein critic/generator losses with gradient penalty and drift term."""

from __future__ import annotations

import torch

from ..errors import ShapeMismatch


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor,
                     u: torch.Tensor | None = None) -> torch.Tensor:
    """E[(||grad_x critic(x_hat)||_2 - 1)^2] on per-sample uniform interpolates."""
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    if u is None:
        u = torch.rand(real.shape[0], 1, 1, 1, dtype=real.dtype, device=real.device)
    x_hat = (u * real + (1.0 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grads, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic, real: torch.Tensor, fake: torch.Tensor,
                gp_weight: float = 10.0, drift_weight: float = 1e-3,
                u: torch.Tensor | None = None):
    """loss = E[D(fake)] - E[D(real)] + gp_weight*GP + drift_weight*E[D(real)^2].

    Returns (loss, parts); parts carries detached floats for logging.
    """
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    d_real = critic(real)
    d_fake = critic(fake.detach())
    w_term = d_fake.mean() - d_real.mean()
    gp = gradient_penalty(critic, real, fake, u=u)
    drift = d_real.pow(2).mean()
    loss = w_term + gp_weight * gp + drift_weight * drift
    parts = {
        "wasserstein": float(w_term.detach()),
        "gp": float(gp.detach()),
        "drift": float(drift.detach()),
        "loss": float(loss.detach()),
    }
    return loss, parts


def generator_loss(critic, fake: torch.Tensor) -> torch.Tensor:
    return -critic(fake).mean()
