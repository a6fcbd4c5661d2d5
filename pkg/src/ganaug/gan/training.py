"""Single-GAN update steps and checkpointing.

All randomness (latents, gradient-penalty interpolates) is drawn from the
global torch RNG and batch selection from a caller-owned numpy generator, so
a run is reproducible from its seed and resumable bit-exactly from a
checkpoint holding both RNG states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import critic_loss, generator_loss
from .nets import Critic, Generator
from .optim import MaskedAdam


@dataclass
class GanTrainConfig:
    latent_dim: int = 256
    base_res: int = 4
    target_res: int = 32
    out_channels: int = 8
    fmap: int = 32
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.0, 0.99)
    gp_weight: float = 10.0
    drift_weight: float = 1e-3
    critic_updates_per_gen: int = 1
    minibatch_std: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.critic_updates_per_gen < 1:
            raise ValueError("batch size and critic update ratio must be >= 1")


def make_batch_sampler(pool: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Uniform with-replacement batches from an in-memory (N, C, H, W) pool."""
    pool_t = torch.from_numpy(np.ascontiguousarray(pool, dtype=np.float32))

    def sample() -> torch.Tensor:
        idx = rng.integers(0, pool_t.shape[0], size=batch_size)
        return pool_t[torch.from_numpy(idx)]

    return sample


def downsample_to(batch: torch.Tensor, resolution: int) -> torch.Tensor:
    """Average-pool a full-resolution batch down to the current stage size."""
    out = batch
    while out.shape[-1] > resolution:
        out = torch.nn.functional.avg_pool2d(out, 2)
    return out


def fade_real_batch(batch: torch.Tensor, alpha: float) -> torch.Tensor:
    """Blend real data the way the generator fades its new stage in."""
    if alpha >= 1.0:
        return batch
    low = torch.nn.functional.avg_pool2d(batch, 2)
    low = torch.nn.functional.interpolate(low, scale_factor=2, mode="nearest")
    return alpha * batch + (1.0 - alpha) * low


def critic_update(d: Critic, opt: MaskedAdam, real: torch.Tensor,
                  fake: torch.Tensor, cfg: GanTrainConfig) -> dict:
    opt.zero_grad()
    loss, parts = critic_loss(d, real, fake, gp_weight=cfg.gp_weight,
                              drift_weight=cfg.drift_weight)
    loss.backward()
    opt.step()
    return parts


def generator_update(g: Generator, opt: MaskedAdam,
                     heads: list[tuple[Critic, slice, float]],
                     batch_size: int, cfg: GanTrainConfig) -> dict:
    """One generator step against one or more critics.

    Each head is (critic, channel_slice, weight); the channel slice picks the
    generator output channels that critic scores. Heads with weight 0 are
    skipped entirely so the autograd graph (and hence the update) matches a
    run without them.
    """
    opt.zero_grad()
    z = torch.randn(batch_size, g.latent_dim)
    fake = g(z)
    loss = None
    parts = {}
    for i, (d, ch, w) in enumerate(heads):
        if w == 0.0:
            continue
        term = w * generator_loss(d, fake[:, ch])
        loss = term if loss is None else loss + term
        parts[f"g_loss_head{i}"] = float(term.detach())
    if loss is None:
        raise ValueError("all generator heads have zero weight")
    loss.backward()
    opt.step()
    parts["g_loss"] = float(loss.detach())
    return parts


def train_step(g: Generator, d: Critic, real, g_opt: MaskedAdam, d_opt: MaskedAdam,
               cfg: GanTrainConfig, critic_updates: int | None = None,
               channels: slice = slice(None)) -> dict:
    """`critic_updates` critic updates followed by one generator update.

    `real` is either a (B, C, H, W) batch reused for every critic update or a
    callable producing a fresh batch per update. `channels` selects which
    generator output channels this critic scores.
    """
    n_critic = cfg.critic_updates_per_gen if critic_updates is None else critic_updates
    get_real = real if callable(real) else (lambda: real)
    d_parts = {}
    for _ in range(n_critic):
        rb = torch.as_tensor(get_real(), dtype=torch.float32)
        z = torch.randn(rb.shape[0], g.latent_dim)
        with torch.no_grad():
            fake = g(z)[:, channels]
        d_parts = critic_update(d, d_opt, rb, fake, cfg)
    g_parts = generator_update(g, g_opt, [(d, channels, 1.0)], cfg.batch_size, cfg)
    return {"critic_updates": n_critic, **d_parts, **g_parts}


# --------------------------------------------------------------------------
# Checkpoints: everything needed to resume bit-exactly in one torch.save file
# --------------------------------------------------------------------------

def _gen_meta(g: Generator) -> dict:
    return {
        "latent_dim": g.latent_dim, "base_res": g.base_res,
        "target_res": g.target_res, "out_channels": g.out_channels,
        "fmap": g.fmap, "n_stages": g.n_stages, "alpha": g.alpha,
        "frozen": sorted(g.frozen),
    }


def _critic_meta(d: Critic) -> dict:
    return {
        "in_channels": d.in_channels, "base_res": d.base_res,
        "resolution": d.resolution, "fmap": d.fmap,
        "minibatch_std": d.use_mbstd, "alpha": d.alpha,
        "frozen": sorted(d.frozen),
    }


def save_checkpoint(path: Path | str, generator: Generator,
                    critics: dict[str, Critic] | None = None,
                    optimizers: dict[str, MaskedAdam] | None = None,
                    numpy_rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "generator": {"meta": _gen_meta(generator),
                      "state": generator.state_dict()},
        "critics": {name: {"meta": _critic_meta(d), "state": d.state_dict()}
                    for name, d in (critics or {}).items()},
        "optimizers": {name: opt.state_dict()
                       for name, opt in (optimizers or {}).items()},
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": numpy_rng.bit_generator.state if numpy_rng is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str, restore_rng: bool = True):
    """Rebuild generator/critics/optimizers; returns (generator, critics, opts, extra)."""
    payload = torch.load(Path(path), weights_only=False)
    gm = payload["generator"]["meta"]
    g = Generator(gm["latent_dim"], gm["base_res"], gm["target_res"],
                  gm["out_channels"], fmap=gm["fmap"])
    while g.n_stages < gm["n_stages"]:
        g.grow()
    g.load_state_dict(payload["generator"]["state"])
    g.alpha = gm["alpha"]
    g.frozen = set(gm["frozen"])
    for name in g.frozen:
        g.set_trainable(name, False)

    critics = {}
    for name, blob in payload["critics"].items():
        cm = blob["meta"]
        d = Critic(cm["in_channels"], cm["base_res"], cm["resolution"],
                   fmap=cm["fmap"], minibatch_std=cm["minibatch_std"])
        d.load_state_dict(blob["state"])
        d.alpha = cm["alpha"]
        d.frozen = set(cm["frozen"])
        for gname in d.frozen:
            d.set_trainable(gname, False)
        critics[name] = d

    nets = {"generator": g, **critics}
    optimizers = {}
    for name, sd in payload["optimizers"].items():
        opt = MaskedAdam(nets[name])
        opt.load_state_dict(sd)
        optimizers[name] = opt

    numpy_rng = None
    if payload["numpy_rng"] is not None:
        numpy_rng = np.random.default_rng()
        numpy_rng.bit_generator.state = payload["numpy_rng"]
    if restore_rng:
        torch.set_rng_state(payload["torch_rng"])
    return g, critics, optimizers, {"numpy_rng": numpy_rng, **payload["extra"]}
