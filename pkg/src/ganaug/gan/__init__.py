from .losses import critic_loss, generator_loss, gradient_penalty
from .nets import Critic, Generator, build_critic, build_generator
from .optim import MaskedAdam
from .training import (
    GanTrainConfig,
    critic_update,
    downsample_to,
    fade_real_batch,
    generator_update,
    load_checkpoint,
    make_batch_sampler,
    save_checkpoint,
    train_step,
)

__all__ = [
    "Critic", "Generator", "build_critic", "build_generator",
    "critic_loss", "generator_loss", "gradient_penalty",
    "MaskedAdam", "GanTrainConfig",
    "critic_update", "generator_update", "train_step",
    "make_batch_sampler", "downsample_to", "fade_real_batch",
    "save_checkpoint", "load_checkpoint",
]
