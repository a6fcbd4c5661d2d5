"""Three-phase staged GAN training over mixed labelled/unlabelled data.

Phase 1 pre-trains a joint 8-channel GAN on the labelled slices alone, with
full progressive growth, so the late layers learn to emit coupled image and
segmentation-contrast channels. Phase 2 freezes those late layers and retrains
the early ones against a fresh image-only critic fed by the unlabelled pool,
buying anatomical variety. Phase 3 adds a segmentation-channel critic trained
on an equal mix of real and phase-2-generated contrast channels, and gradually
unfreezes the frozen blocks (earliest first, fixed image budget apiece) while
the output layers stay frozen so image and segmentation channels remain
coupled.

Stopping is by fixed shown-image budgets throughout: reproducible, and the
budgets are ordinary config. A "cycle" is one generator update together with
the critic updates preceding it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import MultiChannelSlice, N_STRUCTURES
from .errors import BadBudget, EmptyPool, ScheduleExhaustsFinalLayer
from .gan import (
    Critic,
    GanTrainConfig,
    Generator,
    MaskedAdam,
    build_critic,
    build_generator,
    downsample_to,
    fade_real_batch,
    generator_update,
    make_batch_sampler,
    save_checkpoint,
    train_step,
)

MULTI_GAN_GROUP_SIZE = 6


@dataclass
class StagedConfig:
    """Budgets and knobs for the three phases on top of the per-step GAN config."""

    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    p1_images_per_stage: int = 4000
    p2_images: int = 8000
    p3_images: int = 6000
    warmup_cycles: int = 5
    warmup_critic_updates: int = 100
    freeze_blocks: int = 1
    unfreeze_images: int = 2000
    selfteach_multiple: int = 10
    w_image: float = 1.0
    w_seg: float = 1.0
    # fine-tuning phases adapt an already-coupled generator; a lower generator
    # step size there preserves the feature semantics the frozen tail depends on
    p2_gen_lr: float | None = None
    p3_gen_lr: float | None = None

    @property
    def seed(self) -> int:
        return self.gan.seed


@dataclass
class PhaseState:
    phase: str
    generator: Generator
    critics: dict[str, Critic]
    optimizers: dict[str, MaskedAdam]
    snapshots: dict[str, dict] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    numpy_rng: np.random.Generator | None = None

    @property
    def frozen_layers(self) -> set[str]:
        return set(self.generator.frozen)


@dataclass
class SelfTeachSet:
    """Equal-mix contrast-channel training set for the segmentation critic."""

    real_seg: np.ndarray       # (n, 7, H, W)
    synthetic_seg: np.ndarray  # (pool, 7, H, W)

    def __post_init__(self):
        if self.real_seg.shape[1] != N_STRUCTURES or self.synthetic_seg.shape[1] != N_STRUCTURES:
            raise ValueError("self-teach samples must have exactly 7 channels")

    def epoch(self, rng: np.random.Generator) -> np.ndarray:
        """One balanced presentation: every real sample plus as many synthetic."""
        n = self.real_seg.shape[0]
        idx = rng.choice(self.synthetic_seg.shape[0], size=n,
                         replace=self.synthetic_seg.shape[0] < n)
        mix = np.concatenate([self.real_seg, self.synthetic_seg[idx]], axis=0)
        return mix[rng.permutation(2 * n)]

    def make_sampler(self, batch_size: int, rng: np.random.Generator):
        buffer = {"data": self.epoch(rng), "pos": 0}

        def sample() -> torch.Tensor:
            if buffer["pos"] + batch_size > buffer["data"].shape[0]:
                buffer["data"] = self.epoch(rng)
                buffer["pos"] = 0
            out = buffer["data"][buffer["pos"]:buffer["pos"] + batch_size]
            buffer["pos"] += batch_size
            return torch.from_numpy(np.ascontiguousarray(out, dtype=np.float32))

        return sample


def slices_to_array(slices: list[MultiChannelSlice]) -> np.ndarray:
    if not slices:
        raise EmptyPool("no slices provided")
    return np.stack([s.channels for s in slices]).astype(np.float32)


def mr_to_array(slices: list[np.ndarray]) -> np.ndarray:
    """1-channel training array from bare MR slices."""
    if not slices:
        raise EmptyPool("no slices provided")
    return np.stack(slices)[:, None, :, :].astype(np.float32)


def _progressive_sampler(pool_sampler, g: Generator):
    def sample() -> torch.Tensor:
        batch = pool_sampler()
        batch = downsample_to(batch, g.resolution)
        if g.n_stages > 1 and g.alpha < 1.0:
            batch = fade_real_batch(batch, g.alpha)
        return batch

    return sample


def run_phase1(labelled: np.ndarray, cfg: StagedConfig) -> PhaseState:
    """Progressive joint training on labelled 8-channel slices only."""
    labelled = np.asarray(labelled, dtype=np.float32)
    if labelled.ndim != 4 or labelled.shape[0] == 0:
        raise EmptyPool("phase 1 needs a non-empty (N, 8, H, W) labelled pool")
    if labelled.shape[1] != 1 + N_STRUCTURES:
        raise ValueError(f"expected 8-channel slices, got {labelled.shape[1]}")
    gc = cfg.gan
    torch.manual_seed(gc.seed)
    rng = np.random.default_rng(gc.seed)

    g = build_generator(gc.latent_dim, gc.base_res, gc.target_res,
                        gc.out_channels, fmap=gc.fmap)
    d = build_critic(gc.out_channels, gc.base_res, gc.base_res, fmap=gc.fmap,
                     minibatch_std=gc.minibatch_std)
    g_opt = MaskedAdam(g, lr=gc.lr, betas=gc.betas)
    d_opt = MaskedAdam(d, lr=gc.lr, betas=gc.betas)
    pool_sampler = make_batch_sampler(labelled, gc.batch_size, rng)
    stage_sampler = _progressive_sampler(pool_sampler, g)

    state = PhaseState(phase="P1", generator=g, critics={"joint": d},
                       optimizers={"generator": g_opt, "joint": d_opt},
                       numpy_rng=rng)
    n_stages = g.n_stages_target
    for stage in range(n_stages):
        if stage > 0:
            g.grow()
            d.grow()
        shown = 0
        fade_span = cfg.p1_images_per_stage / 2.0
        while shown < cfg.p1_images_per_stage:
            if stage == 0:
                alpha = 1.0
            else:
                alpha = min(1.0, shown / fade_span)
            g.alpha = alpha
            d.alpha = alpha
            m = train_step(g, d, stage_sampler, g_opt, d_opt, gc)
            shown += gc.batch_size * m["critic_updates"]
            state.metrics.append({"phase": "P1", "stage": stage, "alpha": alpha,
                                  "images_shown": shown, **m})
        g.alpha = 1.0
        d.alpha = 1.0
    state.snapshots["phase1_end"] = g.group_snapshot()
    return state


def freeze_selectors(cfg: StagedConfig, g: Generator) -> list[str]:
    """Late layers frozen at phase-2 entry: last N blocks plus every output conv."""
    blocks = [n for n in g.group_names() if n.startswith("block")]
    n = min(cfg.freeze_blocks, len(blocks) - 1)
    return blocks[len(blocks) - n:] + ["to_outputs"]


def run_phase2(state: PhaseState, unlabelled: np.ndarray, cfg: StagedConfig) -> PhaseState:
    """Frozen-tail retraining on unlabelled images with a fresh image critic."""
    if state.phase != "P1":
        raise ValueError(f"phase 2 must start from a completed phase 1, got {state.phase}")
    unlabelled = np.asarray(unlabelled, dtype=np.float32)
    if unlabelled.ndim != 4 or unlabelled.shape[1] != 1 or unlabelled.shape[0] == 0:
        raise EmptyPool("phase 2 needs a non-empty (M, 1, H, W) unlabelled pool")
    gc = cfg.gan
    g = state.generator
    rng = state.numpy_rng or np.random.default_rng(gc.seed)

    g.set_trainable("all", True)
    for sel in freeze_selectors(cfg, g):
        g.set_trainable(sel, False)

    d_img = build_critic(1, gc.base_res, g.resolution, fmap=gc.fmap,
                         minibatch_std=gc.minibatch_std)
    g_opt = MaskedAdam(g, lr=cfg.p2_gen_lr or gc.lr, betas=gc.betas)
    d_opt = MaskedAdam(d_img, lr=gc.lr, betas=gc.betas)
    sampler = make_batch_sampler(unlabelled, gc.batch_size, rng)

    new = PhaseState(phase="P2", generator=g, critics={"image": d_img},
                     optimizers={"generator": g_opt, "image": d_opt},
                     snapshots=dict(state.snapshots), metrics=list(state.metrics),
                     events=list(state.events), numpy_rng=rng)
    new.snapshots["phase2_entry"] = g.group_snapshot()

    shown = 0
    cycle = 0
    while shown < cfg.p2_images:
        ratio = (cfg.warmup_critic_updates if cycle < cfg.warmup_cycles
                 else gc.critic_updates_per_gen)
        m = train_step(g, d_img, sampler, g_opt, d_opt, gc,
                       critic_updates=ratio, channels=slice(0, 1))
        shown += gc.batch_size * ratio
        new.metrics.append({"phase": "P2", "cycle": cycle,
                            "images_shown": shown, **m})
        cycle += 1
    new.snapshots["phase2_end"] = g.group_snapshot()
    return new


def build_selfteach_set(state: PhaseState, labelled: np.ndarray,
                        cfg: StagedConfig) -> SelfTeachSet:
    """Contrast channels from the labelled set plus a post-phase-2 generated pool."""
    if state.phase != "P2":
        raise ValueError("self-teach set is built from a completed phase 2")
    labelled = np.asarray(labelled, dtype=np.float32)
    n = labelled.shape[0]
    pool_n = cfg.selfteach_multiple * n
    g = state.generator
    outs = []
    bs = max(cfg.gan.batch_size, 8)
    remaining = pool_n
    while remaining > 0:
        take = min(bs, remaining)
        z = torch.randn(take, g.latent_dim)
        outs.append(g.generate(z)[:, 1:].numpy())
        remaining -= take
    return SelfTeachSet(real_seg=labelled[:, 1:].copy(),
                        synthetic_seg=np.concatenate(outs, axis=0))


def unfreeze_schedule(state: PhaseState, cfg: StagedConfig) -> list[tuple[int, str]]:
    """(image_budget, block) pairs, earliest frozen block first; output convs excluded."""
    frozen_blocks = sorted(n for n in state.generator.frozen if n.startswith("block"))
    return [(cfg.unfreeze_images * (i + 1), name)
            for i, name in enumerate(frozen_blocks)]


def run_phase3(state: PhaseState, labelled: np.ndarray, unlabelled: np.ndarray,
               selfteach: SelfTeachSet, cfg: StagedConfig) -> PhaseState:
    """Dual-critic fine-tuning with gradual unfreezing; output convs stay frozen."""
    if state.phase != "P2":
        raise ValueError(f"phase 3 must start from a completed phase 2, got {state.phase}")
    gc = cfg.gan
    g = state.generator
    rng = state.numpy_rng or np.random.default_rng(gc.seed)
    schedule = unfreeze_schedule(state, cfg)
    if any(not name.startswith("block") for _, name in schedule):
        raise ScheduleExhaustsFinalLayer(
            "unfreeze schedule may only release resolution blocks"
        )

    d_img = state.critics["image"]
    d_seg = build_critic(N_STRUCTURES, gc.base_res, g.resolution, fmap=gc.fmap,
                         minibatch_std=gc.minibatch_std)
    g_opt = MaskedAdam(g, lr=cfg.p3_gen_lr or gc.lr, betas=gc.betas)
    di_opt = state.optimizers.get("image") or MaskedAdam(d_img, lr=gc.lr, betas=gc.betas)
    ds_opt = MaskedAdam(d_seg, lr=gc.lr, betas=gc.betas)

    img_sampler = make_batch_sampler(np.asarray(unlabelled, dtype=np.float32),
                                     gc.batch_size, rng)
    seg_sampler = selfteach.make_sampler(gc.batch_size, rng)

    new = PhaseState(phase="P3", generator=g,
                     critics={"image": d_img, "seg": d_seg},
                     optimizers={"generator": g_opt, "image": di_opt, "seg": ds_opt},
                     snapshots=dict(state.snapshots), metrics=list(state.metrics),
                     events=list(state.events), numpy_rng=rng)
    new.snapshots["phase3_entry"] = g.group_snapshot()
    entry_snapshot = new.snapshots["phase3_entry"]
    watched = sorted(g.frozen)

    from .gan import critic_update  # local alias for readability

    shown = 0
    cycle = 0
    pending = list(schedule)
    while shown < cfg.p3_images:
        while pending and shown >= pending[0][0]:
            _, name = pending.pop(0)
            g.set_trainable(name, True)
            new.events.append({"phase": "P3", "images_shown": shown,
                               "unfrozen": name})
        d_parts = {}
        for _ in range(gc.critic_updates_per_gen):
            rb_img = img_sampler()
            rb_seg = seg_sampler()
            z = torch.randn(rb_img.shape[0], g.latent_dim)
            with torch.no_grad():
                fake = g(z)
            pi = critic_update(d_img, di_opt, rb_img, fake[:, 0:1], gc)
            ps = critic_update(d_seg, ds_opt, rb_seg, fake[:, 1:], gc)
            d_parts = {"image_loss": pi["loss"], "seg_loss": ps["loss"]}
        g_parts = generator_update(
            g, g_opt,
            [(d_img, slice(0, 1), cfg.w_image), (d_seg, slice(1, None), cfg.w_seg)],
            gc.batch_size, gc,
        )
        shown += gc.batch_size * gc.critic_updates_per_gen
        drift = audit_frozen_groups(g, entry_snapshot, watched)
        new.metrics.append({
            "phase": "P3", "cycle": cycle, "images_shown": shown,
            "trainable": sorted(n for n, fr in g.freeze_mask().items() if not fr),
            "frozen_drift": {n: bool(v > 0) for n, v in drift.items()},
            **d_parts, **g_parts,
        })
        cycle += 1
    new.snapshots["phase3_end"] = g.group_snapshot()
    return new


def audit_frozen_groups(g: Generator, snapshot: dict, groups=None) -> dict[str, float]:
    """Max abs parameter drift per group against a named snapshot."""
    current = g.parameter_groups()
    names = groups if groups is not None else list(snapshot)
    out = {}
    for name in names:
        diffs = [float((p.detach() - t).abs().max())
                 for p, t in zip(current[name], snapshot[name])]
        out[name] = max(diffs) if diffs else 0.0
    return out


def sample_diversity(g: Generator, n: int = 256, seed: int = 0,
                     channel: int = 0) -> float:
    """Mean pairwise L2 distance among generated single-channel images."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, g.latent_dim, generator=gen)
    outs = []
    for i in range(0, n, 32):
        outs.append(g.generate(z[i:i + 32])[:, channel].flatten(1))
    x = torch.cat(outs).double()
    sq = (x * x).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d = d2.clamp_min(0).sqrt()
    m = n * (n - 1)
    return float(d.sum() / m)


def _metrics_path(workdir: Path, phase: str) -> Path:
    return workdir / f"metrics_{phase.lower()}.json"


def _dump_metrics(workdir: Path, phase: str, state: PhaseState) -> None:
    entries = [m for m in state.metrics if m["phase"] == phase]
    events = [e for e in state.events if e.get("phase") == phase]
    _metrics_path(workdir, phase).write_text(
        json.dumps({"metrics": entries, "events": events}, indent=1)
    )


def run_staged_training(labelled: np.ndarray, unlabelled: np.ndarray,
                        cfg: StagedConfig, workdir: Path | str) -> dict:
    """All three phases with checkpoints p1.ckpt/p2.ckpt/p3.ckpt plus metrics logs.

    Returns a summary with checkpoint paths and the freeze audits.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)

    s1 = run_phase1(labelled, cfg)
    save_checkpoint(workdir / "p1.ckpt", s1.generator, s1.critics,
                    s1.optimizers, numpy_rng=s1.numpy_rng,
                    extra={"phase": "P1"})
    _dump_metrics(workdir, "P1", s1)

    s2 = run_phase2(s1, unlabelled, cfg)
    audit_p2 = audit_frozen_groups(
        s2.generator, s2.snapshots["phase2_entry"], sorted(s2.generator.frozen))
    save_checkpoint(workdir / "p2.ckpt", s2.generator, s2.critics,
                    s2.optimizers, numpy_rng=s2.numpy_rng,
                    extra={"phase": "P2", "frozen_audit": audit_p2})
    _dump_metrics(workdir, "P2", s2)

    selfteach = build_selfteach_set(s2, labelled, cfg)
    s3 = run_phase3(s2, labelled, unlabelled, selfteach, cfg)
    out_groups = [n for n in s3.generator.group_names() if n.startswith("to_output")]
    audit_p3 = audit_frozen_groups(
        s3.generator, s3.snapshots["phase3_entry"], out_groups)
    save_checkpoint(workdir / "p3.ckpt", s3.generator, s3.critics,
                    s3.optimizers, numpy_rng=s3.numpy_rng,
                    extra={"phase": "P3", "output_audit": audit_p3,
                           "unfreeze_events": s3.events})
    _dump_metrics(workdir, "P3", s3)

    return {
        "workdir": str(workdir),
        "checkpoints": {p: str(workdir / f"{p}.ckpt") for p in ("p1", "p2", "p3")},
        "frozen_audit_p2": audit_p2,
        "output_audit_p3": audit_p3,
        "unfreeze_events": s3.events,
    }


def state_from_checkpoint(path: Path | str, phase: str) -> PhaseState:
    """Rebuild a PhaseState from a phase checkpoint for standalone phase runs.

    Snapshots are re-taken from the loaded parameters. For the groups a later
    phase must keep frozen this equals the original entry snapshot, because
    those groups were frozen (hence bit-identical) when the checkpoint was
    written.
    """
    from .gan import load_checkpoint

    g, critics, optimizers, extra = load_checkpoint(path)
    state = PhaseState(phase=phase, generator=g, critics=critics,
                       optimizers=optimizers, numpy_rng=extra.get("numpy_rng"))
    snap = g.group_snapshot()
    state.snapshots["phase1_end" if phase == "P1" else "phase2_end"] = snap
    if phase == "P2":
        state.snapshots["phase2_entry"] = snap
    return state


def partition_into_groups(ids: list, group_size: int = MULTI_GAN_GROUP_SIZE) -> list[list]:
    if len(ids) % group_size != 0:
        raise BadBudget(f"{len(ids)} subjects do not split into groups of {group_size}")
    return [list(ids[i:i + group_size]) for i in range(0, len(ids), group_size)]


def run_multi_gan(labelled_by_subject: dict[str, np.ndarray], unlabelled: np.ndarray,
                  cfg: StagedConfig, workdir: Path | str) -> list[dict]:
    """Split 12 or 24 labelled subjects into groups of 6 and run one GAN per group."""
    n = len(labelled_by_subject)
    if n not in (12, 24):
        raise BadBudget(f"multi-GAN path expects 12 or 24 labelled subjects, got {n}")
    workdir = Path(workdir)
    ids = sorted(labelled_by_subject)
    results = []
    for gi, group in enumerate(partition_into_groups(ids)):
        pool = np.concatenate([labelled_by_subject[s] for s in group], axis=0)
        sub_cfg = replace(cfg, gan=replace(cfg.gan, seed=cfg.gan.seed + 1000 * gi))
        res = run_staged_training(pool, unlabelled, sub_cfg, workdir / f"gan{gi}")
        res["group"] = group
        res["gan_id"] = gi
        results.append(res)
    return results
