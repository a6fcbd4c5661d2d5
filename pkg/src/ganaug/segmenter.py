"""Patch-based dual-pathway multi-class segmentation.

A small 2D network in the dual-pathway style: one pathway sees the patch at
full resolution, the other the same neighbourhood at 3x downsampling (so it
covers triple the context), and both are fused into dense per-pixel logits
for the patch centre region. Training samples patches from a ratio-controlled
mixture of real and synthetic slices; for a ratio of r, one synthetic patch is
drawn for every r real ones on average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import N_STRUCTURES
from .errors import EmptyPool, ShapeMismatch

N_CLASSES = N_STRUCTURES + 1
RATIOS = (100, 10, 2, 1)


@dataclass
class SegNetConfig:
    n_classes: int = N_CLASSES
    patch: int = 17            # full-res pathway input edge
    depth: int = 4             # 3x3 valid convs per pathway
    width: int = 24
    downsample: int = 3
    steps: int = 2500
    batch_size: int = 16
    lr: float = 1e-3
    reflection_augmentation: bool = True
    foreground_center_p: float = 0.5
    seed: int = 0

    @property
    def out_size(self) -> int:
        out = self.patch - 2 * self.depth
        if out < 1:
            raise ValueError("pathway depth eats the whole patch")
        return out


@dataclass
class MixedSampler:
    """Pools of (mr, label_map) slice pairs with a real:synthetic draw ratio.

    ratio=None is the no-augmentation baseline (real pool only); otherwise
    P(synthetic) = 1 / (ratio + 1).
    """

    real: list[tuple[np.ndarray, np.ndarray]]
    synth: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.real:
            raise EmptyPool("real pool must not be empty")
        if self.ratio is not None and not self.synth:
            raise EmptyPool("mixed sampling needs a non-empty synthetic pool")
        self.rng = np.random.default_rng(self.seed)

    @property
    def synth_probability(self) -> float:
        return 0.0 if self.ratio is None else 1.0 / (self.ratio + 1.0)

    def draw_source(self) -> str:
        if self.ratio is not None and self.rng.random() < self.synth_probability:
            return "synthetic"
        return "real"


def _extract(img: np.ndarray, crow: int, ccol: int, size: int) -> np.ndarray:
    """size x size window centred at (crow, ccol), zero-padded at the edges."""
    h, w = img.shape
    half = size // 2
    out = np.zeros((size, size), dtype=img.dtype)
    r0, c0 = crow - half, ccol - half
    rs, cs = max(0, r0), max(0, c0)
    re, ce = min(h, r0 + size), min(w, c0 + size)
    out[rs - r0:re - r0, cs - c0:ce - c0] = img[rs:re, cs:ce]
    return out


def _extract_down(img: np.ndarray, crow: int, ccol: int, size: int,
                  factor: int) -> np.ndarray:
    big = _extract(img, crow, ccol, size * factor)
    return big.reshape(size, factor, size, factor).mean(axis=(1, 3))


def sample_patch(s: MixedSampler, cfg: SegNetConfig):
    """One training patch: ((full, down), label_patch, source_tag)."""
    source = s.draw_source()
    pool = s.real if source == "real" else s.synth
    mr, labels = pool[s.rng.integers(len(pool))]
    h, w = mr.shape

    if s.rng.random() < cfg.foreground_center_p and (labels > 0).any():
        rr, cc = np.nonzero(labels > 0)
        k = s.rng.integers(len(rr))
        crow, ccol = int(rr[k]), int(cc[k])
    else:
        crow = int(s.rng.integers(h))
        ccol = int(s.rng.integers(w))

    full = _extract(mr.astype(np.float32), crow, ccol, cfg.patch)
    down = _extract_down(mr.astype(np.float32), crow, ccol, cfg.patch,
                         cfg.downsample)
    label = _extract(labels.astype(np.int64), crow, ccol, cfg.out_size)

    if cfg.reflection_augmentation and s.rng.random() < 0.5:
        full = full[:, ::-1].copy()
        down = down[:, ::-1].copy()
        label = label[:, ::-1].copy()
    return (full, down), label, source


def _pathway(width: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    in_ch = 1
    for _ in range(depth):
        layers += [nn.Conv2d(in_ch, width, 3), nn.LeakyReLU(0.1)]
        in_ch = width
    return nn.Sequential(*layers)


class PatchSegNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        self.full_path = _pathway(cfg.width, cfg.depth)
        self.down_path = _pathway(cfg.width, cfg.depth)
        self.head = nn.Sequential(
            nn.Conv2d(2 * cfg.width, cfg.width, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(cfg.width, cfg.n_classes, 1),
        )

    def forward(self, full: torch.Tensor, down: torch.Tensor) -> torch.Tensor:
        o = self.cfg.out_size
        a = self.full_path(full)
        b = self.down_path(down)
        b = F.interpolate(b, scale_factor=self.cfg.downsample, mode="nearest")
        start = (b.shape[-1] - o) // 2
        b = b[:, :, start:start + o, start:start + o]
        return self.head(torch.cat([a, b], dim=1))


def _batch(sampler: MixedSampler, cfg: SegNetConfig):
    fulls, downs, labels, sources = [], [], [], []
    for _ in range(cfg.batch_size):
        (f, d), lab, src = sample_patch(sampler, cfg)
        fulls.append(f)
        downs.append(d)
        labels.append(lab)
        sources.append(src)
    return (torch.from_numpy(np.stack(fulls)[:, None]),
            torch.from_numpy(np.stack(downs)[:, None]),
            torch.from_numpy(np.stack(labels)),
            sources)


def train_segnet(cfg: SegNetConfig, sampler: MixedSampler):
    """Cross-entropy patch training; returns (model, history)."""
    torch.manual_seed(cfg.seed)
    model = PatchSegNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    synth_draws = 0
    total_draws = 0
    for step in range(cfg.steps):
        full, down, labels, sources = _batch(sampler, cfg)
        logits = model(full, down)
        loss = F.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        synth_draws += sum(s == "synthetic" for s in sources)
        total_draws += len(sources)
        if step % 50 == 0 or step == cfg.steps - 1:
            history.append({"step": step, "loss": float(loss.detach()),
                            "synthetic_fraction": synth_draws / max(1, total_draws)})
    model.eval()
    return model, history


def segment_slice(model: PatchSegNet, mr: np.ndarray,
                  coverage: np.ndarray | None = None) -> np.ndarray:
    """Dense prediction for one slice by tiling non-overlapping output regions."""
    cfg = model.cfg
    o = cfg.out_size
    h, w = mr.shape
    out = np.zeros((h, w), dtype=np.int64)
    centers = []
    for r0 in range(0, h, o):
        for c0 in range(0, w, o):
            centers.append((r0, c0))
    fulls, downs = [], []
    for r0, c0 in centers:
        crow, ccol = r0 + o // 2, c0 + o // 2
        fulls.append(_extract(mr.astype(np.float32), crow, ccol, cfg.patch))
        downs.append(_extract_down(mr.astype(np.float32), crow, ccol,
                                   cfg.patch, cfg.downsample))
    with torch.no_grad():
        logits = model(torch.from_numpy(np.stack(fulls)[:, None]),
                       torch.from_numpy(np.stack(downs)[:, None]))
    pred = logits.argmax(dim=1).numpy()
    for (r0, c0), tile in zip(centers, pred):
        re, ce = min(h, r0 + o), min(w, c0 + o)
        out[r0:re, c0:ce] = tile[:re - r0, :ce - c0]
        if coverage is not None:
            coverage[r0:re, c0:ce] += 1
    return out


def segment(model: PatchSegNet, volume: np.ndarray,
            return_coverage: bool = False):
    """Per-slice dense prediction over an (H, W, D) volume."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeMismatch(f"expected a 3D volume, got shape {volume.shape}")
    h, w, d = volume.shape
    out = np.zeros((h, w, d), dtype=np.int64)
    coverage = np.zeros((h, w, d), dtype=np.int64) if return_coverage else None
    for k in range(d):
        cov_k = coverage[:, :, k] if coverage is not None else None
        out[:, :, k] = segment_slice(model, volume[:, :, k], coverage=cov_k)
    if return_coverage:
        return out, coverage
    return out


def labelled_to_pairs(mr_volume: np.ndarray, label_map: np.ndarray
                      ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-slice (mr, label) pairs from one subject volume."""
    return [(mr_volume[:, :, k], label_map[:, :, k])
            for k in range(mr_volume.shape[2])]


def synth_to_pairs(samples) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-sample (mr, label) pairs from kept synthetic samples."""
    out = []
    for s in samples:
        if not s.kept or s.binary_labels is None:
            continue
        lab = np.zeros(s.mr.shape, dtype=np.int64)
        for c in range(N_STRUCTURES):
            lab[s.binary_labels[c]] = c + 1
        out.append((s.mr.astype(np.float32), lab))
    return out
