"""From raw generator output to clean labelled training samples.

The chain per generated image: assign a slice index by nearest-neighbour MR
comparison, clip each contrast channel to the anatomy mask for that slice,
binarise, repair morphology, gate on MR intensity, and finally score the MR
channel against the real pool and drop everything above the 75th percentile.

Anatomy masks are per-structure dilations (Euclidean metric) of the union of
the labelled training masks; containment of the final labels within them is a
hard guarantee of `postprocess`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from skimage.morphology import remove_small_objects

from .data import N_STRUCTURES, LabelledSample
from .errors import EmptyPool, ShapeMismatch
from .gan import Generator

CROSS = ndimage.generate_binary_structure(2, 1)   # 3x3 cross
MIN_COMPONENT_PX = 4
DEFAULT_RADIUS_MM = 10.0


@dataclass
class SyntheticSample:
    channels: np.ndarray                   # (8, H, W) float32
    slice_index: int | None = None
    binary_labels: np.ndarray | None = None  # (7, H, W) bool
    quality_score: float | None = None
    kept: bool = True
    provenance: dict = field(default_factory=dict)

    @property
    def mr(self) -> np.ndarray:
        return self.channels[0]

    @property
    def seg(self) -> np.ndarray:
        return self.channels[1:]


@dataclass
class StructureMasks:
    masks: np.ndarray                      # (7, H, W, D) bool
    provenance: list[str]
    dilation_radius_mm: float
    spacing: tuple[float, float, float]    # mm per voxel, (row, col, slice)


def assign_slice(synth_mr: np.ndarray, real_slices: np.ndarray,
                 slice_indices: list[int] | None = None) -> int:
    """Index of the nearest real slice by Euclidean distance; ties take the lowest."""
    real_slices = np.asarray(real_slices, dtype=np.float64)
    if real_slices.ndim != 3 or real_slices.shape[0] == 0:
        raise EmptyPool("need a non-empty (N, H, W) slice pool")
    if real_slices.shape[1:] != np.asarray(synth_mr).shape:
        raise ShapeMismatch("synthetic slice and pool shapes differ")
    if slice_indices is None:
        slice_indices = list(range(real_slices.shape[0]))
    d2 = ((real_slices - np.asarray(synth_mr, dtype=np.float64)) ** 2).sum(axis=(1, 2))
    best = d2.min()
    candidates = [slice_indices[i] for i in np.flatnonzero(d2 == best)]
    return int(min(candidates))


def build_structure_masks(labelled_train: list[LabelledSample], radius_mm: float = DEFAULT_RADIUS_MM,
                          spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> StructureMasks:
    """Per structure: union of training masks dilated to the metric radius."""
    if not labelled_train:
        raise EmptyPool("need at least one labelled training sample")
    union = labelled_train[0].labels.copy()
    for s in labelled_train[1:]:
        if s.labels.shape != union.shape:
            raise ShapeMismatch("training samples disagree on shape")
        union |= s.labels
    if radius_mm <= 0:
        masks = union
    else:
        masks = np.zeros_like(union)
        for c in range(N_STRUCTURES):
            if union[c].any():
                dist = ndimage.distance_transform_edt(~union[c], sampling=spacing)
                masks[c] = dist <= radius_mm
    return StructureMasks(masks=masks,
                          provenance=[s.subject_id for s in labelled_train],
                          dilation_radius_mm=radius_mm, spacing=tuple(spacing))


def _otsu_exact(vals: np.ndarray) -> float | None:
    """Otsu's threshold evaluated at every split of the sorted values.

    Exact rather than histogram-binned: the binned variant can return a
    bin-center threshold that cuts inside the background cluster when the
    foreground/background gap spans many empty bins.
    """
    v = np.sort(np.asarray(vals, dtype=np.float64))
    n = v.size
    if n < 2 or v[0] == v[-1]:
        return None
    csum = np.cumsum(v)
    k = np.arange(1, n)
    mu0 = csum[:-1] / k
    mu1 = (csum[-1] - csum[:-1]) / (n - k)
    score = k * (n - k) * (mu0 - mu1) ** 2
    score[v[1:] == v[:-1]] = -1.0   # threshold must fall between distinct values
    i = int(np.argmax(score))
    return float(0.5 * (v[i] + v[i + 1]))


def _binarize(channel: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    # threshold over the in-mask distribution only: the clip to the anatomy
    # mask leaves an exact-zero spike outside it that would mislead Otsu
    vals = channel[allowed]
    if vals.size == 0 or vals.max() <= 0:
        return np.zeros(channel.shape, dtype=bool)
    thr = _otsu_exact(vals)
    if thr is None:
        thr = vals.max() / 2.0
    return (channel > thr) & allowed


def _fill_within(x: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    # containment beats hole-filling if the anatomy mask itself has holes
    return ndimage.binary_fill_holes(x) & allowed


def postprocess(sample: SyntheticSample, masks: StructureMasks) -> np.ndarray:
    """Binary labels for one generated sample; also stored on the sample.

    Steps per channel: anatomy-mask clip, binarise (Otsu, max/2 fallback),
    closing + hole fill, MR gate at mean +- 2 std inside the mask, then hole
    fill, opening and sub-4px component removal.
    """
    if sample.slice_index is None:
        raise ValueError("assign a slice index before postprocessing")
    mr = sample.mr
    out = np.zeros((N_STRUCTURES,) + mr.shape, dtype=bool)
    for c in range(N_STRUCTURES):
        allowed = masks.masks[c][:, :, sample.slice_index]
        # contrast channels are non-negative by construction; negative values
        # a generator emits are background and would flatten Otsu's valley
        channel = np.maximum(sample.seg[c], 0.0) * allowed
        m = _binarize(channel, allowed)
        if not m.any():
            continue
        m = ndimage.binary_closing(m, structure=CROSS)
        m = _fill_within(m, allowed)
        if not m.any():
            continue
        vals = mr[m]
        mu, sd = vals.mean(), vals.std()
        m &= (mr >= mu - 2 * sd) & (mr <= mu + 2 * sd)
        m = _fill_within(m, allowed)
        m = ndimage.binary_opening(m, structure=CROSS)
        m = remove_small_objects(m, min_size=MIN_COMPONENT_PX, connectivity=1)
        out[c] = m
    sample.binary_labels = out
    return out


def quality_score(synth_mr: np.ndarray, dataset: np.ndarray) -> float:
    """Minimum Euclidean distance from the MR channel to any pool image."""
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 3 or dataset.shape[0] == 0:
        raise EmptyPool("need a non-empty (N, H, W) image pool")
    if dataset.shape[1:] != np.asarray(synth_mr).shape:
        raise ShapeMismatch("synthetic slice and pool shapes differ")
    d2 = ((dataset - np.asarray(synth_mr, dtype=np.float64)) ** 2).sum(axis=(1, 2))
    return float(np.sqrt(d2.min()))


def quality_threshold(scores: np.ndarray) -> float:
    """Nearest-rank 75th percentile."""
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise EmptyPool("no scores")
    rank = int(np.ceil(0.75 * s.size))
    return float(s[rank - 1])


def filter_by_quality(samples: list[SyntheticSample]) -> list[SyntheticSample]:
    """Drop samples scoring strictly above the 75th percentile; flags all inputs."""
    if not samples:
        raise EmptyPool("no samples to filter")
    scores = np.array([s.quality_score for s in samples], dtype=np.float64)
    thr = quality_threshold(scores)
    kept = []
    for s in samples:
        s.kept = bool(s.quality_score <= thr)
        if s.kept:
            kept.append(s)
    return kept


def generate_synthetic_dataset(generators: list[tuple[str, int, Generator]], n: int,
                               masks: StructureMasks, assignment_pool: np.ndarray,
                               assignment_indices: list[int], score_pool: np.ndarray,
                               seed: int = 0) -> list[SyntheticSample]:
    """Sample, assign, postprocess, score and flag `n` synthetic slices.

    `generators` holds (phase_tag, gan_id, generator) triples. The budget is
    split evenly across phase tags and uniformly across GANs within a tag, so
    a phase-2 + phase-3 pair pools 50/50 and multi-GAN groups pool uniformly.
    Returns every sample with its kept flag set; downstream training should
    use only the kept ones.
    """
    if not generators:
        raise EmptyPool("no generators given")
    tags = sorted({t for t, _, _ in generators})
    per_tag = {t: n // len(tags) for t in tags}
    per_tag[tags[-1]] += n - sum(per_tag.values())

    samples: list[SyntheticSample] = []
    torch_gen = torch.Generator().manual_seed(seed)
    for tag in tags:
        members = [(gid, g) for t, gid, g in generators if t == tag]
        quota = [per_tag[tag] // len(members)] * len(members)
        quota[-1] += per_tag[tag] - sum(quota)
        for (gan_id, g), m in zip(members, quota):
            done = 0
            while done < m:
                take = min(32, m - done)
                z = torch.randn(take, g.latent_dim, generator=torch_gen)
                batch = g.generate(z).numpy()
                for b in range(take):
                    s = SyntheticSample(
                        channels=batch[b],
                        provenance={"phase": tag, "gan_id": gan_id,
                                    "latent_index": len(samples)},
                    )
                    s.slice_index = assign_slice(s.mr, assignment_pool,
                                                 assignment_indices)
                    postprocess(s, masks)
                    s.quality_score = quality_score(s.mr, score_pool)
                    samples.append(s)
                done += take
    filter_by_quality(samples)
    return samples


def kept_samples(samples: list[SyntheticSample]) -> list[SyntheticSample]:
    return [s for s in samples if s.kept]
