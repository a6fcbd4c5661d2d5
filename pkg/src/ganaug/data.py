"""Dataset representation, normalization, ROI slicing and label-channel preprocessing.

Volumes are numpy arrays of shape (H, W, D) with axial slice k = vol[:, :, k].
Label stacks are boolean arrays of shape (7, H, W, D), one channel per structure.
Background is by convention wherever the raw MR is exactly zero; ingestion
adapters for external volumetric formats must produce this layout (see
``LabelledSample``) before anything downstream runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptyForeground, OutOfBounds, ShapeMismatch, ZeroVariance

STRUCTURES = (
    "accumbens",
    "amygdala",
    "caudate",
    "hippocampus",
    "pallidum",
    "putamen",
    "thalamus",
)
N_STRUCTURES = len(STRUCTURES)
CDR_LEVELS = (0.0, 0.5, 1.0, 2.0, 3.0)

# Paper-scale ROI is 80x80x60; the phantom preset keeps training cheap.
ROI_PRESETS = {
    "paper80": (80, 80, 60),
    "desk32": (32, 32, 20),
}


@dataclass
class LabelledSample:
    """One subject: MR volume, 7 binary structure masks, clinical covariates."""

    subject_id: str
    mr: np.ndarray            # (H, W, D) float
    labels: np.ndarray        # (7, H, W, D) bool
    age: float
    cdr: float
    is_repeat: bool = False

    def __post_init__(self):
        self.mr = np.asarray(self.mr, dtype=np.float32)
        self.labels = np.asarray(self.labels).astype(bool)
        if self.labels.shape != (N_STRUCTURES,) + self.mr.shape:
            raise ShapeMismatch(
                f"labels shape {self.labels.shape} does not match mr shape {self.mr.shape}"
            )
        if float(self.cdr) not in CDR_LEVELS:
            raise ValueError(f"cdr must be one of {CDR_LEVELS}, got {self.cdr}")
        overlap = self.labels.sum(axis=0)
        if overlap.max(initial=0) > 1:
            raise ValueError("structure masks overlap; they must be pairwise disjoint")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mr.shape

    def label_map(self) -> np.ndarray:
        """Dense class map: 0 = background, 1..7 = structures."""
        out = np.zeros(self.mr.shape, dtype=np.int64)
        for c in range(N_STRUCTURES):
            out[self.labels[c]] = c + 1
        return out


@dataclass
class MultiChannelSlice:
    """An axial slice as the GAN sees it: MR channel plus 7 contrast channels."""

    channels: np.ndarray      # (8, H, W) float32
    slice_index: int
    source: str = "real"      # "real" | "synthetic"

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[0] != 1 + N_STRUCTURES:
            raise ShapeMismatch(f"expected (8, H, W) channels, got {self.channels.shape}")
        if self.source == "real" and self.channels[1:].min(initial=0.0) < 0:
            raise ValueError("contrast channels of a real slice must be non-negative")

    @property
    def mr(self) -> np.ndarray:
        return self.channels[0]

    @property
    def seg(self) -> np.ndarray:
        return self.channels[1:]


@dataclass
class DatasetSplit:
    """One cross-validation fold plus the labelled-budget subset of its train ids."""

    fold_id: int
    train_ids: list[str]
    test_ids: list[str]
    labelled_budget: int
    labelled_subset: list[str] = field(default_factory=list)

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test ids overlap")
        if not self.labelled_subset:
            self.labelled_subset = list(self.train_ids[: self.labelled_budget])
        if len(self.labelled_subset) != self.labelled_budget:
            raise ValueError("labelled_subset size does not match requested budget")
        if not set(self.labelled_subset) <= set(self.train_ids):
            raise ValueError("labelled_subset must be drawn from train_ids")


def normalize_intensity(volume: np.ndarray, background_mask: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance scaling over non-background voxels.

    Background voxels are set to 0 (the mean of the normalized foreground), which
    minimizes boundary gradients for downstream training. Population (ddof=0)
    statistics are used.
    """
    volume = np.asarray(volume, dtype=np.float64)
    background_mask = np.asarray(background_mask).astype(bool)
    if background_mask.shape != volume.shape:
        raise ShapeMismatch(
            f"mask shape {background_mask.shape} != volume shape {volume.shape}"
        )
    fg = ~background_mask
    vals = volume[fg]
    if vals.size < 2:
        raise ZeroVariance("need at least 2 non-background voxels")
    mu = vals.mean()
    sigma = vals.std()
    if sigma == 0.0:
        raise ZeroVariance("non-background voxels are all equal")
    out = np.zeros_like(volume)
    out[fg] = (vals - mu) / sigma
    return out.astype(np.float32)


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned crop: offset corner plus size, both (H, W, D)."""

    offset: tuple[int, int, int]
    size: tuple[int, int, int]


def extract_roi(volume: np.ndarray, roi: RoiBox) -> np.ndarray:
    """Verbatim crop of `roi` out of `volume`; the box must lie fully inside."""
    volume = np.asarray(volume)
    o, s = roi.offset, roi.size
    if any(v < 0 for v in o) or any(o[i] + s[i] > volume.shape[i] for i in range(3)):
        raise OutOfBounds(f"roi {roi} exceeds volume of shape {volume.shape}")
    return volume[o[0]:o[0] + s[0], o[1]:o[1] + s[1], o[2]:o[2] + s[2]].copy()


def centered_roi(volume_shape: tuple[int, int, int], size: tuple[int, int, int]) -> RoiBox:
    off = tuple((volume_shape[i] - size[i]) // 2 for i in range(3))
    if any(v < 0 for v in off):
        raise OutOfBounds(f"roi size {size} exceeds volume shape {volume_shape}")
    return RoiBox(offset=off, size=tuple(size))


def slice_axial(volume: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Split a volume into its axial planes, indexed 0..D-1."""
    volume = np.asarray(volume)
    return [(k, volume[:, :, k].copy()) for k in range(volume.shape[2])]


def stack_axial(slices: list[tuple[int, np.ndarray]]) -> np.ndarray:
    """Inverse of slice_axial: restack indexed planes into a volume."""
    ordered = sorted(slices, key=lambda p: p[0])
    return np.stack([s for _, s in ordered], axis=2)


def estimate_wm_intensity(mr_slice: np.ndarray, foreground: np.ndarray | None = None,
                          bins: int = 64) -> float:
    """Robust white-matter intensity estimate for one slice.

    WM is the brightest large tissue class in T1, so we take the mode of a
    fixed-bin histogram over the upper intensity half (values >= the foreground
    median) of non-background pixels.
    """
    mr_slice = np.asarray(mr_slice, dtype=np.float64)
    if foreground is None:
        foreground = mr_slice != 0
    vals = mr_slice[np.asarray(foreground, dtype=bool)]
    if vals.size == 0:
        raise EmptyForeground("slice has no non-background pixels")
    upper = vals[vals >= np.median(vals)]
    lo, hi = upper.min(), upper.max()
    if hi == lo:
        return float(lo)
    counts, edges = np.histogram(upper, bins=bins, range=(lo, hi))
    k = int(np.argmax(counts))
    return float(0.5 * (edges[k] + edges[k + 1]))


def preprocess_seg_channels(mr_slice: np.ndarray, labels: np.ndarray, wm: float) -> np.ndarray:
    """Turn binary masks into MR-coupled contrast channels.

    Channel c carries (mr - wm) inside mask c and 0 outside. The sign flip is
    per structure (by the sign of the in-mask mean), not per pixel, so
    within-structure texture polarity survives; residual negative tails are
    clamped to keep the channels non-negative.
    """
    mr_slice = np.asarray(mr_slice, dtype=np.float32)
    labels = np.asarray(labels).astype(bool)
    if labels.shape != (N_STRUCTURES,) + mr_slice.shape:
        raise ShapeMismatch(
            f"labels shape {labels.shape} does not match slice shape {mr_slice.shape}"
        )
    out = np.zeros((N_STRUCTURES,) + mr_slice.shape, dtype=np.float32)
    for c in range(N_STRUCTURES):
        m = labels[c]
        if not m.any():
            continue
        diff = (mr_slice - wm) * m
        if diff[m].mean() < 0:
            diff = -diff
        out[c] = np.maximum(diff, 0.0) * m
    return out


def slices_from_sample(sample: LabelledSample, bins: int = 64) -> list[MultiChannelSlice]:
    """Full preprocessing of one subject into 8-channel GAN training slices.

    The MR volume must already be normalized and ROI-cropped; foreground for
    the per-slice WM estimate is taken across the volume (mr != 0) so empty
    edge slices inherit a sensible estimate from their own plane when possible.
    """
    out = []
    fg_volume = sample.mr != 0
    for k, mr in slice_axial(sample.mr):
        fg = fg_volume[:, :, k]
        if fg.any():
            wm = estimate_wm_intensity(mr, foreground=fg, bins=bins)
        else:
            wm = 0.0
        seg = preprocess_seg_channels(mr, sample.labels[:, :, :, k], wm)
        channels = np.concatenate([mr[None], seg], axis=0)
        out.append(MultiChannelSlice(channels=channels, slice_index=k, source="real"))
    return out


# --------------------------------------------------------------------------
# On-disk dataset format: one directory per subject, one 16-bit grayscale PNG
# per channel per slice, and a JSON sidecar with covariates and the scaling
# needed to undo quantization. Portable and diffable.
# --------------------------------------------------------------------------

_MASK_HI = 65535


def _write_png16(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _read_png16(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def _quantize(arr: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.uint16), lo, hi
    q = np.round((arr - lo) / (hi - lo) * _MASK_HI)
    return q.astype(np.uint16), lo, hi


def _dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full(q.shape, lo, dtype=np.float32)
    return (q.astype(np.float32) / _MASK_HI * (hi - lo) + lo).astype(np.float32)


def save_subject(root: Path | str, sample: LabelledSample, with_labels: bool = True,
                 extra_meta: dict | None = None) -> Path:
    """Write one subject in the dataset directory format; returns its directory."""
    subj_dir = Path(root) / sample.subject_id
    subj_dir.mkdir(parents=True, exist_ok=True)
    q, lo, hi = _quantize(sample.mr)
    depth = sample.mr.shape[2]
    for k in range(depth):
        _write_png16(subj_dir / f"s{k:03d}_c0.png", q[:, :, k])
        if with_labels:
            for c in range(N_STRUCTURES):
                _write_png16(subj_dir / f"s{k:03d}_c{c + 1}.png",
                             sample.labels[c, :, :, k].astype(np.uint16) * _MASK_HI)
    meta = {
        "subject_id": sample.subject_id,
        "age": float(sample.age),
        "cdr": float(sample.cdr),
        "is_repeat": bool(sample.is_repeat),
        "shape": list(sample.mr.shape),
        "with_labels": bool(with_labels),
        "mr_range": [lo, hi],
        "structures": list(STRUCTURES),
    }
    if extra_meta:
        meta.update(extra_meta)
    (subj_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return subj_dir


def load_subject(subj_dir: Path | str) -> tuple[LabelledSample, dict]:
    """Read a subject directory back; labels are all-zero when stored unlabelled."""
    subj_dir = Path(subj_dir)
    meta = json.loads((subj_dir / "meta.json").read_text())
    h, w, depth = meta["shape"]
    lo, hi = meta["mr_range"]
    mr = np.zeros((h, w, depth), dtype=np.float32)
    labels = np.zeros((N_STRUCTURES, h, w, depth), dtype=bool)
    for k in range(depth):
        mr[:, :, k] = _dequantize(_read_png16(subj_dir / f"s{k:03d}_c0.png"), lo, hi)
        if meta["with_labels"]:
            for c in range(N_STRUCTURES):
                labels[c, :, :, k] = _read_png16(subj_dir / f"s{k:03d}_c{c + 1}.png") > 0
    sample = LabelledSample(
        subject_id=meta["subject_id"], mr=mr, labels=labels,
        age=meta["age"], cdr=meta["cdr"], is_repeat=meta["is_repeat"],
    )
    return sample, meta


def list_subjects(root: Path | str) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "meta.json").exists())


class IngestionAdapter:
    """Contract for bringing external volumetric formats into the pipeline.

    An adapter owns whatever format-specific reading it needs and must yield
    LabelledSample objects satisfying the type's invariants: co-registered to a
    common space, background voxels at exactly 0, disjoint binary structure
    masks in the canonical structure order, and covariates populated. Concrete
    adapters for clinical formats live outside this package; the phantom
    cohort generator is the in-tree reference producer.
    """

    def subjects(self) -> list[str]:
        raise NotImplementedError

    def load(self, subject_id: str) -> LabelledSample:
        raise NotImplementedError
