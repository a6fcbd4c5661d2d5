"""Shared helpers for unit and acceptance tests."""

import numpy as np
from scipy import ndimage

from ganaug.synth import StructureMasks, SyntheticSample

ACCEPTANCE_PREFIX = "test_criterion"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in name or ACCEPTANCE_PREFIX not in name:
                continue
            short = name.split("::")[-1]
            tag = "PASS" if outcome == "passed" else "FAIL"
            lines[short] = tag
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for short in sorted(lines):
            terminalreporter.write_line(f"[{lines[short]}] {short}")


def volume_like_features(rng, n0=69, n1=30, effect=1.0, shared=0.7):
    """Synthetic 7-d volume features with a common size factor.

    Component 0 separates the classes at marginal effect size `effect`; the
    shared factor mirrors the overall-volume correlation real structure
    volumes carry.
    """
    n = n0 + n1
    g = rng.normal(0, np.sqrt(shared), size=(n, 1))
    e = rng.normal(0, np.sqrt(1 - shared), size=(n, 7))
    x = g + e
    y = np.array([0] * n0 + [1] * n1)
    x[:, 0] += effect * y
    return x, y


def disc(shape, crow, ccol, radius):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return (rr - crow) ** 2 + (cc - ccol) ** 2 <= radius ** 2


def make_corrupted_case(rng: np.random.Generator, size: int = 32):
    """One randomized corrupted synthetic sample plus its anatomy masks.

    The MR inside the structure carries bounded uniform noise; planted
    corruptions are interior channel holes, spur blobs inside and outside the
    anatomy mask, and strong MR outliers on the structure boundary ring (where
    partial-volume junk lives on real slices). Every corruption is one the
    postprocessing chain is supposed to undo.
    """
    c = int(rng.integers(0, 7))
    crow = size // 2 + int(rng.integers(-2, 3))
    ccol = size // 2 + int(rng.integers(-2, 3))
    radius = int(rng.integers(7, 9))
    struct = disc((size, size), crow, ccol, radius)
    allowed = disc((size, size), crow, ccol, radius + 4)

    wm_val = 0.78
    s_val = 0.50
    noise_amp = 0.05
    mr = np.full((size, size), wm_val)
    mr += rng.uniform(-0.01, 0.01, size=mr.shape)
    # balanced two-valued texture: max deviation from the retained mean stays
    # strictly inside 2 sample-sigmas no matter which pixels the chain trims
    ns = int(struct.sum())
    tex = np.full(ns, noise_amp)
    tex[: ns // 2] = -noise_amp
    mr[struct] = s_val + rng.permutation(tex)

    # strong MR outliers on boundary pixels that stay border-connected through
    # the closing step, so their removal cannot create a refillable hole
    closed = ndimage.binary_fill_holes(
        ndimage.binary_closing(struct, structure=ndimage.generate_binary_structure(2, 1)))
    ring = struct & ~ndimage.binary_erosion(closed, iterations=1)
    ring_idx = np.flatnonzero(ring.ravel())
    n_out = int(rng.integers(3, 7))
    outlier_idx = rng.choice(ring_idx, size=min(n_out, ring_idx.size), replace=False)
    mr.ravel()[outlier_idx] = s_val - 0.45

    channel = np.where(struct, np.abs(mr - wm_val), 0.0)
    channel += rng.uniform(0.0, 0.02, size=channel.shape) * ~struct

    # punch interior channel holes
    interior = ndimage.binary_erosion(struct, iterations=3)
    hole_idx = rng.choice(np.flatnonzero(interior.ravel()),
                          size=int(rng.integers(1, 4)), replace=False)
    channel.ravel()[hole_idx] = 0.0

    # spur blobs: off-structure (far enough that closing cannot merge them),
    # both inside and outside the anatomy mask
    keepout = ndimage.binary_dilation(struct, iterations=3)
    for _ in range(int(rng.integers(1, 3))):
        rr = int(rng.integers(2, size - 2))
        cc = int(rng.integers(2, size - 2))
        if not keepout[rr, cc]:
            channel[rr, cc] = 0.3
            if rng.random() < 0.5 and rr + 1 < size and not keepout[rr + 1, cc]:
                channel[rr + 1, cc] = 0.3

    channels = np.zeros((8, size, size), dtype=np.float32)
    channels[0] = mr
    channels[1 + c] = channel
    sample = SyntheticSample(channels=channels, slice_index=0)

    masks = np.zeros((7, size, size, 1), dtype=bool)
    masks[c, :, :, 0] = allowed
    struct_masks = StructureMasks(masks=masks, provenance=["suite"],
                                  dilation_radius_mm=4.0, spacing=(1.0, 1.0, 1.0))
    return sample, struct_masks, c, struct


def interior_holes(mask: np.ndarray) -> int:
    """Number of background pixels unreachable from the image border."""
    filled = ndimage.binary_fill_holes(mask)
    return int((filled & ~mask).sum())
