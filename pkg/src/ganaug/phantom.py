"""Synthetic head-phantom cohort with controllable age and severity effects.

Phantoms are 2D-native ellipse anatomies stacked into pseudo-volumes with a
smooth through-plane size profile. Covariates drive the anatomy the way the
real cohort motivates: the ventricle analog grows with age (displacing the
caudate analog sideways), and the hippocampus/amygdala analogs shrink with
the severity rating. Every generative parameter is recorded so masks can be
regenerated analytically and covariate effects checked in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import CDR_LEVELS, N_STRUCTURES, STRUCTURES, LabelledSample

AGE_LO, AGE_HI = 18.0, 96.0

# Tissue intensities in arbitrary pre-normalization units.
CSF_VAL = 0.16
GM_VAL = 0.48
WM_VAL = 0.78
STRUCTURE_VALS = {
    "accumbens": 0.52,
    "amygdala": 0.50,
    "caudate": 0.50,
    "hippocampus": 0.46,
    "pallidum": 0.64,
    "putamen": 0.54,
    "thalamus": 0.56,
}

# Ellipse layout in fractions of the ROI edge: (center_row, center_col,
# semi_row, semi_col). Margins between neighbours absorb the per-seed jitter
# (centers +-0.006, radii +-3%) at every covariate value in range.
_BRAIN = (0.50, 0.50, 0.46, 0.42)
_WM = (0.50, 0.50, 0.385, 0.345)
_VENT_ROW = 0.40
_VENT_COL_OFF = 0.105
_VENT_SEMI = (0.125, 0.052)      # scaled by the ventricle scale
_STRUCT_LAYOUT = {
    "caudate": (0.40, None, 0.085, 0.042),   # col tracks the ventricle edge
    "putamen": (0.58, 0.76, 0.075, 0.047),
    "pallidum": (0.60, 0.655, 0.048, 0.038),
    "thalamus": (0.615, 0.50, 0.085, 0.095),
    "hippocampus": (0.80, 0.615, 0.052, 0.089),
    "amygdala": (0.80, 0.38, 0.050, 0.066),
    "accumbens": (0.625, 0.305, 0.042, 0.052),
}
_CAUDATE_GAP = 0.06
_CENTER_JITTER = 0.006
_RADIUS_JITTER = 0.03


def ventricle_scale(age: float, jitter: float = 1.0) -> float:
    """Strictly increasing in age for any fixed per-seed jitter."""
    return (0.62 + 0.85 * (age - AGE_LO) / (AGE_HI - AGE_LO)) * jitter


def atrophy_scale(cdr: float) -> float:
    """Strictly decreasing in severity; applied to hippocampus/amygdala radii."""
    return 1.0 - 0.11 * cdr


@dataclass
class PhantomSpec:
    """Cohort description. `resolution` is the in-plane ROI edge in pixels."""

    n_subjects: int = 200
    n_labelled: int = 30
    age_range: tuple[float, float] = (AGE_LO, AGE_HI)
    cdr_distribution: dict[float, float] = field(
        default_factory=lambda: {0.0: 0.77, 0.5: 0.16, 1.0: 0.065, 2.0: 0.005}
    )
    noise_sigma: float = 0.02
    seed: int = 0
    resolution: int = 32
    depth: int = 20
    base_res: int = 4
    labelled_age_range: tuple[float, float] = (AGE_LO, 40.0)

    def __post_init__(self):
        total = sum(self.cdr_distribution.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"cdr_distribution sums to {total}, expected 1")
        if any(k not in CDR_LEVELS for k in self.cdr_distribution):
            raise ValueError("cdr_distribution keys must be CDR levels")
        r = self.resolution
        while r > self.base_res and r % 2 == 0:
            r //= 2
        if r != self.base_res:
            raise ValueError(
                f"resolution {self.resolution} is not base_res {self.base_res} x 2^k"
            )


@dataclass
class PhantomSample:
    """A labelled sample plus the generative parameters that produced it."""

    sample: LabelledSample
    params: dict

    @property
    def subject_id(self) -> str:
        return self.sample.subject_id


def _slice_profile(depth: int) -> np.ndarray:
    k = np.arange(depth, dtype=np.float64)
    kc = (depth - 1) / 2.0
    rk = depth / 2.0 + 1.5
    return np.sqrt(np.maximum(0.0, 1.0 - ((k - kc) / rk) ** 2))


def _ellipse_mask(shape: tuple[int, int], crow: float, ccol: float,
                  srow: float, scol: float) -> np.ndarray:
    if srow <= 0 or scol <= 0:
        return np.zeros(shape, dtype=bool)
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    return ((rr - crow) / srow) ** 2 + ((cc - ccol) / scol) ** 2 <= 1.0


def phantom_params(seed: int, age: float, cdr: float, resolution: int = 32,
                   depth: int = 20, noise_sigma: float = 0.02) -> dict:
    """All generative parameters for one subject, in canvas pixels.

    Per-seed jitter streams are independent of age/cdr so the covariate
    effects are monotone for every seed.
    """
    if float(cdr) not in CDR_LEVELS:
        raise ValueError(f"cdr {cdr} not a CDR level")
    jit = np.random.default_rng([int(seed), 0xA11CE])
    margin = resolution // 8
    canvas = resolution + 2 * margin
    dmargin = max(1, depth // 10)
    canvas_depth = depth + 2 * dmargin
    r = float(resolution)
    c0 = margin + r / 2.0

    vjit = 1.0 + jit.uniform(-0.08, 0.08)
    vs = ventricle_scale(age, vjit)
    at = atrophy_scale(cdr)
    ivals = {name: v * (1.0 + jit.uniform(-0.02, 0.02))
             for name, v in STRUCTURE_VALS.items()}
    wm_val = WM_VAL * (1.0 + jit.uniform(-0.02, 0.02))

    structures = {}
    for name in STRUCTURES:
        lrow, lcol, srow, scol = _STRUCT_LAYOUT[name]
        if name == "caudate":
            lcol = 0.5 + _VENT_COL_OFF + _VENT_SEMI[1] * vs + _CAUDATE_GAP
        rscale = 1.0 + jit.uniform(-_RADIUS_JITTER, _RADIUS_JITTER)
        if name in ("hippocampus", "amygdala"):
            rscale *= at
        structures[name] = {
            "crow": margin + lrow * r + jit.uniform(-_CENTER_JITTER, _CENTER_JITTER) * r,
            "ccol": margin + lcol * r + jit.uniform(-_CENTER_JITTER, _CENTER_JITTER) * r,
            "srow": srow * r * rscale,
            "scol": scol * r * rscale,
            "value": ivals[name],
        }

    vent_srow = _VENT_SEMI[0] * vs * r
    vent_scol = _VENT_SEMI[1] * vs * r
    params = {
        "seed": int(seed),
        "age": float(age),
        "cdr": float(cdr),
        "resolution": int(resolution),
        "depth": int(depth),
        "canvas": int(canvas),
        "canvas_depth": int(canvas_depth),
        "margin": int(margin),
        "depth_margin": int(dmargin),
        "noise_sigma": float(noise_sigma),
        "ventricle_scale": float(vs),
        "ventricle": {
            "crow": margin + _VENT_ROW * r,
            "col_off": _VENT_COL_OFF * r,
            "srow": vent_srow,
            "scol": vent_scol,
            "area": float(2 * np.pi * vent_srow * vent_scol),
        },
        "brain": {"crow": c0, "ccol": c0,
                  "srow": _BRAIN[2] * r, "scol": _BRAIN[3] * r},
        "wm": {"crow": c0, "ccol": c0, "srow": _WM[2] * r, "scol": _WM[3] * r},
        "wm_intensity": float(wm_val),
        "csf_intensity": CSF_VAL,
        "gm_intensity": GM_VAL,
        "structures": structures,
    }
    for name in STRUCTURES:
        s = structures[name]
        s["area"] = float(np.pi * s["srow"] * s["scol"])
    return params


def masks_from_params(params: dict) -> np.ndarray:
    """Analytic regeneration of the 7 structure masks from recorded parameters."""
    canvas = params["canvas"]
    canvas_depth = params["canvas_depth"]
    profile = _slice_profile(params["depth"])
    dm = params["depth_margin"]
    masks = np.zeros((N_STRUCTURES, canvas, canvas, canvas_depth), dtype=bool)
    for c, name in enumerate(STRUCTURES):
        s = params["structures"][name]
        for k, w in enumerate(profile):
            masks[c, :, :, dm + k] = _ellipse_mask(
                (canvas, canvas), s["crow"], s["ccol"], s["srow"] * w, s["scol"] * w
            )
    return masks


def generate_phantom(seed: int, age: float, cdr: float, resolution: int = 32,
                     depth: int = 20, noise_sigma: float = 0.02,
                     subject_id: str | None = None) -> PhantomSample:
    """Deterministic in (seed, age, cdr); raw (pre-normalization) intensities."""
    params = phantom_params(seed, age, cdr, resolution, depth, noise_sigma)
    canvas = params["canvas"]
    canvas_depth = params["canvas_depth"]
    dm = params["depth_margin"]
    profile = _slice_profile(depth)

    mr = np.zeros((canvas, canvas, canvas_depth), dtype=np.float32)
    labels = masks_from_params(params)
    b = params["brain"]
    w = params["wm"]
    v = params["ventricle"]
    for k, wk in enumerate(profile):
        z = dm + k
        sl = mr[:, :, z]
        brain = _ellipse_mask((canvas, canvas), b["crow"], b["ccol"],
                              b["srow"] * wk, b["scol"] * wk)
        wm = _ellipse_mask((canvas, canvas), w["crow"], w["ccol"],
                           w["srow"] * wk, w["scol"] * wk)
        sl[brain] = GM_VAL
        sl[wm] = params["wm_intensity"]
        for side in (-1.0, 1.0):
            vent = _ellipse_mask((canvas, canvas), v["crow"],
                                 b["ccol"] + side * v["col_off"],
                                 v["srow"] * wk, v["scol"] * wk)
            sl[vent & brain] = CSF_VAL
        for c, name in enumerate(STRUCTURES):
            sl[labels[c, :, :, z]] = params["structures"][name]["value"]

    noise_rng = np.random.default_rng(
        [int(seed), int(round(age * 4)), int(round(cdr * 2)), 0xBEEF]
    )
    brain_vox = mr > 0
    noise = noise_rng.normal(0.0, noise_sigma, size=mr.shape).astype(np.float32)
    mr[brain_vox] = np.maximum(mr[brain_vox] + noise[brain_vox], 0.01)

    if subject_id is None:
        subject_id = f"p{seed:05d}"
    sample = LabelledSample(subject_id=subject_id, mr=mr, labels=labels,
                            age=age, cdr=cdr)
    return PhantomSample(sample=sample, params=params)


def generate_cohort(spec: PhantomSpec) -> tuple[list[PhantomSample], list[PhantomSample]]:
    """Labelled pool from young/healthy marginals, unlabelled pool from the full ones.

    Unlabelled samples keep their masks in memory as evaluation ground truth;
    callers are responsible for withholding them from training.
    """
    rng = np.random.default_rng([int(spec.seed), 0xC001])
    labelled = []
    for i in range(spec.n_labelled):
        age = float(rng.uniform(*spec.labelled_age_range))
        labelled.append(generate_phantom(
            seed=int(spec.seed) * 1_000_000 + i, age=age, cdr=0.0,
            resolution=spec.resolution, depth=spec.depth,
            noise_sigma=spec.noise_sigma, subject_id=f"lab{i:04d}",
        ))
    levels = sorted(spec.cdr_distribution)
    probs = np.array([spec.cdr_distribution[k] for k in levels])
    unlabelled = []
    for i in range(spec.n_subjects):
        age = float(rng.uniform(*spec.age_range))
        cdr = float(levels[rng.choice(len(levels), p=probs)])
        unlabelled.append(generate_phantom(
            seed=int(spec.seed) * 1_000_000 + 500_000 + i, age=age, cdr=cdr,
            resolution=spec.resolution, depth=spec.depth,
            noise_sigma=spec.noise_sigma, subject_id=f"unl{i:04d}",
        ))
    return labelled, unlabelled
