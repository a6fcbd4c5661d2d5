"""Declarative experiment runner: phantom cohort -> folds -> staged GAN ->
synthesis -> ratio-mixed segmentation -> evaluation -> tables and plots.

Every stage drops a done-marker with the config hash, so a rerun with the same
config skips completed work and reproduces byte-identical tables. The
manifest ties results back to the config and seeds that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data, metrics, phantom, phases, segmenter, synth
from .errors import ConfigError, MissingResults, StageFailure
from .gan import GanTrainConfig, load_checkpoint

VALID_BUDGETS = (1, 3, 6, 12, 24)
VALID_RATIOS = ("baseline", 100, 10, 2, 1)


@dataclass
class ExperimentConfig:
    output_root: str = "runs/exp"
    master_seed: int = 0
    resolution_preset: str | None = None   # "desk32" or "paper80"
    resolution: int = 32
    depth: int = 20
    base_res: int = 4

    n_unlabelled: int = 60
    n_labelled: int = 30
    noise_sigma: float = 0.02
    cdr_distribution: dict = field(
        default_factory=lambda: {"0": 0.7, "0.5": 0.18, "1": 0.1, "2": 0.02})

    folds: list = field(default_factory=lambda: [0])
    budgets: list = field(default_factory=lambda: [1])
    ratios: list = field(default_factory=lambda: ["baseline", 2])

    latent_dim: int = 64
    fmap: int = 24
    batch_size: int = 8
    gan_lr: float = 1e-3
    critic_updates_per_gen: int = 1
    p1_images_per_stage: int = 3000
    p2_images: int = 12000
    p3_images: int = 8000
    unfreeze_images: int = 3000
    freeze_blocks: int = 1
    p2_gen_lr: float | None = None
    p3_gen_lr: float | None = None

    synth_n: int = 400
    quality_radius_mm: float = 10.0
    spacing: list = field(default_factory=lambda: [2.5, 2.5, 3.0])

    seg_steps: int = 1500
    seg_patch: int = 17
    seg_depth: int = 4
    seg_width: int = 20
    seg_batch: int = 16

    classify_repeats: int = 100

    def __post_init__(self):
        if self.resolution_preset is not None:
            if self.resolution_preset not in data.ROI_PRESETS:
                raise ConfigError(
                    f"unknown resolution preset {self.resolution_preset!r}; "
                    f"choose from {sorted(data.ROI_PRESETS)}")
            h, _, d = data.ROI_PRESETS[self.resolution_preset]
            self.resolution, self.depth = h, d
            self.base_res = 5 if h == 80 else 4   # 80 = 5 x 2^4
        if not self.budgets or not self.ratios:
            raise ConfigError("budgets and ratios must be non-empty")
        for b in self.budgets:
            if b not in VALID_BUDGETS:
                raise ConfigError(f"budget {b} not in {VALID_BUDGETS}")
        for r in self.ratios:
            if r not in VALID_RATIOS:
                raise ConfigError(f"ratio {r} not in {VALID_RATIOS}")
        if max(self.budgets) > self.n_labelled:
            raise ConfigError("largest budget exceeds the labelled pool")

    @classmethod
    def from_json(cls, path: Path | str, overrides: dict | None = None):
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        payload.update(overrides or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def phantom_spec(self) -> phantom.PhantomSpec:
        dist = {float(k): v for k, v in self.cdr_distribution.items()}
        return phantom.PhantomSpec(
            n_subjects=self.n_unlabelled, n_labelled=self.n_labelled,
            cdr_distribution=dist, noise_sigma=self.noise_sigma,
            seed=self.master_seed, resolution=self.resolution,
            depth=self.depth, base_res=self.base_res,
        )

    def staged_config(self, seed: int) -> phases.StagedConfig:
        gan = GanTrainConfig(
            latent_dim=self.latent_dim, base_res=self.base_res,
            target_res=self.resolution, out_channels=8, fmap=self.fmap,
            batch_size=self.batch_size, lr=self.gan_lr,
            critic_updates_per_gen=self.critic_updates_per_gen, seed=seed,
        )
        return phases.StagedConfig(
            gan=gan, p1_images_per_stage=self.p1_images_per_stage,
            p2_images=self.p2_images, p3_images=self.p3_images,
            freeze_blocks=self.freeze_blocks,
            unfreeze_images=self.unfreeze_images,
            p2_gen_lr=self.p2_gen_lr, p3_gen_lr=self.p3_gen_lr,
        )

    def seg_config(self, seed: int) -> segmenter.SegNetConfig:
        return segmenter.SegNetConfig(
            steps=self.seg_steps, patch=self.seg_patch, depth=self.seg_depth,
            width=self.seg_width, batch_size=self.seg_batch, seed=seed,
        )


def _done_path(stage_dir: Path) -> Path:
    return stage_dir / "stage.done.json"


def stage_done(stage_dir: Path, cfg_hash: str) -> bool:
    p = _done_path(stage_dir)
    if not p.exists():
        return False
    return json.loads(p.read_text()).get("config_hash") == cfg_hash


def mark_done(stage_dir: Path, cfg_hash: str, **extra) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    _done_path(stage_dir).write_text(
        json.dumps({"config_hash": cfg_hash, **extra}, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_phantom(cfg: ExperimentConfig, root: Path) -> Path:
    out = root / "data"
    if stage_done(out, cfg.config_hash):
        return out
    labelled, unlabelled = phantom.generate_cohort(cfg.phantom_spec())
    for p in labelled:
        data.save_subject(out / "labelled", p.sample,
                          extra_meta={"wm_intensity": p.params["wm_intensity"]})
    for p in unlabelled:
        data.save_subject(out / "unlabelled", p.sample, with_labels=False)
        data.save_subject(out / "unlabelled_truth", p.sample)
    mark_done(out, cfg.config_hash, n_labelled=len(labelled),
              n_unlabelled=len(unlabelled))
    return out


def preprocess_subject(sample: data.LabelledSample, cfg: ExperimentConfig
                       ) -> data.LabelledSample:
    """Normalize over non-background voxels, then crop the centred ROI."""
    bg = sample.mr == 0
    norm = data.normalize_intensity(sample.mr, bg)
    box = data.centered_roi(norm.shape, (cfg.resolution, cfg.resolution, cfg.depth))
    labels = np.stack([data.extract_roi(sample.labels[c], box)
                       for c in range(data.N_STRUCTURES)])
    return data.LabelledSample(sample.subject_id, data.extract_roi(norm, box),
                               labels, sample.age, sample.cdr, sample.is_repeat)


def stage_preprocess(cfg: ExperimentConfig, root: Path) -> Path:
    out = root / "proc"
    if stage_done(out, cfg.config_hash):
        return out
    for pool in ("labelled", "unlabelled", "unlabelled_truth"):
        for subj_dir in data.list_subjects(root / "data" / pool):
            sample, meta = data.load_subject(subj_dir)
            proc = preprocess_subject(sample, cfg)
            data.save_subject(out / pool, proc,
                              with_labels=meta["with_labels"])
    mark_done(out, cfg.config_hash)
    return out


def _load_pool(pool_dir: Path) -> list[data.LabelledSample]:
    return [data.load_subject(p)[0] for p in data.list_subjects(pool_dir)]


def _labelled_slice_array(samples: list[data.LabelledSample]) -> np.ndarray:
    return np.concatenate(
        [phases.slices_to_array(data.slices_from_sample(s)) for s in samples])


def _mr_slice_array(samples: list[data.LabelledSample]) -> np.ndarray:
    out = []
    for s in samples:
        for _, sl in data.slice_axial(s.mr):
            out.append(sl)
    return np.stack(out)[:, None].astype(np.float32)


def stage_gan(cfg: ExperimentConfig, root: Path, fold: metrics.DatasetSplit,
              budget: int) -> Path:
    out = root / f"f{fold.fold_id}" / f"n{budget}" / "gan"
    if stage_done(out, cfg.config_hash):
        return out
    labelled = {s.subject_id: s
                for s in _load_pool(root / "proc" / "labelled")}
    subset = [labelled[sid] for sid in metrics.subset_budget(fold, budget).labelled_subset]
    unlabelled = _mr_slice_array(_load_pool(root / "proc" / "unlabelled"))
    seed = cfg.master_seed + 7919 * fold.fold_id + 13 * budget
    staged = cfg.staged_config(seed)
    if budget in (12, 24):
        by_subject = {s.subject_id: _labelled_slice_array([s]) for s in subset}
        results = phases.run_multi_gan(by_subject, unlabelled, staged, out)
    else:
        pool = _labelled_slice_array(subset)
        results = [phases.run_staged_training(pool, unlabelled, staged,
                                              out / "gan0")]
        results[0]["gan_id"] = 0
        results[0]["group"] = [s.subject_id for s in subset]
    mark_done(out, cfg.config_hash, runs=[r["workdir"] for r in results],
              groups=[r["group"] for r in results])
    return out


def _gan_workdirs(gan_dir: Path) -> list[Path]:
    return sorted(p for p in gan_dir.iterdir()
                  if p.is_dir() and (p / "p3.ckpt").exists())


def stage_synth(cfg: ExperimentConfig, root: Path, fold: metrics.DatasetSplit,
                budget: int) -> Path:
    out = root / f"f{fold.fold_id}" / f"n{budget}" / "synth"
    if stage_done(out, cfg.config_hash):
        return out
    labelled = {s.subject_id: s for s in _load_pool(root / "proc" / "labelled")}
    subset = [labelled[sid] for sid in metrics.subset_budget(fold, budget).labelled_subset]
    masks = synth.build_structure_masks(subset, radius_mm=cfg.quality_radius_mm,
                                        spacing=tuple(cfg.spacing))

    assignment, indices = [], []
    for s in subset:
        for k, sl in data.slice_axial(s.mr):
            assignment.append(sl)
            indices.append(k)
    assignment = np.stack(assignment)
    score_pool = _mr_slice_array(_load_pool(root / "proc" / "unlabelled"))[:, 0]

    generators = []
    for gi, workdir in enumerate(_gan_workdirs(root / f"f{fold.fold_id}" / f"n{budget}" / "gan")):
        for tag in ("p2", "p3"):
            g, _, _, _ = load_checkpoint(workdir / f"{tag}.ckpt", restore_rng=False)
            generators.append((tag, gi, g))
    if not generators:
        raise StageFailure("no trained GAN checkpoints found; run train-gan first")

    samples = synth.generate_synthetic_dataset(
        generators, cfg.synth_n, masks, assignment, indices, score_pool,
        seed=cfg.master_seed + fold.fold_id,
    )
    save_synthetic_pool(out, samples)
    mark_done(out, cfg.config_hash, total=len(samples),
              kept=sum(s.kept for s in samples))
    return out


def save_synthetic_pool(out: Path, samples: list[synth.SyntheticSample]) -> None:
    """Synthetic pool in the dataset directory format plus provenance.

    Written directly (not through LabelledSample: postprocessed channels are
    cleaned independently and may overlap across structures). Raw generator
    channels are kept alongside (raw.npz) so the postprocess and filter steps
    can be re-run on a stored pool.
    """
    for i, s in enumerate(samples):
        subj_dir = out / f"syn{i:05d}"
        subj_dir.mkdir(parents=True, exist_ok=True)
        q, lo, hi = data._quantize(s.mr)
        data._write_png16(subj_dir / "s000_c0.png", q)
        labels = (s.binary_labels if s.binary_labels is not None
                  else np.zeros((data.N_STRUCTURES,) + s.mr.shape, dtype=bool))
        for c in range(data.N_STRUCTURES):
            data._write_png16(subj_dir / f"s000_c{c + 1}.png",
                              labels[c].astype(np.uint16) * 65535)
        meta = {
            "subject_id": f"syn{i:05d}", "age": 0.0, "cdr": 0.0,
            "is_repeat": False, "shape": [*s.mr.shape, 1], "with_labels": True,
            "mr_range": [lo, hi], "structures": list(data.STRUCTURES),
            "synthetic": True, "kept": bool(s.kept),
            "slice_index": int(s.slice_index),
            "quality_score": float(s.quality_score),
            "provenance": s.provenance,
        }
        (subj_dir / "meta.json").write_text(json.dumps(meta, indent=1,
                                                       sort_keys=True))
        np.savez_compressed(subj_dir / "raw.npz", channels=s.channels)


def load_synthetic_pool(pool_dir: Path) -> list[synth.SyntheticSample]:
    samples = []
    for subj_dir in data.list_subjects(pool_dir):
        meta = json.loads((subj_dir / "meta.json").read_text())
        raw = np.load(subj_dir / "raw.npz")["channels"]
        labels = np.stack([
            data._read_png16(subj_dir / f"s000_c{c + 1}.png") > 0
            for c in range(data.N_STRUCTURES)])
        s = synth.SyntheticSample(
            channels=raw, slice_index=meta["slice_index"],
            binary_labels=labels,
            quality_score=meta["quality_score"], kept=meta["kept"],
            provenance=meta["provenance"],
        )
        s.directory = subj_dir
        samples.append(s)
    return samples


def repostprocess_pool(cfg: ExperimentConfig, root: Path,
                       fold: metrics.DatasetSplit, budget: int) -> int:
    """Re-run morphological postprocessing over a stored pool, in place."""
    pool_dir = root / f"f{fold.fold_id}" / f"n{budget}" / "synth"
    labelled = {s.subject_id: s for s in _load_pool(root / "proc" / "labelled")}
    subset = [labelled[sid] for sid in metrics.subset_budget(fold, budget).labelled_subset]
    masks = synth.build_structure_masks(subset, radius_mm=cfg.quality_radius_mm,
                                        spacing=tuple(cfg.spacing))
    samples = load_synthetic_pool(pool_dir)
    for s in samples:
        synth.postprocess(s, masks)
        for c in range(data.N_STRUCTURES):
            data._write_png16(s.directory / f"s000_c{c + 1}.png",
                              s.binary_labels[c].astype(np.uint16) * 65535)
    return len(samples)


def refilter_pool(cfg: ExperimentConfig, root: Path,
                  fold: metrics.DatasetSplit, budget: int) -> dict:
    """Re-score a stored pool against the unlabelled images and re-flag kept."""
    pool_dir = root / f"f{fold.fold_id}" / f"n{budget}" / "synth"
    score_pool = _mr_slice_array(_load_pool(root / "proc" / "unlabelled"))[:, 0]
    samples = load_synthetic_pool(pool_dir)
    for s in samples:
        s.quality_score = synth.quality_score(s.mr, score_pool)
    synth.filter_by_quality(samples)
    for s in samples:
        meta = json.loads((s.directory / "meta.json").read_text())
        meta["quality_score"] = float(s.quality_score)
        meta["kept"] = bool(s.kept)
        (s.directory / "meta.json").write_text(json.dumps(meta, indent=1,
                                                          sort_keys=True))
    return {"total": len(samples), "kept": sum(s.kept for s in samples)}


def load_synthetic_pairs(pool_dir: Path) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for s in load_synthetic_pool(pool_dir):
        if not s.kept:
            continue
        lab = np.zeros(s.mr.shape, dtype=np.int64)
        for c in range(data.N_STRUCTURES):
            lab[s.binary_labels[c]] = c + 1
        pairs.append((s.mr.astype(np.float32), lab))
    return pairs


def stage_seg(cfg: ExperimentConfig, root: Path, fold: metrics.DatasetSplit,
              budget: int, ratio) -> Path:
    out = root / f"f{fold.fold_id}" / f"n{budget}" / f"seg_{ratio}"
    if stage_done(out, cfg.config_hash):
        return out
    labelled = {s.subject_id: s for s in _load_pool(root / "proc" / "labelled")}
    subset = [labelled[sid] for sid in metrics.subset_budget(fold, budget).labelled_subset]
    real_pairs = []
    for s in subset:
        real_pairs.extend(segmenter.labelled_to_pairs(s.mr, s.label_map()))
    if ratio == "baseline":
        synth_pairs, r = [], None
    else:
        synth_pairs = load_synthetic_pairs(
            root / f"f{fold.fold_id}" / f"n{budget}" / "synth")
        r = int(ratio)
    seed = cfg.master_seed + 104729 * fold.fold_id + 31 * budget
    sampler = segmenter.MixedSampler(real=real_pairs, synth=synth_pairs,
                                     ratio=r, seed=seed)
    model, history = segmenter.train_segnet(cfg.seg_config(seed), sampler)
    out.mkdir(parents=True, exist_ok=True)
    import torch
    torch.save({"model": model.state_dict(),
                "cfg": asdict(cfg.seg_config(seed))}, out / "model.ckpt")
    (out / "history.json").write_text(json.dumps(history, indent=1))
    mark_done(out, cfg.config_hash)
    return out


def load_seg_model(seg_dir: Path) -> segmenter.PatchSegNet:
    import torch
    blob = torch.load(seg_dir / "model.ckpt", weights_only=False)
    model = segmenter.PatchSegNet(segmenter.SegNetConfig(**blob["cfg"]))
    model.load_state_dict(blob["model"])
    model.eval()
    return model


def stage_evaluate(cfg: ExperimentConfig, root: Path, fold: metrics.DatasetSplit,
                   budget: int, ratio) -> Path:
    out = root / f"f{fold.fold_id}" / f"n{budget}" / f"eval_{ratio}"
    if stage_done(out, cfg.config_hash):
        return out
    model = load_seg_model(root / f"f{fold.fold_id}" / f"n{budget}" / f"seg_{ratio}")
    labelled = {s.subject_id: s for s in _load_pool(root / "proc" / "labelled")}
    reports = []
    for sid in fold.test_ids:
        s = labelled[sid]
        pred = segmenter.segment(model, s.mr)
        rep = metrics.dsc_report(pred, s.label_map(), subject_id=sid,
                                 age=s.age, cdr=s.cdr)
        reports.append(rep)

    truth_pool = _load_pool(root / "proc" / "unlabelled_truth")
    cohort = []
    for s in truth_pool:
        pred = segmenter.segment(model, s.mr)
        rep = metrics.dsc_report(pred, s.label_map(), subject_id=s.subject_id,
                                 age=s.age, cdr=s.cdr)
        vols = metrics.volumes_from_seg(pred, spacing=tuple(cfg.spacing))
        cohort.append({"subject_id": s.subject_id, "age": s.age, "cdr": s.cdr,
                       "overall": rep.overall, "row": rep.row(),
                       "volumes": vols.tolist()})
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "fold_test": [{"subject_id": r.subject_id, "age": r.age, "cdr": r.cdr,
                       "row": r.row()} for r in reports],
        "cohort": cohort,
    }
    (out / "results.json").write_text(json.dumps(payload, indent=1))
    mark_done(out, cfg.config_hash)
    return out


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Execute the whole matrix; returns the output root."""
    root = Path(cfg.output_root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps({
        "config": json.loads(cfg.to_json()),
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
    }, indent=1, sort_keys=True))
    try:
        stage_phantom(cfg, root)
        stage_preprocess(cfg, root)
        ids = [p.name for p in data.list_subjects(root / "proc" / "labelled")]
        folds = metrics.make_folds(ids, k=5, seed=cfg.master_seed)
        for fi in cfg.folds:
            fold = folds[fi]
            for budget in cfg.budgets:
                stage_gan(cfg, root, fold, budget)
                if any(r != "baseline" for r in cfg.ratios):
                    stage_synth(cfg, root, fold, budget)
                for ratio in cfg.ratios:
                    stage_seg(cfg, root, fold, budget, ratio)
                    stage_evaluate(cfg, root, fold, budget, ratio)
        stage_classify(cfg, root, folds)
    except (ConfigError, MissingResults):
        raise
    except Exception as e:
        raise StageFailure(str(e)) from e
    return root


def stage_classify(cfg: ExperimentConfig, root: Path,
                   folds: list[metrics.DatasetSplit]) -> Path:
    out = root / "classify"
    if stage_done(out, cfg.config_hash):
        return out
    results = {}
    for fi in cfg.folds:
        for budget in cfg.budgets:
            for ratio in cfg.ratios:
                eval_dir = root / f"f{fi}" / f"n{budget}" / f"eval_{ratio}"
                if not (eval_dir / "results.json").exists():
                    continue
                payload = json.loads((eval_dir / "results.json").read_text())
                rows = [c for c in payload["cohort"] if c["cdr"] in (0.5, 1.0, 2.0)]
                if not rows:
                    continue
                x = np.array([c["volumes"] for c in rows])
                y = np.array([0 if c["cdr"] == 0.5 else 1 for c in rows])
                key = f"f{fi}_n{budget}_{ratio}"
                counts = np.bincount(y, minlength=2)
                if counts.min() < 5:
                    results[key] = {"skipped": "too few subjects per class",
                                    "counts": counts.tolist()}
                    continue
                res = metrics.classify_cdr(x, y, repeats=cfg.classify_repeats,
                                           seed=cfg.master_seed)
                results[key] = {
                    "accuracy_mean": res.accuracy_mean,
                    "accuracy_std": res.accuracy_std,
                    "auc_mean": res.auc_mean, "auc_std": res.auc_std,
                    "accuracies": res.accuracies.tolist(),
                    "aucs": res.aucs.tolist(),
                }
    out.mkdir(parents=True, exist_ok=True)
    (out / "classification.json").write_text(json.dumps(results, indent=1,
                                                        sort_keys=True))
    mark_done(out, cfg.config_hash)
    return out


# --------------------------------------------------------------------------
# Reporting: tables in the ablation layout, ratio study, trend curves,
# classification table with significance flags, reject contact sheet
# --------------------------------------------------------------------------

TABLE_COLUMNS = ["Total", "Ac.", "Am.", "Ca.", "Hi.", "Pa.", "Pu.", "Th.", "Avg"]


def _collect_results(root: Path) -> list[dict]:
    rows = []
    for results in sorted(root.glob("f*/n*/eval_*/results.json")):
        eval_dir = results.parent
        fold = eval_dir.parent.parent.name
        budget = eval_dir.parent.name
        ratio = eval_dir.name.replace("eval_", "")
        rows.append({"fold": fold, "budget": budget, "ratio": ratio,
                     "payload": json.loads(results.read_text())})
    return rows


def write_ablation_table(rows: list[dict], path: Path) -> None:
    lines = ["model," + ",".join(TABLE_COLUMNS)]
    for r in rows:
        mat = np.array([t["row"] for t in r["payload"]["fold_test"]])
        mean = mat.mean(axis=0) * 100.0
        name = f"{r['fold']}_{r['budget']}_{r['ratio']}"
        lines.append(name + "," + ",".join(f"{v:.1f}" for v in mean))
    path.write_text("\n".join(lines) + "\n")


def write_classification_table(root: Path, path: Path) -> None:
    src = root / "classify" / "classification.json"
    if not src.exists():
        return
    blob = json.loads(src.read_text())
    lines = ["model,accuracy_mean,accuracy_std,auc_mean,auc_std,"
             "p_vs_baseline,significant"]
    for key in sorted(blob):
        row = blob[key]
        if "skipped" in row:
            lines.append(f"{key},skipped,,,,,")
            continue
        base_key = key.rsplit("_", 1)[0] + "_baseline"
        p, sig = "", ""
        if base_key != key and base_key in blob and "aucs" in blob.get(base_key, {}):
            pv, flag = metrics.paired_ttest(np.array(row["aucs"]),
                                            np.array(blob[base_key]["aucs"]))
            p, sig = f"{pv:.3e}", str(flag)
        lines.append(f"{key},{row['accuracy_mean']:.1f},{row['accuracy_std']:.1f},"
                     f"{row['auc_mean']:.3f},{row['auc_std']:.3f},{p},{sig}")
    path.write_text("\n".join(lines) + "\n")


def _plot_ratio_study(rows: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    by_key = {}
    for r in rows:
        mat = np.array([t["row"] for t in r["payload"]["fold_test"]])
        by_key.setdefault((r["budget"], r["ratio"]), []).append(mat[:, 0].mean())
    budgets = sorted({k[0] for k in by_key})
    ratios = ["baseline", "100", "10", "2", "1"]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(ratios)
    for i, ratio in enumerate(ratios):
        xs, ys = [], []
        for b, budget in enumerate(budgets):
            if (budget, ratio) in by_key:
                xs.append(b + i * width)
                ys.append(100 * np.mean(by_key[(budget, ratio)]))
        if xs:
            ax.bar(xs, ys, width=width, label=f"ratio {ratio}")
    ax.set_xticks(range(len(budgets)))
    ax.set_xticklabels(budgets)
    ax.set_xlabel("labelled budget")
    ax.set_ylabel("overall DSC x100 (fold test)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_trends(rows: list[dict], out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, (ax_age, ax_cdr) = plt.subplots(1, 2, figsize=(10, 4))
    for r in rows:
        cohort = r["payload"]["cohort"]
        if not cohort:
            continue
        ages = np.array([c["age"] for c in cohort])
        cdrs = np.array([c["cdr"] for c in cohort])
        overall = np.array([c["overall"] for c in cohort])
        name = f"{r['fold']}_{r['budget']}_{r['ratio']}"
        grid, est, _ = metrics.kernel_regression(ages, overall)
        ax_age.plot(grid, est, label=name)
        levels = sorted(set(cdrs))
        ax_cdr.plot(levels, [overall[cdrs == lv].mean() for lv in levels],
                    marker="o", label=name)
    ax_age.set_xlabel("age")
    ax_age.set_ylabel("overall DSC")
    ax_age.set_title("cohort DSC vs age (smoothed)")
    ax_age.legend(fontsize=6)
    ax_cdr.set_xlabel("severity rating")
    ax_cdr.set_title("cohort DSC vs severity")
    ax_cdr.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out_dir / "dsc_trends.png", dpi=110)
    plt.close(fig)


def _plot_rejects(root: Path, out_dir: Path, n: int = 9) -> None:
    pools = sorted(root.glob("f*/n*/synth"))
    rejects = []
    for pool in pools:
        for subj_dir in data.list_subjects(pool):
            meta = json.loads((subj_dir / "meta.json").read_text())
            if meta.get("synthetic") and not meta.get("kept", True):
                rejects.append((meta["quality_score"], subj_dir))
    if not rejects:
        return
    rejects.sort(reverse=True, key=lambda t: t[0])
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    take = rejects[:n]
    cols = int(np.ceil(np.sqrt(len(take))))
    rows_ = int(np.ceil(len(take) / cols))
    fig, axes = plt.subplots(rows_, cols, figsize=(2.2 * cols, 2.2 * rows_),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (score, subj_dir) in zip(axes.ravel(), take):
        meta = json.loads((subj_dir / "meta.json").read_text())
        lo, hi = meta["mr_range"]
        mr = data._dequantize(data._read_png16(subj_dir / "s000_c0.png"), lo, hi)
        ax.imshow(mr, cmap="gray")
        ax.set_title(f"{score:.1f}", fontsize=7)
        ax.axis("off")
    fig.suptitle("worst-scoring rejected samples")
    fig.tight_layout()
    fig.savefig(out_dir / "rejected_samples.png", dpi=110)
    plt.close(fig)


def report(root: Path | str, require_improvement: float | None = None) -> dict:
    """Emit tables and plots; returns a summary including the directional check."""
    root = Path(root)
    rows = _collect_results(root)
    if not rows:
        raise MissingResults(f"no evaluation results under {root}")
    out_dir = root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ablation_table(rows, out_dir / "ablation.csv")
    write_classification_table(root, out_dir / "classification.csv")
    _plot_ratio_study(rows, out_dir / "ratio_study.png")
    _plot_trends(rows, out_dir)
    _plot_rejects(root, out_dir)

    summary = {"tables": [str(out_dir / "ablation.csv")], "rows": len(rows)}
    base = [r for r in rows if r["ratio"] == "baseline"]
    aug = [r for r in rows if r["ratio"] != "baseline"]
    if base and aug:
        def cohort_mean(rs):
            vals = [c["overall"] for r in rs for c in r["payload"]["cohort"]]
            return float(np.mean(vals)) if vals else float("nan")
        summary["baseline_cohort_dsc"] = cohort_mean(base)
        summary["augmented_cohort_dsc"] = max(
            cohort_mean([r]) for r in aug)
        summary["improvement"] = (summary["augmented_cohort_dsc"]
                                  - summary["baseline_cohort_dsc"])
        if require_improvement is not None:
            summary["improvement_ok"] = bool(
                summary["improvement"] >= require_improvement)
    return summary
