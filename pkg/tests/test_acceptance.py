"""Acceptance suite: one test per exit criterion, named test_criterion_NN_*.

The two heavy fixtures (a fully audited staged-training run at 32x32 and a
three-seed end-to-end augmentation study) cache their distilled results under
/tmp keyed by their preset hash, so a repeated suite run reuses them. Expected
runtime from cold: roughly 20 minutes for the audit run and 25-35 minutes per
end-to-end seed on a 2-core CPU box, well inside the per-criterion budgets.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import ndimage, stats

from conftest import interior_holes, make_corrupted_case, volume_like_features
from ganaug import data, metrics, phantom, phases, segmenter, synth
from ganaug.experiment import ExperimentConfig, preprocess_subject
from ganaug.gan import GanTrainConfig, build_critic, build_generator, critic_loss

CACHE_DIR = Path("/tmp/ganaug_accept_cache")
CACHE_VERSION = "v1"


def _cached(key_obj, builder):
    key = hashlib.sha256(
        (CACHE_VERSION + json.dumps(key_obj, sort_keys=True)).encode()
    ).hexdigest()[:20]
    path = CACHE_DIR / f"{key}.pt"
    if path.exists():
        return torch.load(path, weights_only=False)
    result = builder()
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    torch.save(result, path)
    return result


def _preprocessed_subject(seed, age, cdr, res=32, depth=20):
    p = phantom.generate_phantom(seed=seed, age=age, cdr=cdr,
                                 resolution=res, depth=depth)
    return preprocess_subject(p.sample, ExperimentConfig(resolution=res,
                                                         depth=depth))


def _labelled_slices(subjects):
    return np.concatenate(
        [phases.slices_to_array(data.slices_from_sample(s)) for s in subjects])


def _unlabelled_slices(subjects):
    return np.stack([sl for s in subjects for _, sl in
                     data.slice_axial(s.mr)])[:, None].astype(np.float32)


# --------------------------------------------------------------------------
# Shared heavy runs
# --------------------------------------------------------------------------

AUDIT_PRESET = {
    "latent": 32, "fmap": 12, "batch": 4, "res": 32,
    "p1": 1200, "p2": 42000, "p3": 3200, "unfreeze": 800,
    "freeze_blocks": 2, "seed": 17,
}


@pytest.fixture(scope="session")
def audit_run():
    """Full staged run at 32x32 with >=10k phase-2 generator updates."""

    def build():
        pr = AUDIT_PRESET
        rng = np.random.default_rng(pr["seed"])
        labelled = [_preprocessed_subject(500, 25.0, 0.0)]
        unlabelled = [_preprocessed_subject(600 + i, float(rng.uniform(18, 96)), 0.0)
                      for i in range(30)]
        lab = _labelled_slices(labelled)
        unl = _unlabelled_slices(unlabelled)
        gan = GanTrainConfig(latent_dim=pr["latent"], base_res=4,
                             target_res=pr["res"], out_channels=8,
                             fmap=pr["fmap"], batch_size=pr["batch"],
                             seed=pr["seed"])
        cfg = phases.StagedConfig(gan=gan, p1_images_per_stage=pr["p1"],
                                  p2_images=pr["p2"], p3_images=pr["p3"],
                                  freeze_blocks=pr["freeze_blocks"],
                                  unfreeze_images=pr["unfreeze"])
        s1 = phases.run_phase1(lab, cfg)
        s2 = phases.run_phase2(s1, unl, cfg)
        frozen_audit = phases.audit_frozen_groups(
            s2.generator, s2.snapshots["phase2_entry"], sorted(s2.generator.frozen))
        p2_metrics = [{"cycle": m["cycle"], "critic_updates": m["critic_updates"]}
                      for m in s2.metrics if m["phase"] == "P2"]
        st = phases.build_selfteach_set(s2, lab, cfg)
        schedule = phases.unfreeze_schedule(s2, cfg)
        s3 = phases.run_phase3(s2, lab, unl, st, cfg)
        out_groups = [n for n in s3.generator.group_names()
                      if n.startswith("to_output")]
        output_audit = phases.audit_frozen_groups(
            s3.generator, s3.snapshots["phase2_entry"], out_groups)
        p3_metrics = [{"images_shown": m["images_shown"],
                       "frozen_drift": m["frozen_drift"]}
                      for m in s3.metrics if m["phase"] == "P3"]
        return {
            "frozen_audit_p2": frozen_audit,
            "output_audit_p2_entry_to_p3_end": output_audit,
            "p2_metrics": p2_metrics,
            "p3_metrics": p3_metrics,
            "p3_events": s3.events,
            "schedule": schedule,
            "configured_ratio": gan.critic_updates_per_gen,
        }

    return _cached({"kind": "audit", **AUDIT_PRESET}, build)


E2E_PRESET = {
    "latent": 64, "fmap": 24, "batch": 8, "res": 32, "depth": 20,
    "p1": 4000, "p2": 10000, "p3": 10000, "unfreeze": 3000,
    "freeze_blocks": 2, "finetune_lr": 2e-4,
    "synth_n": 400, "seg_steps": 1500,
    "seeds": [0, 1, 2], "n_unlabelled": 200, "ratio": 2,
}


def _run_e2e_seed(seed: int) -> dict:
    pr = E2E_PRESET
    res, depth = pr["res"], pr["depth"]
    rng = np.random.default_rng(seed)
    labelled = [_preprocessed_subject(1000 + seed, float(rng.uniform(20, 30)), 0.0,
                                      res, depth)]
    ages = rng.uniform(18, 96, size=pr["n_unlabelled"])
    cdrs = rng.choice([0.0, 0.5, 1.0, 2.0], p=[0.70, 0.18, 0.10, 0.02],
                      size=pr["n_unlabelled"])
    unlabelled = [_preprocessed_subject(2000 + seed * 1000 + i, float(a), float(c),
                                        res, depth)
                  for i, (a, c) in enumerate(zip(ages, cdrs))]
    aged_test = [_preprocessed_subject(9000 + seed * 1000 + i,
                                       float(rng.uniform(75, 96)),
                                       float(rng.choice([0.5, 1.0, 2.0],
                                                        p=[0.5, 0.4, 0.1])),
                                       res, depth)
                 for i in range(20)]
    young_test = [_preprocessed_subject(9500 + seed * 1000 + i,
                                        float(rng.uniform(18, 40)), 0.0,
                                        res, depth)
                  for i in range(10)]

    lab = _labelled_slices(labelled)
    unl = _unlabelled_slices(unlabelled)
    gan = GanTrainConfig(latent_dim=pr["latent"], base_res=4, target_res=res,
                         out_channels=8, fmap=pr["fmap"],
                         batch_size=pr["batch"], seed=seed)
    cfg = phases.StagedConfig(gan=gan, p1_images_per_stage=pr["p1"],
                              p2_images=pr["p2"], p3_images=pr["p3"],
                              freeze_blocks=pr["freeze_blocks"],
                              unfreeze_images=pr["unfreeze"],
                              p2_gen_lr=pr["finetune_lr"],
                              p3_gen_lr=pr["finetune_lr"])
    s1 = phases.run_phase1(lab, cfg)
    div_p1 = phases.sample_diversity(s1.generator, n=256, seed=seed)
    s2 = phases.run_phase2(s1, unl, cfg)
    div_p2 = phases.sample_diversity(s2.generator, n=256, seed=seed)
    import copy
    g_p2 = copy.deepcopy(s2.generator)
    st = phases.build_selfteach_set(s2, lab, cfg)
    s3 = phases.run_phase3(s2, lab, unl, st, cfg)
    div_p3 = phases.sample_diversity(s3.generator, n=256, seed=seed)

    masks = synth.build_structure_masks(labelled, radius_mm=10.0,
                                        spacing=(2.5, 2.5, 3.0))
    assignment, indices = [], []
    for s in labelled:
        for k, sl in data.slice_axial(s.mr):
            assignment.append(sl)
            indices.append(k)
    samples = synth.generate_synthetic_dataset(
        [("p2", 0, g_p2), ("p3", 0, s3.generator)], pr["synth_n"], masks,
        np.stack(assignment), indices, unl[:, 0], seed=seed)
    kept = synth.kept_samples(samples)

    real_pairs = []
    for s in labelled:
        real_pairs.extend(segmenter.labelled_to_pairs(s.mr, s.label_map()))
    synth_pairs = segmenter.synth_to_pairs(kept)

    seg_cfg = segmenter.SegNetConfig(steps=pr["seg_steps"], width=20, patch=17,
                                     depth=4, batch_size=16, seed=seed)

    def evaluate(model, pool):
        return [metrics.dsc_report(segmenter.segment(model, s.mr),
                                   s.label_map()).overall for s in pool]

    base_model, _ = segmenter.train_segnet(
        seg_cfg, segmenter.MixedSampler(real=real_pairs, ratio=None, seed=seed))
    aug_model, _ = segmenter.train_segnet(
        seg_cfg, segmenter.MixedSampler(real=real_pairs, synth=synth_pairs,
                                        ratio=pr["ratio"], seed=seed))
    return {
        "seed": seed,
        "diversity": {"p1": div_p1, "p2": div_p2, "p3": div_p3},
        "kept": len(kept), "generated": len(samples),
        "base_aged": evaluate(base_model, aged_test),
        "aug_aged": evaluate(aug_model, aged_test),
        "base_young": evaluate(base_model, young_test),
        "aug_young": evaluate(aug_model, young_test),
    }


@pytest.fixture(scope="session")
def e2e_runs():
    """Three seeded end-to-end augmentation studies on the phantom cohort."""
    return [
        _cached({"kind": "e2e", "seed": seed, **{k: v for k, v in E2E_PRESET.items()
                                                 if k != "seeds"}},
                lambda seed=seed: _run_e2e_seed(seed))
        for seed in E2E_PRESET["seeds"]
    ]


# --------------------------------------------------------------------------
# Criteria
# --------------------------------------------------------------------------

def test_criterion_01_freeze_contracts(audit_run):
    gen_updates = len(audit_run["p2_metrics"])
    assert gen_updates >= 10_000, f"phase 2 ran only {gen_updates} generator updates"
    assert audit_run["frozen_audit_p2"], "no groups were frozen in phase 2"
    for group, drift in audit_run["frozen_audit_p2"].items():
        assert drift == 0.0, f"frozen group {group} drifted by {drift}"
    for group, drift in audit_run["output_audit_p2_entry_to_p3_end"].items():
        assert drift == 0.0, (
            f"output layer {group} changed between phase-2 entry and phase-3 end"
        )


def test_criterion_02_warmup_protocol(audit_run):
    counts = [m["critic_updates"] for m in audit_run["p2_metrics"]]
    assert counts[:5] == [100] * 5
    ratio = audit_run["configured_ratio"]
    assert all(c == ratio for c in counts[5:])


def test_criterion_03_unfreeze_schedule(audit_run):
    schedule = audit_run["schedule"]
    assert len(schedule) == AUDIT_PRESET["freeze_blocks"]
    blocks = [name for _, name in schedule]
    assert blocks == sorted(blocks), "unfreeze order must be earliest block first"
    first_change = {}
    for m in audit_run["p3_metrics"]:
        for name, drifted in m["frozen_drift"].items():
            if drifted and name not in first_change:
                first_change[name] = m["images_shown"]
    for budget, name in schedule:
        assert name in first_change, f"{name} never trained in phase 3"
        for m in audit_run["p3_metrics"]:
            if m["images_shown"] <= budget:
                assert not m["frozen_drift"][name], (
                    f"{name} changed at {m['images_shown']} images, "
                    f"before its budget {budget}"
                )
    changes = [first_change[name] for _, name in schedule]
    assert changes == sorted(changes), "blocks must start training earliest-first"
    for m in audit_run["p3_metrics"]:
        for name, drifted in m["frozen_drift"].items():
            if name.startswith("to_output"):
                assert not drifted, "output layer changed during phase 3"


def test_criterion_04_fade_in_continuity():
    torch.manual_seed(4)
    g = build_generator(16, 4, 32, 8, fmap=12)
    z = torch.randn(4, 16)
    while g.resolution < 32:
        pre = g.generate(z)
        g.grow()
        post = g.generate(z)
        up = torch.nn.functional.interpolate(pre, scale_factor=2, mode="nearest")
        assert (post - up).abs().max() < 1e-5
        outs = []
        for a in np.linspace(0.0, 1.0, 26):
            g.alpha = float(a)
            outs.append(g.generate(z))
        diffs = np.array([float((outs[i + 1] - outs[i]).abs().max())
                          for i in range(len(outs) - 1)])
        assert diffs.max() <= 10 * diffs.mean() + 1e-12
        g.alpha = 1.0


def test_criterion_05_gradient_penalty_fd():
    torch.manual_seed(5)
    d = build_critic(2, 4, 4, fmap=4).double()
    real = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    fake = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    u = torch.rand(3, 1, 1, 1, dtype=torch.float64)

    def loss_value():
        loss, _ = critic_loss(d, real, fake, gp_weight=10.0, drift_weight=1e-3, u=u)
        return loss

    loss_value().backward()
    analytic = torch.cat([p.grad.flatten() for p in d.parameters()])
    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    i = 0
    for p in d.parameters():
        flat = p.data.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + eps
            hi = float(loss_value())
            flat[j] = orig - eps
            lo = float(loss_value())
            flat[j] = orig
            numeric[i] = (hi - lo) / (2 * eps)
            i += 1
    rel = float((analytic - numeric).norm() / numeric.norm())
    assert rel < 1e-3, f"relative gradient error {rel:.2e}"


def brute_force_dsc(a_set, b_set):
    if not a_set and not b_set:
        return 1.0
    return 2 * len(a_set & b_set) / (len(a_set) + len(b_set))


def test_criterion_06_dsc_oracle():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        a = rng.random((8, 8)) < rng.uniform(0.05, 0.6)
        b = rng.random((8, 8)) < rng.uniform(0.05, 0.6)
        oracle = brute_force_dsc({tuple(p) for p in np.argwhere(a)},
                                 {tuple(p) for p in np.argwhere(b)})
        assert metrics.dsc(a, b) == oracle

        pred = rng.integers(0, 8, size=(8, 8))
        ref = rng.integers(0, 8, size=(8, 8))
        rep = metrics.dsc_report(pred, ref)
        for c, name in enumerate(data.STRUCTURES):
            oracle_c = brute_force_dsc(
                {tuple(p) for p in np.argwhere(pred == c + 1)},
                {tuple(p) for p in np.argwhere(ref == c + 1)})
            assert rep.per_structure[name] == oracle_c
        oracle_total = brute_force_dsc(
            {tuple(p) for p in np.argwhere(pred > 0)},
            {tuple(p) for p in np.argwhere(ref > 0)})
        assert rep.overall == oracle_total


def test_criterion_07_sampler_ratios():
    item = (np.zeros((4, 4), np.float32), np.zeros((4, 4), np.int64))
    n = 100_000
    for i, r in enumerate(segmenter.RATIOS):
        s = segmenter.MixedSampler(real=[item], synth=[item], ratio=r, seed=70 + i)
        k = sum(s.draw_source() == "synthetic" for _ in range(n))
        p = 1.0 / (r + 1.0)
        lo, hi = stats.binom.interval(0.99, n, p)
        assert lo <= k <= hi, f"ratio {r}: {k} draws outside [{lo}, {hi}]"


def test_criterion_08_postprocessing_properties():
    rng = np.random.default_rng(8)
    for _ in range(500):
        sample, masks, c, _ = make_corrupted_case(rng)
        out = synth.postprocess(sample, masks)
        m = out[c]
        assert m.any()
        assert interior_holes(m) == 0
        lab, n = ndimage.label(m)
        if n:
            sizes = ndimage.sum_labels(np.ones_like(lab), lab, range(1, n + 1))
            assert sizes.min() >= synth.MIN_COMPONENT_PX
        allowed = masks.masks[c][:, :, 0]
        assert not (m & ~allowed).any()
        vals = sample.mr[m]
        mu, sd = vals.mean(), vals.std()
        assert np.all(vals >= mu - 2 * sd) and np.all(vals <= mu + 2 * sd)


def test_criterion_09_quality_filter():
    def mk(scores):
        out = []
        for sc in scores:
            s = synth.SyntheticSample(channels=np.zeros((8, 4, 4), np.float32))
            s.quality_score = float(sc)
            out.append(s)
        return out

    samples = mk([1, 2, 3, 10])
    kept = synth.filter_by_quality(samples)
    assert [s.quality_score for s in kept] == [1, 2, 3]
    assert [s.kept for s in samples] == [True, True, True, False]

    rng = np.random.default_rng(9)
    for n in (1, 2, 3, 5, 17, 100, 333):
        kept = synth.filter_by_quality(mk(rng.random(n)))
        assert 0.75 * n <= len(kept) <= n

    pool = rng.normal(0, 1, size=(12, 8, 8))
    assert synth.quality_score(pool[3], pool) == 0.0


def test_criterion_10_diversity_ordering(e2e_runs):
    d1 = np.array([r["diversity"]["p1"] for r in e2e_runs])
    d2 = np.array([r["diversity"]["p2"] for r in e2e_runs])
    d3 = np.array([r["diversity"]["p3"] for r in e2e_runs])
    assert np.all(d2 > d1), f"phase 2 not more diverse: {d2} vs {d1}"
    assert np.all(d3 > d1), f"phase 3 not more diverse: {d3} vs {d1}"
    p21, sig21 = metrics.paired_ttest(d2, d1)
    p31, sig31 = metrics.paired_ttest(d3, d1)
    assert sig21, f"phase2-vs-phase1 diversity gap not significant (p={p21:.4f})"
    assert sig31, f"phase3-vs-phase1 diversity gap not significant (p={p31:.4f})"


def test_criterion_11_end_to_end_directional(e2e_runs):
    aged_improvements = []
    young_improvements = []
    for r in e2e_runs:
        aged_improvements.append(np.mean(r["aug_aged"]) - np.mean(r["base_aged"]))
        young_improvements.append(np.mean(r["aug_young"]) - np.mean(r["base_young"]))
    mean_aged = float(np.mean(aged_improvements))
    mean_young = float(np.mean(young_improvements))
    print(f"per-seed aged improvements: {np.round(aged_improvements, 4)}")
    print(f"per-seed young improvements: {np.round(young_improvements, 4)}")
    assert mean_aged >= 0.02, (
        f"augmentation gained only {mean_aged:.4f} overall DSC on aged phantoms"
    )
    assert mean_aged > mean_young, (
        f"domain-shift effect missing: aged {mean_aged:.4f} <= young {mean_young:.4f}"
    )


def test_criterion_12_classification_harness():
    rng = np.random.default_rng(12)
    x, y = volume_like_features(rng, n0=69, n1=30, effect=1.0)
    res = metrics.classify_cdr(x, y, repeats=100, folds=5, seed=12)
    assert res.repeats == 100 and res.folds == 5
    assert res.auc_mean >= 0.75, f"informative AUC {res.auc_mean:.4f}"
    null = metrics.classify_cdr(x, y, repeats=100, folds=5, seed=13, permute=True)
    assert 0.45 <= null.auc_mean <= 0.55, f"null AUC {null.auc_mean:.4f}"
    p, sig = metrics.paired_ttest(res.aucs, null.aucs)
    assert sig and p < 0.05


def test_criterion_13_multi_gan_split(tmp_path):
    rng = np.random.default_rng(13)
    gan = GanTrainConfig(latent_dim=8, base_res=4, target_res=8, out_channels=8,
                         fmap=6, batch_size=4, seed=13)
    cfg = phases.StagedConfig(gan=gan, p1_images_per_stage=32, p2_images=2040,
                              p3_images=64, unfreeze_images=32)
    expected = {12: 2, 24: 4}
    for budget, n_gans in expected.items():
        labelled = {f"s{i:02d}": rng.normal(0, 1, (2, 8, 8, 8)).astype(np.float32)
                    for i in range(budget)}
        unlabelled = rng.normal(0, 1, (8, 1, 8, 8)).astype(np.float32)
        out = tmp_path / f"n{budget}"
        results = phases.run_multi_gan(labelled, unlabelled, cfg, out)
        assert len(results) == n_gans
        groups = [set(r["group"]) for r in results]
        assert all(len(g) == 6 for g in groups)
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                assert not (groups[i] & groups[j])
        assert set().union(*groups) == set(labelled)

        from ganaug.gan import load_checkpoint
        generators = []
        for r in results:
            for tag in ("p2", "p3"):
                g, _, _, _ = load_checkpoint(Path(r["workdir"]) / f"{tag}.ckpt",
                                             restore_rng=False)
                generators.append((tag, r["gan_id"], g))
        masks = synth.StructureMasks(
            masks=np.ones((7, 8, 8, 2), dtype=bool), provenance=["all"],
            dilation_radius_mm=0, spacing=(1, 1, 1))
        pool = rng.normal(0, 1, size=(4, 8, 8)).astype(np.float32)
        samples = synth.generate_synthetic_dataset(
            generators, 8 * n_gans, masks, pool, [0, 1, 0, 1], pool, seed=13)
        seen = {(s.provenance["phase"], s.provenance["gan_id"]) for s in samples}
        assert seen == {(t, gid) for t in ("p2", "p3") for gid in range(n_gans)}

    from ganaug.errors import BadBudget
    with pytest.raises(BadBudget):
        phases.run_multi_gan({"a": np.zeros((2, 8, 8, 8), np.float32)},
                             np.zeros((4, 1, 8, 8), np.float32), cfg, tmp_path)
