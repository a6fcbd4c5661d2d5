"""Command-line entry points.

Exit codes: 0 success, 2 configuration errors, 3 stage failures,
4 failed result checks (report --require-improvement).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, experiment, metrics, phantom, phases
from .errors import ConfigError, MissingResults, PipelineError

EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_CHECK = 4


def _load_cfg(args) -> experiment.ExperimentConfig:
    overrides = {}
    if args.output_root:
        overrides["output_root"] = args.output_root
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.config:
        return experiment.ExperimentConfig.from_json(args.config, overrides)
    return experiment.ExperimentConfig(**overrides)


def _fold(cfg, root, fold_id):
    ids = [p.name for p in data.list_subjects(root / "proc" / "labelled")]
    return metrics.make_folds(ids, k=5, seed=cfg.master_seed)[fold_id]


def cmd_phantom_gen(args):
    cfg = _load_cfg(args)
    out = experiment.stage_phantom(cfg, Path(cfg.output_root))
    print(f"phantom cohort written to {out}")


def cmd_preprocess(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    experiment.stage_phantom(cfg, root)
    out = experiment.stage_preprocess(cfg, root)
    print(f"preprocessed volumes written to {out}")


def cmd_train_gan(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    fold = _fold(cfg, root, args.fold)
    if args.phase == "all":
        out = experiment.stage_gan(cfg, root, fold, args.budget)
        print(f"staged GAN training complete under {out}")
        return
    # single-phase runs operate on one GAN work directory
    workdir = root / f"f{fold.fold_id}" / f"n{args.budget}" / "gan" / "gan0"
    labelled = {s.subject_id: s
                for s in experiment._load_pool(root / "proc" / "labelled")}
    subset = [labelled[sid]
              for sid in metrics.subset_budget(fold, args.budget).labelled_subset]
    pool = experiment._labelled_slice_array(subset)
    unlabelled = experiment._mr_slice_array(
        experiment._load_pool(root / "proc" / "unlabelled"))
    staged = cfg.staged_config(cfg.master_seed + 7919 * fold.fold_id
                               + 13 * args.budget)
    from .gan import save_checkpoint
    if args.phase == "1":
        state = phases.run_phase1(pool, staged)
        save_checkpoint(workdir / "p1.ckpt", state.generator, state.critics,
                        state.optimizers, numpy_rng=state.numpy_rng,
                        extra={"phase": "P1"})
        phases._dump_metrics(workdir, "P1", state)
        print(f"phase 1 checkpoint at {workdir / 'p1.ckpt'}")
    elif args.phase == "2":
        prev = phases.state_from_checkpoint(workdir / "p1.ckpt", "P1")
        state = phases.run_phase2(prev, unlabelled, staged)
        audit = phases.audit_frozen_groups(
            state.generator, state.snapshots["phase2_entry"],
            sorted(state.generator.frozen))
        save_checkpoint(workdir / "p2.ckpt", state.generator, state.critics,
                        state.optimizers, numpy_rng=state.numpy_rng,
                        extra={"phase": "P2", "frozen_audit": audit})
        phases._dump_metrics(workdir, "P2", state)
        print(f"phase 2 checkpoint at {workdir / 'p2.ckpt'}")
    else:
        prev = phases.state_from_checkpoint(workdir / "p2.ckpt", "P2")
        selfteach = phases.build_selfteach_set(prev, pool, staged)
        state = phases.run_phase3(prev, pool, unlabelled, selfteach, staged)
        out_groups = [n for n in state.generator.group_names()
                      if n.startswith("to_output")]
        audit = phases.audit_frozen_groups(
            state.generator, state.snapshots["phase2_end"], out_groups)
        save_checkpoint(workdir / "p3.ckpt", state.generator, state.critics,
                        state.optimizers, numpy_rng=state.numpy_rng,
                        extra={"phase": "P3", "output_audit": audit,
                               "unfreeze_events": state.events})
        phases._dump_metrics(workdir, "P3", state)
        print(f"phase 3 checkpoint at {workdir / 'p3.ckpt'}")


def cmd_synth(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    fold = _fold(cfg, root, args.fold)
    out = experiment.stage_synth(cfg, root, fold, args.budget)
    done = json.loads((out / "stage.done.json").read_text())
    print(f"synthetic pool at {out}: kept {done['kept']}/{done['total']}")


def cmd_postprocess(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    fold = _fold(cfg, root, args.fold)
    n = experiment.repostprocess_pool(cfg, root, fold, args.budget)
    print(f"re-postprocessed {n} samples")


def cmd_filter(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    fold = _fold(cfg, root, args.fold)
    res = experiment.refilter_pool(cfg, root, fold, args.budget)
    print(f"kept {res['kept']}/{res['total']} after quality filtering")


def _ratio_arg(value: str):
    return "baseline" if value == "baseline" else int(value)


def cmd_train_seg(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    fold = _fold(cfg, root, args.fold)
    out = experiment.stage_seg(cfg, root, fold, args.budget,
                               _ratio_arg(args.ratio))
    print(f"segmentation model at {out}")


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    fold = _fold(cfg, root, args.fold)
    out = experiment.stage_evaluate(cfg, root, fold, args.budget,
                                    _ratio_arg(args.ratio))
    print(f"evaluation results at {out / 'results.json'}")


def cmd_classify(args):
    cfg = _load_cfg(args)
    root = Path(cfg.output_root)
    ids = [p.name for p in data.list_subjects(root / "proc" / "labelled")]
    folds = metrics.make_folds(ids, k=5, seed=cfg.master_seed)
    out = experiment.stage_classify(cfg, root, folds)
    print(f"classification results at {out / 'classification.json'}")


def cmd_report(args):
    cfg = _load_cfg(args)
    summary = experiment.report(Path(cfg.output_root),
                                require_improvement=args.require_improvement)
    print(json.dumps(summary, indent=1, sort_keys=True))
    if args.require_improvement is not None and not summary.get("improvement_ok"):
        sys.exit(EXIT_CHECK)


def cmd_run(args):
    cfg = _load_cfg(args)
    root = experiment.run_experiment(cfg)
    summary = experiment.report(root)
    print(json.dumps(summary, indent=1, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ganaug",
        description="staged GAN augmentation pipeline on a phantom cohort",
    )
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--output-root", help="override the config output root")
    p.add_argument("--seed", type=int, help="override the master seed")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom-gen").set_defaults(fn=cmd_phantom_gen)
    sub.add_parser("preprocess").set_defaults(fn=cmd_preprocess)

    tg = sub.add_parser("train-gan")
    tg.add_argument("--phase", choices=["1", "2", "3", "all"], default="all")
    tg.add_argument("--fold", type=int, default=0)
    tg.add_argument("--budget", type=int, default=1)
    tg.set_defaults(fn=cmd_train_gan)

    for name, fn in (("synth", cmd_synth), ("postprocess", cmd_postprocess),
                     ("filter", cmd_filter)):
        sp = sub.add_parser(name)
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--budget", type=int, default=1)
        sp.set_defaults(fn=fn)

    for name, fn in (("train-seg", cmd_train_seg), ("evaluate", cmd_evaluate)):
        sp = sub.add_parser(name)
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--budget", type=int, default=1)
        sp.add_argument("--ratio", default="baseline",
                        help="baseline, 100, 10, 2 or 1")
        sp.set_defaults(fn=fn)

    sub.add_parser("classify").set_defaults(fn=cmd_classify)

    rp = sub.add_parser("report")
    rp.add_argument("--require-improvement", type=float, default=None,
                    help="exit 4 unless augmented beats baseline by this DSC margin")
    rp.set_defaults(fn=cmd_report)

    sub.add_parser("run").set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        args.fn(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_STAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingResults as e:
        print(f"missing results: {e}", file=sys.stderr)
        return EXIT_STAGE
    except PipelineError as e:
        print(f"stage failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
