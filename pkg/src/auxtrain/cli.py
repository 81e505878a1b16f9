"""Batch command-line entry point.

Commands generate datasets, launch training runs, evaluate checkpoints, sweep
partial-mask fractions, compare methods with paired t-tests, and export
principal-component feature images. Everything runs to completion and writes
static reports and plots; there is no interactive UI.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Set
``AUXTRAIN_DETERMINISM=1`` to force single-threaded deterministic numerics.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import ablation, metrics, nets, synthgen, trainer

MIN_FRAMES = 16  # longest cardiac cycle the spec sampler can draw


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):  # noqa: D102
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _snapshot(path: Path, args: argparse.Namespace) -> None:
    payload = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
               if k != "func"}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def _build_parser() -> _Parser:
    parser = _Parser(prog="auxtrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--difficulty", choices=["easy", "hard"], default="easy")
    p.add_argument("--image-size", type=int, default=synthgen.DEFAULT_IMAGE_SIZE)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--task", choices=list(trainer.TASKS), required=True)
    p.add_argument("--backbone", choices=list(trainer.BACKBONES), required=True)
    p.add_argument("--method", choices=list(trainer.METHODS), required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--profile", choices=["desk", "full"], default="desk")
    p.add_argument("--mask-fraction", type=float, default=1.0)
    p.add_argument("--pretrain", type=Path, default=None,
                   help="segmentation pretraining checkpoint for ft/ts (auto-run if omitted)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda-seg", type=float, default=1.0)
    p.add_argument("--mmd-weight", type=float, default=1.0)
    p.add_argument("--ait-step", type=float, default=ablation.DEFAULT_ALPHA_STEP)
    p.add_argument("--ait-patience", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--clip-len", type=int, default=None)
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--resume", type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--ckpt", type=Path, default=None, help="explicit checkpoint instead of best.bin")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation-study", help="partial-mask sweep")
    p.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--task", choices=list(trainer.TASKS), required=True)
    p.add_argument("--backbone", choices=list(trainer.BACKBONES), required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--ait-patience", type=int, default=None)
    p.add_argument("--plot", type=Path, default=None, help="line plot path (default <out-dir>/sweep.png)")
    p.set_defaults(func=cmd_ablation_study)

    p = sub.add_parser("compare", help="compare runs with paired t-tests")
    p.add_argument("--runs", required=True, help="comma-separated run directories")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--report", type=Path, required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("viz-features", help="principal-component feature image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--layer", default=None, help="layer name (default: first available)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_viz_features)

    return parser


def cmd_gen_data(args: argparse.Namespace, parser: _Parser) -> int:
    if args.pairs <= 0:
        parser.error("--pairs must be positive")
    if args.frames < MIN_FRAMES:
        parser.error(
            f"--frames {args.frames} is below one cardiac cycle; the sampled "
            f"specs need at least {MIN_FRAMES} frames"
        )
    pairs = []
    for i in range(args.pairs):
        spec = synthgen.sample_spec(args.seed * 1_000_003 + i, args.difficulty, args.image_size)
        pairs.append(synthgen.generate_pair(spec, args.frames))
    split = synthgen.make_split(len(pairs))
    synthgen.save_dataset(pairs, args.out, split=split)
    _snapshot(args.out / "cli_config.json", args)
    print(
        f"wrote {len(pairs)} pairs ({args.frames} frames/side) to {args.out} "
        f"[train {len(split['train'])} / val {len(split['val'])} / test {len(split['test'])}]"
    )
    return 0


def cmd_train(args: argparse.Namespace, parser: _Parser) -> int:
    dataset = trainer.SplitDataset.from_dir(args.dataset)
    pretrain = args.pretrain
    if args.method in ("ft", "ts") and pretrain is None:
        pretrain_dir = args.run_dir / "seg_pretrain"
        print(f"no --pretrain given; running segmentation pretraining into {pretrain_dir}")
        pretrain = trainer.pretrain_segmentation(
            args.task, args.backbone, dataset, pretrain_dir, seed=args.seed,
            profile=args.profile,
        )
    run = trainer.TrainRun(
        task=args.task,
        backbone=args.backbone,
        method=args.method,
        run_dir=args.run_dir,
        seed=args.seed,
        profile=args.profile,
        optimizer=trainer.OptimizerConfig(lr=args.lr) if args.lr is not None else None,
        max_epochs=args.epochs,
        mask_fraction=args.mask_fraction,
        ait_step=args.ait_step,
        ait_patience=args.ait_patience,
        lambda_seg=args.lambda_seg,
        mmd_weight=args.mmd_weight,
        pretrain_checkpoint=pretrain,
        batch_size=args.batch_size,
        clip_len=args.clip_len,
        save_every=args.save_every,
    )
    trainer.train(run, dataset, resume_from=args.resume)
    print(f"run complete: {args.run_dir}")
    return 0


def _report_for_run(run_dir: Path | None, ckpt: Path | None, dataset, split: str):
    if ckpt is None:
        if run_dir is None:
            raise trainer.TrainerError("need --run-dir or --ckpt")
        ckpt = run_dir / "best.bin"
    if not Path(ckpt).exists():
        raise trainer.TrainerError(f"checkpoint {ckpt} does not exist")
    return trainer.evaluate_checkpoint(ckpt, dataset, split=split)


def cmd_eval(args: argparse.Namespace, parser: _Parser) -> int:
    dataset = trainer.SplitDataset.from_dir(args.dataset)
    report = _report_for_run(args.run_dir, args.ckpt, dataset, args.split)
    name = f"{report.method}(alpha={report.alpha:.1f})" if report.method == "ait" else report.method
    if report.task == "cpm":
        table = metrics.format_cpm_table({name: report.cpm})
    else:
        table = metrics.format_ctt_table({name: report.ctt})
    text = f"task={report.task} backbone={report.backbone} split={args.split}\n{table}\n"
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(text)
    records_path = args.report.with_suffix(args.report.suffix + ".records.jsonl")
    with records_path.open("w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec) + "\n")
    _snapshot(args.report.with_suffix(args.report.suffix + ".config.json"), args)
    print(text, end="")
    print(f"raw records: {records_path}")
    return 0


def cmd_ablation_study(args: argparse.Namespace, parser: _Parser) -> int:
    try:
        fractions = [float(f) for f in args.fractions.split(",") if f]
    except ValueError:
        parser.error(f"bad --fractions list: {args.fractions!r}")
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        parser.error("fractions must lie in (0, 1]")
    dataset = trainer.SplitDataset.from_dir(args.dataset)
    runs = [
        trainer.TrainRun(
            task=args.task,
            backbone=args.backbone,
            method="ait",
            run_dir=args.out_dir / f"frac_{frac:.1f}",
            seed=args.seed,
            mask_fraction=frac,
            max_epochs=args.epochs,
            ait_patience=args.ait_patience,
        )
        for frac in fractions
    ]
    report = trainer.run_matrix(runs, dataset)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "sweep.json").write_text(report.to_json())
    _snapshot(args.out_dir / "cli_config.json", args)

    metric_name = "dist_frames" if args.task == "cpm" else "recall_pct"
    lines = [f"{'fraction':>9} {'status':>8} {metric_name:>12}"]
    xs, ys = [], []
    for frac, row in zip(fractions, report.rows):
        value = row.get(metric_name)
        lines.append(
            f"{frac:>9.1f} {row['status']:>8} "
            + (f"{value:>12.2f}" if value is not None else f"{'-':>12}")
        )
        if row["status"] == "ok" and value is not None:
            xs.append(frac)
            ys.append(value)
    table = "\n".join(lines)
    (args.out_dir / "sweep.txt").write_text(table + "\n")
    print(table)

    # Informational trend check: does more mask supervision help (or at
    # least not hurt)? No hard threshold.
    if len(ys) >= 2:
        diffs = np.diff(ys)
        improving = (diffs <= 1e-9).all() if args.task == "cpm" else (diffs >= -1e-9).all()
        print(f"trend check (informational): monotone-or-flat benefit = {bool(improving)}")

    plot_path = args.plot or (args.out_dir / "sweep.png")
    if xs:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("fraction of sequences with masks")
        ax.set_ylabel(metric_name)
        ax.set_title(f"partial-mask sweep ({args.task}/{args.backbone})")
        fig.tight_layout()
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        print(f"plot: {plot_path}")
    return 0


def cmd_compare(args: argparse.Namespace, parser: _Parser) -> int:
    run_dirs = [Path(r) for r in args.runs.split(",") if r]
    if not run_dirs:
        parser.error("--runs must list at least one run directory")
    dataset = trainer.SplitDataset.from_dir(args.dataset)
    reports = {}
    for rd in run_dirs:
        rep = _report_for_run(rd, None, dataset, args.split)
        label = rd.name or str(rd)
        if rep.method == "ait":
            label = f"{label}[a={rep.alpha:.1f}]"
        reports[label] = rep

    first = next(iter(reports.values()))
    if first.task == "cpm":
        table = metrics.format_cpm_table({k: r.cpm for k, r in reports.items()})
    else:
        table = metrics.format_ctt_table({k: r.ctt for k, r in reports.items()})

    lines = [table, "", "paired t-tests on per-case errors (two-sided):"]
    names = list(reports)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = reports[names[i]], reports[names[j]]
            res = metrics.paired_ttest(a.per_case_errors, b.per_case_errors)
            if res.note == "tie":
                verdict = "no difference (identical samples)"
            elif res.note == "constant-diff":
                verdict = "constant difference, p ~ 0"
            else:
                verdict = f"t={res.t:.3f} p={res.p:.4g}" + (" *" if res.p < 0.05 else "")
            lines.append(f"  {names[i]} vs {names[j]}: {verdict}")
    text = "\n".join(lines) + "\n"
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(text)
    _snapshot(args.report.with_suffix(args.report.suffix + ".config.json"), args)
    print(text, end="")
    return 0


def cmd_viz_features(args: argparse.Namespace, parser: _Parser) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.image as mpimg
    import torch

    dataset = trainer.SplitDataset.from_dir(args.dataset)
    pairs = dataset.subset(args.split)
    if not 0 <= args.pair < len(pairs):
        parser.error(f"--pair must index into the {len(pairs)} {args.split} pairs")
    pair = pairs[args.pair]
    model, ckpt = trainer.load_model_for_eval(args.ckpt, dataset.image_size)
    task = ckpt.extra["task"]
    alpha = ckpt.alpha if ckpt.extra["with_mask_channel"] else None

    gen = torch.Generator()
    gen.manual_seed(trainer.EVAL_NOISE_SEED)
    noise = trainer._torch_noise_source(gen)

    with torch.no_grad():
        if task == "cpm":
            x, n_angio = trainer._cpm_inputs([pair], alpha, noise)
            maps = model.feature_maps(x)
        elif ckpt.extra["backbone"] == "cnn-c":
            x, _ = trainer._ctt_unet_inputs([pair.fluoro], nets.DEFAULT_TARGET_SIGMA_PX, alpha, noise)
            maps = model.feature_maps(x)
        else:
            seq = pair.fluoro
            samples = [(seq, max(1, args.frame), [0])]
            templates, search, _ = trainer._tracker_inputs(
                samples, model.cfg, nets.DEFAULT_TARGET_SIGMA_PX, alpha, noise
            )
            maps = model.feature_maps(templates, search)

    layer = args.layer or next(iter(maps))
    if layer not in maps:
        parser.error(f"unknown layer {layer!r}; available: {', '.join(maps)}")
    tensor = maps[layer]
    if tensor.ndim == 5:  # (B, T, C, H, W)
        if not 0 <= args.frame < tensor.shape[1]:
            parser.error(f"--frame must be < {tensor.shape[1]}")
        fmap = tensor[0, args.frame].numpy()
    else:  # (B, C, H, W)
        fmap = tensor[0].numpy()
    rgb = metrics.feature_pca_rgb(fmap)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    mpimg.imsave(args.out, rgb)
    _snapshot(args.out.with_suffix(args.out.suffix + ".config.json"), args)
    print(f"wrote {args.out} (layer {layer}, {fmap.shape[0]} channels)")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (
        trainer.TrainerError,
        synthgen.DatasetError,
        ValueError,
        FileNotFoundError,
        OSError,
    ) as exc:
        print(f"auxtrain: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001 - surface unexpected failures distinctly
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
