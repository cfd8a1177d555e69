"""Command-line entry point wiring data, training, inference and diagnostics.

Subcommands: prepare-data, train, infer, eval, diagnose. Exit codes:
0 success, 1 usage or configuration error, 2 runtime failure. Every command
is deterministic given its config file and seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from .config import ConfigError, RunConfig, resolve_config
from .imaging import load_png, save_png
from .loss import LossConfig, residual_map
from .model import (
    ModelConfig,
    build_convergence_network,
    build_divergence_network,
    convergence_forward,
    divergence_forward,
    image_to_tensor,
)
from .training import (
    CheckpointError,
    TrainingError,
    load_convergence_model,
    load_divergence_model,
    train_convergence,
    train_divergence,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit with code 1
        raise UsageError(message)


def _leaf_name(path) -> str:
    return "".join(str(c) for c in path)


def _load_pipeline(ckpt_div: str, ckpt_conv: str):
    """Load both stages and enforce matching model configs."""
    div_model, div_ckpt = load_divergence_model(ckpt_div)
    conv_model, conv_ckpt = load_convergence_model(ckpt_conv)
    if div_ckpt.config.hash() != conv_ckpt.config.hash():
        raise CheckpointError(
            f"checkpoint config hashes differ: divergence {div_ckpt.config.hash()} "
            f"vs convergence {conv_ckpt.config.hash()}"
        )
    return div_model, conv_model


def _super_resolve(div_model, conv_model, lr_img):
    preds = divergence_forward(div_model, lr_img)
    weights, sr = convergence_forward(conv_model, preds)
    return preds, weights, sr


# ---------------------------------------------------------------------------
# prepare-data
# ---------------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    hr_dir = Path(args.hr_dir)
    sources = sorted(hr_dir.glob("*.png")) if hr_dir.is_dir() else []
    if not sources:
        raise UsageError(f"no HR images found in {args.hr_dir}")
    if args.test_count >= len(sources):
        raise UsageError(
            f"--test-count {args.test_count} leaves no training images "
            f"(found {len(sources)})"
        )
    out = Path(args.out)
    if args.test_count > 0:
        splits = (("train", sources[:-args.test_count]),
                  ("test", sources[-args.test_count:]))
    else:
        splits = (("train", sources),)
    for split, split_sources in splits:
        split_dir = out / split if args.test_count > 0 else out
        manifest = data_mod.generate_bicubic_pairs(
            hr_dir, args.scale, split_dir, split=split, sources=split_sources)
        print(f"{split}: {len(manifest)} pairs, {len(manifest.skipped)} skipped "
              f"-> {split_dir / 'manifest.txt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _start_run(cfg: RunConfig, stage: str) -> Path:
    run_dir = cfg.run_dir / stage
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(cfg.echo_text())
    return run_dir


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.stage == "convergence" and not args.divergence_ckpt:
        raise UsageError("--divergence-ckpt is required for --stage convergence")
    manifest = data_mod.load_manifest(cfg.manifest_path("train"))
    run_dir = _start_run(cfg, args.stage)
    train_cfg = cfg.train(args.stage)

    if args.stage == "divergence":
        model = build_divergence_network(cfg.model, cfg.seed)
        final = train_divergence(model, manifest, train_cfg, run_dir, resume=args.resume)
    else:
        conv = build_convergence_network(cfg.model, cfg.seed + 1)
        final = train_convergence(args.divergence_ckpt, conv, manifest, train_cfg,
                                  run_dir, resume=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    div_model, conv_model = _load_pipeline(args.ckpt_div, args.ckpt_conv)
    lr_img = load_png(args.input)
    preds, weights, sr = _super_resolve(div_model, conv_model, lr_img)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(sr, out)
    print(f"sr: {out} ({sr.shape[1]}x{sr.shape[0]})")
    if args.dump_branches:
        branch_dir = Path(args.dump_branches)
        branch_dir.mkdir(parents=True, exist_ok=True)
        for img, leaf in zip(preds.predictions, preds.leaf_paths):
            save_png(img, branch_dir / f"branch_{_leaf_name(leaf)}.png")
        print(f"branches: {len(preds)} -> {branch_dir}")
    if args.dump_weights:
        files = eval_mod.export_weight_heatmaps(weights, args.dump_weights)
        print(f"weight maps: {len(files)} -> {args.dump_weights}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    div_model, conv_model = _load_pipeline(args.ckpt_div, args.ckpt_conv)
    manifest = data_mod.load_manifest(args.manifest)
    pairs, rejections = data_mod.load_pairs(manifest)
    if not pairs:
        raise TrainingError(f"no usable pairs in {args.manifest}")
    border = args.border if args.border is not None else div_model.cfg.scale
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = eval_mod.EvalReport(border=border, scale=div_model.cfg.scale)
    divergences: list[tuple[str, float]] = []
    skipped = list(rejections)
    for pair in pairs:
        try:
            if args.debug_identity:
                preds, sr = None, pair.hr
            else:
                preds, _, sr = _super_resolve(div_model, conv_model, pair.lr)
            report.add(pair.identifier, eval_mod.psnr_y(sr, pair.hr, border),
                       eval_mod.ssim_y(sr, pair.hr))
            if preds is not None:
                divergences.append(
                    (pair.identifier, eval_mod.mean_pairwise_divergence(preds)))
        except ValueError as exc:
            skipped.append((pair.identifier, str(exc)))

    if not report.records:
        raise TrainingError("every evaluation item failed; nothing to report")
    report.write_csv(out_dir / "report.csv")
    if divergences:
        mean_div = float(np.mean([d for _, d in divergences]))
        lines = ["identifier,mean_pairwise_divergence"]
        lines += [f"{ident},{value!r}" for ident, value in divergences]
        lines.append(f"mean,{mean_div!r}")
        (out_dir / "divergence.csv").write_text("\n".join(lines) + "\n")
    if skipped:
        (out_dir / "skipped.csv").write_text(
            "\n".join(f"{ident},{reason}" for ident, reason in skipped) + "\n")
    print(f"evaluated {len(report.records)} images: "
          f"psnr_y {report.mean_psnr_y:.4f} dB, ssim_y {report.mean_ssim_y:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _diagnose_snapshot(args, out_dir: Path) -> None:
    """Branch dumps, residual maps, divergence matrix, checkerboard energies."""
    div_model, div_ckpt = load_divergence_model(args.ckpt_div)
    manifest = data_mod.load_manifest(args.manifest)
    pairs, _ = data_mod.load_pairs(manifest)
    if not pairs:
        raise TrainingError(f"no usable pairs in {args.manifest}")
    pair = pairs[args.image_index]
    preds = divergence_forward(div_model, pair.lr)

    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = LossConfig()
    hr_t = image_to_tensor(pair.hr)
    rows = ["branch,checkerboard_energy"]
    for img, leaf in zip(preds.predictions, preds.leaf_paths):
        name = _leaf_name(leaf)
        save_png(img, images_dir / f"branch_{name}.png")
        res = residual_map(image_to_tensor(img), hr_t, loss_cfg)
        save_png(eval_mod.heatmap_image(res.numpy()), images_dir / f"residual_{name}.png")
        rows.append(f"{name},{eval_mod.checkerboard_energy(img)!r}")
    (out_dir / "checkerboard.csv").write_text("\n".join(rows) + "\n")

    mat = eval_mod.pairwise_divergence(preds)
    header = ",".join(_leaf_name(p) for p in preds.leaf_paths)
    lines = ["," + header]
    for leaf, row in zip(preds.leaf_paths, mat):
        lines.append(_leaf_name(leaf) + "," + ",".join(repr(float(v)) for v in row))
    (out_dir / "divergence_matrix.csv").write_text("\n".join(lines) + "\n")

    if args.ckpt_conv:
        conv_model, conv_ckpt = load_convergence_model(args.ckpt_conv)
        if conv_ckpt.config.hash() != div_ckpt.config.hash():
            raise CheckpointError(
                f"checkpoint config hashes differ: divergence {div_ckpt.config.hash()} "
                f"vs convergence {conv_ckpt.config.hash()}"
            )
        weights, _ = convergence_forward(conv_model, preds)
        eval_mod.export_weight_heatmaps(weights, images_dir)
    print(f"diagnostics for {pair.identifier} -> {out_dir}")


def _toy_budget_config(cfg: RunConfig, steps: int | None) -> RunConfig:
    values = dict(cfg.values)
    if steps is not None:
        values["train.max_steps"] = steps
        values["train.max_epochs"] = max(values["train.max_epochs"], steps)
    return RunConfig(values)


def _train_and_measure(cfg: RunConfig, stage_seed_offset: int, workdir: Path,
                       train_manifest, test_pairs) -> tuple[float, float]:
    """Train a fresh divergence model and measure divergence + checkerboard."""
    model = build_divergence_network(cfg.model, cfg.seed + stage_seed_offset)
    train_divergence(model, train_manifest, cfg.train("divergence"), workdir)
    divs, energies = [], []
    for pair in test_pairs:
        preds = divergence_forward(model, pair.lr)
        divs.append(eval_mod.mean_pairwise_divergence(preds))
        energies.extend(eval_mod.checkerboard_energy(img) for img in preds.predictions)
    return float(np.mean(divs)), float(np.mean(energies))


def cmd_diagnose(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.sweep is None:
        if not args.ckpt_div:
            raise UsageError("--ckpt-div is required without --sweep")
        _diagnose_snapshot(args, out_dir)
        return EXIT_OK

    if not args.config:
        raise UsageError("--sweep requires --config for the training budget")
    base = resolve_config(args.config, args.set)
    base = _toy_budget_config(base, args.steps)
    train_manifest = data_mod.load_manifest(base.manifest_path("train"))
    test_manifest = data_mod.load_manifest(args.manifest)
    test_pairs, _ = data_mod.load_pairs(test_manifest)
    if not test_pairs:
        raise TrainingError(f"no usable pairs in {args.manifest}")

    kind, _, spec = args.sweep.partition("=")
    if kind == "alpha":
        if not spec:
            raise UsageError("--sweep alpha needs values, e.g. alpha=0,0.1")
        rows = ["alpha,mean_divergence,mean_checkerboard"]
        for i, alpha_text in enumerate(spec.split(",")):
            alpha = float(alpha_text)
            cfg = RunConfig({**base.values, "loss.alpha": alpha})
            div, energy = _train_and_measure(cfg, 0, out_dir / f"alpha_{i}",
                                             train_manifest, test_pairs)
            rows.append(f"{alpha!r},{div!r},{energy!r}")
        (out_dir / "alpha_sweep.csv").write_text("\n".join(rows) + "\n")
    elif kind == "abs":
        rows = ["use_abs,mean_divergence,mean_checkerboard"]
        for flag in (True, False):
            cfg = RunConfig({**base.values, "loss.use_abs": flag})
            div, energy = _train_and_measure(cfg, 0, out_dir / f"abs_{int(flag)}",
                                             train_manifest, test_pairs)
            rows.append(f"{str(flag).lower()},{div!r},{energy!r}")
        (out_dir / "abs_sweep.csv").write_text("\n".join(rows) + "\n")
    elif kind == "tree-grid":
        rows = ["tree_depth,branching,predictions,mean_divergence"]
        for depth in range(1, 5):
            for width in range(1, 5):
                cfg = RunConfig({**base.values,
                                 "model.tree_depth": depth, "model.branching": width})
                div, _ = _train_and_measure(cfg, 0, out_dir / f"grid_{depth}{width}",
                                            train_manifest, test_pairs)
                rows.append(f"{depth},{width},{width ** depth},{div!r}")
        (out_dir / "tree_grid.csv").write_text("\n".join(rows) + "\n")
    else:
        raise UsageError(f"unknown sweep kind {kind!r} (alpha=..., abs, tree-grid)")
    print(f"sweep {kind} -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="treesr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="degrade HR PNGs into LR/HR pair manifests")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4, 8))
    p.add_argument("--out", required=True)
    p.add_argument("--test-count", type=int, default=0,
                   help="hold out the last N images (sorted by name) as the test split")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=("divergence", "convergence"))
    p.add_argument("--divergence-ckpt", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("--ckpt-div", required=True)
    p.add_argument("--ckpt-conv", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-branches", metavar="DIR")
    p.add_argument("--dump-weights", metavar="DIR")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM over a test manifest")
    p.add_argument("--ckpt-div", required=True)
    p.add_argument("--ckpt-conv", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--border", type=int, default=None,
                   help="crop this many border pixels (default: the scale factor)")
    p.add_argument("--out", required=True)
    p.add_argument("--debug-identity", action="store_true",
                   help="score HR against itself to exercise the metric path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="divergence diagnostics and sweeps")
    p.add_argument("--ckpt-div")
    p.add_argument("--ckpt-conv")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--sweep", help="alpha=v1,v2,... | abs | tree-grid")
    p.add_argument("--config", help="training budget for sweeps")
    p.add_argument("--steps", type=int, help="override train.max_steps for sweeps")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
