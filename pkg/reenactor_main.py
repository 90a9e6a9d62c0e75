"""Command line entry point: prepare, train, reenact, eval, plot.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import sys
from pathlib import Path

import torch

from action_log import clear_action_log, export_action_log, log_action
from face_dataset_workflow import (
    align_face,
    build_manifest,
    image_to_tensor,
    load_image,
    read_manifest,
    save_image,
    write_manifest,
)
from landmark_layout import get_layout, read_landmarks
from reenactor_config import config_hash, echo_config, load_config, stroke_sigma_for, validate_config
from reenactor_errors import ConfigError, DataError, ReenactorError
from synthetic_faces import generate_synthetic_dataset


class ReenactorArgumentParser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they map to exit code 1"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    parser = ReenactorArgumentParser(prog="reenactor", description="One-shot face reenactment toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (desk preset when omitted)")
    common.add_argument("--seed", type=int, help="Seed for splits, batches and evaluation")
    common.add_argument("--resolution", type=int, help="Working resolution (power of two >= 16)")
    common.add_argument("--run-dir", help="Directory for outputs, echoed config and the audit log")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override a config value; repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="Build manifest, mean shape and rejects report")
    p.add_argument("--root", required=True, help="Dataset root: <root>/<identity>/<image> + landmark .txt")
    p.add_argument("--out", help="Manifest directory (default: <run-dir>/manifest)")
    p.add_argument("--synthetic", action="store_true", help="Generate a toy-face dataset into --root first")
    p.add_argument("--n-identities", type=int, default=5)
    p.add_argument("--samples-per-identity", type=int, default=8)

    p = sub.add_parser("train", parents=[common], help="Train F, D, discriminator and FusionNet")
    p.add_argument("--manifest", required=True, help="Manifest directory written by prepare")
    p.add_argument("--k-shot", type=int, help="Fine-tune a checkpoint on k references per test identity")
    p.add_argument("--checkpoint", help="Checkpoint to fine-tune (with --k-shot)")
    p.add_argument("--steps", type=int, default=200, help="Fine-tune steps (with --k-shot)")
    p.add_argument("--no-resume", action="store_true", help="Ignore checkpoints already in the run directory")

    p = sub.add_parser("reenact", parents=[common], help="Reenact reference faces under pose guides")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", nargs="+", required=True, help="Reference image(s) with a landmark .txt alongside")
    p.add_argument("--guide", nargs="+", required=True, help="Guide images (with landmark .txt) or landmark .txt files")
    p.add_argument("--manifest", help="Manifest directory whose mean shape aligns raw inputs")
    p.add_argument("--out", help="Output directory (default: <run-dir>/reenact)")
    p.add_argument("--grid", action="store_true", help="Also write a references x guides grid")
    p.add_argument("--no-fusion", action="store_true", help="Bypass the warp + FusionNet branch")

    p = sub.add_parser("eval", parents=[common], help="Evaluate checkpoints into report tables")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="Full-model checkpoint (table1)")
    p.add_argument("--no-concat-checkpoint", help="Checkpoint trained with model.use_concat=false (table1)")
    p.add_argument("--variant", action="append", default=[], metavar="NAME=PATH",
                   help="Named checkpoint for lambda_sweep / k_shot modes; in table2 repeat a name once per seed")
    p.add_argument("--mode", choices=["table1", "table2", "lambda_sweep", "k_shot"], default="table1")
    p.add_argument("--wild-manifest", help="Extra manifest used as in-the-wild guides")

    p = sub.add_parser("plot", parents=[common], help="Loss curves and report heatmaps from a run directory")
    p.add_argument("--out", help="Plot directory (default: <run-dir>/plots)")
    return parser


def resolve_config(args):
    base = None
    if args.command == "train" and args.k_shot is not None:
        from training_workflow import checkpoint_config

        if not args.checkpoint:
            raise ConfigError("--k-shot needs --checkpoint")
        # fine-tuning starts from the checkpoint's own settings
        base = checkpoint_config(args.checkpoint)
    config = load_config(args.config, args.overrides, args.resolution, base)
    if args.seed is not None:
        config.optim.seed = args.seed
        config.data.split_seed = args.seed
        config.eval.seed = args.seed
    return validate_config(config)


def resolve_run_dir(args, config):
    if args.run_dir:
        return Path(args.run_dir)
    if args.command == "train":
        return Path("runs") / config_hash(config)
    return Path("runs") / args.command


def cmd_prepare(args, config, run_dir):
    root = Path(args.root)
    if args.synthetic:
        generate_synthetic_dataset(root, args.n_identities, args.samples_per_identity, config.data.resolution,
                                   config.data.split_seed, config.data.layout, config.data.face_scale)
    manifest = build_manifest(root, config.data.split_ratio, config.data.split_seed, config.data.layout)
    out = Path(args.out) if args.out else run_dir / "manifest"
    path = write_manifest(manifest, out)
    digest = hashlib.sha1(path.read_bytes()).hexdigest()
    log_action(f"Manifest written to {path} (sha1 {digest}); {len(manifest.rejects)} rejects")
    return 0


def cmd_train(args, config, run_dir):
    from training_workflow import fine_tune_k_shot, train

    if args.k_shot is not None:
        fine_tune_k_shot(args.checkpoint, args.manifest, args.k_shot, args.steps, run_dir / f"k{args.k_shot}", config)
        return 0
    train(config, read_manifest(args.manifest), run_dir, resume=not args.no_resume)
    return 0


def _landmark_path(path):
    path = Path(path)
    return path if path.suffix == ".txt" else path.with_suffix(".txt")


def _load_input(path, layout, resolution, mean_shape):
    """Image (+ landmark file) or landmark file -> (image tensor or None, LandmarkSet)"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Input {path} does not exist")
    landmark_path = _landmark_path(path)
    if not landmark_path.exists():
        raise DataError(f"{path} has no landmark file and no landmark backend is configured")
    landmarks = read_landmarks(landmark_path, layout)
    if path.suffix == ".txt":
        return None, landmarks
    image = load_image(path)
    if mean_shape is not None:
        sample = align_face(image, landmarks, mean_shape, resolution)
        return sample.image, sample.landmarks
    if image.shape[:2] != (resolution, resolution):
        raise DataError(f"{path} is {image.shape[1]}x{image.shape[0]}; pass --manifest to align it to {resolution}px")
    return image_to_tensor(image), landmarks


def cmd_reenact(args, config, run_dir):
    from eval_workflow import reenact_faces
    from training_workflow import load_checkpoint
    from visualization_additions import plot_reenactment_grid

    state = load_checkpoint(args.checkpoint)
    config = state.config
    resolution = config.data.resolution
    layout = get_layout(config.data.layout)
    mean_shape = read_manifest(args.manifest).mean_shape if args.manifest else None

    references = [_load_input(p, layout, resolution, mean_shape) for p in args.reference]
    if any(image is None for image, _ in references):
        raise DataError("References must be images, not landmark files")
    guides = [_load_input(p, layout, resolution, mean_shape) for p in args.guide]

    out = Path(args.out) if args.out else run_dir / "reenact"
    out.mkdir(parents=True, exist_ok=True)
    ref_images = torch.stack([img for img, _ in references])
    outputs = []
    for g, (guide_image, guide_landmarks) in enumerate(guides):
        guide_images = None if guide_image is None else [guide_image] * len(references)
        result = reenact_faces(state, ref_images, [lm for _, lm in references],
                               [guide_landmarks] * len(references), use_fusion=not args.no_fusion,
                               guide_images=guide_images)
        outputs.append(result)
        for r, image in enumerate(result):
            name = f"{Path(args.reference[r]).stem}__{Path(args.guide[g]).stem}.png"
            save_image(image, out / name)
    log_action(f"Wrote {len(guides) * len(references)} reenacted images to {out}")

    if args.grid:
        guide_images = [img if img is not None else parsing_preview(lm, config) for img, lm in guides]
        plot_reenactment_grid(list(ref_images), guide_images, outputs, out / "grid.png")
    return 0


def parsing_preview(landmarks, config):
    from parsing_workflow import colorize, default_palette, render_parsing

    parsing = render_parsing(landmarks, config.data.resolution, stroke_sigma_for(config), config.parsing.use_gaze)
    return colorize(parsing, default_palette(parsing.names), config.parsing.colorize_threshold).pixels


def _parse_variants(items, repeatable=False):
    variants = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--variant '{item}' is not of the form NAME=PATH")
        name, path = (part.strip() for part in item.split("=", 1))
        if name in variants and not repeatable:
            raise ConfigError(f"--variant '{name}' given more than once")
        variants.setdefault(name, []).append(path)
    if repeatable:
        return variants
    return {name: paths[0] for name, paths in variants.items()}


def cmd_eval(args, config, run_dir):
    from eval_workflow import format_table, format_table2, run_table, run_table2

    if args.mode == "table2":
        variants = _parse_variants(args.variant, repeatable=True)
        if not variants:
            raise ConfigError("table2 mode needs --variant NAME=PATH, once per seed")
        print(format_table2(run_table2(variants, args.manifest, run_dir)))
        return 0
    if args.mode == "table1":
        if not args.checkpoint:
            raise ConfigError("table1 mode needs --checkpoint")
        checkpoints = {"full": args.checkpoint, "no_concat": args.no_concat_checkpoint}
    else:
        checkpoints = _parse_variants(args.variant)
        if not checkpoints:
            raise ConfigError(f"{args.mode} mode needs at least one --variant NAME=PATH")
    _, frame = run_table(checkpoints, args.manifest, args.mode, run_dir, wild_manifest=args.wild_manifest)
    print(format_table(frame))
    return 0


def cmd_plot(args, config, run_dir):
    from visualization_additions import plot_from_run

    plot_from_run(run_dir, args.out)
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "reenact": cmd_reenact,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv=None):
    clear_action_log()
    run_dir = None
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        run_dir = resolve_run_dir(args, config)
        echo_config(config, run_dir, name=f"{args.command}_config.json")
        log_action(f"{args.command}: config {config_hash(config)}, run dir {run_dir}")
        return COMMANDS[args.command](args, config, run_dir)
    except ReenactorError as e:
        log_action(str(e), level="error")
        return e.exit_code
    finally:
        if run_dir is not None and run_dir.exists():
            export_action_log(run_dir / "action_log.csv")


if __name__ == "__main__":
    sys.exit(main())
