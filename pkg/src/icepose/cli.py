"""Command-line entry point: ``python -m icepose <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import read_kv
from .dataset import DatasetConfig, DatasetManifest, build_dataset, load_samples, subject_phantom
from .errors import ConfigError, IcePoseError
from .geometry import RigidTransform, decode_rot6d, denormalize_pose
from .phantom import phantom_to_text
from .scene import export_scene
from .train import TrainConfig, baseline_predictor, constant_predictor, evaluate, train
from .vit import ViTConfig, load_checkpoint, predict

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

CONFIG_PREFIXES = ("dataset.", "fan.", "pose.", "phantom.", "model.", "train.", "scene.", "eval.")

CONTRACT = """\
commands:
  phantom       write one subject's phantom parameters (key = value text)
  dataset       generate the synthetic dataset (binary records + manifest.json)
  train         train the ViT regressor; writes loss_log.csv, val_log.csv, *.ckpt
  eval          evaluate a checkpoint and the constant baseline on a split;
                writes report.{txt,json}, report_errors.csv and baseline_report.*
  export-scene  write an OBJ scene: phantom isosurface, ground-truth fan (gray)
                and predicted fan (green)
  gradcheck     compare backward() with central differences on the micro ViT

every command accepts --config FILE: flat "key = value" lines, '#' comments.
keys:
  seed                                  master seed (subjects, poses, noise)
  dataset.subjects / dataset.samples    "train val test" counts, e.g. 16 2 2
  dataset.speckle                       multiplicative speckle half-width
  dataset.rotational_alignment          true: anatomy frame also rotates
  fan.sector_angle fan.depth fan.ray_count fan.samples_per_ray
  fan.image_h fan.image_w
  pose.shell_inner pose.shell_outer pose.min_aim_distance
  pose.roll_min pose.roll_max           degrees
  phantom.<range>                       "lo hi" bounds, e.g. phantom.wall_thickness = 2 3
  model.preset                          desk | micro | paper, then model.<field>
  train.preset                          desk | overfit | paper, then train.<field>
  scene.resolution                      marching-cubes grid size (default 64)
  eval.split                            train | val | test
command-line flags override config values.

exit status: 0 success, 1 usage error, 2 runtime failure (message on stderr).
"""


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> Parser:
    common = _common()
    parser = Parser(
        prog="icepose",
        description="Synthetic ICE pose regression: phantoms, datasets, ViT training, evaluation, scenes.",
        epilog=CONTRACT,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, parents=[common])

    p = add("phantom", "write one subject's phantom parameters")
    p.add_argument("--subject", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = add("dataset", "generate the synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)

    p = add("train", "train the ViT regressor")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--epochs", type=int)

    p = add("eval", "evaluate a checkpoint and the baseline")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = add("export-scene", "write an OBJ scene of one sample")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="predicted fan from this model (default: ground truth)")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--index", type=int, default=0, help="sample index within the split")
    p.add_argument("--resolution", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = add("gradcheck", "finite-difference check of the micro ViT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, nargs="+", default=[0.0, 0.1])
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def load_config(path: Path | None) -> dict[str, str]:
    if path is None:
        return {}
    kv = read_kv(path)
    unknown = [k for k in kv if k != "seed" and not k.startswith(CONFIG_PREFIXES)]
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return kv


def _int_key(kv: dict[str, str], key: str, default: int) -> int:
    try:
        return int(kv.get(key, default))
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {kv[key]!r}") from None


def cmd_phantom(args, kv) -> None:
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    config = DatasetConfig.from_mapping(kv)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(phantom_to_text(subject_phantom(config, args.subject)))
    print(f"wrote {args.out}")


def cmd_dataset(args, kv) -> None:
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    manifest = build_dataset(DatasetConfig.from_mapping(kv), args.out)
    sizes = ", ".join(f"{s} {manifest.split_size(s)}" for s in manifest.splits)
    print(f"wrote {manifest.root / 'manifest.json'} ({sizes})")


def cmd_train(args, kv) -> None:
    manifest = DatasetManifest.load(args.data)
    h, w = manifest.image_shape
    kv.setdefault("fan.image_h", str(h))
    kv.setdefault("fan.image_w", str(w))
    vit_config = ViTConfig.from_mapping(kv)
    train_config = TrainConfig.from_mapping(kv)
    if args.epochs is not None:
        train_config = replace(train_config, epochs=args.epochs)
    result = train(train_config, vit_config, manifest, out_dir=args.out)
    print(f"trained {train_config.epochs} epochs, final batch loss {result.loss_log[-1][2]:.4f}; wrote {args.out}")


def cmd_eval(args, kv) -> None:
    manifest = DatasetManifest.load(args.data)
    params, vit_config, _ = load_checkpoint(args.checkpoint)
    split = args.split or kv.get("eval.split", "test")
    report = evaluate(params, vit_config, manifest, split)
    base = evaluate(None, None, manifest, split, predictor=constant_predictor(baseline_predictor(manifest)))
    report.write(args.out, "report")
    base.write(args.out, "baseline_report")
    print(report.table())
    print(f"baseline mean position error {base.mean_position_error:.2f} mm")


def cmd_export_scene(args, kv) -> None:
    manifest = DatasetManifest.load(args.data)
    split = args.split or kv.get("eval.split", "test")
    resolution = args.resolution if args.resolution is not None else _int_key(kv, "scene.resolution", 64)
    n = manifest.split_size(split)
    if not 0 <= args.index < n:
        raise ConfigError(f"--index {args.index} out of range for split {split!r} ({n} samples)")
    sample = load_samples(manifest, split, [args.index])[0]
    t_mesh = manifest.mesh_transform(sample.subject_id)
    gt_mesh = sample.pose_mesh.as_transform()
    pred_mesh = gt_mesh
    if args.checkpoint is not None:
        params, vit_config, _ = load_checkpoint(args.checkpoint)
        p_hat, o_hat = predict(params, vit_config, sample.image[None].astype(np.float64))
        pred_mesh = RigidTransform(decode_rot6d(o_hat[0]), p_hat[0])
    export_scene(
        manifest.phantom(sample.subject_id),
        denormalize_pose(gt_mesh, t_mesh),
        denormalize_pose(pred_mesh, t_mesh),
        manifest.config.fan,
        args.out,
        resolution,
    )
    print(f"wrote {args.out}")


def cmd_gradcheck(args, kv) -> int:
    from .gradcheck import check_gradients

    config = ViTConfig.from_mapping({"model.preset": "micro", **kv})
    worst = 0.0
    for p in args.perturb:
        r = check_gradients(config, seed=args.seed, perturb=p)
        name, err = r.worst()
        print(f"perturb {p:g}: max relative error {err:.3e} ({name}, {r.n_checked} parameters)")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"gradcheck {'passed' if ok else 'FAILED'}: {worst:.3e} {'<' if ok else '>='} {args.tol:g}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "phantom": cmd_phantom,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-scene": cmd_export_scene,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        kv = load_config(args.config)
        code = COMMANDS[args.command](args, kv)
    except (IcePoseError, OSError, ValueError) as exc:
        sys.stderr.write(f"icepose {args.command}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
