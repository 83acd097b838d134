"""Command-line entry point.

Subcommands: synth, train, augment, eval, gradcheck. A JSON config file
(--config) supplies defaults; any CLI flag overrides its JSON counterpart.
Exit codes: 0 success, 1 validation error, 2 runtime/compute error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (Dataset, SampleKey, generate_synthetic, load_dataset,
                   save_dataset, split_by_identity)
from .errors import (ComputeError, ConfigError, ContractError, InputError,
                     PoseAugError, VerificationError)
from .evaluate import run_protocol
from .training import (FraModel, ModelConfig, TrainConfig, gradient_check,
                       load_checkpoint, save_checkpoint, train)


@dataclass
class RunConfig:
    """Flattened run configuration; every field has a JSON counterpart."""

    # dataset source
    embeddings: str | None = None
    landmarks: str | None = None
    factors: str | None = None
    identities: int = 20
    emotions: int = 4
    poses: int = 4
    noise_sigma: float = 0.05
    alpha: float = 0.5
    beta: float = 0.5
    # model dims
    face_dim: int = 512
    pose_dim: int = 512
    image_size: int = 64
    patch: int = 8
    heads: int = 4
    layers: int = 4
    model_dim: int = 256
    ff_dim: int = 256
    # optimizer / loss
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.0
    margin: float = 10.0
    dropout: float = 0.4
    # split
    train_count: int | None = None
    val_count: int | None = None
    test_count: int | None = None
    # bookkeeping
    seed: int = 0
    out: str = "out"

    def validate(self):
        problems = []
        for name in ("identities", "emotions", "poses"):
            if getattr(self, name) < 2:
                problems.append(f"{name}: must be >= 2")
        for name in ("face_dim", "pose_dim", "image_size", "patch", "heads",
                     "layers", "model_dim", "ff_dim", "steps", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be positive")
        for name in ("learning_rate", "margin", "noise_sigma"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout: must be in [0, 1)")
        if (self.embeddings is None) != (self.landmarks is None):
            problems.append(
                "embeddings/landmarks: both paths or neither must be given")
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))

    def model_config(self) -> ModelConfig:
        return ModelConfig(face_dim=self.face_dim, pose_dim=self.pose_dim,
                           image_size=self.image_size, patch=self.patch,
                           heads=self.heads, layers=self.layers,
                           model_dim=self.model_dim, ff_dim=self.ff_dim,
                           dropout=self.dropout)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           momentum=self.momentum, margin=self.margin,
                           seed=self.seed)

    def split_counts(self, n_identities: int):
        if self.train_count is None:
            # 99/11/30-style proportions rounded to the identity total
            n_val = max(1, round(n_identities * 11 / 140))
            n_test = max(1, round(n_identities * 30 / 140))
            return (n_identities - n_val - n_test, n_val, n_test)
        return (self.train_count, self.val_count or 0, self.test_count or 0)


def build_config(args) -> RunConfig:
    values = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        values.update(doc)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    config = RunConfig(**values)
    config.validate()
    return config


def get_dataset(config: RunConfig) -> Dataset:
    if config.embeddings:
        return load_dataset(config.embeddings, config.landmarks,
                            config.factors, image_size=config.image_size)
    return generate_synthetic(
        n_identities=config.identities, n_emotions=config.emotions,
        n_poses=config.poses, embedding_dim=config.face_dim,
        noise_sigma=config.noise_sigma, seed=config.seed,
        alpha=config.alpha, beta=config.beta, image_size=config.image_size)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    _selfcheck_csv(path, header)


def _selfcheck_csv(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        seen = next(reader)
        if seen != [str(h) for h in header]:
            raise ComputeError(f"{path}: header self-check failed")
        for row in reader:
            if len(row) != len(header):
                raise ComputeError(f"{path}: row width self-check failed")


# -- subcommands -----------------------------------------------------------

def cmd_synth(config: RunConfig) -> int:
    out = _out_dir(config)
    dataset = get_dataset(config)
    save_dataset(dataset, out / "embeddings.csv", out / "landmarks.csv",
                 out / "factors.json")
    print(f"wrote {len(dataset.embeddings)} records to {out}/")
    return 0


def cmd_train(config: RunConfig) -> int:
    out = _out_dir(config)
    dataset = get_dataset(config)
    split = split_by_identity(dataset,
                              config.split_counts(len(dataset.identities)),
                              seed=config.seed)
    model = FraModel(config.model_config(), seed=config.seed)

    def progress(step, values):
        if (step + 1) % 25 == 0 or step == 0:
            print(f"step {step + 1:5d}  total {values['total']:.4f}  "
                  f"bce {values['bce']:.4f}")

    result = train(model, dataset, split, config.train_config(),
                   progress=progress)

    loss_header = ["step", "bce", "triplet_pose", "triplet_identity",
                   "triplet_emotion", "total"]
    rows = [[i] + [repr(h[k]) for k in loss_header[1:]]
            for i, h in enumerate(result.history)]
    _write_csv(out / "loss_curve.csv", loss_header, rows)

    extra = {"train_config": asdict(config.train_config()),
             "split": {"train": list(split.train_identities),
                       "val": list(split.val_identities),
                       "test": list(split.test_identities)}}
    save_checkpoint(out / "final.ckpt", model, config.steps,
                    result.history, extra)
    if result.val_history:
        best_step = min(result.val_history, key=lambda sv: sv[1])[0]
        extra["best_val_step"] = best_step
    save_checkpoint(out / "best.ckpt", model, config.steps,
                    result.history, extra)

    from .plots import loss_curve_svg
    loss_curve_svg(result.history, out / "loss_curve.svg")
    print(f"final total loss {result.history[-1]['total']:.4f}; "
          f"checkpoints in {out}/")
    return 0


def cmd_augment(config: RunConfig, checkpoint: str, target_poses) -> int:
    out = _out_dir(config)
    dataset = get_dataset(config)
    model, _ = load_checkpoint(checkpoint)
    if model.config.face_dim != dataset.embedding_dim:
        raise ConfigError(
            f"checkpoint face_dim {model.config.face_dim} does not match "
            f"dataset embedding width {dataset.embedding_dim}")
    poses = list(target_poses) if target_poses else list(dataset.pose_set)
    unknown = [p for p in poses if p not in dataset.pose_set]
    if unknown:
        raise InputError(
            f"unknown pose labels {unknown}; known poses: "
            f"{list(dataset.pose_set)}")
    pairs = [(key, pose) for key in dataset.keys for pose in poses]
    vectors = model.augment(dataset, pairs)
    header = (["identity", "emotion", "pose", "base_pose", "self_augmented"]
              + [f"e{i}" for i in range(vectors.shape[1])])
    rows = []
    for (key, pose), vec in zip(pairs, vectors):
        rows.append([key.identity, key.emotion, pose, key.pose,
                     int(pose == key.pose)] + [repr(float(x)) for x in vec])
    _write_csv(out / "augmented.csv", header, rows)
    print(f"wrote {len(rows)} augmented embeddings to {out}/augmented.csv")
    return 0


def cmd_eval(config: RunConfig, checkpoint: str) -> int:
    out = _out_dir(config)
    dataset = get_dataset(config)
    model, manifest = load_checkpoint(checkpoint)
    if model.config.face_dim != dataset.embedding_dim:
        raise ConfigError(
            f"checkpoint face_dim {model.config.face_dim} does not match "
            f"dataset embedding width {dataset.embedding_dim}")
    split = split_by_identity(dataset,
                              config.split_counts(len(dataset.identities)),
                              seed=config.seed)
    report = run_protocol(dataset, split,
                          lambda pairs: model.augment(dataset, pairs),
                          seed=config.seed)
    report.metadata["checkpoint_step"] = manifest.get("step")
    (out / "report.json").write_text(report.to_json())

    from .plots import confusion_svg, loss_curve_svg, roc_svg
    for target, block in report.roc.items():
        rows = []
        for cls, curve in block["per_class"].items():
            for thr, fpr, tpr in zip(curve["thresholds"], curve["fpr"],
                                     curve["tpr"]):
                rows.append([cls, repr(float(thr)), repr(float(fpr)),
                             repr(float(tpr))])
        _write_csv(out / f"roc_{target}.csv",
                   ["class", "threshold", "fpr", "tpr"], rows)
        roc_svg(block, out / f"roc_{target}.svg", target)
    for target, blk in report.confusion.items():
        classes = [str(c) for c in blk["classes"]]
        rows = [[cls] + list(map(int, row))
                for cls, row in zip(classes, blk["matrix"])]
        _write_csv(out / f"confusion_{target}.csv", ["label"] + classes, rows)
        confusion_svg(classes, blk["matrix"],
                      out / f"confusion_{target}.svg", target)
    if manifest.get("loss_history"):
        loss_curve_svg(manifest["loss_history"], out / "loss_curve.svg")

    for target, acc in report.accuracies.items():
        print(f"{target:9s} exp1 {acc['exp1']:.3f}  exp2 {acc['exp2']:.3f}  "
              f"exp3 {acc['exp3']:.3f}")
    return 0


def cmd_gradcheck(config: RunConfig, tolerance: float, n_coords: int,
                  keep_dropout: bool) -> int:
    if keep_dropout:
        raise ConfigError(
            "gradcheck requires a deterministic forward pass; "
            "dropout must stay disabled")
    dataset = get_dataset(config)
    split = split_by_identity(dataset,
                              config.split_counts(len(dataset.identities)),
                              seed=config.seed)
    model = FraModel(config.model_config(), seed=config.seed)
    report = gradient_check(model, dataset, split, margin=config.margin,
                            n_coords=n_coords, tol=tolerance,
                            seed=config.seed)
    print(f"checked {report.n_checked} coordinates, "
          f"max rel err {report.max_rel_err:.3e} (tol {report.tolerance:g})")
    if not report.passed:
        for fail in report.failures[:20]:
            print(f"  FAIL {fail.param}{fail.index}: analytic "
                  f"{fail.analytic:.6e} vs numeric {fail.numeric:.6e} "
                  f"(rel {fail.rel_err:.3e})")
        raise VerificationError(
            f"{len(report.failures)} coordinates above tolerance")
    return 0


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseaug",
        description="Latent-space face-embedding augmentation toolkit")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="global RNG seed")
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        for f in fields(RunConfig):
            if f.name in ("seed", "out"):
                continue
            flag = "--" + f.name.replace("_", "-")
            if f.type in ("int", "int | None"):
                p.add_argument(flag, type=int, dest=f.name)
            elif f.type == "float":
                p.add_argument(flag, type=float, dest=f.name)
            elif f.name != "command":
                p.add_argument(flag, dest=f.name)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p_synth)

    p_train = sub.add_parser("train", help="train the model")
    add_common(p_train)

    p_aug = sub.add_parser("augment", help="generate augmented embeddings")
    add_common(p_aug)
    p_aug.add_argument("--checkpoint", required=True)
    p_aug.add_argument("--target-pose", action="append", dest="target_poses",
                       help="pose label to synthesize (repeatable; "
                            "default: all poses)")

    p_eval = sub.add_parser("eval", help="run the evaluation protocol")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    add_common(p_gc)
    p_gc.add_argument("--tolerance", type=float, default=1e-4)
    p_gc.add_argument("--coords", type=int, default=64)
    p_gc.add_argument("--keep-dropout", action="store_true",
                      help="do not disable dropout (refused; determinism guard)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = build_config(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "augment":
            return cmd_augment(config, args.checkpoint, args.target_poses)
        if args.command == "eval":
            return cmd_eval(config, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(config, args.tolerance, args.coords,
                                 args.keep_dropout)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 3
    except (ComputeError, ContractError, PoseAugError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
