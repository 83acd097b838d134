"""Joint training of the autoencoder and the fusion network, plus model
assembly, checkpoint persistence, and the gradient-check entry point."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .autoencoder import Autoencoder, AutoencoderConfig, bce_loss, images_to_batch
from .combiner import Combiner, CombinerConfig
from .data import Dataset, SplitSpec, make_batch
from .errors import ComputeError, ConfigError, ContractError
from .losses import LossBreakdown, total_loss
from .tensor import CheckReport, Tensor, finite_diff_check

CHECKPOINT_VERSION = "poseaug-checkpoint-v1"


@dataclass
class ModelConfig:
    face_dim: int = 512
    pose_dim: int = 512
    image_size: int = 64
    patch: int = 8
    heads: int = 4
    layers: int = 4
    model_dim: int = 256
    ff_dim: int = 256
    dropout: float = 0.4
    use_positional: bool = True

    def autoencoder_config(self) -> AutoencoderConfig:
        return AutoencoderConfig(image_size=self.image_size,
                                 latent_dim=self.pose_dim)

    def combiner_config(self) -> CombinerConfig:
        return CombinerConfig(face_dim=self.face_dim, pose_dim=self.pose_dim,
                              patch=self.patch, heads=self.heads,
                              layers=self.layers, model_dim=self.model_dim,
                              ff_dim=self.ff_dim, dropout=self.dropout,
                              use_positional=self.use_positional)


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.0
    margin: float = 10.0
    seed: int = 0
    val_every: int = 25


class FraModel:
    """Autoencoder + combiner pair with a shared parameter table."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.autoencoder = Autoencoder(config.autoencoder_config(), rng)
        self.combiner = Combiner(config.combiner_config(), rng)

    def parameters(self) -> list:
        return self.autoencoder.parameters() + self.combiner.parameters()

    def zero_grads(self):
        for _, p in self.parameters():
            p.zero_grad()

    # -- forward paths -----------------------------------------------------
    def batch_loss(self, dataset: Dataset, items, margin: float,
                   train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> LossBreakdown:
        """Full objective over a list of BatchItems."""
        if not items:
            raise ContractError("batch_loss requires a nonempty batch")
        target_images = images_to_batch(
            [dataset.image(it.positive_key) for it in items])
        latents = self.autoencoder.encode_batch(target_images)
        recon = self.autoencoder.decode_batch(latents)
        bce = bce_loss(recon, target_images.data)

        faces = Tensor(np.stack(
            [dataset.embeddings[it.base_key] for it in items]))
        anchor = self.combiner.forward(faces, latents,
                                       train_mode=train_mode, rng=rng)
        positive = Tensor(np.stack(
            [dataset.embeddings[it.positive_key] for it in items]))
        neg_pose = Tensor(np.stack(
            [dataset.embeddings[it.neg_pose_key] for it in items]))
        neg_identity = Tensor(np.stack(
            [dataset.embeddings[it.neg_identity_key] for it in items]))
        neg_emotion = Tensor(np.stack(
            [dataset.embeddings[it.neg_emotion_key] for it in items]))
        return total_loss(anchor, positive, neg_pose, neg_identity,
                          neg_emotion, bce, margin)

    def augment(self, dataset: Dataset, pairs) -> np.ndarray:
        """Generated unit-norm embeddings for (base_key, target_pose) pairs."""
        if not pairs:
            return np.zeros((0, self.config.face_dim))
        from .data import SampleKey
        images = images_to_batch(
            [dataset.image(SampleKey(k.identity, k.emotion, pose))
             for k, pose in pairs])
        latents = self.autoencoder.encode_batch(images)
        faces = Tensor(np.stack([dataset.embeddings[k] for k, _ in pairs]))
        out = self.combiner.forward(faces, latents, train_mode=False)
        return out.data.copy()


# -- checkpointing ---------------------------------------------------------

def save_checkpoint(path, model: FraModel, step: int, loss_history: list,
                    extra_config: dict | None = None):
    """Write a checkpoint: JSON manifest line + little-endian float64 blob."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "extra_config": extra_config or {},
        "step": step,
        "loss_history": loss_history,
        "tensors": [{"name": name, "shape": list(p.shape)}
                    for name, p in model.parameters()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, p in model.parameters():
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[FraModel, dict]:
    """Rebuild a model from a checkpoint; bitwise-faithful tensor payloads."""
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {manifest.get('version')!r} not supported "
            f"(expected {CHECKPOINT_VERSION!r})")
    model = FraModel(ModelConfig(**manifest["model_config"]), seed=0)
    params = dict(model.parameters())
    offset = 0
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params:
            raise ConfigError(f"checkpoint names unknown tensor {name!r}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise ConfigError(f"checkpoint payload truncated at tensor {name!r}")
        params[name].data = np.frombuffer(
            blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    missing = set(params) - {e["name"] for e in manifest["tensors"]}
    if missing:
        raise ConfigError(
            f"checkpoint is missing tensors: {sorted(missing)}")
    return model, manifest


# -- optimization ----------------------------------------------------------

class SGD:
    def __init__(self, params, learning_rate: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data)
                         for name, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            if self.momentum > 0.0:
                v = self.velocity[name]
                v *= self.momentum
                v -= self.lr * p.grad
                p.data = p.data + v
            else:
                p.data = p.data - self.lr * p.grad


@dataclass
class TrainResult:
    model: FraModel
    history: list          # per-step LossBreakdown values dicts
    val_history: list      # (step, total loss) pairs
    skipped_items: int


def train(model: FraModel, dataset: Dataset, split: SplitSpec,
          config: TrainConfig, progress=None) -> TrainResult:
    """Joint SGD on the multi-task objective over the train identities."""
    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1)
    opt = SGD(model.parameters(), config.learning_rate, config.momentum)
    history = []
    val_history = []
    skipped_total = 0
    for step in range(config.steps):
        items, skipped = make_batch(dataset, split.train_identities,
                                    config.batch_size, rng)
        skipped_total += skipped
        if not items:
            raise ComputeError("could not assemble a training batch")
        model.zero_grads()
        breakdown = model.batch_loss(dataset, items, config.margin,
                                     train_mode=True, rng=dropout_rng)
        values = breakdown.values()
        if not np.isfinite(values["total"]):
            raise ComputeError(
                f"non-finite loss at step {step}: {values}")
        history.append(values)
        breakdown.total.backward()
        opt.step()

        if split.val_identities and (step + 1) % config.val_every == 0:
            val_items, _ = make_batch(dataset, split.val_identities,
                                      min(config.batch_size, 16),
                                      np.random.default_rng(config.seed + 2))
            if val_items:
                val = model.batch_loss(dataset, val_items, config.margin)
                val_history.append((step + 1, float(val.total.item())))
        if progress is not None:
            progress(step, values)
    return TrainResult(model=model, history=history,
                       val_history=val_history, skipped_items=skipped_total)


def gradient_check(model: FraModel, dataset: Dataset, split: SplitSpec,
                   margin: float = 10.0, batch_size: int = 2,
                   n_coords: int = 64, step: float = 1e-5,
                   tol: float = 1e-4, seed: int = 0) -> CheckReport:
    """Finite-difference check of the full objective at the current weights.

    Samples coordinates across both the autoencoder and combiner parameter
    tables; dropout is off (deterministic forward).
    """
    rng = np.random.default_rng(seed)
    items, _ = make_batch(dataset, split.train_identities, batch_size, rng)
    if not items:
        raise ComputeError("could not assemble a gradient-check batch")

    def f():
        return model.batch_loss(dataset, items, margin).total

    params = model.parameters()
    per_param = -(-n_coords // len(params))  # ceil: at least n_coords total
    return finite_diff_check(f, params, step=step, tol=tol,
                             max_coords_per_param=per_param, rng=rng)
