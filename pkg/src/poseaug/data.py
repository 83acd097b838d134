"""Dataset assembly: synthetic factor-structured data, CSV I/O, splits,
and training-batch construction.

The synthetic generator draws one unit factor vector per identity, emotion,
and pose; an embedding is the normalized sum of its three factors plus
noise. The factors are retained so tests can compute exact augmentation
targets in closed form.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, InputError
from .landmarks import BinaryLandmarkImage, LandmarkSet, N_LANDMARKS, rasterize
from .losses import sample_negatives


class SampleKey(NamedTuple):
    identity: str
    emotion: str
    pose: str


@dataclass
class FactorTruth:
    """Ground-truth factors behind a synthetic dataset."""

    alpha: float
    beta: float
    noise_sigma: float
    identity_factors: dict  # identity -> unit vector
    emotion_factors: dict
    pose_factors: dict

    def target(self, identity: str, emotion: str, pose: str) -> np.ndarray:
        """Noise-free embedding the generator would assign to this key."""
        v = (self.identity_factors[identity]
             + self.alpha * self.emotion_factors[emotion]
             + self.beta * self.pose_factors[pose])
        return v / np.linalg.norm(v)


@dataclass
class Dataset:
    """Immutable collection of embeddings and landmark sets keyed by
    (identity, emotion, pose)."""

    embeddings: dict  # SampleKey -> unit vector
    landmarks: dict   # SampleKey -> LandmarkSet
    emotion_set: tuple
    pose_set: tuple
    factor_truth: Optional[FactorTruth] = None
    image_size: int = 64
    stamp_radius: int = 1
    _image_cache: dict = field(default_factory=dict, repr=False)

    @property
    def identities(self) -> tuple:
        return tuple(sorted({k.identity for k in self.embeddings}))

    @property
    def keys(self) -> list:
        return sorted(self.embeddings)

    @property
    def embedding_dim(self) -> int:
        return len(next(iter(self.embeddings.values())))

    def image(self, key: SampleKey) -> BinaryLandmarkImage:
        """Rasterized posture image for a key (cached)."""
        if key not in self._image_cache:
            self._image_cache[key] = rasterize(
                self.landmarks[key], self.image_size, self.image_size,
                self.stamp_radius)
        return self._image_cache[key]

    def keys_for_identities(self, identities) -> list:
        wanted = set(identities)
        return [k for k in self.keys if k.identity in wanted]


# -- landmark synthesis ----------------------------------------------------

def _arc(n, cx, cy, rx, ry, a0, a1):
    angles = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(angles), cy + ry * np.sin(angles)], axis=1)


def canonical_landmark_template() -> np.ndarray:
    """A 68-point schematic face in [0,1]² (jaw, brows, nose, eyes, mouth)."""
    jaw = _arc(17, 0.5, 0.35, 0.33, 0.42, np.pi * 0.15, np.pi * 0.85)
    brow_r = _arc(5, 0.35, 0.33, 0.10, 0.03, np.pi, 0.0)
    brow_l = _arc(5, 0.65, 0.33, 0.10, 0.03, np.pi, 0.0)
    bridge = np.stack([np.full(4, 0.5), np.linspace(0.38, 0.52, 4)], axis=1)
    nostrils = np.stack([np.linspace(0.44, 0.56, 5), np.full(5, 0.56)], axis=1)
    eye_r = _arc(6, 0.36, 0.40, 0.055, 0.025, 0.0, 2 * np.pi * 5 / 6)
    eye_l = _arc(6, 0.64, 0.40, 0.055, 0.025, 0.0, 2 * np.pi * 5 / 6)
    outer_lip = _arc(12, 0.5, 0.70, 0.12, 0.05, 0.0, 2 * np.pi * 11 / 12)
    inner_lip = _arc(8, 0.5, 0.70, 0.07, 0.02, 0.0, 2 * np.pi * 7 / 8)
    pts = np.concatenate(
        [jaw, brow_r, brow_l, bridge, nostrils, eye_r, eye_l,
         outer_lip, inner_lip])
    assert pts.shape == (N_LANDMARKS, 2)
    return pts


_MOUTH = slice(48, 68)
_BROWS = slice(17, 27)


def synth_landmarks(pose_index: int, n_poses: int, emotion_index: int,
                    n_emotions: int, identity_jitter: np.ndarray) -> LandmarkSet:
    """Deterministic pose/emotion/identity deformation of the template.

    Pose acts as a yaw-like horizontal compression plus shift; emotion
    displaces mouth and brow heights; identity adds a fixed small jitter.
    """
    pts = canonical_landmark_template()
    theta = np.deg2rad(-30.0 + 60.0 * pose_index / max(n_poses - 1, 1))
    pts[:, 0] = 0.5 + (pts[:, 0] - 0.5) * np.cos(theta) + 0.12 * np.sin(theta)
    emo = emotion_index / max(n_emotions - 1, 1) - 0.5
    pts[_MOUTH, 1] += 0.05 * emo
    pts[_BROWS, 1] -= 0.03 * emo
    pts = pts + identity_jitter
    return LandmarkSet(np.clip(pts, 0.0, 1.0))


# -- synthetic generation --------------------------------------------------

def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(n_identities: int = 20, n_emotions: int = 4,
                       n_poses: int = 4, embedding_dim: int = 512,
                       noise_sigma: float = 0.05, seed: int = 0,
                       alpha: float = 0.5, beta: float = 0.5,
                       image_size: int = 64) -> Dataset:
    """Factor-structured stand-in dataset with a complete key grid."""
    for name, v in (("n_identities", n_identities), ("n_emotions", n_emotions),
                    ("n_poses", n_poses)):
        if v < 2:
            raise ConfigError(f"{name} must be at least 2, got {v}")
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    identities = [f"id{i:03d}" for i in range(n_identities)]
    emotions = [f"emo{i}" for i in range(n_emotions)]
    poses = [f"pose{i}" for i in range(n_poses)]
    u = _unit_rows(rng, n_identities, embedding_dim)
    v = _unit_rows(rng, n_emotions, embedding_dim)
    w = _unit_rows(rng, n_poses, embedding_dim)
    truth = FactorTruth(
        alpha=alpha, beta=beta, noise_sigma=noise_sigma,
        identity_factors=dict(zip(identities, u)),
        emotion_factors=dict(zip(emotions, v)),
        pose_factors=dict(zip(poses, w)))

    jitters = {ident: rng.normal(0.0, 0.008, size=(N_LANDMARKS, 2))
               for ident in identities}
    embeddings = {}
    landmark_map = {}
    for ii, ident in enumerate(identities):
        for ei, emo in enumerate(emotions):
            for pi, pose in enumerate(poses):
                key = SampleKey(ident, emo, pose)
                vec = (u[ii] + alpha * v[ei] + beta * w[pi]
                       + rng.normal(0.0, noise_sigma, size=embedding_dim))
                embeddings[key] = vec / np.linalg.norm(vec)
                landmark_map[key] = synth_landmarks(
                    pi, n_poses, ei, n_emotions, jitters[ident])
    return Dataset(embeddings=embeddings, landmarks=landmark_map,
                   emotion_set=tuple(emotions), pose_set=tuple(poses),
                   factor_truth=truth, image_size=image_size)


# -- CSV I/O ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, embedding_path, landmark_path,
                 factor_path=None):
    """Write the embedding and landmark CSVs (plus optional factor sidecar)."""
    dim = dataset.embedding_dim
    with open(embedding_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "emotion", "pose"]
                        + [f"e{i}" for i in range(dim)])
        for key in dataset.keys:
            writer.writerow(list(key) + [_fmt(x) for x in dataset.embeddings[key]])
    with open(landmark_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["identity", "emotion", "pose"]
        for i in range(N_LANDMARKS):
            header += [f"x{i}", f"y{i}"]
        writer.writerow(header)
        for key in dataset.keys:
            pts = dataset.landmarks[key].points
            writer.writerow(list(key) + [_fmt(x) for x in pts.reshape(-1)])
    if factor_path is not None and dataset.factor_truth is not None:
        t = dataset.factor_truth
        doc = {
            "alpha": t.alpha, "beta": t.beta, "noise_sigma": t.noise_sigma,
            "identity_factors": {k: list(map(float, v))
                                 for k, v in t.identity_factors.items()},
            "emotion_factors": {k: list(map(float, v))
                                for k, v in t.emotion_factors.items()},
            "pose_factors": {k: list(map(float, v))
                             for k, v in t.pose_factors.items()},
        }
        Path(factor_path).write_text(json.dumps(doc, sort_keys=True))


def load_factor_truth(factor_path) -> FactorTruth:
    doc = json.loads(Path(factor_path).read_text())
    return FactorTruth(
        alpha=doc["alpha"], beta=doc["beta"], noise_sigma=doc["noise_sigma"],
        identity_factors={k: np.array(v) for k, v in doc["identity_factors"].items()},
        emotion_factors={k: np.array(v) for k, v in doc["emotion_factors"].items()},
        pose_factors={k: np.array(v) for k, v in doc["pose_factors"].items()})


def _read_keyed_csv(path, n_value_cols_name: str):
    """Parse a keyed CSV into (header, rows of (line_no, key, floats))."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width:
                raise InputError(
                    f"{path}:{line_no}: ragged row with {len(row)} fields, "
                    f"header declares {width}")
            key = SampleKey(row[0], row[1], row[2])
            try:
                values = np.array([float(x) for x in row[3:]])
            except ValueError as exc:
                raise InputError(f"{path}:{line_no}: {exc}") from None
            rows.append((line_no, key, values))
    return header, rows


def load_dataset(embedding_path, landmark_path, factor_path=None,
                 image_size: int = 64) -> Dataset:
    """Load and join the embedding and landmark CSVs.

    Embeddings are L2-normalized on load; landmark coordinates are
    validated against the 68-point [0,1] contract.
    """
    _, emb_rows = _read_keyed_csv(embedding_path, "embedding")
    _, lm_rows = _read_keyed_csv(landmark_path, "landmark")

    embeddings = {}
    for line_no, key, values in emb_rows:
        if key in embeddings:
            raise InputError(f"{embedding_path}:{line_no}: duplicate key {key}")
        norm = np.linalg.norm(values)
        if norm == 0:
            raise InputError(f"{embedding_path}:{line_no}: zero embedding")
        embeddings[key] = values / norm
    dims = {len(v) for v in embeddings.values()}
    if len(dims) > 1:
        raise InputError(
            f"{embedding_path}: inconsistent embedding widths {sorted(dims)}")

    landmark_map = {}
    for line_no, key, values in lm_rows:
        if key in landmark_map:
            raise InputError(f"{landmark_path}:{line_no}: duplicate key {key}")
        if len(values) != 2 * N_LANDMARKS:
            raise InputError(
                f"{landmark_path}:{line_no}: expected {2 * N_LANDMARKS} "
                f"coordinates, got {len(values)}")
        try:
            landmark_map[key] = LandmarkSet(values.reshape(N_LANDMARKS, 2))
        except InputError as exc:
            raise InputError(f"{landmark_path}:{line_no}: {exc}") from None

    unjoined = set(embeddings) ^ set(landmark_map)
    if unjoined:
        sample = sorted(unjoined)[:5]
        raise InputError(
            f"{len(unjoined)} keys present in only one file, e.g. {sample}")

    emotions = tuple(sorted({k.emotion for k in embeddings}))
    poses = tuple(sorted({k.pose for k in embeddings}))
    truth = load_factor_truth(factor_path) if factor_path else None
    return Dataset(embeddings=embeddings, landmarks=landmark_map,
                   emotion_set=emotions, pose_set=poses, factor_truth=truth,
                   image_size=image_size)


# -- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_identities: tuple
    val_identities: tuple
    test_identities: tuple

    def __post_init__(self):
        groups = [set(self.train_identities), set(self.val_identities),
                  set(self.test_identities)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ConfigError("split partitions are not disjoint")


def split_by_identity(dataset: Dataset, counts, seed: int = 0) -> SplitSpec:
    """Seeded identity-disjoint partition into train/val/test."""
    identities = list(dataset.identities)
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test != len(identities):
        raise ConfigError(
            f"split counts {counts} do not sum to the identity total "
            f"{len(identities)}")
    rng = np.random.default_rng(seed)
    order = [identities[i] for i in rng.permutation(len(identities))]
    return SplitSpec(
        train_identities=tuple(sorted(order[:n_train])),
        val_identities=tuple(sorted(order[n_train:n_train + n_val])),
        test_identities=tuple(sorted(order[n_train + n_val:])))


# -- batches ---------------------------------------------------------------

@dataclass(frozen=True)
class BatchItem:
    """One training example: a base sample, a target pose, and the positive
    and negative keys realizing the objective's four terms."""

    base_key: SampleKey
    target_pose: str
    positive_key: SampleKey
    neg_pose_key: SampleKey
    neg_identity_key: SampleKey
    neg_emotion_key: SampleKey


def make_batch(dataset: Dataset, identities, batch_size: int,
               rng: np.random.Generator):
    """Sample `batch_size` triplet items from the given identity subset.

    Returns (items, skipped); infeasible draws (an (identity, emotion) slice
    with a single pose, or no eligible negative) are skipped and counted.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    pool = dataset.keys_for_identities(identities)
    if not pool:
        raise ConfigError("empty identity subset for batching")
    by_ie: dict = {}
    for k in pool:
        by_ie.setdefault((k.identity, k.emotion), []).append(k)

    items = []
    skipped = 0
    attempts = 0
    max_attempts = batch_size * 20
    while len(items) < batch_size and attempts < max_attempts:
        attempts += 1
        base = pool[rng.integers(len(pool))]
        siblings = by_ie[(base.identity, base.emotion)]
        target_poses = [k.pose for k in siblings if k.pose != base.pose]
        if not target_poses:
            skipped += 1
            continue
        target_pose = target_poses[rng.integers(len(target_poses))]
        positive = SampleKey(base.identity, base.emotion, target_pose)
        try:
            neg_pose, neg_identity, neg_emotion = sample_negatives(
                pool, base, target_pose, rng)
        except Exception:
            skipped += 1
            continue
        items.append(BatchItem(base, target_pose, positive,
                               neg_pose, neg_identity, neg_emotion))
    return items, skipped
