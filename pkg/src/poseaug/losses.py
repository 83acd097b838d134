"""Multi-task objective: reconstruction BCE plus three triplet terms.

The triplet terms compare the generated embedding (anchor) against the
real target embedding (positive) and three categories of negatives: same
identity/emotion with a different pose, a different identity, and the same
identity with a different emotion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

DEFAULT_MARGIN = 10.0

NORM_TOL = 1e-3


def _check_unit(x: Tensor, name: str):
    norms = np.sqrt((x.data ** 2).sum(axis=-1))
    worst = float(np.abs(norms - 1.0).max())
    if worst > NORM_TOL:
        raise ContractError(
            f"{name} is not unit-norm (max deviation {worst:.3e}); "
            "a normalization step is missing upstream")


def squared_distance(x: Tensor, y: Tensor) -> Tensor:
    """Squared Euclidean distance between unit vectors; range [0, 4].

    Batched inputs (N×D) give the per-item distances as a length-N tensor.
    """
    _check_unit(x, "left operand")
    _check_unit(y, "right operand")
    diff = x - y
    return T.sum_(diff * diff, axis=-1)


def triplet_term(anchor: Tensor, positive: Tensor, negative: Tensor,
                 margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean over the batch of max(d(a,p) - d(a,n) + margin, 0)."""
    if margin < 0:
        raise ConfigError(f"triplet margin must be nonnegative, got {margin}")
    d_ap = squared_distance(anchor, positive)
    d_an = squared_distance(anchor, negative)
    hinge = T.relu(d_ap - d_an + Tensor(margin))
    return T.mean(hinge)


@dataclass
class LossBreakdown:
    """The four objective components and their sum, as graph tensors."""

    bce: Tensor
    triplet_pose: Tensor
    triplet_identity: Tensor
    triplet_emotion: Tensor
    total: Tensor

    def values(self) -> dict:
        return {name: float(getattr(self, name).item())
                for name in ("bce", "triplet_pose", "triplet_identity",
                             "triplet_emotion", "total")}


def total_loss(anchor: Tensor, positive: Tensor, neg_pose: Tensor,
               neg_identity: Tensor, neg_emotion: Tensor,
               bce: Tensor, margin: float = DEFAULT_MARGIN) -> LossBreakdown:
    """Reconstruction BCE + the three batch-averaged triplet terms."""
    if anchor.shape[0] == 0:
        raise ContractError("total_loss requires a nonempty batch")
    t_pose = triplet_term(anchor, positive, neg_pose, margin)
    t_identity = triplet_term(anchor, positive, neg_identity, margin)
    t_emotion = triplet_term(anchor, positive, neg_emotion, margin)
    total = bce + t_pose + t_identity + t_emotion
    return LossBreakdown(bce=bce, triplet_pose=t_pose,
                         triplet_identity=t_identity,
                         triplet_emotion=t_emotion, total=total)


class SamplingError(ContractError):
    """No eligible negative candidate for a category."""


def sample_negatives(keys, anchor_key, target_pose, rng: np.random.Generator):
    """Draw the three negative keys for an anchor.

    pose negative: same identity and emotion, pose != target_pose, uniform.
    emotion negative: same identity and target pose, different emotion,
    uniform. identity negative: uniform over every key of another identity,
    regardless of its pose or emotion. Deterministic given the rng state.

    `keys` is the dataset's key collection; iteration order must be stable
    for determinism.
    """
    keys = list(keys)
    i, e = anchor_key.identity, anchor_key.emotion
    pose_pool = [k for k in keys
                 if k.identity == i and k.emotion == e and k.pose != target_pose]
    identity_pool = [k for k in keys if k.identity != i]
    emotion_pool = [k for k in keys
                    if k.identity == i and k.pose == target_pose and k.emotion != e]
    for name, pool in (("pose", pose_pool), ("identity", identity_pool),
                       ("emotion", emotion_pool)):
        if not pool:
            raise SamplingError(
                f"no eligible {name} negative for anchor {anchor_key} "
                f"with target pose {target_pose!r}")
    return (pose_pool[rng.integers(len(pose_pool))],
            identity_pool[rng.integers(len(identity_pool))],
            emotion_pool[rng.integers(len(emotion_pool))])
