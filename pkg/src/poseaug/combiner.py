"""Fusion network: face embedding + posture latent -> augmented embedding.

The two vectors are concatenated, reshaped to a matrix, cut into patches,
and run through a stack of multi-head self-attention encoder blocks. A
fully-connected head with a learnable scale/shift and a final L2
normalization produces the unit-norm augmented embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class CombinerConfig:
    face_dim: int = 512
    pose_dim: int = 512
    patch: int = 8
    heads: int = 4
    layers: int = 4
    model_dim: int = 256
    ff_dim: int = 256
    dropout: float = 0.4
    use_positional: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        self.rows, self.cols = fuse_geometry(
            self.face_dim, self.pose_dim, self.patch)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return (self.rows // self.patch) * (self.cols // self.patch)


def fuse_geometry(face_dim: int, pose_dim: int, patch: int) -> tuple[int, int]:
    """Pick the (rows, cols) reshape for the fused vector.

    Chooses the factor pair with both extents divisible by `patch` and rows
    closest to the square root; raises with the valid options when the
    combined length cannot be laid out that way.
    """
    total = face_dim + pose_dim
    options = []
    for rows in range(patch, total + 1, patch):
        if total % rows == 0 and (total // rows) % patch == 0:
            options.append((rows, total // rows))
    if not options:
        raise ConfigError(
            f"face_dim + pose_dim = {total} has no (rows, cols) factorization "
            f"with both sides divisible by patch {patch}")
    best = min(options, key=lambda rc: abs(rc[0] - np.sqrt(total)))
    return best


def fuse(face: Tensor, pose: Tensor, rows: int, cols: int) -> Tensor:
    """Concatenate [face ‖ pose] and lay it out row-major as N×rows×cols."""
    if face.shape[-1] + pose.shape[-1] != rows * cols:
        raise ConfigError(
            f"cannot reshape {face.shape[-1]} + {pose.shape[-1]} values "
            f"into {rows}x{cols}")
    flat = T.concat([face, pose], axis=-1)
    return T.reshape(flat, (flat.shape[0], rows, cols))


def patchify(m: Tensor, patch: int) -> Tensor:
    """Split N×R×C into non-overlapping patch²-length tokens.

    Blocks are taken in row-major block order and each flattened row-major,
    giving N×(R/patch · C/patch)×patch².
    """
    n, r, c = m.shape
    if r % patch or c % patch:
        raise ConfigError(
            f"patch {patch} does not divide matrix extents {r}x{c}")
    x = T.reshape(m, (n, r // patch, patch, c // patch, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (n, (r // patch) * (c // patch), patch * patch))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(QKᵀ/√d_k)·V.

    Works on plain matrices and on stacked (batch/head) operands.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"key/value row mismatch: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    weights = T.softmax_rows(scores * Tensor(1.0 / np.sqrt(d_k)))
    return T.matmul(weights, v)


def multi_head(x: Tensor, head_projections, w_out: Tensor) -> Tensor:
    """Concat(head_1..head_h)·W^O with head_i = attention(xWq_i, xWk_i, xWv_i).

    `head_projections` is a list of (Wq, Wk, Wv) per head. This explicit
    per-head form backs the verification suite; the combiner's layers use
    the equivalent packed projections.
    """
    heads = [attention(T.matmul(x, wq), T.matmul(x, wk), T.matmul(x, wv))
             for wq, wk, wv in head_projections]
    return T.matmul(T.concat(heads, axis=-1), w_out)


def _xavier(rng: np.random.Generator, shape) -> Tensor:
    fan_in, fan_out = shape[-2], shape[-1]
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class Combiner:
    """Stack of MSA encoder blocks over fused face/pose patches."""

    def __init__(self, config: CombinerConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.patch_w = _xavier(rng, (c.patch * c.patch, c.model_dim))
        self.patch_b = Tensor(np.zeros(c.model_dim), requires_grad=True)
        self.positional = Tensor(
            rng.normal(0.0, 0.02, size=(c.n_tokens, c.model_dim)),
            requires_grad=True)
        self.blocks = []
        for _ in range(c.layers):
            self.blocks.append({
                "wq": _xavier(rng, (c.model_dim, c.model_dim)),
                "wk": _xavier(rng, (c.model_dim, c.model_dim)),
                "wv": _xavier(rng, (c.model_dim, c.model_dim)),
                "wo": _xavier(rng, (c.model_dim, c.model_dim)),
                "ff1_w": _xavier(rng, (c.model_dim, c.ff_dim)),
                "ff1_b": Tensor(np.zeros(c.ff_dim), requires_grad=True),
                "ff2_w": _xavier(rng, (c.ff_dim, c.model_dim)),
                "ff2_b": Tensor(np.zeros(c.model_dim), requires_grad=True),
            })
        self.head_w = _xavier(rng, (c.model_dim, c.face_dim))
        self.head_b = Tensor(np.zeros(c.face_dim), requires_grad=True)
        self.out_scale = Tensor(np.ones(c.face_dim), requires_grad=True)
        self.out_shift = Tensor(np.zeros(c.face_dim), requires_grad=True)

    def parameters(self) -> list:
        named = [("combiner.patch.weight", self.patch_w),
                 ("combiner.patch.bias", self.patch_b)]
        if self.config.use_positional:
            named.append(("combiner.positional", self.positional))
        for i, blk in enumerate(self.blocks):
            named += [(f"combiner.block{i}.{k}", t) for k, t in blk.items()]
        named += [("combiner.head.weight", self.head_w),
                  ("combiner.head.bias", self.head_b),
                  ("combiner.out.scale", self.out_scale),
                  ("combiner.out.shift", self.out_shift)]
        return named

    def _split_heads(self, x: Tensor) -> Tensor:
        c = self.config
        n, t, _ = x.shape
        x = T.reshape(x, (n, t, c.heads, c.head_dim))
        return T.transpose(x, (0, 2, 1, 3))  # N×h×T×d_k

    def _merge_heads(self, x: Tensor) -> Tensor:
        c = self.config
        n, h, t, dk = x.shape
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (n, t, h * dk))

    def forward(self, face: Tensor, pose: Tensor, train_mode: bool = False,
                rng: np.random.Generator | None = None,
                attention_probe: list | None = None) -> Tensor:
        """N×face_dim faces + N×pose_dim latents -> N×face_dim unit vectors.

        Dropout is active only in train_mode (requires `rng`). When
        `attention_probe` is a list, each layer's attention-weight array is
        appended to it for inspection.
        """
        c = self.config
        if face.shape[-1] != c.face_dim or pose.shape[-1] != c.pose_dim:
            raise ConfigError(
                f"input dims ({face.shape[-1]}, {pose.shape[-1]}) do not match "
                f"configured ({c.face_dim}, {c.pose_dim})")
        if train_mode and c.dropout > 0.0 and rng is None:
            raise ConfigError("train_mode dropout requires an rng")

        fused = fuse(face, pose, c.rows, c.cols)
        tokens = patchify(fused, c.patch)
        x = T.matmul(tokens, self.patch_w) + self.patch_b
        if c.use_positional:
            x = x + self.positional

        inv_sqrt_dk = Tensor(1.0 / np.sqrt(c.head_dim))
        for blk in self.blocks:
            q = self._split_heads(T.matmul(x, blk["wq"]))
            k = self._split_heads(T.matmul(x, blk["wk"]))
            v = self._split_heads(T.matmul(x, blk["wv"]))
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * inv_sqrt_dk
            weights = T.softmax_rows(scores)
            if attention_probe is not None:
                attention_probe.append(weights.data.copy())
            attended = self._merge_heads(T.matmul(weights, v))
            attended = T.matmul(attended, blk["wo"])
            if train_mode and c.dropout > 0.0:
                attended = T.dropout(attended, c.dropout, rng)
            x = x + attended

            ff = T.relu(T.matmul(x, blk["ff1_w"]) + blk["ff1_b"])
            ff = T.matmul(ff, blk["ff2_w"]) + blk["ff2_b"]
            if train_mode and c.dropout > 0.0:
                ff = T.dropout(ff, c.dropout, rng)
            x = x + ff

        pooled = T.mean(x, axis=1)
        out = pooled @ self.head_w + self.head_b
        out = out * self.out_scale + self.out_shift
        return T.l2_normalize(out, axis=-1)
