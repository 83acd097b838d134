"""Convolutional autoencoder over binary landmark images.

The encoder maps an H×W posture image to a latent vector; the mirrored
decoder reconstructs the image through a final sigmoid. After training the
encoder alone supplies posture latents to the fusion network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .landmarks import BinaryLandmarkImage
from .tensor import Tensor

BCE_EPS = 1e-7


@dataclass
class AutoencoderConfig:
    image_size: int = 64
    latent_dim: int = 512
    channels: tuple = (8, 16, 32)
    kernel: int = 4
    stride: int = 2

    def __post_init__(self):
        # pad = (k - s) / 2 makes stride-s conv shrink extents by exactly s
        # and the mirrored transposed conv restore them exactly
        if (self.kernel - self.stride) % 2 != 0:
            raise ConfigError(
                f"kernel {self.kernel} minus stride {self.stride} must be "
                "even for symmetric padding")
        size = self.image_size
        for _ in self.channels:
            if size % self.stride != 0:
                raise ConfigError(
                    f"image size {self.image_size} not divisible by stride "
                    f"{self.stride} across {len(self.channels)} layers")
            size //= self.stride
        if size < 1:
            raise ConfigError("too many stride-2 layers for this image size")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")

    @property
    def padding(self) -> int:
        return (self.kernel - self.stride) // 2

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // self.stride ** len(self.channels)

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * self.bottleneck_size ** 2


def _he_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    scale = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _small_bias(rng: np.random.Generator, n: int) -> Tensor:
    return Tensor(rng.normal(0.0, 0.01, size=n), requires_grad=True)


class Autoencoder:
    """Stride-2 conv encoder + transposed-conv decoder, sigmoid output."""

    def __init__(self, config: AutoencoderConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.enc_kernels = []
        self.enc_biases = []
        c_prev = 1
        for c_out in c.channels:
            self.enc_kernels.append(_he_init(
                rng, (c_out, c_prev, c.kernel, c.kernel),
                fan_in=c_prev * c.kernel ** 2))
            # tiny random bias keeps ReLU pre-activations off the exact
            # kink for all-zero input patches (finite differences break there)
            self.enc_biases.append(_small_bias(rng, c_out))
            c_prev = c_out
        self.enc_w = _he_init(rng, (c.flat_dim, c.latent_dim), fan_in=c.flat_dim)
        self.enc_b = Tensor(np.zeros(c.latent_dim), requires_grad=True)

        self.dec_w = _he_init(rng, (c.latent_dim, c.flat_dim), fan_in=c.latent_dim)
        self.dec_b = Tensor(np.zeros(c.flat_dim), requires_grad=True)
        self.dec_kernels = []
        self.dec_biases = []
        chans = list(c.channels[::-1]) + [1]
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            self.dec_kernels.append(_he_init(
                rng, (c_in, c_out, c.kernel, c.kernel),
                fan_in=c_in * c.kernel ** 2))
            self.dec_biases.append(_small_bias(rng, c_out))

    def parameters(self) -> list:
        named = []
        for i, (k, b) in enumerate(zip(self.enc_kernels, self.enc_biases)):
            named += [(f"ae.enc{i}.kernel", k), (f"ae.enc{i}.bias", b)]
        named += [("ae.enc_fc.weight", self.enc_w), ("ae.enc_fc.bias", self.enc_b),
                  ("ae.dec_fc.weight", self.dec_w), ("ae.dec_fc.bias", self.dec_b)]
        for i, (k, b) in enumerate(zip(self.dec_kernels, self.dec_biases)):
            named += [(f"ae.dec{i}.kernel", k), (f"ae.dec{i}.bias", b)]
        return named

    # -- forward paths ----------------------------------------------------
    def encode_batch(self, images: Tensor) -> Tensor:
        """N×1×H×W image batch -> N×latent_dim latents."""
        c = self.config
        if images.shape[2:] != (c.image_size, c.image_size):
            raise ConfigError(
                f"image size {images.shape[2:]} does not match configured "
                f"{c.image_size}x{c.image_size}")
        x = images
        for kern, bias in zip(self.enc_kernels, self.enc_biases):
            x = T.conv2d(x, kern, stride=c.stride, padding=c.padding)
            x = T.relu(x + T.reshape(bias, (1, bias.shape[0], 1, 1)))
        x = T.reshape(x, (x.shape[0], c.flat_dim))
        return x @ self.enc_w + self.enc_b

    def decode_batch(self, latents: Tensor) -> Tensor:
        """N×latent_dim latents -> N×1×H×W reconstructions in (0,1)."""
        c = self.config
        if latents.shape[-1] != c.latent_dim:
            raise ConfigError(
                f"latent length {latents.shape[-1]} does not match "
                f"configured {c.latent_dim}")
        x = T.relu(latents @ self.dec_w + self.dec_b)
        x = T.reshape(x, (latents.shape[0], c.channels[-1],
                          c.bottleneck_size, c.bottleneck_size))
        last = len(self.dec_kernels) - 1
        for i, (kern, bias) in enumerate(zip(self.dec_kernels, self.dec_biases)):
            x = T.conv_transpose2d(x, kern, stride=c.stride,
                                   padding=c.padding)
            x = x + T.reshape(bias, (1, bias.shape[0], 1, 1))
            x = T.sigmoid(x) if i == last else T.relu(x)
        return x

    def encode(self, image: BinaryLandmarkImage) -> np.ndarray:
        """Posture latent for a single image (inference, no gradients)."""
        batch = Tensor(image.grid.reshape(1, 1, *image.grid.shape))
        return self.encode_batch(batch).data[0].copy()

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Reconstructed real-valued image for a single latent."""
        out = self.decode_batch(Tensor(latent.reshape(1, -1)))
        return out.data[0, 0].copy()


def images_to_batch(images) -> Tensor:
    """Stack BinaryLandmarkImages into an N×1×H×W input tensor."""
    grids = np.stack([im.grid for im in images])[:, None, :, :]
    return Tensor(grids)


def bce_loss(reconstruction: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between a reconstruction and a {0,1} target.

    Predictions are clamped to [eps, 1-eps] before the logs.
    """
    target = np.asarray(target, dtype=np.float64)
    if reconstruction.shape != target.shape:
        raise ContractError(
            f"bce_loss shape mismatch: reconstruction {reconstruction.shape} "
            f"vs target {target.shape}")
    p = T.clip(reconstruction, BCE_EPS, 1.0 - BCE_EPS)
    y = Tensor(target)
    losses = -(y * T.log(p) + (1.0 - y) * T.log(1.0 - p))
    return T.mean(losses)
