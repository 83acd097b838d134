"""Latent-space augmentation of face embeddings with controllable posture.

A face-identity embedding and an encoded facial-posture latent are fused by
a small vision-transformer network into a new unit-norm embedding that
keeps the identity and emotion of the source while adopting the target
posture. Everything runs on a minimal float64 autodiff engine with a
finite-difference gradient oracle.
"""

from .autoencoder import Autoencoder, AutoencoderConfig, bce_loss
from .combiner import Combiner, CombinerConfig, attention, multi_head
from .data import (Dataset, SampleKey, SplitSpec, generate_synthetic,
                   load_dataset, save_dataset, split_by_identity)
from .evaluate import EvalReport, LinearProbe, run_protocol, train_probe
from .landmarks import BinaryLandmarkImage, LandmarkSet, rasterize
from .losses import (LossBreakdown, sample_negatives, squared_distance,
                     total_loss, triplet_term)
from .tensor import Tensor, finite_diff_check
from .training import (FraModel, ModelConfig, TrainConfig, gradient_check,
                       load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"
