"""Facial-landmark types and rasterization to binary posture images.

A landmark set is 68 (x, y) points normalized to [0,1] over the aligned
face crop. Rasterization stamps each point as a square blob onto an H×W
{0,1} grid, which downstream modules treat as the posture image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

N_LANDMARKS = 68


@dataclass(frozen=True)
class LandmarkSet:
    """Exactly 68 normalized (x, y) points, each coordinate in [0,1]."""

    points: np.ndarray  # (68, 2) float64, columns x, y

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise InputError(
                f"landmark set must have exactly {N_LANDMARKS} points, "
                f"got shape {pts.shape}")
        bad = np.nonzero((pts < 0.0) | (pts > 1.0))[0]
        if bad.size:
            i = int(bad[0])
            raise InputError(
                f"landmark {i} has coordinate outside [0,1]: {tuple(pts[i])}")
        object.__setattr__(self, "points", pts)

    def mirrored(self) -> "LandmarkSet":
        """Horizontal mirror: x -> 1 - x."""
        pts = self.points.copy()
        pts[:, 0] = 1.0 - pts[:, 0]
        return LandmarkSet(pts)


@dataclass(frozen=True)
class BinaryLandmarkImage:
    """H×W grid of {0,1} with ones at rasterized landmark positions."""

    grid: np.ndarray  # (H, W) float64 of exactly 0.0 / 1.0

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2:
            raise InputError(f"landmark image must be 2-D, got shape {g.shape}")
        if not np.all((g == 0.0) | (g == 1.0)):
            raise InputError("landmark image cells must be exactly 0 or 1")
        object.__setattr__(self, "grid", g)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


def _round_half_up(x: np.ndarray) -> np.ndarray:
    # np.round rounds half to even; mirroring symmetry needs half-up
    return np.floor(x + 0.5).astype(np.int64)


def rasterize(landmarks: LandmarkSet, height: int = 64, width: int = 64,
              radius: int = 1) -> BinaryLandmarkImage:
    """Stamp each landmark as a square of Chebyshev radius `radius`.

    A point (x, y) maps to cell (round(y*(height-1)), round(x*(width-1))),
    round-half-up in both directions; stamps are clipped at the borders.
    """
    if height < 8 or width < 8:
        raise ConfigError(
            f"image must be at least 8x8, got {height}x{width}")
    if radius < 0:
        raise ConfigError(f"stamp radius must be nonnegative, got {radius}")
    rows = _round_half_up(landmarks.points[:, 1] * (height - 1))
    cols = _round_half_up(landmarks.points[:, 0] * (width - 1))
    grid = np.zeros((height, width))
    for r, c in zip(rows, cols):
        r0, r1 = max(r - radius, 0), min(r + radius + 1, height)
        c0, c1 = max(c - radius, 0), min(c + radius + 1, width)
        grid[r0:r1, c0:c1] = 1.0
    return BinaryLandmarkImage(grid)
