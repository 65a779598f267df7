"""SimCC coordinate-classification codec.

Keypoints are encoded as two 1-D label distributions, one over horizontal
bins and one over vertical bins, with ``split_ratio`` bins per pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

PART_GROUPS = ("body", "foot", "face", "hand")


class CodecError(ValueError):
    """Raised for malformed codec inputs (non-finite coords, bad shapes)."""


@dataclass(frozen=True)
class SimCCConfig:
    input_width: int = 64
    input_height: int = 64
    split_ratio: float = 2.0
    label_sigma: float = 6.0

    def __post_init__(self):
        if self.split_ratio <= 0:
            raise CodecError(f"split_ratio must be > 0, got {self.split_ratio}")
        if self.label_sigma <= 0:
            raise CodecError(f"label_sigma must be > 0, got {self.label_sigma}")
        if self.bins_x < 2 or self.bins_y < 2:
            raise CodecError("each axis needs at least 2 bins")

    @property
    def bins_x(self) -> int:
        return int(round(self.input_width * self.split_ratio))

    @property
    def bins_y(self) -> int:
        return int(round(self.input_height * self.split_ratio))


class SimCCTarget(NamedTuple):
    """Label distributions; leading dims are (..., K, L)."""

    x_labels: np.ndarray
    y_labels: np.ndarray


class PoseLogits(NamedTuple):
    """Raw head scores (or their row-softmax) over x and y bins."""

    x: object
    y: object


@dataclass
class KeypointSet:
    """Keypoints of one instance in input-image pixel space.

    visibility follows the COCO convention: 0 unlabeled, 1 occluded,
    2 visible.
    """

    coords: np.ndarray
    visibility: np.ndarray
    part_group: Sequence[str] = field(default_factory=tuple)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if len(self.visibility) != len(self.coords):
            raise CodecError("coords and visibility disagree on K")
        if not set(np.unique(self.visibility)).issubset({0, 1, 2}):
            raise CodecError("visibility flags must be in {0, 1, 2}")
        if self.part_group and len(self.part_group) != len(self.coords):
            raise CodecError("part_group must assign every keypoint")
        bad = set(self.part_group) - set(PART_GROUPS)
        if bad:
            raise CodecError(f"unknown part groups {sorted(bad)}")

    @property
    def num_keypoints(self) -> int:
        return len(self.coords)


def _gaussian_rows(centers: np.ndarray, num_bins: int, sigma: float) -> np.ndarray:
    # log-space so a tiny sigma degenerates to a delta instead of 0/0
    bins = np.arange(num_bins, dtype=np.float64)
    logp = -((bins[None, :] - centers[:, None]) ** 2) / (2.0 * sigma**2)
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def center_bins(coords: np.ndarray, cfg: SimCCConfig) -> np.ndarray:
    """Nearest bin index per keypoint and axis, shape (K, 2)."""
    return np.floor(np.asarray(coords, dtype=np.float64) * cfg.split_ratio + 0.5).astype(np.int64)


def encode(kps: KeypointSet, cfg: SimCCConfig) -> tuple[SimCCTarget, np.ndarray]:
    """Encode one instance into SimCC targets and its visibility-weight row.

    A keypoint gets weight 1 iff it is labeled (v in {1, 2}) and its center
    bin falls inside both axes; otherwise weight 0 and all-zero label rows.
    """
    coords = kps.coords
    if not np.all(np.isfinite(coords)):
        raise CodecError("keypoint coordinates must be finite")
    mu = coords * cfg.split_ratio
    center = center_bins(coords, cfg)
    inside = (
        (center[:, 0] >= 0)
        & (center[:, 0] < cfg.bins_x)
        & (center[:, 1] >= 0)
        & (center[:, 1] < cfg.bins_y)
    )
    weights = ((kps.visibility > 0) & inside).astype(np.float64)
    x_labels = _gaussian_rows(mu[:, 0], cfg.bins_x, cfg.label_sigma) * weights[:, None]
    y_labels = _gaussian_rows(mu[:, 1], cfg.bins_y, cfg.label_sigma) * weights[:, None]
    return SimCCTarget(x_labels, y_labels), weights


def _softmax_max(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).max(axis=-1)


def decode(logits: PoseLogits, cfg: SimCCConfig) -> tuple[np.ndarray, np.ndarray]:
    """Turn per-axis scores of shape (..., K, L) into pixel coords and scores.

    argmax ties resolve to the lowest bin index.
    """
    lx = _as_numpy(logits.x)
    ly = _as_numpy(logits.y)
    if lx.shape[-1] != cfg.bins_x or ly.shape[-1] != cfg.bins_y:
        raise CodecError(
            f"logit widths {lx.shape[-1]}/{ly.shape[-1]} do not match "
            f"configured bins {cfg.bins_x}/{cfg.bins_y}"
        )
    if lx.shape[:-1] != ly.shape[:-1]:
        raise CodecError("x and y logits disagree on leading dims")
    x = np.argmax(lx, axis=-1) / cfg.split_ratio
    y = np.argmax(ly, axis=-1) / cfg.split_ratio
    coords = np.stack([x, y], axis=-1).astype(np.float64)
    scores = 0.5 * (_softmax_max(lx) + _softmax_max(ly))
    return coords, scores


def _as_numpy(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)
