"""Anchor grids over the P2-P6 pyramid and anchor-to-lesion assignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import encode_boxes, iou_matrix

LEVELS = (2, 3, 4, 5, 6)


def _default_ratios():
    # (z, y, x) side multipliers: the slice extent is varied, in-plane kept square
    return [(0.5, 1.0, 1.0), (1.0, 1.0, 1.0), (2.0, 1.0, 1.0)]


@dataclass
class AnchorConfig:
    base_sizes: list[float] = field(default_factory=lambda: [16.0, 32.0, 64.0, 128.0, 256.0])
    scales: list[float] = field(default_factory=lambda: [1.0, 2 ** (1 / 3), 2 ** (2 / 3)])
    ratios: list[tuple[float, float, float]] = field(default_factory=_default_ratios)
    # per-level (z, y, x) stride in input voxels
    strides: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(s, s, s) for s in (4, 8, 16, 32, 64)]
    )

    def __post_init__(self):
        self.base_sizes = [float(b) for b in self.base_sizes]
        self.scales = [float(s) for s in self.scales]
        self.ratios = [tuple(float(v) for v in r) for r in self.ratios]
        self.strides = [tuple(int(v) for v in s) for s in self.strides]
        if len(self.base_sizes) != len(LEVELS) or len(self.strides) != len(LEVELS):
            raise ValueError(f"need one base size and stride per level {LEVELS}")
        if any(len(r) != 3 for r in self.ratios) or any(len(s) != 3 for s in self.strides):
            raise ValueError("ratios and strides are (z, y, x) triples")

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)

    def cell_shapes(self, level: int) -> np.ndarray:
        """(A, 3) anchor side lengths for one level, scale-major then ratio."""
        base = self.base_sizes[LEVELS.index(level)]
        return np.array(
            [[base * s * r for r in ratio] for s in self.scales for ratio in self.ratios], dtype=float
        )


def generate_anchors(level: int, feature_shape, config: AnchorConfig) -> np.ndarray:
    """All anchors of one pyramid level as an (A*d*h*w, 6) array.

    Centers sit at (index + 0.5) * stride per axis.  Order is voxel-major in
    (z, y, x) raster order, then scale, then ratio.  Anchors crossing the
    image border are kept unclipped.
    """
    d, h, w = (int(v) for v in feature_shape)
    if min(d, h, w) <= 0:
        raise ValueError(f"feature shape must be positive, got {feature_shape}")
    stride = np.array(config.strides[LEVELS.index(level)], dtype=float)
    sides = config.cell_shapes(level)
    grid = np.stack(np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij"), axis=-1)
    centers = (grid.reshape(-1, 3) + 0.5) * stride
    lo = centers[:, None, :] - sides[None, :, :] / 2
    hi = centers[:, None, :] + sides[None, :, :] / 2
    return np.concatenate([lo, hi], axis=2).reshape(-1, 6)


def generate_all_anchors(feature_shapes: dict[int, tuple], config: AnchorConfig) -> np.ndarray:
    """Concatenated anchors of all levels, in level order P2..P6."""
    return np.concatenate([generate_anchors(lv, feature_shapes[lv], config) for lv in LEVELS])


@dataclass
class AnchorAssignments:
    """Per-anchor labels and targets for one breast.

    ``matched`` is -1 for negatives; ``targets`` is zero for negatives.
    """

    positive: np.ndarray  # (N,) bool
    matched: np.ndarray  # (N,) int
    targets: np.ndarray  # (N, 6) float
    max_iou: np.ndarray  # (N,) float

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def match_anchors(anchors: np.ndarray, gts: np.ndarray, pos_threshold: float = 0.2) -> AnchorAssignments:
    """Single-threshold matching with one forced positive per ground truth."""
    if not 0.0 < pos_threshold < 1.0:
        raise ValueError("pos_threshold must lie in (0, 1)")
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 6)
    gts = np.asarray(gts, dtype=float).reshape(-1, 6)
    n = len(anchors)
    if len(gts) == 0:
        return AnchorAssignments(
            np.zeros(n, bool), np.full(n, -1), np.zeros((n, 6)), np.zeros(n)
        )

    ious = iou_matrix(anchors, gts)
    matched = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), matched]
    positive = max_iou >= pos_threshold

    # forced matches: visit lesions best-covered first so the outcome does not
    # depend on the order of the ground-truth list
    best = ious.max(axis=0)
    order = sorted(range(len(gts)), key=lambda j: (-best[j], tuple(gts[j])))
    forced: set[int] = set()
    for j in order:
        col = ious[:, j]
        # highest IoU, lowest anchor index among ties, skipping anchors taken already
        candidates = np.lexsort((np.arange(n), -col))
        for i in candidates:
            if i not in forced:
                break
        forced.add(int(i))
        positive[i] = True
        matched[i] = j
        max_iou[i] = col[i]

    matched = np.where(positive, matched, -1)
    targets = np.zeros((n, 6))
    if positive.any():
        targets[positive] = encode_boxes(anchors[positive], gts[matched[positive]])
    return AnchorAssignments(positive, matched, targets, max_iou)


def suggest_anchor_config(boxes: np.ndarray, strides=None) -> AnchorConfig:
    """Anchor shapes fitted to a set of lesion boxes.

    In-plane base size is twice the in-plane level stride; the slice-axis
    ratios are the median slice/in-plane extent ratio of ``boxes`` times
    {0.5, 1, 2}.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    cfg = AnchorConfig() if strides is None else AnchorConfig(strides=strides)
    size = boxes[:, 3:] - boxes[:, :3]
    z_ratio = float(np.median(size[:, 0] / np.sqrt(size[:, 1] * size[:, 2]))) if len(boxes) else 1.0
    cfg.base_sizes = [2.0 * float(np.sqrt(s[1] * s[2])) for s in cfg.strides]
    cfg.ratios = [(round(z_ratio * f, 3), 1.0, 1.0) for f in (0.5, 1.0, 2.0)]
    return cfg
