"""3D box primitives shared by the detector and the evaluation code.

Axis order is (z, y, x) = (slice, row, column) everywhere in this package.
Boxes are half-open continuous regions: voxel (i, j, k) occupies
[i, i+1) x [j, j+1) x [k, k+1), so a box around a single voxel at the origin
is (0, 0, 0)-(1, 1, 1).

Array form of a box set is an (N, 6) float array laid out as
``[z0, y0, x0, z1, y1, x1]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

# decoded log side ratios are clamped to this range before exponentiation
LOG_RATIO_CLAMP = 4.0


class InvalidInputError(ValueError):
    pass


Vec3 = tuple[float, float, float]


def _vec3(values) -> Vec3:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise InvalidInputError(f"expected 3 coordinates, got {len(out)}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class BoundingBox3D:
    """Axis-aligned box with strictly positive extent on every axis."""

    min_corner: Vec3
    max_corner: Vec3

    def __post_init__(self):
        lo = _vec3(self.min_corner)
        hi = _vec3(self.max_corner)
        if not all(math.isfinite(v) for v in lo + hi):
            raise InvalidInputError(f"non-finite box corners {lo}, {hi}")
        if not all(l < h for l, h in zip(lo, hi)):
            raise InvalidInputError(f"degenerate box {lo}-{hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox3D":
        arr = np.asarray(arr, dtype=float).ravel()
        return cls(tuple(arr[:3]), tuple(arr[3:6]))

    @classmethod
    def from_center_size(cls, center, size) -> "BoundingBox3D":
        c = np.asarray(center, dtype=float)
        s = np.asarray(size, dtype=float)
        return cls(tuple(c - s / 2), tuple(c + s / 2))

    def to_array(self) -> np.ndarray:
        return np.array(self.min_corner + self.max_corner, dtype=float)

    @property
    def size(self) -> Vec3:
        return tuple(h - l for l, h in zip(self.min_corner, self.max_corner))  # type: ignore[return-value]

    @property
    def center(self) -> Vec3:
        return tuple((l + h) / 2 for l, h in zip(self.min_corner, self.max_corner))  # type: ignore[return-value]

    @property
    def volume(self) -> float:
        return math.prod(self.size)

    def translated(self, offset) -> "BoundingBox3D":
        off = _vec3(offset)
        return BoundingBox3D(
            tuple(v + o for v, o in zip(self.min_corner, off)),
            tuple(v + o for v, o in zip(self.max_corner, off)),
        )


class Category(str, enum.Enum):
    MALIGNANT = "malignant"
    BENIGN_BIOPSIED = "benign-biopsied"
    BENIGN_FOLLOWUP = "benign-followup"

    @property
    def is_benign(self) -> bool:
        return self is not Category.MALIGNANT


@dataclass(frozen=True)
class Detection:
    box: BoundingBox3D
    score: float
    breast_id: str

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class LesionAnnotation:
    box: BoundingBox3D
    category: Category
    breast_id: str
    patient_id: str = ""
    study_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "category", Category(self.category))


class BoxOffsets(NamedTuple):
    """Anchor-relative regression target.

    Center offsets are normalized by the anchor side lengths; the last three
    entries are log ratios of box to anchor side lengths.
    """

    dz: float
    dy: float
    dx: float
    log_dz: float
    log_dy: float
    log_dx: float


def iou3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    inter = 1.0
    for lo_a, hi_a, lo_b, hi_b in zip(a.min_corner, a.max_corner, b.min_corner, b.max_corner):
        side = min(hi_a, hi_b) - max(lo_a, lo_b)
        if side <= 0:
            return 0.0
        inter *= side
    return inter / (a.volume + b.volume - inter)


def _check_boxes(boxes: np.ndarray, name: str) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    if not np.all(boxes[:, 3:] > boxes[:, :3]):
        raise InvalidInputError(f"{name} contains degenerate boxes")
    return boxes


def box_volumes(boxes: np.ndarray) -> np.ndarray:
    return np.prod(boxes[:, 3:] - boxes[:, :3], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 6) and (M, 6) box arrays -> (N, M)."""
    a = _check_boxes(a, "a")
    b = _check_boxes(b, "b")
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=2)
    union = box_volumes(a)[:, None] + box_volumes(b)[None, :] - inter
    return inter / union


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression on arrays; returns kept indices in output order.

    Ordering is score-descending with ties broken by lexicographic min corner.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    scores = np.asarray(scores, dtype=float).ravel()
    if len(scores) == 0:
        return np.zeros(0, dtype=int)
    # lexsort uses the last key as primary
    order = np.lexsort((boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))
    boxes = boxes[order]
    vols = box_volumes(boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        rest = np.arange(i + 1, len(order))
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            continue
        lo = np.maximum(boxes[i, :3], boxes[rest, :3])
        hi = np.minimum(boxes[i, 3:], boxes[rest, 3:])
        inter = np.prod(np.clip(hi - lo, 0.0, None), axis=1)
        iou = inter / (vols[i] + vols[rest] - inter)
        suppressed[rest[iou > iou_threshold]] = True
    return np.asarray(keep, dtype=int)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Score-descending greedy non-maximum suppression.

    A detection is suppressed when its IoU with an already kept detection
    exceeds ``iou_threshold``.
    """
    if not dets:
        return []
    scores = np.array([d.score for d in dets], dtype=float)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("non-finite detection scores")
    boxes = np.stack([d.box.to_array() for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized encoder: (N, 6) anchors and matched boxes -> (N, 6) offsets."""
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 6)
    gts = np.asarray(gts, dtype=float).reshape(-1, 6)
    a_size = anchors[:, 3:] - anchors[:, :3]
    g_size = gts[:, 3:] - gts[:, :3]
    a_ctr = anchors[:, :3] + 0.5 * a_size
    g_ctr = gts[:, :3] + 0.5 * g_size
    return np.concatenate([(g_ctr - a_ctr) / a_size, np.log(g_size / a_size)], axis=1)


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 6)
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 6)
    if not np.all(np.isfinite(offsets)):
        raise InvalidInputError("non-finite box offsets")
    a_size = anchors[:, 3:] - anchors[:, :3]
    a_ctr = anchors[:, :3] + 0.5 * a_size
    ctr = a_ctr + offsets[:, :3] * a_size
    size = a_size * np.exp(np.clip(offsets[:, 3:], -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    return np.concatenate([ctr - 0.5 * size, ctr + 0.5 * size], axis=1)


def encode_box(anchor: BoundingBox3D, gt: BoundingBox3D) -> BoxOffsets:
    return BoxOffsets(*encode_boxes(anchor.to_array(), gt.to_array())[0])


def decode_box(anchor: BoundingBox3D, offsets: BoxOffsets | Sequence[float]) -> BoundingBox3D:
    return BoundingBox3D.from_array(decode_boxes(anchor.to_array(), np.asarray(offsets, dtype=float)))
