"""Study bookkeeping shared by the phantom corpus, training and the CLI."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox3D, LesionAnnotation
from .io import read_volume

SIDES = ("left", "right")


@dataclass
class BreastRecord:
    breast_id: str
    side: str
    annotations: list[LesionAnnotation] = field(default_factory=list)
    tensor_path: str | None = None
    crop_origin: tuple[int, int, int] = (0, 0, 0)
    # in-memory tensor; takes precedence over tensor_path and is never serialized
    data: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def is_normal(self) -> bool:
        return not self.annotations

    def load(self, root: Path | None = None) -> np.ndarray:
        if self.data is not None:
            return self.data
        if self.tensor_path is None:
            raise FileNotFoundError(f"breast {self.breast_id} has no tensor")
        path = Path(self.tensor_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        return read_volume(path)[0]

    def boxes_in_crop(self, categories=None) -> np.ndarray:
        """Annotation boxes in tensor coordinates as an (n, 6) array."""
        shift = np.array(self.crop_origin * 2, dtype=float)
        boxes = [
            a.box.to_array() - shift
            for a in self.annotations
            if categories is None or a.category in categories
        ]
        return np.array(boxes, dtype=float).reshape(-1, 6)

    def to_dict(self) -> dict:
        return {
            "breast_id": self.breast_id,
            "side": self.side,
            "tensor_path": self.tensor_path,
            "crop_origin": list(self.crop_origin),
            "annotations": [
                {"min": list(a.box.min_corner), "max": list(a.box.max_corner), "category": a.category.value}
                for a in self.annotations
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, patient_id: str = "", study_id: str = "") -> "BreastRecord":
        anns = [
            LesionAnnotation(BoundingBox3D(tuple(a["min"]), tuple(a["max"])), a["category"],
                             d["breast_id"], patient_id, study_id)
            for a in d.get("annotations", [])
        ]
        return cls(d["breast_id"], d["side"], anns, d.get("tensor_path"), tuple(d.get("crop_origin", (0, 0, 0))))


@dataclass
class StudyRecord:
    patient_id: str
    study_id: str
    date: dt.date
    breasts: dict[str, BreastRecord]

    def __post_init__(self):
        if isinstance(self.date, str):
            self.date = dt.date.fromisoformat(self.date)
        if set(self.breasts) != set(SIDES):
            raise ValueError(f"study {self.study_id} must have both breasts, got {sorted(self.breasts)}")

    @property
    def annotations(self) -> list[LesionAnnotation]:
        return [a for side in SIDES for a in self.breasts[side].annotations]

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "study_id": self.study_id,
            "date": self.date.isoformat(),
            "breasts": {s: self.breasts[s].to_dict() for s in SIDES},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyRecord":
        breasts = {
            s: BreastRecord.from_dict(b, d["patient_id"], d["study_id"]) for s, b in d["breasts"].items()
        }
        return cls(d["patient_id"], d["study_id"], d["date"], breasts)


def all_breasts(studies) -> list[BreastRecord]:
    return [s.breasts[side] for s in studies for side in SIDES]
