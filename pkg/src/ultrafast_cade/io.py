"""File formats.

Volumes are stored as a raw little-endian float32 file ``<stem>.raw`` next to
a JSON sidecar ``<stem>.json`` holding at least ``shape``; series sidecars
also carry ``spacing_mm`` and ``time_index``.

Detections and annotations are JSON lines with keys ``breast_id``, ``min``,
``max`` (z, y, x) and either ``score`` or ``category``.  An annotation line
without ``min``/``max`` declares a breast that has no lesions.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import BoundingBox3D, Detection, LesionAnnotation


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".raw", ".json") else path


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_volume(path, data: np.ndarray, **meta) -> Path:
    """Write ``data`` as raw float32 plus sidecar; returns the stem path."""
    stem = _stem(path)
    arr = np.ascontiguousarray(data, dtype="<f4")
    atomic_write_bytes(stem.with_suffix(".raw"), arr.tobytes())
    write_json(stem.with_suffix(".json"), {"shape": list(arr.shape), **meta})
    return stem


def read_volume(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    meta = read_json(stem.with_suffix(".json"))
    data = np.fromfile(stem.with_suffix(".raw"), dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{stem}.raw holds {data.size} values, sidecar shape is {shape}")
    return data.reshape(shape).astype(np.float32), meta


def _box_json(box: BoundingBox3D) -> dict:
    return {"min": list(box.min_corner), "max": list(box.max_corner)}


def detections_to_jsonl(dets: Iterable[Detection]) -> str:
    return "".join(
        json.dumps({"breast_id": d.breast_id, **_box_json(d.box), "score": d.score}) + "\n"
        for d in dets
    )


def write_detections(path, dets: Iterable[Detection]) -> None:
    atomic_write_bytes(path, detections_to_jsonl(dets).encode())


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                box = BoundingBox3D(tuple(rec["min"]), tuple(rec["max"]))
                out.append(Detection(box, float(rec["score"]), str(rec["breast_id"])))
    return out


def write_annotations(path, annotations: Iterable[LesionAnnotation], breast_ids: Iterable[str] = ()) -> None:
    """Write lesion lines, then one declaration line per lesion-free breast."""
    annotations = list(annotations)
    lines = []
    for a in annotations:
        rec = {"breast_id": a.breast_id, **_box_json(a.box), "category": a.category.value}
        if a.patient_id:
            rec["patient_id"] = a.patient_id
        if a.study_id:
            rec["study_id"] = a.study_id
        lines.append(json.dumps(rec))
    with_lesions = {a.breast_id for a in annotations}
    for b in breast_ids:
        if b not in with_lesions:
            lines.append(json.dumps({"breast_id": b}))
            with_lesions.add(b)
    atomic_write_bytes(path, "".join(line + "\n" for line in lines).encode())


def read_annotations(path) -> tuple[list[LesionAnnotation], list[str]]:
    """Returns (lesions, all breast ids in file order)."""
    lesions, breasts = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            bid = str(rec["breast_id"])
            if bid not in breasts:
                breasts.append(bid)
            if "min" in rec:
                box = BoundingBox3D(tuple(rec["min"]), tuple(rec["max"]))
                lesions.append(
                    LesionAnnotation(
                        box, rec["category"], bid, rec.get("patient_id", ""), rec.get("study_id", "")
                    )
                )
    return lesions, breasts
