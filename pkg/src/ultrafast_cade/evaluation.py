"""Lesion-level FROC evaluation with false positives counted on normal breasts.

A breast with at least one annotation never contributes false positives:
detections there that hit no lesion are ignored.  All bootstrap statistics
resample cases (studies), each carrying both of its breasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Category, Detection, LesionAnnotation, iou3d

CPM_POINTS = (1 / 8, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 8.0)
METRICS = ("detection_rate", "sensitivity", "benign_detection_rate")

TP, FP, IGNORED = "true-positive", "false-positive", "ignored"


class EvaluationError(ValueError):
    pass


def metric_includes(metric: str, category: Category) -> bool:
    if metric == "detection_rate":
        return True
    if metric == "sensitivity":
        return category is Category.MALIGNANT
    if metric == "benign_detection_rate":
        return category.is_benign
    raise EvaluationError(f"unknown metric {metric!r}; choose from {METRICS}")


def overlap(det_box, gt_box, criterion: str = "iou") -> float:
    if criterion == "iou":
        return iou3d(det_box, gt_box)
    if criterion == "iogt":
        inter = 1.0
        for lo_a, hi_a, lo_b, hi_b in zip(det_box.min_corner, det_box.max_corner, gt_box.min_corner,
                                          gt_box.max_corner):
            inter *= max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
        return inter / gt_box.volume
    raise EvaluationError(f"unknown overlap criterion {criterion!r}")


def case_id(breast_id: str) -> str:
    """Default breast -> case mapping: the part before the last '/'."""
    return breast_id.rsplit("/", 1)[0]


@dataclass
class MatchResult:
    lesion_hit: list[bool]
    lesion_match: list[int]  # index into the detection list, -1 if missed
    disposition: list[str]  # per detection: TP, FP or IGNORED
    detection_lesion: list[int]  # lesion index for TP detections, else -1
    n_normal: int


def _detection_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.min_corner, i))


def match_detections(dets: Sequence[Detection], annotations: Sequence[LesionAnnotation],
                     breast_ids: Iterable[str] | None = None, overlap_threshold: float = 0.2,
                     criterion: str = "iou") -> MatchResult:
    """Greedy matching, highest score first.

    Each detection takes the unmatched lesion on its breast with the largest
    overlap >= ``overlap_threshold``.  ``breast_ids`` is the breast universe;
    breasts absent from ``annotations`` are normal.
    """
    breasts = set(breast_ids) if breast_ids is not None else set()
    breasts |= {a.breast_id for a in annotations}
    for d in dets:
        if d.breast_id not in breasts:
            raise EvaluationError(f"detection on unknown breast {d.breast_id!r}")
    by_breast: dict[str, list[int]] = {}
    for j, a in enumerate(annotations):
        by_breast.setdefault(a.breast_id, []).append(j)

    lesion_match = [-1] * len(annotations)
    disposition = [IGNORED] * len(dets)
    det_lesion = [-1] * len(dets)
    for i in _detection_order(dets):
        d = dets[i]
        lesions = by_breast.get(d.breast_id, [])
        if not lesions:
            disposition[i] = FP
            continue
        best, best_ov = -1, -1.0
        for j in lesions:
            if lesion_match[j] >= 0:
                continue
            ov = overlap(d.box, annotations[j].box, criterion)
            if ov >= overlap_threshold and ov > best_ov:
                best, best_ov = j, ov
        if best >= 0:
            lesion_match[best] = i
            disposition[i] = TP
            det_lesion[i] = best
    n_normal = len(breasts - set(by_breast))
    return MatchResult([m >= 0 for m in lesion_match], lesion_match, disposition, det_lesion, n_normal)


@dataclass
class FrocCurve:
    fp: np.ndarray  # false positives per normal breast, nondecreasing
    value: np.ndarray  # metric value, nondecreasing
    metric: str
    thresholds: np.ndarray  # score threshold of each point (inf for the empty start)
    hits: np.ndarray  # integer hit counts of the metric subset
    fp_count: np.ndarray
    n_lesions: int
    n_normal: int

    def value_at(self, fp: float) -> float:
        """Step interpolation: best value among points with fp <= the request."""
        k = np.searchsorted(self.fp, fp + 1e-12, side="right")
        return float(self.value[:k].max()) if k else 0.0

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "n_lesions": self.n_lesions,
            "n_normal": self.n_normal,
            "points": [
                {"fp": float(f), "value": float(v), "threshold": float(t), "hits": int(h), "fp_count": int(c)}
                for f, v, t, h, c in zip(self.fp, self.value, self.thresholds, self.hits, self.fp_count)
            ],
        }


def froc(dets: Sequence[Detection], annotations: Sequence[LesionAnnotation], breast_ids: Iterable[str],
         metric: str = "detection_rate", overlap_threshold: float = 0.2, criterion: str = "iou",
         match: MatchResult | None = None) -> FrocCurve:
    """Sweep all distinct score thresholds from high to low.

    The first point (threshold +inf) is (0, 0).  An empty lesion subset gives
    value 0 everywhere.
    """
    match = match or match_detections(dets, annotations, breast_ids, overlap_threshold, criterion)
    if match.n_normal == 0:
        raise EvaluationError("no normal breasts: false positives per normal breast is undefined")
    in_subset = [metric_includes(metric, a.category) for a in annotations]
    n_subset = sum(in_subset)
    order = _detection_order(dets)
    scores = np.array([dets[i].score for i in order], dtype=float)
    is_fp = np.array([match.disposition[i] == FP for i in order], dtype=int)
    is_hit = np.array(
        [match.detection_lesion[i] >= 0 and in_subset[match.detection_lesion[i]] for i in order], dtype=int
    )
    cum_fp = np.cumsum(is_fp)
    cum_hit = np.cumsum(is_hit)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True]) if len(scores) else np.zeros(0, int)
    fp_count = np.r_[0, cum_fp[ends]].astype(int)
    hits = np.r_[0, cum_hit[ends]].astype(int)
    values = hits / n_subset if n_subset else np.zeros(len(hits))
    return FrocCurve(
        fp=fp_count / match.n_normal,
        value=values.astype(float),
        metric=metric,
        thresholds=np.r_[np.inf, scores[ends]],
        hits=hits,
        fp_count=fp_count,
        n_lesions=n_subset,
        n_normal=match.n_normal,
    )


def cpm(curve: FrocCurve, points: Sequence[float] = CPM_POINTS) -> float:
    return float(np.mean([curve.value_at(f) for f in points]))


@dataclass
class EvaluationRun:
    """Detections of one system over a case universe."""

    detections: list[Detection]
    annotations: list[LesionAnnotation]
    breast_ids: list[str]
    breast_case: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = list(dict.fromkeys(list(self.breast_ids) + [a.breast_id for a in self.annotations]))
        self.breast_ids = ids
        self.breast_case = {b: self.breast_case.get(b, case_id(b)) for b in ids}

    @property
    def cases(self) -> list[str]:
        return sorted(set(self.breast_case.values()))


@dataclass
class _Prepared:
    """Matched run flattened to arrays for weighted (resampled) FROC evaluation."""

    scores: np.ndarray  # detections in evaluation order
    det_case: np.ndarray
    det_fp: np.ndarray
    det_lesion: np.ndarray
    lesion_case: np.ndarray
    lesion_cat: list[Category]
    normal_case: np.ndarray  # case index of each normal breast
    n_cases: int


def _prepare(run: EvaluationRun, overlap_threshold: float, criterion: str, cases: list[str]) -> _Prepared:
    match = match_detections(run.detections, run.annotations, run.breast_ids, overlap_threshold, criterion)
    cidx = {c: i for i, c in enumerate(cases)}
    order = _detection_order(run.detections)
    dets = run.detections
    lesion_breasts = {a.breast_id for a in run.annotations}
    return _Prepared(
        scores=np.array([dets[i].score for i in order], dtype=float),
        det_case=np.array([cidx[run.breast_case[dets[i].breast_id]] for i in order], dtype=int),
        det_fp=np.array([match.disposition[i] == FP for i in order], dtype=bool),
        det_lesion=np.array([match.detection_lesion[i] for i in order], dtype=int),
        lesion_case=np.array([cidx[run.breast_case[a.breast_id]] for a in run.annotations], dtype=int),
        lesion_cat=[a.category for a in run.annotations],
        normal_case=np.array(
            [cidx[run.breast_case[b]] for b in run.breast_ids if b not in lesion_breasts], dtype=int
        ),
        n_cases=len(cases),
    )


def _weighted_curve(prep: _Prepared, weights: np.ndarray, metric: str) -> tuple[np.ndarray, np.ndarray]:
    in_subset = np.array([metric_includes(metric, c) for c in prep.lesion_cat], dtype=bool)
    n_normal = weights[prep.normal_case].sum()
    n_subset = weights[prep.lesion_case[in_subset]].sum()
    w = weights[prep.det_case].astype(float)
    hit = np.zeros(len(w), dtype=bool)
    tp = prep.det_lesion >= 0
    hit[tp] = in_subset[prep.det_lesion[tp]]
    cum_fp = np.cumsum(w * prep.det_fp)
    cum_hit = np.cumsum(w * hit)
    s = prep.scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True]) if len(s) else np.zeros(0, int)
    fp = np.r_[0.0, cum_fp[ends]] / n_normal
    val = np.r_[0.0, cum_hit[ends]] / n_subset
    return fp, val


def _values_at(fp: np.ndarray, val: np.ndarray, points) -> np.ndarray:
    k = np.searchsorted(fp, np.asarray(points, dtype=float) + 1e-12, side="right")
    # val is nondecreasing, so the max over the prefix is its last element
    return np.where(k > 0, val[np.maximum(k - 1, 0)], 0.0)


def _valid_resample(prep: _Prepared, weights: np.ndarray, metric: str) -> bool:
    in_subset = np.array([metric_includes(metric, c) for c in prep.lesion_cat], dtype=bool)
    return weights[prep.normal_case].sum() > 0 and weights[prep.lesion_case[in_subset]].sum() > 0


def resample_weights(prep: _Prepared, n: int, seed: int, metric: str):
    """Yields case multiplicities of ``n`` valid bootstrap resamples.

    A resample without normal breasts or without lesions of the metric's
    subset is redrawn from the same generator.
    """
    rng = np.random.default_rng(seed)
    for _ in range(n):
        while True:
            idx = rng.integers(0, prep.n_cases, size=prep.n_cases)
            w = np.bincount(idx, minlength=prep.n_cases)
            if _valid_resample(prep, w, metric):
                break
        yield idx, w


def _shared_cases(run_a: EvaluationRun, run_b: EvaluationRun) -> list[str]:
    if run_a.breast_case != run_b.breast_case:
        raise EvaluationError("runs do not share the same case universe")
    return run_a.cases


@dataclass
class BootstrapResult:
    cpm_a: float
    cpm_b: float
    p: float
    deltas: np.ndarray

    @property
    def significant(self) -> bool:
        return self.p <= 0.05

    def to_dict(self) -> dict:
        return {"cpm_a": self.cpm_a, "cpm_b": self.cpm_b, "p": self.p, "n": int(len(self.deltas))}


def bootstrap_compare(run_a: EvaluationRun, run_b: EvaluationRun, n: int = 1000, seed: int = 0,
                      metric: str = "detection_rate", overlap_threshold: float = 0.2,
                      criterion: str = "iou") -> BootstrapResult:
    """p = fraction of case resamples with CPM_a - CPM_b <= 0."""
    cases = _shared_cases(run_a, run_b)
    pa = _prepare(run_a, overlap_threshold, criterion, cases)
    pb = _prepare(run_b, overlap_threshold, criterion, cases)
    ones = np.ones(len(cases), dtype=int)
    if not _valid_resample(pa, ones, metric):
        raise EvaluationError(f"corpus has no normal breasts or no lesions for {metric}")
    cpm_a = float(np.mean(_values_at(*_weighted_curve(pa, ones, metric), CPM_POINTS)))
    cpm_b = float(np.mean(_values_at(*_weighted_curve(pb, ones, metric), CPM_POINTS)))
    deltas = np.empty(n)
    for i, (_, w) in enumerate(resample_weights(pa, n, seed, metric)):
        ca = np.mean(_values_at(*_weighted_curve(pa, w, metric), CPM_POINTS))
        cb = np.mean(_values_at(*_weighted_curve(pb, w, metric), CPM_POINTS))
        deltas[i] = ca - cb
    return BootstrapResult(cpm_a, cpm_b, float(np.count_nonzero(deltas <= 0) / n), deltas)


def bootstrap_values(run: EvaluationRun, metric: str, fp_points, n: int = 1000, seed: int = 0,
                     overlap_threshold: float = 0.2, criterion: str = "iou") -> np.ndarray:
    """(n, len(fp_points)) metric values of case resamples."""
    prep = _prepare(run, overlap_threshold, criterion, run.cases)
    out = np.empty((n, len(fp_points)))
    for i, (_, w) in enumerate(resample_weights(prep, n, seed, metric)):
        out[i] = _values_at(*_weighted_curve(prep, w, metric), fp_points)
    return out


def confidence_interval(run: EvaluationRun, metric: str, fp_point: float, n: int = 1000, level: float = 0.95,
                        seed: int = 0, overlap_threshold: float = 0.2,
                        criterion: str = "iou") -> tuple[float, float]:
    """Percentile bootstrap interval of the metric at one false-positive rate."""
    vals = bootstrap_values(run, metric, [fp_point], n, seed, overlap_threshold, criterion)[:, 0]
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(vals, [tail, 100 - tail])
    return float(lo), float(hi)


def run_froc(run: EvaluationRun, metric: str, overlap_threshold: float = 0.2, criterion: str = "iou") -> FrocCurve:
    return froc(run.detections, run.annotations, run.breast_ids, metric, overlap_threshold, criterion)


def curve_table(run: EvaluationRun, metric: str, n_bootstrap: int = 0, seed: int = 0, level: float = 0.95,
                overlap_threshold: float = 0.2, criterion: str = "iou") -> list[dict]:
    """Rows (fp, value, ci_low, ci_high) at every curve point; CI columns are
    None without bootstrap."""
    curve = run_froc(run, metric, overlap_threshold, criterion)
    lo = hi = [None] * len(curve.fp)
    if n_bootstrap:
        vals = bootstrap_values(run, metric, curve.fp, n_bootstrap, seed, overlap_threshold, criterion)
        tail = 100 * (1 - level) / 2
        lo, hi = np.percentile(vals, [tail, 100 - tail], axis=0)
        lo, hi = lo.tolist(), hi.tolist()
    return [
        {"fp": float(f), "value": float(v), "ci_low": l, "ci_high": h}
        for f, v, l, h in zip(curve.fp, curve.value, lo, hi)
    ]
