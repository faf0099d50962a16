"""Deterministic synthetic ultrafast DCE-MRI studies with known ground truth.

Anatomy: two half-ellipsoid breasts (fat with parenchyma and vessels)
protruding anteriorly (towards row 0) from a chest-wall slab that holds the
descending aorta.  Lesions are ellipsoids with category-dependent wash-in.

Time indexing: raw volume 0 is pre-contrast.  Onsets recorded in the truth
(aorta and lesions) are indices into the *subtracted* series, whose volume k
is raw volume k + 1 minus raw volume 0.
"""

from __future__ import annotations

import datetime as dt
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .geometry import BoundingBox3D, Category, LesionAnnotation
from .io import write_json, write_volume
from .preprocessing import DynamicSeries, preprocess_series
from .records import SIDES, BreastRecord, StudyRecord
from .registration import IdentityRegistrar, TranslationSearchRegistrar, translate_content

# tissue codes in PhantomTruth.tissue; lesion k is LESION_BASE + k
AIR, FAT, PARENCHYMA, VESSEL, MUSCLE, AORTA = range(6)
LESION_BASE = 10

BASE_INTENSITY = {AIR: 0.0, FAT: 300.0, PARENCHYMA: 170.0, VESSEL: 190.0, MUSCLE: 110.0, AORTA: 140.0}
LESION_INTENSITY = 160.0


class PhantomGenerationError(RuntimeError):
    pass


@dataclass
class Kinetics:
    """Logistic wash-in in raw time, shifted so that the pre-contrast value is 0."""

    amplitude: float
    half_time: float
    width: float

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        sig = 1.0 / (1.0 + np.exp(-(t - self.half_time) / self.width))
        sig0 = 1.0 / (1.0 + math.exp(self.half_time / self.width))
        return self.amplitude * (sig - sig0) / (1.0 - sig0)

    def onset(self, n_raw: int) -> int:
        """First subtracted index at which half the amplitude is reached."""
        t = np.arange(1, n_raw)
        hit = np.flatnonzero(self(t) >= 0.5 * self.amplitude)
        return int(hit[0]) if len(hit) else n_raw - 1


@dataclass
class KineticProfile:
    amplitude: float
    # delay of the half-enhancement time after aortic arrival, in time-points
    delay: float
    width: float


def _default_profiles():
    return {
        "malignant": KineticProfile(280.0, 0.5, 0.6),
        "benign-biopsied": KineticProfile(200.0, 1.5, 1.2),
        "benign-followup": KineticProfile(150.0, 2.5, 2.0),
        "parenchyma": KineticProfile(35.0, 5.0, 3.0),
        "vessel": KineticProfile(220.0, 0.2, 0.4),
    }


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int, int] = (16, 16, 96, 192)  # (T, D, H, W)
    spacing_mm: tuple[float, float, float] = (5.0, 2.0, 2.0)  # (z, y, x)
    crop_size: int = 96
    lesion_count_probs: dict[int, float] = field(default_factory=lambda: {0: 0.3, 1: 0.6, 2: 0.1})
    category_weights: dict[str, float] = field(
        default_factory=lambda: {"malignant": 365.0, "benign-biopsied": 148.0, "benign-followup": 59.0}
    )
    # (mean, sd) of the effective radius in mm
    radius_mm: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "malignant": (13.6, 7.5),
            "benign-biopsied": (12.0, 7.5),
            "benign-followup": (8.3, 3.5),
        }
    )
    radius_range_mm: tuple[float, float] = (4.0, 22.0)
    kinetics: dict[str, KineticProfile] = field(default_factory=_default_profiles)
    aorta_amplitude: float = 600.0
    aorta_radius_mm: float = 12.0
    # aortic arrival, as a subtracted-series index, drawn uniformly from this range
    arrival_range: tuple[int, int] = (1, 2)
    vessels_per_breast: int = 3
    parenchyma_fraction: float = 0.3
    noise_sigma: float = 6.0
    motion_amplitude: int = 0
    symmetric: bool = False
    placement_retries: int = 200

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)
        self.lesion_count_probs = {int(k): float(v) for k, v in self.lesion_count_probs.items()}
        self.radius_mm = {k: tuple(v) for k, v in self.radius_mm.items()}
        self.radius_range_mm = tuple(self.radius_range_mm)
        self.arrival_range = tuple(int(v) for v in self.arrival_range)
        self.kinetics = {
            k: v if isinstance(v, KineticProfile) else KineticProfile(**v) for k, v in self.kinetics.items()
        }
        for c in self.category_weights:
            Category(c)
        t = self.shape[0]
        if self.arrival_range[1] + 13 > t - 1:
            raise ValueError(f"arrival index {self.arrival_range[1]} leaves fewer than 13 subtracted volumes")
        if self.shape[3] % 2:
            raise ValueError("phantom width must be even")

    @classmethod
    def full(cls, **overrides) -> "PhantomConfig":
        """Clinical geometry: 20 x 60 x 384 x 384 at 2.5 x 0.9 x 1.0 mm."""
        base = dict(shape=(20, 60, 384, 384), spacing_mm=(2.5, 0.9, 1.0), crop_size=192, arrival_range=(2, 6))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_count_probs"] = {str(k): v for k, v in self.lesion_count_probs.items()}
        return d


@dataclass
class PhantomLesion:
    box: BoundingBox3D
    category: Category
    side: str
    onset: int
    kinetics: Kinetics


@dataclass
class PhantomTruth:
    lesions: list[PhantomLesion]
    aorta_roi: BoundingBox3D
    aorta_onset: int
    motion: np.ndarray  # (T, 3) content translation per raw volume
    breast_mask: np.ndarray  # (D, H, W) bool, before motion
    tissue: np.ndarray  # (D, H, W) uint8 tissue codes, before motion
    breast_tops: dict[str, int]
    noise_free: DynamicSeries

    def lesion_support(self, k: int) -> np.ndarray:
        return self.tissue == LESION_BASE + k

    def to_dict(self) -> dict:
        return {
            "lesions": [
                {
                    "min": list(l.box.min_corner),
                    "max": list(l.box.max_corner),
                    "category": l.category.value,
                    "side": l.side,
                    "onset": l.onset,
                    "kinetics": asdict(l.kinetics),
                }
                for l in self.lesions
            ],
            "aorta_roi": {"min": list(self.aorta_roi.min_corner), "max": list(self.aorta_roi.max_corner)},
            "aorta_onset": self.aorta_onset,
            "motion": self.motion.tolist(),
            "breast_tops": self.breast_tops,
        }


class PhantomStudy(NamedTuple):
    series: DynamicSeries
    truth: PhantomTruth
    record: StudyRecord


def _truncated_normal(rng, mean, sd, lo, hi):
    for _ in range(1000):
        v = rng.normal(mean, sd)
        if lo <= v <= hi:
            return float(v)
    return float(np.clip(mean, lo, hi))


def _grid(shape):
    d, h, w = shape
    return np.meshgrid(np.arange(d) + 0.5, np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij", sparse=True)


def _half_breast(shape, rng, side, config: PhantomConfig):
    d, h, w = shape
    z, y, x = _grid(shape)
    chest = int(round(0.55 * h))
    top = int(rng.integers(int(0.1 * h), int(0.2 * h) + 1))
    xc = (0.25 if side == "left" else 0.75) * w
    rx, ry, rz = 0.2 * w, chest - top, 0.45 * d
    mask = (((chest - y) / ry) ** 2 + ((x - xc) / rx) ** 2 + ((z - d / 2) / rz) ** 2 <= 1.0) & (y < chest)
    return mask, top, chest


def _mirror(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1]


def _parenchyma(mask, rng, fraction):
    field_ = ndimage.gaussian_filter(rng.normal(size=mask.shape), sigma=(1.0, 3.0, 3.0))
    vals = field_[mask]
    if vals.size == 0:
        return np.zeros_like(mask)
    return mask & (field_ > np.quantile(vals, 1.0 - fraction))


def _vessels(mask, rng, n):
    out = np.zeros_like(mask)
    pts = np.argwhere(mask)
    if len(pts) == 0:
        return out
    for _ in range(n):
        a, b = pts[rng.integers(len(pts))], pts[rng.integers(len(pts))]
        steps = int(np.abs(b - a).max()) * 2 + 1
        line = np.rint(a + np.linspace(0, 1, steps)[:, None] * (b - a)).astype(int)
        out[tuple(line.T)] = True
    out = ndimage.binary_dilation(out, structure=np.array([[[0, 0, 0], [0, 1, 0], [0, 0, 0]],
                                                           [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
                                                           [[0, 0, 0], [0, 1, 0], [0, 0, 0]]], bool))
    return out & mask


def _place_lesion(rng, config, breast_mask, occupied, category):
    d, h, w = breast_mask.shape
    mean, sd = config.radius_mm[category]
    lo, hi = config.radius_range_mm
    candidates = np.argwhere(breast_mask)
    for _ in range(config.placement_retries):
        r = _truncated_normal(rng, mean, sd, lo, hi)
        semi = np.maximum(
            r * rng.uniform(0.8, 1.25, size=3) / np.array(config.spacing_mm), 1.0
        )
        center = candidates[rng.integers(len(candidates))] + 0.5
        lo_i = np.maximum(np.floor(center - semi).astype(int), 0)
        hi_i = np.minimum(np.ceil(center + semi).astype(int), (d, h, w))
        zz, yy, xx = np.meshgrid(*(np.arange(a, b) + 0.5 for a, b in zip(lo_i, hi_i)), indexing="ij", sparse=True)
        local = ((zz - center[0]) / semi[0]) ** 2 + ((yy - center[1]) / semi[1]) ** 2 + (
            (xx - center[2]) / semi[2]
        ) ** 2 <= 1.0
        sl = tuple(slice(a, b) for a, b in zip(lo_i, hi_i))
        if not local.any():
            continue
        if not breast_mask[sl][local].all():
            continue
        grown = ndimage.binary_dilation(local, iterations=1)
        if occupied[sl][grown].any():
            continue
        full = np.zeros_like(breast_mask)
        full[sl] = local
        return full
    raise PhantomGenerationError(f"could not place a {category} lesion after {config.placement_retries} tries")


def _tight_box(support: np.ndarray) -> BoundingBox3D:
    idx = np.argwhere(support)
    return BoundingBox3D(tuple(idx.min(axis=0)), tuple(idx.max(axis=0) + 1))


def _draw_categories(rng, config) -> list[str]:
    counts = sorted(config.lesion_count_probs)
    p = np.array([config.lesion_count_probs[c] for c in counts], dtype=float)
    k = counts[rng.choice(len(counts), p=p / p.sum())]
    cats = list(config.category_weights)
    w = np.array([config.category_weights[c] for c in cats], dtype=float)
    return [cats[i] for i in rng.choice(len(cats), size=k, p=w / w.sum())]


def generate_phantom(config: PhantomConfig, seed: int, study_id: str = "study0", patient_id: str = "patient0",
                     date: dt.date | str = "2013-06-01", categories: list[str] | None = None,
                     sides: list[str] | None = None) -> PhantomStudy:
    """One synthetic study, fully determined by (config, seed, categories, sides)."""
    rng = np.random.default_rng(seed)
    n_t, d, h, w = config.shape
    vol_shape = (d, h, w)

    tissue = np.full(vol_shape, AIR, dtype=np.uint8)
    chest = int(round(0.55 * h))
    tissue[:, chest:, :] = MUSCLE

    # aorta: cylinder along z in the chest, at the midline for symmetric phantoms
    z, y, x = _grid(vol_shape)
    ay = chest + 0.55 * (h - chest)
    ax = w / 2 if config.symmetric else w / 2 + 0.04 * w
    ar_y = config.aorta_radius_mm / config.spacing_mm[1]
    ar_x = config.aorta_radius_mm / config.spacing_mm[2]
    aorta = (((y - ay) / ar_y) ** 2 + ((x - ax) / ar_x) ** 2 <= 1.0) & (z >= 0)
    tissue[aorta] = AORTA
    hy, hx = max(ar_y / 2, 0.5), max(ar_x / 2, 0.5)
    aorta_roi = BoundingBox3D(
        (math.floor(d / 4), math.floor(ay - hy), math.floor(ax - hx)),
        (math.ceil(3 * d / 4), math.ceil(ay + hy), math.ceil(ax + hx)),
    )

    arrival = int(rng.integers(config.arrival_range[0], config.arrival_range[1] + 1))

    # breasts with parenchyma and vessels
    breast_mask = np.zeros(vol_shape, bool)
    parenchyma = np.zeros(vol_shape, bool)
    vessels = np.zeros(vol_shape, bool)
    tops = {}
    for side in SIDES:
        if side == "right" and config.symmetric:
            m, par, ves = _mirror(breast_mask), _mirror(parenchyma), _mirror(vessels)
            tops["right"] = tops["left"]
        else:
            m, tops[side], _ = _half_breast(vol_shape, rng, side, config)
            par = _parenchyma(m, rng, config.parenchyma_fraction)
            ves = _vessels(m, rng, config.vessels_per_breast)
        breast_mask |= m
        parenchyma |= par
        vessels |= ves
    tissue[breast_mask] = FAT
    tissue[parenchyma] = PARENCHYMA
    tissue[vessels] = VESSEL

    # lesions
    if categories is None:
        categories = _draw_categories(rng, config)
    if sides is None:
        sides = [SIDES[int(rng.integers(2))] for _ in categories]
    if config.symmetric and categories:
        raise PhantomGenerationError("symmetric phantoms carry no lesions")
    side_masks = {
        s: breast_mask & ((x < w / 2) if s == "left" else (x >= w / 2)) for s in SIDES
    }
    occupied = np.zeros(vol_shape, bool)
    lesions: list[PhantomLesion] = []
    for k, (cat, side) in enumerate(zip(categories, sides)):
        support = _place_lesion(rng, config, side_masks[side], occupied, cat)
        occupied |= support
        tissue[support] = LESION_BASE + k
        prof = config.kinetics[cat]
        kin = Kinetics(prof.amplitude, arrival + 1 + prof.delay + rng.uniform(-0.2, 0.2), prof.width)
        lesions.append(PhantomLesion(_tight_box(support), Category(cat), side, kin.onset(n_t), kin))

    # noise-free dynamic signal
    base = np.zeros(vol_shape, np.float32)
    for code, value in BASE_INTENSITY.items():
        base[tissue == code] = value
    base[tissue >= LESION_BASE] = LESION_INTENSITY
    t = np.arange(n_t)
    aorta_curve = np.where(
        t - 1 >= arrival, config.aorta_amplitude * (1 - np.exp(-(t - 1 - arrival + 1.0))), 0.0
    )
    par_prof, ves_prof = config.kinetics["parenchyma"], config.kinetics["vessel"]
    curves = [
        (tissue == AORTA, aorta_curve),
        (tissue == PARENCHYMA, Kinetics(par_prof.amplitude, arrival + 1 + par_prof.delay, par_prof.width)(t)),
        (tissue == VESSEL, Kinetics(ves_prof.amplitude, arrival + 1 + ves_prof.delay, ves_prof.width)(t)),
    ]
    curves += [(tissue == LESION_BASE + k, les.kinetics(t)) for k, les in enumerate(lesions)]

    motion = np.zeros((n_t, 3), dtype=int)
    if config.motion_amplitude > 0:
        a = config.motion_amplitude
        motion[1:] = rng.integers(-a, a + 1, size=(n_t - 1, 3))

    clean = np.empty((n_t,) + vol_shape, np.float32)
    for ti in range(n_t):
        vol = base.copy()
        for mask, curve in curves:
            vol[mask] += np.float32(curve[ti])
        clean[ti] = translate_content(vol, motion[ti]) if motion[ti].any() else vol
    # frame by frame keeps the float64 draw small; the stream order is unchanged
    noisy = np.empty_like(clean)
    for ti in range(n_t):
        noisy[ti] = clean[ti] + rng.normal(0.0, config.noise_sigma, size=vol_shape).astype(np.float32)

    series = DynamicSeries(noisy, config.spacing_mm)
    truth = PhantomTruth(
        lesions=lesions,
        aorta_roi=aorta_roi,
        aorta_onset=arrival,
        motion=motion,
        breast_mask=breast_mask,
        tissue=tissue,
        breast_tops=tops,
        noise_free=DynamicSeries(clean, config.spacing_mm),
    )
    breasts = {
        s: BreastRecord(
            f"{study_id}/{s}",
            s,
            [
                LesionAnnotation(l.box, l.category, f"{study_id}/{s}", patient_id, study_id)
                for l in lesions
                if l.side == s
            ],
        )
        for s in SIDES
    }
    return PhantomStudy(series, truth, StudyRecord(patient_id, study_id, date, breasts))


def _study_plan(n_studies: int, rng) -> list[tuple[str, str, dt.date]]:
    """(patient_id, study_id, date) for n studies; some patients get a follow-up study."""
    start = dt.date(2013, 1, 1)
    plan = []
    p = 0
    while len(plan) < n_studies:
        pid = f"P{p:04d}"
        first = start + dt.timedelta(days=int(rng.integers(0, 730)))
        plan.append((pid, first))
        if len(plan) < n_studies and rng.random() < 0.15:
            plan.append((pid, first + dt.timedelta(days=int(rng.integers(300, 430)))))
        p += 1
    return [(pid, f"S{i:04d}", date) for i, (pid, date) in enumerate(plan)]


def _corpus_study(args):
    config, seed, pid, sid, date, out_dir, keep_series = args
    study = generate_phantom(config, seed, sid, pid, date)
    sdir = Path(out_dir) / "studies" / sid
    sdir.mkdir(parents=True, exist_ok=True)
    registrar = TranslationSearchRegistrar() if config.motion_amplitude else IdentityRegistrar()
    pre = preprocess_series(study.series, study.truth.aorta_roi, registrar, crop_size=config.crop_size)
    rec = study.record
    for bt in (pre.left, pre.right):
        rel = Path("studies") / sid / bt.side
        write_volume(Path(out_dir) / rel, bt.data, side=bt.side, crop_origin=list(bt.crop_origin),
                     layout="channel,row,col,slice", spacing_mm=list(config.spacing_mm))
        rec.breasts[bt.side].tensor_path = str(rel)
        rec.breasts[bt.side].crop_origin = tuple(bt.crop_origin)
    truth = study.truth.to_dict()
    truth["reference_index"] = pre.reference_index
    write_json(sdir / "truth.json", truth)
    write_json(sdir / "aorta_roi.json", truth["aorta_roi"])
    if keep_series:
        write_volume(sdir / "series", study.series.data, spacing_mm=list(config.spacing_mm),
                     time_index=study.series.time_index)
    return rec.to_dict()


def generate_corpus(n_studies: int, config: PhantomConfig, seed: int, out_dir, keep_series: bool = False,
                    workers: int = 1) -> list[StudyRecord]:
    """Generate, preprocess and write ``n_studies`` studies plus ``corpus.json``."""
    if n_studies < 1:
        raise ValueError("n_studies must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    plan_seed, *study_seeds = root.spawn(n_studies + 1)
    plan = _study_plan(n_studies, np.random.default_rng(plan_seed))
    jobs = [
        (config, ss.generate_state(1)[0], pid, sid, date, str(out_dir), keep_series)
        for ss, (pid, sid, date) in zip(study_seeds, plan)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            dicts = list(ex.map(_corpus_study, jobs))
    else:
        dicts = [_corpus_study(j) for j in jobs]
    write_json(out_dir / "corpus.json", {"seed": seed, "phantom": config.to_dict(), "studies": dicts})
    return [StudyRecord.from_dict(d) for d in dicts]


def load_corpus(path) -> list[StudyRecord]:
    from .io import read_json

    path = Path(path)
    if path.is_dir():
        path = path / "corpus.json"
    return [StudyRecord.from_dict(d) for d in read_json(path)["studies"]]
