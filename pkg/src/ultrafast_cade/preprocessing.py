"""From a raw dynamic series to two normalized per-breast tensors.

Stages: motion compensation against the pre-contrast volume, pre-contrast
subtraction, temporal alignment on the descending-aorta arrival, 13-volume
window selection, and an Otsu-guided crop of each breast half.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import BoundingBox3D, InvalidInputError
from .registration import IdentityRegistrar, RegistrationBackend, RegistrationError

WINDOW = 13
CROP_MARGIN = 5


class ReferenceDetectionError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass
class DynamicSeries:
    data: np.ndarray  # (T, D, H, W)
    spacing: tuple[float, float, float] = (2.5, 0.9, 0.9)
    time_index: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise InvalidInputError(f"series must be (T, D, H, W), got shape {self.data.shape}")
        if not self.time_index:
            self.time_index = list(range(len(self.data)))
        if len(self.time_index) != len(self.data):
            raise InvalidInputError("time_index length differs from the number of volumes")
        self.spacing = tuple(float(s) for s in self.spacing)

    def __len__(self):
        return len(self.data)

    def replace(self, data, time_index=None) -> "DynamicSeries":
        return DynamicSeries(data, self.spacing, list(time_index if time_index is not None else self.time_index))


@dataclass
class BreastTensor:
    """(13, rows, cols, slices) subtraction channels of one breast.

    ``crop_origin`` is the (z, y, x) position of tensor voxel (0, 0, 0) in the
    original volume, so original = cropped + crop_origin.
    """

    data: np.ndarray
    side: str
    crop_origin: tuple[int, int, int]

    def to_original(self, box: BoundingBox3D) -> BoundingBox3D:
        return box.translated(self.crop_origin)

    def from_original(self, box: BoundingBox3D) -> BoundingBox3D:
        return box.translated([-v for v in self.crop_origin])

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        """(z, y, x) extent."""
        _, h, w, d = self.data.shape
        return (d, h, w)


def motion_compensate(series: DynamicSeries, registrar: RegistrationBackend | None = None) -> DynamicSeries:
    """Register every volume t >= 1 to volume 0."""
    registrar = registrar or IdentityRegistrar()
    fixed = series.data[0]
    out = [fixed.copy()]
    for t in range(1, len(series)):
        try:
            out.append(np.asarray(registrar.register(fixed, series.data[t]), dtype=np.float32))
        except RegistrationError as exc:
            raise RegistrationError(str(exc), series.time_index[t]) from exc
        except Exception as exc:
            raise RegistrationError(f"{type(exc).__name__}: {exc}", series.time_index[t]) from exc
        if out[-1].shape != fixed.shape:
            raise RegistrationError("backend returned a volume of the wrong shape", series.time_index[t])
    return series.replace(np.stack(out))


def subtract_precontrast(series: DynamicSeries) -> DynamicSeries:
    """Volume t of the output is input[t + 1] - input[0], clamped at zero."""
    if len(series) < 2:
        raise InvalidInputError("need at least two volumes to subtract")
    sub = np.clip(series.data[1:] - series.data[0], 0.0, None)
    return series.replace(sub, series.time_index[1:])


def _roi_slices(roi: BoundingBox3D, shape) -> tuple[slice, ...]:
    sl = []
    for lo, hi, n in zip(roi.min_corner, roi.max_corner, shape):
        a, b = int(np.floor(lo)), int(np.ceil(hi))
        if a < 0 or b > n:
            raise InvalidInputError(f"aorta ROI {roi} exceeds volume bounds {shape}")
        sl.append(slice(a, b))
    return tuple(sl)


def roi_means(subtracted: DynamicSeries, roi: BoundingBox3D) -> np.ndarray:
    sl = _roi_slices(roi, subtracted.data.shape[1:])
    return subtracted.data[(slice(None),) + sl].reshape(len(subtracted), -1).mean(axis=1)


def find_reference_timepoint(subtracted: DynamicSeries, aorta_roi: BoundingBox3D,
                             fraction: float = 0.2, window: int = WINDOW) -> int:
    """First index whose aortic ROI mean exceeds ``fraction`` of the ROI-mean maximum."""
    means = roi_means(subtracted, aorta_roi)
    peak = float(means.max())
    if not peak > 0:
        raise ReferenceDetectionError("aorta ROI never enhances")
    above = np.flatnonzero(means > fraction * peak)
    ref = int(above[0])
    if ref + window > len(subtracted):
        raise ReferenceDetectionError(
            f"reference time-point {ref} leaves {len(subtracted) - ref} volumes, need {window}"
        )
    return ref


def select_temporal_window(subtracted: DynamicSeries, ref: int, window: int = WINDOW) -> DynamicSeries:
    if ref < 0 or ref + window > len(subtracted):
        raise InvalidInputError(f"window [{ref}, {ref + window}) exceeds {len(subtracted)} volumes")
    return subtracted.replace(subtracted.data[ref:ref + window], subtracted.time_index[ref:ref + window])


def otsu_histogram(volume: np.ndarray, nbins: int = 256) -> tuple[np.ndarray, np.ndarray]:
    vol = np.asarray(volume, dtype=np.float64).ravel()
    lo, hi = vol.min(), vol.max()
    if not hi > lo:
        raise InvalidInputError("Otsu threshold needs at least two distinct intensities")
    return np.histogram(vol, bins=nbins, range=(lo, hi))


def otsu_threshold(volume: np.ndarray, nbins: int = 256) -> float:
    """Threshold maximizing between-class variance on a ``nbins`` histogram.

    Returned value is the bin edge separating the classes; foreground is
    ``volume >= threshold``.
    """
    counts, edges = otsu_histogram(volume, nbins)
    centers = (edges[:-1] + edges[1:]) / 2
    counts = counts.astype(np.float64)
    w0 = np.cumsum(counts)[:-1]
    w1 = counts.sum() - w0
    s0 = np.cumsum(counts * centers)[:-1]
    s1 = (counts * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where((w0 > 0) & (w1 > 0), w0 * w1 * (s0 / w0 - s1 / w1) ** 2, -1.0)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def _window(arr: np.ndarray, axis: int, start: int, size: int) -> np.ndarray:
    """Slice [start, start + size) along axis, zero-filled outside the array."""
    n = arr.shape[axis]
    shape = list(arr.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=arr.dtype)
    a, b = max(start, 0), min(start + size, n)
    if b > a:
        src = [slice(None)] * arr.ndim
        dst = [slice(None)] * arr.ndim
        src[axis] = slice(a, b)
        dst[axis] = slice(a - start, b - start)
        out[tuple(dst)] = arr[tuple(src)]
    return out


def breast_top_row(precontrast_half: np.ndarray) -> int:
    """Smallest row index of the largest Otsu foreground component."""
    try:
        thr = otsu_threshold(precontrast_half)
    except InvalidInputError as exc:
        raise SegmentationError(str(exc)) from exc
    fg = precontrast_half >= thr
    labels, n = ndimage.label(fg)
    if n == 0:
        raise SegmentationError("empty foreground after Otsu thresholding")
    sizes = np.bincount(labels.ravel())[1:]
    rows = np.flatnonzero((labels == 1 + int(np.argmax(sizes))).any(axis=(0, 2)))
    return int(rows[0])


def split_and_crop(precontrast: np.ndarray, subtracted_window: np.ndarray, crop_size: int = 192,
                   margin: int = CROP_MARGIN) -> tuple[BreastTensor, BreastTensor]:
    """Halve the volume in-plane and crop each breast from ``margin`` rows above its top-point.

    precontrast: (D, H, W); subtracted_window: (C, D, H, W).  The left tensor
    is the image-left half (columns [0, W/2)).
    """
    precontrast = np.asarray(precontrast, dtype=np.float32)
    sub = np.asarray(subtracted_window, dtype=np.float32)
    d, h, w = precontrast.shape
    if sub.shape[1:] != precontrast.shape:
        raise InvalidInputError("subtraction window and pre-contrast volume differ in shape")
    if w % 2:
        raise InvalidInputError(f"in-plane width {w} is odd")
    half = w // 2
    out = []
    for side, c0 in (("left", 0), ("right", half)):
        top = breast_top_row(precontrast[:, :, c0:c0 + half])
        y0 = top - margin
        x0 = c0 + (half - crop_size) // 2
        crop = _window(_window(sub, 2, y0, crop_size), 3, x0, crop_size)
        # (C, z, y, x) -> (C, y, x, z)
        data = np.ascontiguousarray(crop.transpose(0, 2, 3, 1))
        out.append(BreastTensor(data, side, (0, y0, x0)))
    return out[0], out[1]


def normalize_intensity(tensor: BreastTensor, percentile: float = 99.0) -> BreastTensor:
    """Divide by the given percentile of the tensor's nonzero values."""
    nz = tensor.data[tensor.data > 0]
    if nz.size == 0:
        return tensor
    scale = float(np.percentile(nz, percentile))
    if scale <= 0:
        return tensor
    return BreastTensor((tensor.data / scale).astype(np.float32), tensor.side, tensor.crop_origin)


@dataclass
class PreprocessResult:
    left: BreastTensor
    right: BreastTensor
    reference_index: int
    precontrast: np.ndarray


def preprocess_series(series: DynamicSeries, aorta_roi: BoundingBox3D, registrar=None,
                      crop_size: int = 192, reference_fraction: float = 0.2,
                      normalize: bool = True) -> PreprocessResult:
    """Full per-study pipeline."""
    registered = motion_compensate(series, registrar)
    sub = subtract_precontrast(registered)
    ref = find_reference_timepoint(sub, aorta_roi, reference_fraction)
    win = select_temporal_window(sub, ref)
    left, right = split_and_crop(registered.data[0], win.data, crop_size)
    if normalize:
        left, right = normalize_intensity(left), normalize_intensity(right)
    return PreprocessResult(left, right, ref, registered.data[0])
