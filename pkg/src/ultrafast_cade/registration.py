"""Registration backends for motion compensation.

A backend is any object with ``register(fixed, moving) -> resampled moving``
operating on (D, H, W) volumes.  The reference backend searches integer
translations exhaustively; the Elastix adapter shells out to an installed
``elastix`` binary with the rigid + B-spline configuration used clinically.
"""

from __future__ import annotations

import itertools
import shutil
import subprocess
import tempfile
from pathlib import Path
from typing import Protocol

import numpy as np


class RegistrationError(RuntimeError):
    def __init__(self, message: str, time_index: int | None = None):
        super().__init__(message if time_index is None else f"time index {time_index}: {message}")
        self.time_index = time_index


class RegistrationBackend(Protocol):
    def register(self, fixed: np.ndarray, moving: np.ndarray) -> np.ndarray: ...


class IdentityRegistrar:
    def register(self, fixed, moving):
        return np.array(moving, copy=True)


def shift_volume(vol: np.ndarray, shift) -> np.ndarray:
    """out[x] = vol[x + shift], zero outside the source volume."""
    out = np.zeros_like(vol)
    src, dst = [], []
    for s, n in zip(shift, vol.shape):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(s, 0), n + min(s, 0)))
        dst.append(slice(max(-s, 0), n + min(-s, 0)))
    out[tuple(dst)] = vol[tuple(src)]
    return out


def translate_content(vol: np.ndarray, motion) -> np.ndarray:
    """Moves image content by ``motion`` voxels (the inverse of shift_volume)."""
    return shift_volume(vol, [-int(m) for m in motion])


def ncc_all_shifts(fixed: np.ndarray, moving: np.ndarray, radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized cross-correlation over the overlap for every integer shift
    in [-radius, radius]^3.

    Returns (shifts (K, 3), ncc (K,)), where shift s compares fixed[x] with
    moving[x + s].  All overlap sums are FFT correlations of zero-padded
    arrays, so the result equals direct evaluation shift by shift.
    """
    f = np.asarray(fixed, dtype=np.float64)
    m = np.asarray(moving, dtype=np.float64)
    if f.shape != m.shape:
        raise ValueError("fixed and moving volumes differ in shape")
    padded = tuple(n + radius for n in f.shape)
    axes = tuple(range(f.ndim))

    def spec(a):
        return np.fft.rfftn(a, s=padded, axes=axes)

    ones = np.ones_like(f)
    F1, Ff, Fff = spec(ones), spec(f), spec(f * f)
    M1, Mm, Mmm = spec(ones), spec(m), spec(m * m)

    def corr(A, B):
        # sum_x a(x) b(x + s), read back at index s mod padded
        return np.fft.irfftn(np.conj(A) * B, s=padded, axes=axes)

    s_fm, s_f, s_m = corr(Ff, Mm), corr(Ff, M1), corr(F1, Mm)
    s_ff, s_mm, n = corr(Fff, M1), corr(F1, Mmm), corr(F1, M1)

    shifts = np.array(list(itertools.product(range(-radius, radius + 1), repeat=f.ndim)))
    idx = tuple((shifts % np.array(padded)).T)
    n = np.rint(n[idx])
    with np.errstate(divide="ignore", invalid="ignore"):
        num = s_fm[idx] - s_f[idx] * s_m[idx] / n
        var_f = s_ff[idx] - s_f[idx] ** 2 / n
        var_m = s_mm[idx] - s_m[idx] ** 2 / n
        denom = np.sqrt(np.clip(var_f, 0, None) * np.clip(var_m, 0, None))
        ncc = np.where((n > 1) & (denom > 1e-12 * max(1.0, float(n.max()))), num / denom, -np.inf)
    return shifts, ncc


class TranslationSearchRegistrar:
    """Exhaustive integer-translation search maximizing normalized cross-correlation."""

    def __init__(self, radius: int = 5):
        self.radius = radius

    def estimate_shift(self, fixed: np.ndarray, moving: np.ndarray) -> tuple[int, int, int]:
        shifts, ncc = ncc_all_shifts(fixed, moving, self.radius)
        if not np.isfinite(ncc).any():
            raise RegistrationError("no shift with non-constant overlap")
        best = ncc.max()
        # ties: smallest displacement, then lexicographic
        tied = np.flatnonzero(ncc >= best - 1e-12 * max(1.0, abs(best)))
        key = sorted(tied, key=lambda i: (int(np.abs(shifts[i]).sum()), tuple(shifts[i])))
        return tuple(int(v) for v in shifts[key[0]])

    def register(self, fixed, moving):
        return shift_volume(np.asarray(moving), self.estimate_shift(fixed, moving))


ELASTIX_RIGID = """(Registration "MultiResolutionRegistration")
(Transform "EulerTransform")
(Metric "AdvancedMattesMutualInformation")
(Optimizer "AdaptiveStochasticGradientDescent")
(NumberOfResolutions 3)
(MaximumNumberOfIterations 250)
(AutomaticTransformInitialization "true")
(AutomaticScalesEstimation "true")
(ImageSampler "RandomCoordinate")
(NumberOfSpatialSamples 2048)
(NewSamplesEveryIteration "true")
(FixedImagePyramid "FixedSmoothingImagePyramid")
(MovingImagePyramid "MovingSmoothingImagePyramid")
(Interpolator "BSplineInterpolator")
(ResampleInterpolator "FinalBSplineInterpolator")
(Resampler "DefaultResampler")
(WriteResultImage "false")
"""

ELASTIX_BSPLINE = """(Registration "MultiResolutionRegistration")
(Transform "BSplineTransform")
(Metric "AdvancedMattesMutualInformation")
(Optimizer "AdaptiveStochasticGradientDescent")
(NumberOfResolutions 3)
(MaximumNumberOfIterations 500)
(FinalGridSpacingInPhysicalUnits 20.0)
(ImageSampler "RandomCoordinate")
(NumberOfSpatialSamples 2048)
(NewSamplesEveryIteration "true")
(FixedImagePyramid "FixedSmoothingImagePyramid")
(MovingImagePyramid "MovingSmoothingImagePyramid")
(Interpolator "BSplineInterpolator")
(ResampleInterpolator "FinalBSplineInterpolator")
(Resampler "DefaultResampler")
(ResultImageFormat "mhd")
(ResultImagePixelType "float")
(WriteResultImage "true")
"""


def write_metaimage(path: Path, vol: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """MetaImage header + raw float32; MetaImage lists sizes fastest axis first."""
    raw = path.with_suffix(".raw")
    np.ascontiguousarray(vol, dtype="<f4").tofile(raw)
    d, h, w = vol.shape
    sz, sy, sx = spacing
    path.write_text(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
        f"DimSize = {w} {h} {d}\nElementSpacing = {sx} {sy} {sz}\n"
        f"ElementType = MET_FLOAT\nElementDataFile = {raw.name}\n"
    )


def read_metaimage(path: Path) -> np.ndarray:
    header = dict(
        line.split(" = ", 1) for line in path.read_text().splitlines() if " = " in line
    )
    w, h, d = (int(v) for v in header["DimSize"].split())
    dtype = {"MET_FLOAT": "<f4", "MET_DOUBLE": "<f8", "MET_SHORT": "<i2"}[header["ElementType"].strip()]
    return np.fromfile(path.parent / header["ElementDataFile"].strip(), dtype=dtype).reshape(d, h, w)


class ElastixRegistrar:
    """Adapter for an external ``elastix`` executable (rigid then B-spline,
    ASGD optimizer, mutual information, three resolutions)."""

    def __init__(self, executable: str = "elastix", spacing=(2.5, 0.9, 0.9)):
        self.executable = executable
        self.spacing = spacing

    def write_parameter_files(self, workdir: Path) -> list[Path]:
        rigid, bspline = workdir / "rigid.txt", workdir / "bspline.txt"
        rigid.write_text(ELASTIX_RIGID)
        bspline.write_text(ELASTIX_BSPLINE)
        return [rigid, bspline]

    def register(self, fixed, moving):
        exe = shutil.which(self.executable)
        if exe is None:
            raise RegistrationError(f"elastix executable {self.executable!r} not found")
        with tempfile.TemporaryDirectory() as tmp:
            work = Path(tmp)
            write_metaimage(work / "fixed.mhd", np.asarray(fixed), self.spacing)
            write_metaimage(work / "moving.mhd", np.asarray(moving), self.spacing)
            cmd = [exe, "-f", str(work / "fixed.mhd"), "-m", str(work / "moving.mhd"), "-out", str(work)]
            for p in self.write_parameter_files(work):
                cmd += ["-p", str(p)]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            result = work / "result.1.mhd"
            if proc.returncode != 0 or not result.exists():
                raise RegistrationError(f"elastix failed: {proc.stderr.strip()[-500:]}")
            return read_metaimage(result).astype(np.float32)
