import numpy as np
import pytest

from ultrafast_cade.phantom import PhantomConfig, generate_phantom
from ultrafast_cade.preprocessing import motion_compensate
from ultrafast_cade.registration import (
    ELASTIX_BSPLINE,
    ELASTIX_RIGID,
    ElastixRegistrar,
    RegistrationError,
    TranslationSearchRegistrar,
    ncc_all_shifts,
    read_metaimage,
    shift_volume,
    translate_content,
    write_metaimage,
)

from .oracles import ncc_direct


def smooth_volume(rng, shape=(8, 12, 10)):
    vol = rng.normal(size=shape)
    # a few passes of box smoothing keep the NCC peak unique but broad
    for axis in range(3):
        vol = (vol + np.roll(vol, 1, axis) + np.roll(vol, -1, axis)) / 3
    return vol


def test_shift_semantics():
    vol = np.arange(5.0)[None, None, :] * np.ones((1, 1, 1))
    assert shift_volume(vol, (0, 0, 2))[0, 0].tolist() == [2, 3, 4, 0, 0]
    assert translate_content(vol, (0, 0, 2))[0, 0].tolist() == [0, 0, 0, 1, 2]
    assert np.all(shift_volume(vol, (0, 0, 7)) == 0)


def test_fft_ncc_matches_direct():
    rng = np.random.default_rng(0)
    fixed = smooth_volume(rng)
    moving = translate_content(fixed, (1, -2, 2)) + 0.05 * rng.normal(size=fixed.shape)
    shifts, ncc = ncc_all_shifts(fixed, moving, 3)
    assert len(shifts) == 7**3
    for s, v in zip(shifts[::11], ncc[::11]):
        assert v == pytest.approx(ncc_direct(fixed, moving, tuple(s)), abs=1e-9)


def test_recovers_translation():
    rng = np.random.default_rng(1)
    fixed = smooth_volume(rng, (10, 16, 16))
    reg = TranslationSearchRegistrar(radius=5)
    for motion in [(0, 0, 0), (1, 2, -3), (-3, 3, 3), (2, -1, 0)]:
        moving = translate_content(fixed, motion)
        assert reg.estimate_shift(fixed, moving) == motion
        back = reg.register(fixed, moving)
        # interior matches the fixed volume exactly
        assert np.allclose(back[3:-3, 3:-3, 3:-3], fixed[3:-3, 3:-3, 3:-3])


def test_constant_volume_raises():
    reg = TranslationSearchRegistrar(radius=1)
    with pytest.raises(RegistrationError):
        reg.estimate_shift(np.ones((4, 4, 4)), np.ones((4, 4, 4)))


def test_phantom_motion_recovered():
    st = generate_phantom(PhantomConfig(motion_amplitude=3), 21, categories=["malignant"])
    reg = TranslationSearchRegistrar()
    data = st.series.data
    for t in (1, len(data) // 2, len(data) - 1):
        assert reg.estimate_shift(data[0], data[t]) == tuple(st.truth.motion[t])
    out = motion_compensate(st.series.replace(data[:3], [0, 1, 2]), reg)
    assert out.data.shape == (3,) + data.shape[1:]


def test_metaimage_round_trip(tmp_path):
    vol = np.random.default_rng(2).normal(size=(3, 4, 5)).astype(np.float32)
    write_metaimage(tmp_path / "v.mhd", vol, (2.5, 0.9, 1.0))
    header = (tmp_path / "v.mhd").read_text()
    assert "DimSize = 5 4 3" in header
    assert np.array_equal(read_metaimage(tmp_path / "v.mhd"), vol)


def test_elastix_missing_binary():
    reg = ElastixRegistrar(executable="definitely-not-elastix")
    with pytest.raises(RegistrationError):
        reg.register(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_elastix_parameters(tmp_path):
    assert '(Transform "EulerTransform")' in ELASTIX_RIGID
    assert '(Transform "BSplineTransform")' in ELASTIX_BSPLINE
    for text in (ELASTIX_RIGID, ELASTIX_BSPLINE):
        assert "(NumberOfResolutions 3)" in text
        assert '(Optimizer "AdaptiveStochasticGradientDescent")' in text
        assert "MutualInformation" in text
    paths = ElastixRegistrar().write_parameter_files(tmp_path)
    assert [p.name for p in paths] == ["rigid.txt", "bspline.txt"]
