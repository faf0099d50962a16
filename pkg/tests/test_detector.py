import numpy as np
import pytest
import torch

from ultrafast_cade.anchors import LEVELS, AnchorConfig, generate_all_anchors
from ultrafast_cade.detector import (
    ConfigError,
    DetectorOutput,
    NetworkConfig,
    RetinaNet3D,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)


def small_config(**kw):
    base = dict(base_width=8, pyramid_channels=16, subnet_channels=8)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return RetinaNet3D(small_config()).eval()


@pytest.mark.parametrize("rows,cols,slices", [(32, 32, 8), (40, 24, 12), (33, 31, 9)])
def test_feature_shapes_match_config(net, rows, cols, slices):
    with torch.no_grad():
        out = net(torch.zeros(1, 13, rows, cols, slices))
    assert out.feature_shapes == net.config.feature_shapes((slices, rows, cols))
    n_anchors = len(net.anchors_for((slices, rows, cols)))
    assert out.flat_logits().shape == (1, n_anchors)
    assert out.flat_deltas().shape == (1, n_anchors, 6)


def test_pyramid_channels(net):
    feats = net.features(torch.zeros(1, 13, 32, 32, 8))
    assert sorted(feats) == list(LEVELS)
    assert all(f.shape[1] == 16 for f in feats.values())


def test_prior_initialization(net):
    with torch.no_grad():
        p = torch.sigmoid(net(torch.randn(1, 13, 32, 32, 8)).flat_logits())
    assert abs(float(p.mean()) - 0.01) < 0.005


def test_flat_order_matches_anchor_order():
    """Flattened index i must refer to anchor i: encode (level, z, y, x, a) in the logits."""
    shapes = {2: (2, 3, 4), 3: (1, 2, 2), 4: (1, 1, 1), 5: (1, 1, 1), 6: (1, 1, 1)}
    cfg = AnchorConfig()
    anchors = generate_all_anchors(shapes, cfg)
    cls, box = {}, {}
    for lv, (d, h, w) in shapes.items():
        z, y, x, a = torch.meshgrid(*(torch.arange(n) for n in (d, h, w, 9)), indexing="ij")
        cls[lv] = (lv * 1e6 + z * 1e4 + y * 1e2 + x + a * 1e-2).double()[None]
        box[lv] = torch.zeros(1, d, h, w, 9, 6)
    flat = DetectorOutput(cls, box).flat_logits()[0].numpy()
    centers = (anchors[:, :3] + anchors[:, 3:]) / 2
    for i in range(0, len(anchors), 7):
        code = flat[i]
        lv = int(code // 1e6)
        stride = cfg.strides[LEVELS.index(lv)]
        voxel = [int(code % 1e6 // 1e4), int(code % 1e4 // 1e2), int(code % 1e2)]
        assert np.allclose(centers[i], (np.array(voxel) + 0.5) * np.array(stride))


def test_predict_maps_to_original_space(net):
    torch.manual_seed(1)
    x = torch.randn(2, 13, 32, 32, 8)
    low = net.predict(x, ["a/left", "a/right"], score_threshold=0.0, max_detections=5)
    shifted = net.predict(x, ["a/left", "a/right"], [(0, 10, 20), (1, 2, 3)],
                          score_threshold=0.0, max_detections=5)
    assert len(low) == len(shifted) == 10
    for a, b in zip(low, shifted):
        off = (0, 10, 20) if a.breast_id == "a/left" else (1, 2, 3)
        assert np.allclose(np.array(b.box.min_corner) - a.box.min_corner, off)
        assert a.score == b.score
    assert not net.training


def test_predict_threshold_is_strict(net):
    x = torch.zeros(1, 13, 32, 32, 8)
    assert net.predict(x, ["b"], score_threshold=1.0) == []
    dets = net.predict(x, ["b"], score_threshold=0.0, nms_threshold=1.0, max_detections=10**6, pre_nms_top_k=10**6)
    assert all(d.score > 0 for d in dets)


def test_checkpoint_round_trip(net, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, {"epoch": 3})
    other = load_checkpoint(path).eval()
    assert other.config.to_dict() == net.config.to_dict()
    x = torch.randn(1, 13, 32, 32, 8)
    with torch.no_grad():
        assert torch.equal(net(x).flat_logits(), other(x).flat_logits())


def test_config_round_trip():
    cfg = small_config(depth=41, stem_kernel=3)
    assert NetworkConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_bad_depth():
    with pytest.raises(ConfigError):
        NetworkConfig(depth=18)


def test_mismatched_anchor_strides():
    with pytest.raises(ConfigError):
        NetworkConfig(stage_strides=[(1, 2, 2)] + [(2, 2, 2)] * 3)
    cfg = NetworkConfig(stage_strides=[(1, 2, 2)] + [(2, 2, 2)] * 3,
                        anchors=AnchorConfig(strides=[(2, 4, 4), (4, 8, 8), (8, 16, 16), (16, 32, 32), (32, 64, 64)]))
    assert cfg.level_strides()[0] == (2, 4, 4)


def test_depth_41_runs():
    torch.manual_seed(0)
    model = RetinaNet3D(small_config(depth=41)).eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 13, 32, 32, 8))
    assert out.feature_shapes == model.config.feature_shapes((8, 32, 32))
    assert parameter_count(model) > parameter_count(RetinaNet3D(small_config()))


def test_full_width_backbone_sizes():
    assert parameter_count(RetinaNet3D(NetworkConfig()).backbone) < parameter_count(
        RetinaNet3D(NetworkConfig(depth=41)).backbone)
