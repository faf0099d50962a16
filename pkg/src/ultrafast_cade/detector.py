"""3D RetinaNet with a truncated residual backbone and a P2-P6 pyramid.

Network tensors use the breast-tensor layout (N, C, rows, cols, slices), i.e.
spatial axes (y, x, z).  Everything that leaves this module (feature shapes,
anchors, boxes) is expressed in the package-wide (z, y, x) order.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .anchors import LEVELS, AnchorConfig, generate_all_anchors
from .geometry import BoundingBox3D, Detection, decode_boxes, nms_indices
from .io import atomic_write_bytes

BACKBONE_LAYOUT = {
    # depth -> (block type, blocks per stage for C2..C4)
    14: ("basic", (2, 2, 2)),
    41: ("bottleneck", (3, 4, 6)),
}


class ConfigError(ValueError):
    pass


def _yxz(zyx) -> tuple[int, int, int]:
    z, y, x = zyx
    return (y, x, z)


def _zyx(yxz) -> tuple[int, int, int]:
    y, x, z = yxz
    return (z, y, x)


@dataclass
class NetworkConfig:
    depth: int = 14
    in_channels: int = 13
    base_width: int = 64
    pyramid_channels: int = 256
    subnet_channels: int = 64
    subnet_depth: int = 4
    stem_kernel: int = 7
    # (z, y, x) stride of the stages producing C1, C2, C3, C4
    stage_strides: list[tuple[int, int, int]] = field(default_factory=lambda: [(2, 2, 2)] * 4)
    prior_probability: float = 0.01
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        if isinstance(self.anchors, dict):
            self.anchors = AnchorConfig(**self.anchors)
        self.stage_strides = [tuple(int(v) for v in s) for s in self.stage_strides]
        if self.depth not in BACKBONE_LAYOUT:
            raise ConfigError(f"unsupported backbone depth {self.depth}; choose from {sorted(BACKBONE_LAYOUT)}")
        if len(self.stage_strides) != 4:
            raise ConfigError("stage_strides needs four (z, y, x) triples")
        if [tuple(s) for s in self.anchors.strides] != self.level_strides():
            raise ConfigError(
                f"anchor strides {self.anchors.strides} do not match pyramid strides {self.level_strides()}"
            )

    def level_strides(self) -> list[tuple[int, int, int]]:
        """Cumulative (z, y, x) stride of P2..P6 in input voxels."""
        cum = np.cumprod(np.array(self.stage_strides), axis=0)
        c2, c4 = cum[1], cum[3]
        strides = [c2, cum[2], c4, c4 * 2, c4 * 4]
        return [tuple(int(v) for v in s) for s in strides]

    def feature_shapes(self, spatial_zyx) -> dict[int, tuple[int, int, int]]:
        """Per-level (d, h, w) for an input of (z, y, x) size, using ceil division per stage."""
        shape = np.array(spatial_zyx, dtype=int)
        stages = []
        for s in self.stage_strides:
            shape = -(-shape // np.array(s))
            stages.append(shape)
        p5 = -(-stages[3] // 2)
        p6 = -(-p5 // 2)
        shapes = [stages[1], stages[2], stages[3], p5, p6]
        return {lv: tuple(int(v) for v in s) for lv, s in zip(LEVELS, shapes)}

    @property
    def num_anchors(self) -> int:
        return self.anchors.num_anchors

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_strides"] = [list(s) for s in self.stage_strides]
        d["anchors"]["ratios"] = [list(r) for r in self.anchors.ratios]
        d["anchors"]["strides"] = [list(s) for s in self.anchors.strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["anchors"] = AnchorConfig(**d.get("anchors", {}))
        return cls(**d)


def conv3(cin, cout, stride=(1, 1, 1)):
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = conv3(cin, width, stride)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = conv3(width, cout)
        self.bn2 = nn.BatchNorm3d(cout)
        self.shortcut = None
        if cin != cout or any(s != 1 for s in stride):
            self.shortcut = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv3d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = conv3(width, width, stride)
        self.bn2 = nn.BatchNorm3d(width)
        self.conv3 = nn.Conv3d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(cout)
        self.shortcut = None
        if cin != cout or any(s != 1 for s in stride):
            self.shortcut = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Backbone3D(nn.Module):
    """Residual backbone without its last stage; returns C1..C4."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        kind, blocks = BACKBONE_LAYOUT[config.depth]
        block = BasicBlock if kind == "basic" else Bottleneck
        s1, s2, s3, s4 = (_yxz(s) for s in config.stage_strides)
        w = config.base_width
        k = config.stem_kernel
        self.stem = nn.Sequential(
            nn.Conv3d(config.in_channels, w, k, stride=s1, padding=k // 2, bias=False),
            nn.BatchNorm3d(w),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool3d(3, stride=s2, padding=1)
        cin = w
        self.layer1, cin = self._stage(block, cin, w, blocks[0], (1, 1, 1))
        self.layer2, cin = self._stage(block, cin, 2 * w, blocks[1], s3)
        self.layer3, cin = self._stage(block, cin, 4 * w, blocks[2], s4)
        self.out_channels = (w, w * block.expansion, 2 * w * block.expansion, 4 * w * block.expansion)

        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @staticmethod
    def _stage(block, cin, width, n, stride):
        layers = []
        for i in range(n):
            layers.append(block(cin, width, stride if i == 0 else (1, 1, 1)))
            cin = width * block.expansion
        return nn.Sequential(*layers), cin

    def forward(self, x):
        c1 = self.stem(x)
        c2 = self.layer1(self.pool(c1))
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        return c1, c2, c3, c4


class Pyramid3D(nn.Module):
    """P2-P4 from a top-down path seeded at C4; P5/P6 from strided convolutions on C4.

    C1 gets no lateral connection.
    """

    def __init__(self, in_channels: Sequence[int], channels: int):
        super().__init__()
        _, c2, c3, c4 = in_channels
        self.lat2 = nn.Conv3d(c2, channels, 1)
        self.lat3 = nn.Conv3d(c3, channels, 1)
        self.lat4 = nn.Conv3d(c4, channels, 1)
        self.p5 = nn.Conv3d(c4, channels, 3, stride=2, padding=1)
        self.p6 = nn.Conv3d(channels, channels, 3, stride=2, padding=1)

    @staticmethod
    def upsample_to(x, like):
        # targets the lateral shape exactly, so odd sizes (15 -> 8) still merge
        return F.interpolate(x, size=like.shape[2:], mode="trilinear", align_corners=False)

    def forward(self, feats):
        _, c2, c3, c4 = feats
        p4 = self.lat4(c4)
        p3 = self.lat3(c3) + self.upsample_to(p4, c3)
        p2 = self.lat2(c2) + self.upsample_to(p3, c2)
        p5 = self.p5(c4)
        p6 = self.p6(F.relu(p5))
        return {2: p2, 3: p3, 4: p4, 5: p5, 6: p6}


class Subnet(nn.Module):
    def __init__(self, cin, hidden, depth, cout):
        super().__init__()
        layers = []
        for i in range(depth):
            layers += [nn.Conv3d(cin if i == 0 else hidden, hidden, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv3d(hidden, cout, 3, padding=1)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.out(self.body(x))


@dataclass
class DetectorOutput:
    """Per-level raw head outputs in (z, y, x) layout.

    cls_logits[level]: (N, d, h, w, A); box_deltas[level]: (N, d, h, w, A, 6).
    """

    cls_logits: dict[int, torch.Tensor]
    box_deltas: dict[int, torch.Tensor]

    @property
    def feature_shapes(self) -> dict[int, tuple[int, int, int]]:
        return {lv: tuple(t.shape[1:4]) for lv, t in self.cls_logits.items()}

    def flat_logits(self) -> torch.Tensor:
        n = next(iter(self.cls_logits.values())).shape[0]
        return torch.cat([self.cls_logits[lv].reshape(n, -1) for lv in LEVELS], dim=1)

    def flat_deltas(self) -> torch.Tensor:
        n = next(iter(self.box_deltas.values())).shape[0]
        return torch.cat([self.box_deltas[lv].reshape(n, -1, 6) for lv in LEVELS], dim=1)


class RetinaNet3D(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        cfg = self.config
        self.backbone = Backbone3D(cfg)
        self.pyramid = Pyramid3D(self.backbone.out_channels, cfg.pyramid_channels)
        a = cfg.num_anchors
        self.cls_subnet = Subnet(cfg.pyramid_channels, cfg.subnet_channels, cfg.subnet_depth, a)
        self.box_subnet = Subnet(cfg.pyramid_channels, cfg.subnet_channels, cfg.subnet_depth, a * 6)
        nn.init.constant_(self.cls_subnet.out.bias, -math.log((1 - cfg.prior_probability) / cfg.prior_probability))
        self._anchor_cache: dict[tuple, np.ndarray] = {}

    def features(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input (N, {self.config.in_channels}, rows, cols, slices), got {tuple(x.shape)}"
            )
        return self.pyramid(self.backbone(x))

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        pyr = self.features(x)
        a = self.config.num_anchors
        logits, deltas = {}, {}
        for lv, f in pyr.items():
            n, _, h, w, d = f.shape
            # (N, A, y, x, z) -> (N, z, y, x, A)
            logits[lv] = self.cls_subnet(f).permute(0, 4, 2, 3, 1)
            deltas[lv] = self.box_subnet(f).view(n, a, 6, h, w, d).permute(0, 5, 3, 4, 1, 2)
        return DetectorOutput(logits, deltas)

    def anchors_for(self, spatial_zyx) -> np.ndarray:
        key = tuple(int(v) for v in spatial_zyx)
        if key not in self._anchor_cache:
            shapes = self.config.feature_shapes(key)
            self._anchor_cache[key] = generate_all_anchors(shapes, self.config.anchors)
        return self._anchor_cache[key]

    @torch.no_grad()
    def predict(
        self,
        x: torch.Tensor,
        breast_ids: Sequence[str],
        crop_origins: Sequence[Sequence[float]] | None = None,
        score_threshold: float = 0.05,
        nms_threshold: float = 0.5,
        max_detections: int = 100,
        pre_nms_top_k: int = 1000,
    ) -> list[Detection]:
        """Scores above ``score_threshold`` (strictly), decoded, suppressed and
        mapped into original-volume coordinates via ``crop_origins``."""
        was_training = self.training
        self.eval()
        try:
            out = self(x)
        finally:
            self.train(was_training)
        spatial = _zyx(x.shape[2:])
        anchors = self.anchors_for(spatial)
        scores = torch.sigmoid(out.flat_logits()).double().cpu().numpy()
        deltas = out.flat_deltas().double().cpu().numpy()
        origins = np.zeros((len(x), 3)) if crop_origins is None else np.asarray(crop_origins, dtype=float)

        dets = []
        for b, bid in enumerate(breast_ids):
            idx = np.flatnonzero(scores[b] > score_threshold)
            if len(idx) > pre_nms_top_k:
                idx = idx[np.argsort(-scores[b, idx], kind="stable")[:pre_nms_top_k]]
            if len(idx) == 0:
                continue
            boxes = decode_boxes(anchors[idx], deltas[b, idx])
            keep = nms_indices(boxes, scores[b, idx], nms_threshold)[:max_detections]
            shift = np.concatenate([origins[b], origins[b]])
            for k in keep:
                box = BoundingBox3D.from_array(boxes[k] + shift)
                dets.append(Detection(box, float(scores[b, idx[k]]), bid))
        return dets


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# Checkpoint format: a zip archive holding ``network_config.json`` and one
# ``tensors/<state-dict key>.npy`` member per parameter or buffer (NumPy .npy
# v1 format, native dtype).
def save_checkpoint(path, model: RetinaNet3D, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("network_config.json", json.dumps(model.config.to_dict(), indent=2, sort_keys=True))
        if extra:
            zf.writestr("extra.json", json.dumps(extra, indent=2, sort_keys=True))
        for name, tensor in model.state_dict().items():
            arr = io.BytesIO()
            np.save(arr, tensor.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(f"tensors/{name}.npy", arr.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> RetinaNet3D:
    with zipfile.ZipFile(Path(path)) as zf:
        config = NetworkConfig.from_dict(json.loads(zf.read("network_config.json")))
        state = {}
        for name in zf.namelist():
            if name.startswith("tensors/") and name.endswith(".npy"):
                key = name[len("tensors/"):-len(".npy")]
                state[key] = torch.from_numpy(np.load(io.BytesIO(zf.read(name)), allow_pickle=False))
    model = RetinaNet3D(config)
    model.load_state_dict(state)
    return model
