"""VoxelKP assembly: stem, four sparse stages, BEV fusion, prediction heads, decoding."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autograd as ag
from .attention import AttentionBlock, partition
from .autograd import Var
from .bev import BevConfig, HeightEncoder, multiscale_fuse
from .nn import BatchNorm, ConvBNReLU, Linear, Module, SubMConv
from .pose import PoseEstimate
from .sparse import PointCloud, SparseTensor, grid_shape, voxelize
from .ssk import SSKBlock, SskConfig


@dataclass
class NetworkConfig:
    in_channels: int = 5
    channels: list = field(default_factory=lambda: [64, 128, 256, 256, 256])
    down_kernels: list = field(default_factory=lambda: [5, 5, 3, 3, 3])  # stem, stage 1..4
    point_range: list = field(default_factory=lambda: [-75.2, -75.2, -2.0, 75.2, 75.2, 4.0])
    voxel_size: list = field(default_factory=lambda: [0.1, 0.1, 0.1])
    ssk_kernels: list = field(default_factory=lambda: [3, 5])
    ssk_blocks: int = 2
    attn_blocks: int = 2
    attn_heads: int = 4
    box_size: int = 8
    attn_scaled: bool = False
    attn_pos_encoding: bool = False
    hybrid: bool = True
    bev_mode: str = "spatial"      # "spatial" or "3d" (heads straight on stage-2 voxels)
    bev: BevConfig = field(default_factory=BevConfig)
    head_channels: int = 64
    num_keypoints: int = 14

    def __post_init__(self):
        if isinstance(self.bev, dict):
            self.bev = BevConfig(**self.bev)
        if len(self.channels) != 5:
            raise ValueError("channels needs five entries: stem + four stages")
        if len(self.down_kernels) != 5:
            raise ValueError("down_kernels needs five entries")
        if self.bev_mode not in ("spatial", "3d"):
            raise ValueError(f"unknown bev_mode {self.bev_mode!r}")
        if self.bev.channels < max(self.channels[s] for s in self.bev.source_stages):
            raise ValueError("BEV channels must not shrink the source channels")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        d = dict(d)
        if "bev" in d:
            bev_known = {f.name for f in fields(BevConfig)}
            extra = set(d["bev"]) - bev_known
            if extra:
                raise ValueError(f"unknown bev config keys: {sorted(extra)}")
            d["bev"] = BevConfig(**d["bev"])
        return cls(**d)

    def grid(self) -> tuple:
        return grid_shape(self.point_range, self.voxel_size)

    def stage_shapes(self) -> list:
        """Spatial shapes after the stem (index 0) and each stage (1..4)."""
        shape = self.grid()
        out = []
        for _ in range(5):
            shape = tuple(-(-s // 2) for s in shape)
            out.append(shape)
        return out

    def stage_stride(self, stage: int) -> int:
        return 2 ** (stage + 1)


HEAD_NAMES = ("heatmap", "box_size", "rotation", "x_set", "y_set", "z_set", "visibility", "iou")


def head_dims(k: int) -> dict:
    return {"heatmap": 1, "box_size": 3, "rotation": 2, "x_set": k + 1, "y_set": k + 1,
            "z_set": k + 1, "visibility": k, "iou": 1}


@dataclass
class HeadOutputs:
    """Per-site predictions; every head shares ``indices``.

    The x/y/z sets hold global coordinates: column 0 is the box center, then
    one column per keypoint.
    """

    indices: np.ndarray
    positions: np.ndarray     # (V, D) metric site centers
    spatial_shape: tuple
    batch_size: int
    heads: dict

    def __getattr__(self, name):
        heads = self.__dict__.get("heads")
        if heads is not None and name in heads:
            return heads[name]
        raise AttributeError(name)

    def value(self, name) -> np.ndarray:
        return self.heads[name].value

    @property
    def num_sites(self) -> int:
        return self.indices.shape[0]


class Stem(Module):
    """conv-BN-ReLU, a two-layer residual block, then one stride-2 downsample."""

    def __init__(self, c_in, c_out, down_kernel, rng, dtype=np.float32):
        self.conv_in = ConvBNReLU(3, c_in, c_out, 3, rng, dtype=dtype)
        self.conv1 = ConvBNReLU(3, c_out, c_out, 3, rng, dtype=dtype)
        self.conv2 = ConvBNReLU(3, c_out, c_out, 3, rng, dtype=dtype)
        self.down = ConvBNReLU(3, c_out, c_out, down_kernel, rng, stride=2, dtype=dtype)

    def __call__(self, t: SparseTensor) -> SparseTensor:
        x = self.conv_in(t)
        y = self.conv2(self.conv1(x), relu=False)
        x = x.replace_features(ag.relu(ag.add(y.features, x.features)))
        return self.down(x)


class MLPBranch(Module):
    def __init__(self, channels, rng, depth=3, dtype=np.float32):
        self.linears = [Linear(channels, channels, rng, dtype=dtype) for _ in range(depth)]
        self.norms = [BatchNorm(channels, dtype=dtype) for _ in range(depth)]

    def __call__(self, x) -> Var:
        for lin, bn in zip(self.linears, self.norms):
            x = ag.relu(bn(lin(x)))
        return x


class Stage(Module):
    def __init__(self, stage_id: int, cfg: NetworkConfig, rng, dtype=np.float32):
        if stage_id not in (1, 2, 3, 4):
            raise ValueError("stage_id must be in 1..4")
        self.stage_id = stage_id
        c_in, c_out = cfg.channels[stage_id - 1], cfg.channels[stage_id]
        self.down = ConvBNReLU(3, c_in, c_out, cfg.down_kernels[stage_id], rng, stride=2, dtype=dtype)
        if stage_id <= 2:
            scfg = SskConfig(c_out, list(cfg.ssk_kernels))
            self.blocks = [SSKBlock(scfg, rng, dtype=dtype) for _ in range(cfg.ssk_blocks)]
        else:
            self.blocks = [AttentionBlock(c_out, cfg.attn_heads, cfg.box_size, rng, scaled=cfg.attn_scaled,
                                          pos_encoding=cfg.attn_pos_encoding, dtype=dtype)
                           for _ in range(cfg.attn_blocks)]
        self.box_size = cfg.box_size
        self.mlp = MLPBranch(c_out, rng, dtype=dtype) if cfg.hybrid else None

    def conv_path(self, x: SparseTensor) -> SparseTensor:
        y = x
        if self.stage_id <= 2:
            for blk in self.blocks:
                y = blk(y)
        else:
            part = partition(x, self.box_size)
            for blk in self.blocks:
                y = blk(y, part)
        return y

    def __call__(self, t: SparseTensor) -> SparseTensor:
        x = self.down(t)
        y = self.conv_path(x)
        if self.mlp is None:
            return y
        return y.replace_features(ag.add(y.features, self.mlp(x.features)))


class Head(Module):
    def __init__(self, ndim, c_in, c_mid, c_out, rng, dtype=np.float32):
        self.conv = SubMConv(ndim, c_in, c_mid, 3, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm(c_mid, dtype=dtype)
        self.out = Linear(c_mid, c_out, rng, dtype=dtype)

    def __call__(self, t: SparseTensor) -> Var:
        return self.out(ag.relu(self.bn(self.conv(t).features)))


class VoxelKP(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ch = cfg.channels
        self.stem = Stem(cfg.in_channels, ch[0], cfg.down_kernels[0], rng, dtype=dtype)
        self.stages = [Stage(s, cfg, rng, dtype=dtype) for s in (1, 2, 3, 4)]
        shapes = cfg.stage_shapes()
        k = cfg.num_keypoints
        if cfg.bev_mode == "spatial":
            self.encoders = [HeightEncoder(shapes[s][2], ch[s], cfg.bev.channels, rng, dtype=dtype)
                             for s in cfg.bev.source_stages]
            self.refine = [ConvBNReLU(2, cfg.bev.channels, cfg.bev.channels, 3, rng, dtype=dtype)
                           for _ in range(cfg.bev.refine_layers)]
            head_ndim, head_in = 2, cfg.bev.channels
        else:
            self.encoders, self.refine = [], []
            head_ndim, head_in = 3, ch[min(cfg.bev.source_stages)]
        dims = head_dims(k)
        self.heads = [Head(head_ndim, head_in, cfg.head_channels, dims[n], rng, dtype=dtype)
                      for n in HEAD_NAMES]

    # -- pieces, exposed for tests ----------------------------------------
    def backbone(self, t: SparseTensor) -> list:
        """Stem then stages; returns ``[stem_out, stage1, .., stage4]``."""
        outs = [self.stem(t)]
        last = 4 if self.cfg.bev_mode == "spatial" else min(self.cfg.bev.source_stages)
        for stage in self.stages[:last]:
            outs.append(stage(outs[-1]))
        return outs

    def bev_features(self, feats: list) -> SparseTensor:
        cfg = self.cfg
        if cfg.bev_mode == "3d":
            return feats[min(cfg.bev.source_stages)]
        bevs = [enc(feats[s]) for enc, s in zip(self.encoders, cfg.bev.source_stages)]
        x = multiscale_fuse(bevs, cfg.bev.scale_weights())
        for layer in self.refine:
            x = layer(x)
        return x

    def site_positions(self, x: SparseTensor) -> np.ndarray:
        cfg = self.cfg
        stride = cfg.stage_stride(min(cfg.bev.source_stages))
        lo = np.asarray(cfg.point_range[:x.ndim], dtype=np.float64)
        cell = np.asarray(cfg.voxel_size[:x.ndim], dtype=np.float64) * stride
        return lo + (x.indices[:, 1:] + 0.5) * cell

    def predict(self, x: SparseTensor) -> HeadOutputs:
        pos = self.site_positions(x)
        out = {}
        for name, head in zip(HEAD_NAMES, self.heads):
            y = head(x)
            axis = {"x_set": 0, "y_set": 1, "z_set": 2}.get(name)
            # x/y(/z) sets regress a residual on top of the site's own position
            if axis is not None and axis < pos.shape[1]:
                y = ag.add(y, pos[:, axis:axis + 1].astype(y.dtype))
            out[name] = y
        return HeadOutputs(x.indices, pos, x.spatial_shape, x.batch_size, out)

    def forward_tensor(self, t: SparseTensor) -> HeadOutputs:
        feats = self.backbone(t)
        return self.predict(self.bev_features(feats))

    def voxelize(self, clouds) -> SparseTensor:
        dtype = self.parameters()[0].value.dtype
        if isinstance(clouds, PointCloud):
            clouds = [clouds]
        return voxelize(clouds, self.cfg.point_range, self.cfg.voxel_size, dtype=dtype)

    def __call__(self, clouds) -> HeadOutputs:
        return self.forward_tensor(self.voxelize(clouds))


def forward(cloud, cfg: NetworkConfig, model: VoxelKP) -> HeadOutputs:
    if model.cfg is not cfg and model.cfg != cfg:
        raise ValueError("model was built for a different config")
    return model(cloud)


def _sigmoid(x):
    return ag._sigmoid(np.asarray(x, dtype=np.float64))


def local_maxima(h: HeadOutputs, scores: np.ndarray) -> np.ndarray:
    """Boolean mask of sites whose score is >= every active neighbor in the 3^D window."""
    from .sparse import VoxelIndex
    from .nn import kernel_offsets

    idx = VoxelIndex(h.indices, h.spatial_shape)
    offs = kernel_offsets((3,) * (h.indices.shape[1] - 1))
    keep = np.ones(h.num_sites, dtype=bool)
    for off in offs:
        if not off.any():
            continue
        probe = h.indices.copy()
        probe[:, 1:] += off
        rows = idx.lookup_many(probe)
        hit = rows >= 0
        keep[hit] &= scores[hit] >= scores[rows[hit]]
    return keep


def decode(h: HeadOutputs, score_threshold: float = 0.3, max_detections: int = 50,
           iou_weight: float = 0.5) -> list:
    """Peak-pick the heatmap and read every head at each peak.

    Returns PoseEstimates sorted by batch sample, then descending score; at
    most ``max_detections`` per sample.
    """
    if not (0 <= score_threshold <= 1 and 0 <= iou_weight <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    heat = _sigmoid(h.value("heatmap")[:, 0])
    iou = _sigmoid(h.value("iou")[:, 0])
    cand = local_maxima(h, heat) & (heat >= score_threshold)
    score = heat ** (1 - iou_weight) * iou ** iou_weight
    xs, ys, zs = (h.value(n).astype(np.float64) for n in ("x_set", "y_set", "z_set"))
    sizes = h.value("box_size").astype(np.float64)
    rot = h.value("rotation").astype(np.float64)
    vis = _sigmoid(h.value("visibility"))
    results = []
    for b in range(h.batch_size):
        rows = np.flatnonzero(cand & (h.indices[:, 0] == b))
        rows = rows[np.argsort(-score[rows], kind="stable")][:max_detections]
        for r in rows:
            results.append(PoseEstimate(
                score=float(score[r]),
                center=np.array([xs[r, 0], ys[r, 0], zs[r, 0]]),
                size=sizes[r].copy(),
                yaw=float(np.arctan2(rot[r, 0], rot[r, 1])),
                keypoints=np.stack([xs[r, 1:], ys[r, 1:], zs[r, 1:]], axis=1),
                visibility=vis[r].astype(np.float64),
                batch=b,
            ))
    return results


