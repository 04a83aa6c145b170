"""Height-encoded BEV projection and scale-offset multi-scale fusion."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .nn import Module, Rulebook, _uniform, rulebook_conv
from .autograd import Param
from .sparse import SparseTensor, linear_keys, shared_index


@dataclass
class BevConfig:
    source_stages: list = field(default_factory=lambda: [2, 3, 4])
    channels: int = 384
    height_weights: list | None = None  # None -> (r + 1) / R
    refine_layers: int = 2

    def scale_weights(self) -> list:
        R = len(self.source_stages)
        if self.height_weights is not None:
            if len(self.height_weights) != R:
                raise ValueError("one height weight per source stage")
            return list(self.height_weights)
        return [(r + 1) / R for r in range(R)]


def column_rulebook(t: SparseTensor) -> tuple[Rulebook, np.ndarray, tuple]:
    """Rulebook whose k-th tap connects every voxel at height k to its (batch, x, y) column."""
    cache = t.index().cache
    if "columns" in cache:
        return cache["columns"]
    shape2d = t.spatial_shape[:2]
    cols = t.indices[:, :3]
    keys = linear_keys(cols, shape2d)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    z = t.indices[:, 3]
    in_rows, out_rows = [], []
    for level in range(t.spatial_shape[2]):
        rows = np.flatnonzero(z == level)
        in_rows.append(rows)
        out_rows.append(inverse[rows])
    offs = np.arange(t.spatial_shape[2], dtype=np.int64)[:, None]
    cache["columns"] = (Rulebook(offs, in_rows, out_rows, uniq.size), cols[first], shape2d)
    return cache["columns"]


def height_encode(t: SparseTensor, weights, bias=None) -> SparseTensor:
    """Collapse the z axis with a ``(1, 1, h)`` kernel, ``h = Z``.

    ``weights``: ``(Z, C_in, C_out)``; every height gets its own tap.
    """
    w = ag.as_var(weights)
    if w.shape[0] != t.spatial_shape[2]:
        raise ValueError(f"kernel height {w.shape[0]} != grid height {t.spatial_shape[2]}")
    if w.shape[1] != t.channels:
        raise ValueError(f"height encode: input has {t.channels} channels, kernel expects {w.shape[1]}")
    rb, idx2d, shape2d = column_rulebook(t)
    return SparseTensor(rulebook_conv(t.features, w, bias, rb), idx2d, shape2d, t.batch_size)


class HeightEncoder(Module):
    def __init__(self, height: int, c_in: int, c_out: int, rng, dtype=np.float32):
        fan_in = height * c_in
        self.weight = Param(_uniform(rng, fan_in, (height, c_in, c_out), dtype))
        self.bias = Param(_uniform(rng, fan_in, (c_out,), dtype))

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return height_encode(t, self.weight, self.bias)


def scale_offset_map(xy, r: int):
    """``(x, y) -> (x * 2**r + r, y * 2**r + r)``; works on scalars or integer arrays."""
    if r < 0:
        raise ValueError("scale level must be >= 0")
    if isinstance(xy, tuple):
        return tuple(int(c) * 2 ** r + r for c in xy)
    return np.asarray(xy, dtype=np.int64) * (2 ** r) + r


def fused_shape(shapes: Sequence[tuple]) -> tuple:
    """Lattice large enough to hold every remapped map."""
    ext = np.zeros(2, dtype=np.int64)
    for r, shp in enumerate(shapes):
        top = (np.asarray(shp, dtype=np.int64) - 1) * 2 ** r + r + 1
        ext = np.maximum(ext, top)
    return tuple(int(e) for e in ext)


def multiscale_fuse(bevs: Sequence[SparseTensor], weights: Sequence[float] | None = None) -> SparseTensor:
    """Remap each scale-r map by ``scale_offset_map``, scale by its height weight, sum collisions."""
    R = len(bevs)
    if R == 0:
        raise ValueError("nothing to fuse")
    weights = [(r + 1) / R for r in range(R)] if weights is None else list(weights)
    if len({b.channels for b in bevs}) != 1 or len({b.batch_size for b in bevs}) != 1:
        raise ValueError("BEV maps must share channels and batch size")
    shape = fused_shape([b.spatial_shape for b in bevs])
    idx = np.concatenate([
        np.column_stack([b.indices[:, 0], scale_offset_map(b.indices[:, 1:], r)])
        for r, b in enumerate(bevs)
    ])
    feats = ag.concat([ag.scale(b.features, w) for b, w in zip(bevs, weights)], axis=0)
    keys = linear_keys(idx, shape)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    out = ag.segment_sum(feats, inverse.reshape(-1), uniq.size)
    out_idx = idx[first]
    return SparseTensor(out, out_idx, shape, bevs[0].batch_size, shared_index(out_idx, shape))
