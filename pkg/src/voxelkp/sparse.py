"""Sparse voxel tensors, voxelization and coordinate indexing.

Index rows are ``(batch, x, y[, z])``. Every constructor leaves rows in
canonical order: lexicographic by ``(batch, z, y, x)`` (reverse spatial
axes), which keeps each BEV column's voxels contiguous.
"""
from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

POINT_MAGIC = b"VKPC"
POINT_VERSION = 1


class SparseError(ValueError):
    pass


@dataclass
class PointCloud:
    """Raw points ``(N, C_in)``; columns are x, y, z in meters, then intensity, elongation."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] < 3:
            raise SparseError(f"points must be (N, C>=3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise SparseError("point cloud contains non-finite values")

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def __len__(self):
        return self.points.shape[0]


def linear_keys(indices: np.ndarray, spatial_shape: Sequence[int]) -> np.ndarray:
    """Collapse ``(batch, x, y, ...)`` rows into int64 keys ordered like the canonical sort."""
    indices = np.asarray(indices, dtype=np.int64)
    key = indices[:, 0].copy()
    for axis in range(len(spatial_shape) - 1, -1, -1):
        key = key * int(spatial_shape[axis]) + indices[:, axis + 1]
    return key


@dataclass
class SparseTensor:
    """Active sites of a batched voxel grid.

    ``features`` is usually an ``ndarray`` but network code stores an
    autograd ``Var`` there; ``values`` always gives the raw array.
    """

    features: object
    indices: np.ndarray
    spatial_shape: tuple
    batch_size: int
    _index: "VoxelIndex | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.spatial_shape = tuple(int(s) for s in self.spatial_shape)
        if self.indices.ndim != 2 or self.indices.shape[1] != len(self.spatial_shape) + 1:
            raise SparseError(
                f"indices must be (V, {len(self.spatial_shape) + 1}), got {self.indices.shape}"
            )
        if self.values.shape[0] != self.indices.shape[0]:
            raise SparseError("features and indices row counts differ")

    @property
    def values(self) -> np.ndarray:
        return getattr(self.features, "value", self.features)

    @property
    def ndim(self) -> int:
        return len(self.spatial_shape)

    @property
    def num_active(self) -> int:
        return self.indices.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def keys(self) -> np.ndarray:
        return linear_keys(self.indices, self.spatial_shape)

    def index(self) -> "VoxelIndex":
        if self._index is None:
            self._index = shared_index(self.indices, self.spatial_shape)
        return self._index

    def replace_features(self, features) -> "SparseTensor":
        # shares indices, and so the cached index
        return SparseTensor(features, self.indices, self.spatial_shape, self.batch_size, self._index)

    def validate(self):
        idx = self.indices
        if np.any(idx[:, 0] < 0) or np.any(idx[:, 0] >= self.batch_size):
            raise SparseError("batch index out of range")
        for axis, size in enumerate(self.spatial_shape):
            col = idx[:, axis + 1]
            if np.any(col < 0) or np.any(col >= size):
                raise SparseError(f"coordinate out of range on axis {axis}")
        keys = self.keys()
        if keys.size > 1 and np.any(np.diff(keys) <= 0):
            raise SparseError("rows are not unique and canonically sorted")

    def dense(self) -> np.ndarray:
        """Dense ``(B, *spatial_shape, C)`` copy; test/debug helper."""
        out = np.zeros((self.batch_size, *self.spatial_shape, self.channels), dtype=self.values.dtype)
        out[tuple(self.indices.T)] = self.values
        return out


def SparseTensor3D(features, indices, spatial_shape, batch_size) -> SparseTensor:
    if len(spatial_shape) != 3:
        raise SparseError("SparseTensor3D needs a 3-axis spatial shape")
    return SparseTensor(features, indices, spatial_shape, batch_size)


def SparseTensor2D(features, indices, spatial_shape, batch_size) -> SparseTensor:
    if len(spatial_shape) != 2:
        raise SparseError("SparseTensor2D needs a 2-axis spatial shape")
    return SparseTensor(features, indices, spatial_shape, batch_size)


class VoxelIndex:
    """Coordinate -> row lookup over a sorted table of linear keys."""

    EMPTY = -1

    def __init__(self, indices: np.ndarray, spatial_shape: Sequence[int]):
        self.spatial_shape = tuple(int(s) for s in spatial_shape)
        self.cache: dict = {}  # rulebooks keyed by kernel geometry
        keys = linear_keys(indices, self.spatial_shape)
        self._order = np.argsort(keys, kind="stable")
        self._sorted = keys[self._order]
        if self._sorted.size > 1 and np.any(np.diff(self._sorted) == 0):
            raise SparseError("duplicate coordinates")

    def __len__(self):
        return self._sorted.size

    @property
    def sorted_keys(self) -> np.ndarray:
        return self._sorted

    def rows_at(self, positions: np.ndarray) -> np.ndarray:
        """Rows for positions in ``sorted_keys``."""
        return self._order[positions]

    def lookup_many(self, coords: np.ndarray) -> np.ndarray:
        """Rows for ``coords`` (M, 1+D); out-of-grid or absent coordinates give -1."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, len(self.spatial_shape) + 1)
        inside = np.ones(coords.shape[0], dtype=bool)
        for axis, size in enumerate(self.spatial_shape):
            inside &= (coords[:, axis + 1] >= 0) & (coords[:, axis + 1] < size)
        inside &= coords[:, 0] >= 0
        out = np.full(coords.shape[0], self.EMPTY, dtype=np.int64)
        if not inside.any() or self._sorted.size == 0:
            return out
        keys = linear_keys(coords[inside], self.spatial_shape)
        pos = np.searchsorted(self._sorted, keys)
        pos_c = np.minimum(pos, self._sorted.size - 1)
        hit = self._sorted[pos_c] == keys
        rows = np.where(hit, self._order[pos_c], self.EMPTY)
        out[inside] = rows
        return out

    def lookup(self, coord) -> int | None:
        row = int(self.lookup_many(np.asarray(coord)[None])[0])
        return None if row == self.EMPTY else row

    def coordinates(self) -> np.ndarray:
        """Enumerate stored coordinates in row order (inverse of the key map)."""
        shape = self.spatial_shape
        keys = np.empty_like(self._sorted)
        keys[self._order] = self._sorted
        cols = []
        rest = keys
        for size in shape:
            cols.append(rest % size)
            rest = rest // size
        return np.stack([rest, *cols], axis=1)


_INDEX_CACHE: "OrderedDict[tuple, VoxelIndex]" = OrderedDict()
INDEX_CACHE_SIZE = 64


def shared_index(indices: np.ndarray, spatial_shape: Sequence[int]) -> VoxelIndex:
    """VoxelIndex for ``indices``, reused (with its rulebooks) when the same site set recurs."""
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    key = (tuple(int(s) for s in spatial_shape), indices.shape,
           hashlib.blake2b(indices.tobytes(), digest_size=16).digest())
    hit = _INDEX_CACHE.get(key)
    if hit is not None:
        _INDEX_CACHE.move_to_end(key)
        return hit
    idx = VoxelIndex(indices, spatial_shape)
    _INDEX_CACHE[key] = idx
    if len(_INDEX_CACHE) > INDEX_CACHE_SIZE:
        _INDEX_CACHE.popitem(last=False)
    return idx


def clear_index_cache():
    _INDEX_CACHE.clear()


def build_index(t: SparseTensor) -> VoxelIndex:
    return t.index()


def canonical_sort(t: SparseTensor) -> SparseTensor:
    keys = t.keys()
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if sk.size > 1 and np.any(np.diff(sk) == 0):
        raise SparseError("duplicate coordinates")
    feats = t.values[order]
    return SparseTensor(feats, t.indices[order], t.spatial_shape, t.batch_size)


def grid_shape(point_range: Sequence[float], voxel_size: Sequence[float]) -> tuple:
    lo = np.asarray(point_range[:3], dtype=np.float64)
    hi = np.asarray(point_range[3:], dtype=np.float64)
    vs = np.asarray(voxel_size, dtype=np.float64)
    if np.any(vs <= 0):
        raise SparseError("voxel size must be positive")
    if np.any(hi - lo <= 0):
        raise SparseError("point range must have positive extent")
    # 150.4 / 0.1 lands a hair under 1504 in floating point
    return tuple(int(n) for n in np.ceil((hi - lo) / vs - 1e-6))


def voxelize(
    clouds: PointCloud | Sequence[PointCloud],
    point_range: Sequence[float],
    voxel_size: Sequence[float],
    dtype=np.float32,
) -> SparseTensor:
    """Mean-pool points into voxels.

    Args:
        clouds: one cloud, or a list forming the batch.
        point_range: ``(xmin, ymin, zmin, xmax, ymax, zmax)``; the max edge is exclusive.
        voxel_size: ``(dx, dy, dz)`` in meters.

    Returns:
        SparseTensor with ``(batch, x, y, z)`` indices and per-voxel mean features.
    """
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    shape = grid_shape(point_range, voxel_size)
    lo = np.asarray(point_range[:3], dtype=np.float64)
    hi = np.asarray(point_range[3:], dtype=np.float64)
    vs = np.asarray(voxel_size, dtype=np.float64)

    all_idx, all_feat = [], []
    for b, cloud in enumerate(clouds):
        pts = cloud.points
        xyz = pts[:, :3].astype(np.float64)
        keep = np.all((xyz >= lo) & (xyz < hi), axis=1)
        cell = np.floor((xyz[keep] - lo) / vs).astype(np.int64)
        ok = np.all(cell < np.asarray(shape), axis=1)
        cell = cell[ok]
        all_idx.append(np.column_stack([np.full(len(cell), b, dtype=np.int64), cell]))
        all_feat.append(pts[keep][ok])
    idx = np.concatenate(all_idx) if all_idx else np.zeros((0, 4), dtype=np.int64)
    feat = np.concatenate(all_feat).astype(np.float64) if all_feat else np.zeros((0, 0))
    if idx.shape[0] == 0:
        raise SparseError("no active voxels")

    keys = linear_keys(idx, shape)
    # stable: each voxel's points are summed in input order
    order = np.argsort(keys, kind="stable")
    keys, idx, feat = keys[order], idx[order], feat[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    counts = np.diff(np.r_[starts, keys.size])
    sums = np.add.reduceat(feat, starts, axis=0)
    means = (sums / counts[:, None]).astype(dtype)
    return SparseTensor(means, idx[starts], shape, len(clouds))


# --- point cloud files -----------------------------------------------------

def write_points(path, cloud: PointCloud):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, cloud.points, delimiter=",", fmt="%.9g")
        return
    with open(path, "wb") as fh:
        fh.write(pack_points(cloud))


def pack_points(cloud: PointCloud) -> bytes:
    n, c = cloud.points.shape
    return POINT_MAGIC + struct.pack("<III", POINT_VERSION, n, c) + cloud.points.astype("<f4").tobytes()


def unpack_points(buf: bytes, offset: int = 0) -> tuple[PointCloud, int]:
    """Parse a VKPC block starting at ``offset``; returns the cloud and the end offset."""
    if len(buf) < offset + 16 or buf[offset:offset + 4] != POINT_MAGIC:
        raise SparseError("bad point-cloud magic")
    version, n, c = struct.unpack_from("<III", buf, offset + 4)
    if version != POINT_VERSION:
        raise SparseError(f"unsupported point-cloud version {version}")
    start = offset + 16
    end = start + 4 * n * c
    if len(buf) < end:
        raise SparseError("truncated point-cloud payload")
    pts = np.frombuffer(buf, dtype="<f4", count=n * c, offset=start).reshape(n, c)
    return PointCloud(pts.astype(np.float32)), end


def read_points(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        pts = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        return PointCloud(pts)
    buf = path.read_bytes()
    cloud, end = unpack_points(buf)
    return cloud
