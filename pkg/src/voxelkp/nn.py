"""Differentiable sparse-convolution primitives and small layer modules.

Convolutions run off a rulebook: for every kernel offset, the list of
``(input_row, output_row)`` pairs it connects. Within one offset an input
row feeds at most one output row and vice versa, so gathers and scatters
per offset never collide.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Param, Var, as_var, make
from .sparse import SparseTensor, VoxelIndex, linear_keys


@dataclass
class Rulebook:
    offsets: np.ndarray          # (K, D) kernel offsets, or (K, 1) for column taps
    in_rows: list                # per offset: int64 input rows
    out_rows: list               # per offset: int64 output rows
    num_out: int

    @property
    def num_pairs(self) -> int:
        return int(sum(r.size for r in self.in_rows))


def kernel_offsets(kernel_size: Sequence[int]) -> np.ndarray:
    """Offsets of an odd kernel in C order over the axes, centered on zero."""
    ks = [int(k) for k in kernel_size]
    if any(k % 2 == 0 for k in ks):
        raise ValueError(f"kernel dims must be odd, got {ks}")
    ranges = [range(-(k // 2), k // 2 + 1) for k in ks]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64)


def _as_tuple(v, ndim) -> tuple:
    if np.isscalar(v):
        return (int(v),) * ndim
    return tuple(int(x) for x in v)


def _pairs_by_probe(out_coords: np.ndarray, index: VoxelIndex, offsets: np.ndarray,
                    stride: Sequence[int]) -> tuple[list, list]:
    """For each offset, probe input site ``out * stride + offset`` in ``index``.

    Inside the grid an offset shifts every linear key by the same constant,
    so each probe is one ``searchsorted`` of an already sorted key run.
    """
    n_out = out_coords.shape[0]
    shape = np.asarray(index.spatial_shape, dtype=np.int64)
    base = out_coords[:, 1:] * np.asarray(stride, dtype=np.int64)
    base_keys = linear_keys(np.column_stack([out_coords[:, :1], base]), index.spatial_shape)
    # key weight of each spatial axis (x fastest)
    weights = np.cumprod(np.r_[1, shape[:-1]])
    table = index.sorted_keys
    in_rows, out_rows = [], []
    ar = np.arange(n_out, dtype=np.int64)
    for off in offsets:
        p = base + off
        ok = np.all((p >= 0) & (p < shape), axis=1)
        keys = base_keys[ok] + int(off @ weights)
        pos = np.searchsorted(table, keys)
        pos_c = np.minimum(pos, max(table.size - 1, 0))
        hit = table[pos_c] == keys if table.size else np.zeros(keys.size, dtype=bool)
        in_rows.append(index.rows_at(pos_c[hit]))
        out_rows.append(ar[ok][hit])
    return in_rows, out_rows


def subm_rulebook(t: SparseTensor, kernel_size) -> Rulebook:
    """Rulebook for a submanifold conv: outputs are exactly the input sites."""
    ks = _as_tuple(kernel_size, t.ndim)
    index = t.index()
    cache = index.cache
    key = ("subm", ks)
    if key not in cache:
        offs = kernel_offsets(ks)
        in_rows, out_rows = _pairs_by_probe(t.indices, index, offs, (1,) * t.ndim)
        cache[key] = Rulebook(offs, in_rows, out_rows, t.num_active)
    return cache[key]


def strided_rulebook(t: SparseTensor, kernel_size, stride) -> tuple[Rulebook, np.ndarray, tuple]:
    """Rulebook for a regular sparse conv with centered kernel and padding ``k // 2``.

    Output sites are the cells ``floor(input / stride)`` of the active inputs,
    so the active set never dilates; each output sums over every active input
    in its ``k``-footprint around ``out * stride``. Returns the rulebook, the
    canonically ordered output indices, the output spatial shape
    ``ceil(shape / stride)`` and the output's index.
    """
    ks = _as_tuple(kernel_size, t.ndim)
    st = _as_tuple(stride, t.ndim)
    if any(s < 1 for s in st):
        raise ValueError("stride components must be >= 1")
    if any(k // 2 < s - 1 for k, s in zip(ks, st)):
        raise ValueError("kernel footprint must cover a whole stride cell")
    index = t.index()
    cache = index.cache
    key = ("strided", ks, st)
    if key in cache:
        return cache[key]
    offs = kernel_offsets(ks)
    out_shape = tuple(-(-n // s) for n, s in zip(t.spatial_shape, st))
    cand = t.indices.copy()
    cand[:, 1:] //= np.asarray(st, dtype=np.int64)
    keys = linear_keys(cand, out_shape)
    _, first = np.unique(keys, return_index=True)
    out_idx = cand[first]               # np.unique sorts keys -> canonical order
    out_index = VoxelIndex(out_idx, out_shape)
    in_rows, out_rows = _pairs_by_probe(out_idx, index, offs, st)
    rb = Rulebook(offs, in_rows, out_rows, out_idx.shape[0])
    cache[key] = (rb, out_idx, out_shape, out_index)
    return cache[key]


def rulebook_conv(x, w, b, rb: Rulebook) -> Var:
    """``out[o] = sum_k w[k].T x[i] + b`` over rulebook pairs ``(i, o)`` of offset ``k``.

    ``w`` has shape ``(K, C_in, C_out)``.
    """
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"conv: input has {xv.shape[1]} channels, kernel expects {wv.shape[1]}")
    if wv.shape[0] != len(rb.in_rows):
        raise ValueError("kernel volume does not match rulebook")
    c_out = wv.shape[2]
    out = np.zeros((rb.num_out, c_out), dtype=np.result_type(xv, wv))
    for k, (ir, orr) in enumerate(zip(rb.in_rows, rb.out_rows)):
        if ir.size:
            out[orr] += xv[ir] @ wv[k]
    inputs = (x, w) if b is None else (x, w, as_var(b))
    if b is not None:
        out += inputs[2].value

    def back(g):
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for k, (ir, orr) in enumerate(zip(rb.in_rows, rb.out_rows)):
            if ir.size:
                go = g[orr]
                gx[ir] += go @ wv[k].T
                gw[k] = xv[ir].T @ go
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make(out, inputs, back)


def _flatten_kernel(weights, ndim):
    w = as_var(weights)
    if w.value.ndim == ndim + 2:
        ks = w.shape[:ndim]
        return ag.reshape(w, (int(np.prod(ks)), w.shape[-2], w.shape[-1])), ks
    return w, None


def subm_conv(t: SparseTensor, weights, bias=None, kernel_size=None) -> SparseTensor:
    """Submanifold conv. ``weights``: ``(k1, .., kD, C_in, C_out)`` or flattened ``(K, C_in, C_out)``."""
    w, ks = _flatten_kernel(weights, t.ndim)
    ks = ks or kernel_size
    if ks is None:
        raise ValueError("kernel_size required for flattened weights")
    if t.channels != w.shape[1]:
        raise ValueError(f"conv: input has {t.channels} channels, kernel expects {w.shape[1]}")
    rb = subm_rulebook(t, ks)
    return t.replace_features(rulebook_conv(t.features, w, bias, rb))


def subm_conv3d(t, weights, bias=None):
    return subm_conv(t, weights, bias)


def sparse_conv_strided(t: SparseTensor, weights, bias=None, stride=2, kernel_size=None) -> SparseTensor:
    w, ks = _flatten_kernel(weights, t.ndim)
    ks = ks or kernel_size
    if t.channels != w.shape[1]:
        raise ValueError(f"conv: input has {t.channels} channels, kernel expects {w.shape[1]}")
    rb, out_idx, out_shape, out_index = strided_rulebook(t, ks, stride)
    feats = rulebook_conv(t.features, w, bias, rb)
    return SparseTensor(feats, out_idx, out_shape, t.batch_size, out_index)


sparse_conv3d_strided = sparse_conv_strided


# --- modules -------------------------------------------------------------

class Module:
    """Parameter container; children are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Param):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{n}": p.value for n, p in self.named_parameters()}
        state.update({f"buffer/{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        for n, p in params.items():
            key = f"param/{n}"
            if key not in state:
                raise KeyError(f"missing parameter {n}")
            if state[key].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {n}: {state[key].shape} vs {p.value.shape}")
            p.value = state[key].astype(p.value.dtype).copy()
            p.grad = np.zeros_like(p.value)
        for m_prefix, m in self._named_modules():
            for name in getattr(m, "_buffers", ()):
                key = f"buffer/{m_prefix}{name}"
                if key in state:
                    setattr(m, name, state[key].astype(getattr(m, name).dtype).copy())

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val._named_modules(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")


def _uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias=True, dtype=np.float32):
        self.weight = Param(_uniform(rng, c_in, (c_in, c_out), dtype))
        self.bias = Param(_uniform(rng, c_in, (c_out,), dtype)) if bias else None

    def __call__(self, x) -> Var:
        return ag.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Var:
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))

    def __call__(self, x) -> Var:
        return ag.layer_norm(x, self.gamma, self.beta)


class SubMConv(Module):
    def __init__(self, ndim, c_in, c_out, kernel_size, rng, bias=True, dtype=np.float32):
        self.kernel_size = _as_tuple(kernel_size, ndim)
        vol = int(np.prod(self.kernel_size))
        fan_in = vol * c_in
        self.weight = Param(_uniform(rng, fan_in, (vol, c_in, c_out), dtype))
        self.bias = Param(_uniform(rng, fan_in, (c_out,), dtype)) if bias else None

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return subm_conv(t, self.weight, self.bias, kernel_size=self.kernel_size)


class SparseConv(Module):
    def __init__(self, ndim, c_in, c_out, kernel_size, stride, rng, bias=True, dtype=np.float32):
        self.kernel_size = _as_tuple(kernel_size, ndim)
        self.stride = _as_tuple(stride, ndim)
        vol = int(np.prod(self.kernel_size))
        fan_in = vol * c_in
        self.weight = Param(_uniform(rng, fan_in, (vol, c_in, c_out), dtype))
        self.bias = Param(_uniform(rng, fan_in, (c_out,), dtype)) if bias else None

    def __call__(self, t: SparseTensor) -> SparseTensor:
        return sparse_conv_strided(t, self.weight, self.bias, self.stride, kernel_size=self.kernel_size)


class ConvBNReLU(Module):
    """Submanifold (stride 1) or regular sparse (stride > 1) conv, then BN and ReLU."""

    def __init__(self, ndim, c_in, c_out, kernel_size, rng, stride=1, dtype=np.float32):
        if _as_tuple(stride, ndim) == (1,) * ndim:
            self.conv = SubMConv(ndim, c_in, c_out, kernel_size, rng, bias=False, dtype=dtype)
        else:
            self.conv = SparseConv(ndim, c_in, c_out, kernel_size, stride, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def __call__(self, t: SparseTensor, relu=True) -> SparseTensor:
        y = self.conv(t)
        f = self.bn(y.features)
        return y.replace_features(ag.relu(f) if relu else f)


# --- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"VKPW"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def unpack_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError("truncated checkpoint")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]):
    Path(path).write_bytes(pack_tensors(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return unpack_tensors(path.read_bytes())
