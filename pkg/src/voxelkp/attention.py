"""Self-attention restricted to non-overlapping boxes of the voxel grid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import as_var, make
from .nn import LayerNorm, Linear, Module
from .sparse import SparseTensor, linear_keys


@dataclass
class BoxPartition:
    box_size: tuple
    box_ids: np.ndarray      # (n_boxes, 1 + D): batch then box coordinates
    box_of_row: np.ndarray   # (V,) index into box_ids
    order: np.ndarray        # rows grouped by box, canonical order inside a box
    starts: np.ndarray       # (n_boxes,) offsets into ``order``
    counts: np.ndarray       # (n_boxes,) members per box
    _buckets: list | None = field(default=None, repr=False, compare=False)

    def members(self, b: int) -> np.ndarray:
        return self.order[self.starts[b]:self.starts[b] + self.counts[b]]

    def __len__(self):
        return self.box_ids.shape[0]

    def buckets(self) -> list[np.ndarray]:
        """Boxes padded into ``(n, cap)`` row tables (``-1`` = padding).

        Boxes are bucketed by the power of two above their size so padding
        stays under 2x per bucket.
        """
        if self._buckets is None:
            cap = 1 << np.ceil(np.log2(np.maximum(self.counts, 1))).astype(np.int64)
            out = []
            for c in np.unique(cap):
                boxes = np.flatnonzero(cap == c)
                table = np.full((boxes.size, int(c)), -1, dtype=np.int64)
                for i, bx in enumerate(boxes):
                    m = self.members(bx)
                    table[i, :m.size] = m
                out.append(table)
            self._buckets = out
        return self._buckets


def partition(t: SparseTensor, box_size) -> BoxPartition:
    bs = np.broadcast_to(np.asarray(box_size, dtype=np.int64), (t.ndim,)).copy()
    if np.any(bs < 1):
        raise ValueError("box size components must be >= 1")
    coarse = t.indices.copy()
    coarse[:, 1:] //= bs
    box_shape = tuple(-(-n // b) for n, b in zip(t.spatial_shape, bs))
    keys = linear_keys(coarse, box_shape)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(inverse, kind="stable")   # stable keeps canonical row order per box
    counts = np.bincount(inverse, minlength=uniq.size)
    starts = np.cumsum(counts) - counts
    return BoxPartition(tuple(int(b) for b in bs), coarse[first], inverse.reshape(-1), order, starts, counts)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """``(nb, cap, C)`` -> ``(nb, heads, cap, C // heads)``."""
    nb, cap, c = x.shape
    return x.reshape(nb, cap, heads, c // heads).transpose(0, 2, 1, 3)


def box_attention_core(q, k, v, part: BoxPartition, heads: int, scale: float = 1.0):
    """``out_i = sum_j softmax_j(scale * q_i . k_j) v_j`` over members ``j`` of i's box, per head.

    ``q``, ``k``, ``v`` are ``(V, C)`` with ``C = heads * d``.
    """
    q, k, v = as_var(q), as_var(k), as_var(v)
    n, c = q.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    qv, kv, vv = q.value, k.value, v.value
    saved = []
    out = np.zeros_like(qv)
    for table in part.buckets():
        valid = table >= 0
        rows = np.where(valid, table, 0)
        Q, K, V = (_split_heads(x[rows], heads) for x in (qv, kv, vv))
        logits = (Q @ K.transpose(0, 1, 3, 2)) * scale
        logits = np.where(valid[:, None, None, :], logits, -np.inf)
        A = ag._softmax(logits, axis=-1)
        O = A @ V
        out[table[valid]] = O.transpose(0, 2, 1, 3).reshape(*rows.shape, c)[valid]
        saved.append((table, valid, rows, Q, K, V, A))

    def back(g):
        dq, dk, dv = np.zeros_like(qv), np.zeros_like(kv), np.zeros_like(vv)
        for table, valid, rows, Q, K, V, A in saved:
            G = _split_heads(np.where(valid[:, :, None], g[rows], 0), heads)
            dA = G @ V.transpose(0, 1, 3, 2)
            dV = A.transpose(0, 1, 3, 2) @ G
            dl = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
            dQ = dl @ K
            dK = dl.transpose(0, 1, 3, 2) @ Q
            sel = table[valid]
            for acc, blk in ((dq, dQ), (dk, dK), (dv, dV)):
                acc[sel] = blk.transpose(0, 2, 1, 3).reshape(*rows.shape, c)[valid]
        return dq, dk, dv

    return make(out.reshape(n, c), (q, k, v), back)


class BoxAttention(Module):
    """Projections f, g, h (queries, keys, values) and the output projection j."""

    def __init__(self, channels: int, heads: int, rng, scaled: bool = False,
                 pos_encoding: bool = False, ndim: int = 3, dtype=np.float32):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by {heads} heads")
        self.heads = heads
        self.scaled = scaled
        self.q = Linear(channels, channels, rng, dtype=dtype)
        self.k = Linear(channels, channels, rng, dtype=dtype)
        self.v = Linear(channels, channels, rng, dtype=dtype)
        self.out = Linear(channels, channels, rng, dtype=dtype)
        self.pos = Linear(ndim, channels, rng, dtype=dtype) if pos_encoding else None

    def __call__(self, x, part: BoxPartition, indices: np.ndarray | None = None):
        x = as_var(x)
        if self.pos is not None:
            rel = (indices[:, 1:] % np.asarray(part.box_size)) / np.asarray(part.box_size, dtype=float)
            x = ag.add(x, self.pos(rel.astype(x.dtype)))
        d = x.shape[1] // self.heads
        scale = 1.0 / np.sqrt(d) if self.scaled else 1.0
        att = box_attention_core(self.q(x), self.k(x), self.v(x), part, self.heads, scale)
        return self.out(att)


def box_self_attention(t: SparseTensor, part: BoxPartition, attn: BoxAttention) -> SparseTensor:
    return t.replace_features(attn(t.features, part, t.indices))


class AttentionBlock(Module):
    """Pre-norm residual wrapper: ``t + attention(norm(t))``."""

    def __init__(self, channels: int, heads: int, box_size, rng, scaled=False,
                 pos_encoding=False, ndim=3, dtype=np.float32):
        self.box_size = box_size
        self.norm = LayerNorm(channels, dtype=dtype)
        self.attn = BoxAttention(channels, heads, rng, scaled=scaled, pos_encoding=pos_encoding,
                                 ndim=ndim, dtype=dtype)

    def __call__(self, t: SparseTensor, part: BoxPartition | None = None) -> SparseTensor:
        part = part or partition(t, self.box_size)
        y = self.attn(self.norm(t.features), part, t.indices)
        return t.replace_features(ag.add(t.features, y))


def attention_block(t: SparseTensor, part: BoxPartition, block: AttentionBlock) -> SparseTensor:
    return block(t, part)
