"""Sparse selective kernel block: multi-branch submanifold convs with
softmax channel selection across branches."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .nn import BatchNorm, Linear, Module, SubMConv
from .sparse import SparseTensor


@dataclass
class SskConfig:
    channels: int
    kernel_sizes: list = field(default_factory=lambda: [3, 5])
    squeeze_ratio: float = 0.25

    @property
    def squeeze_dim(self) -> int:
        return max(1, int(round(self.squeeze_ratio * self.channels)))

    def __post_init__(self):
        if len(self.kernel_sizes) < 2:
            raise ValueError("SSK needs at least two branches")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError("SSK kernel sizes must be odd")


def sparse_gap(t: SparseTensor):
    """Per-sample mean of active feature rows, shape ``(batch_size, C)``."""
    counts = np.bincount(t.indices[:, 0], minlength=t.batch_size)
    if np.any(counts == 0):
        raise ValueError("sample has no active voxels")
    return ag.segment_mean(t.features, t.indices[:, 0], t.batch_size)


class SSK(Module):
    def __init__(self, cfg: SskConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c, z = cfg.channels, cfg.squeeze_dim
        self.branches = [SubMConv(3, c, c, k, rng, bias=True, dtype=dtype) for k in cfg.kernel_sizes]
        self.squeeze = Linear(c, z, rng, bias=False, dtype=dtype)
        self.squeeze_bn = BatchNorm(z, dtype=dtype)
        self.expand = [Linear(z, c, rng, dtype=dtype) for _ in cfg.kernel_sizes]

    def selection_weights(self, t: SparseTensor):
        """Branch outputs and softmax weights ``(B, n_branches, C)``."""
        if t.channels != self.cfg.channels:
            raise ValueError(f"SSK expects {self.cfg.channels} channels, got {t.channels}")
        outs = [branch(t).features for branch in self.branches]
        fused = t.replace_features(ag.add_n(outs))
        pooled = sparse_gap(fused)
        s = ag.relu(self.squeeze_bn(self.squeeze(pooled)))
        logits = ag.concat([ag.reshape(e(s), (t.batch_size, 1, -1)) for e in self.expand], axis=1)
        return outs, ag.softmax(logits, axis=1)

    def __call__(self, t: SparseTensor) -> SparseTensor:
        outs, weights = self.selection_weights(t)
        per_row = ag.gather_rows(weights, t.indices[:, 0])      # (V, n_branches, C)
        n = len(outs)
        weighted = []
        for i, u in enumerate(outs):
            w_i = ag.reshape(ag.take(per_row, i, axis=1), (t.num_active, -1))
            weighted.append(ag.mul(w_i, u))
        # averaging, not the usual SK sum
        return t.replace_features(ag.scale(ag.add_n(weighted), 1.0 / n))


class SSKBlock(Module):
    """SSK followed by BN, residual add and ReLU."""

    def __init__(self, cfg: SskConfig, rng, dtype=np.float32):
        self.ssk = SSK(cfg, rng, dtype=dtype)
        self.bn = BatchNorm(cfg.channels, dtype=dtype)

    def __call__(self, t: SparseTensor) -> SparseTensor:
        y = self.ssk(t)
        return t.replace_features(ag.relu(ag.add(self.bn(y.features), t.features)))
