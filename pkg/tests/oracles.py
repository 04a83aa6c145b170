"""Dense and brute-force reference implementations used only by the tests."""
import itertools

import numpy as np


def densify(indices, feats, shape, batch):
    grid = np.zeros((batch, *shape, feats.shape[1]), dtype=np.float64)
    grid[tuple(indices.T)] = feats
    return grid


def dense_conv(grid, weights, stride):
    """Cross-correlation with a centered odd kernel, zero padding ``k // 2``.

    ``grid`` (B, *S, C_in), ``weights`` (*K, C_in, C_out); output cell ``o``
    reads input cells ``o * stride + offset``.
    """
    nd = grid.ndim - 2
    ks = weights.shape[:nd]
    stride = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    out_shape = tuple(-(-s // st) for s, st in zip(grid.shape[1:-1], stride))
    pad = [(0, 0)] + [(k // 2, k // 2 + st) for k, st in zip(ks, stride)] + [(0, 0)]
    g = np.pad(grid, pad)
    out = np.zeros((grid.shape[0], *out_shape, weights.shape[-1]))
    for tap in itertools.product(*[range(k) for k in ks]):
        # tap t in kernel index space = offset t - k//2; padded index = o*s + t
        sl = tuple(slice(t, t + st * n, st) for t, st, n in zip(tap, stride, out_shape))
        patch = g[(slice(None),) + sl]
        out += patch @ weights[tap]
    return out


def subm_oracle(indices, feats, shape, batch, weights, bias=None):
    out = dense_conv(densify(indices, feats, shape, batch), weights, 1)[tuple(indices.T)]
    return out if bias is None else out + bias


def strided_oracle(indices, feats, shape, batch, weights, stride, bias=None):
    """Dense strided conv read at the attainable outputs ``unique(floor(in / stride))``."""
    out = dense_conv(densify(indices, feats, shape, batch), weights, stride)
    st = np.asarray((stride,) * len(shape) if np.isscalar(stride) else stride)
    cand = indices.copy()
    cand[:, 1:] //= st
    sites = np.unique(cand, axis=0)
    # canonical order: batch, then reversed spatial axes
    sites = sites[np.lexsort(tuple(sites[:, a] for a in range(1, sites.shape[1])) + (sites[:, 0],))]
    vals = out[tuple(sites.T)]
    return sites, (vals if bias is None else vals + bias)


def brute_voxelize(points, lo, hi, vs):
    buckets = {}
    for p in points:
        if np.all(p[:3] >= lo) and np.all(p[:3] < hi):
            c = tuple(np.floor((p[:3] - lo) / vs).astype(int))
            buckets.setdefault(c, []).append(p)
    return {c: np.mean(v, axis=0) for c, v in buckets.items()}


def dense_box_attention(x, members, wq, bq, wk, bk, wv, bv, heads, scale=1.0):
    """Softmax attention among the rows in ``members`` only, looped per head."""
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    c = x.shape[1]
    d = c // heads
    out = np.zeros((len(members), c))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for a, i in enumerate(members):
            logits = np.array([scale * float(q[i, sl] @ k[j, sl]) for j in members])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[a, sl] = sum(w[b] * v[j, sl] for b, j in enumerate(members))
    return out


def bn_oracle(x, bn, training):
    if training:
        mu, var = x.mean(axis=0), x.var(axis=0)
    else:
        mu, var = bn.running_mean, bn.running_var
    return (x - mu) / np.sqrt(var + bn.eps) * bn.gamma.value + bn.beta.value


def ssk_oracle(m, indices, feats, shape, batch, training):
    """SSK forward written out with plain numpy; returns (output, selection weights)."""
    branch_out = []
    for br in m.branches:
        k = br.kernel_size[0]
        w = br.weight.value.reshape(k, k, k, *br.weight.value.shape[1:])
        branch_out.append(subm_oracle(indices, feats, shape, batch, w, br.bias.value))
    fused = sum(branch_out)
    gap = np.stack([fused[indices[:, 0] == b].mean(axis=0) for b in range(batch)])
    z = gap @ m.squeeze.weight.value
    bn = m.squeeze_bn
    z = np.maximum(bn_oracle(z, bn, training), 0)
    logits = np.stack([z @ e.weight.value + e.bias.value for e in m.expand], axis=1)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros_like(fused)
    for i, u in enumerate(branch_out):
        out += w[indices[:, 0], i] * u
    return out / len(branch_out), w
