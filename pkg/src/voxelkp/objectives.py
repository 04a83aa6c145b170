"""Target assignment and training losses: focal heatmap, L1 regression, bone-length Huber."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var, as_var, make
from .pose import DEFAULT_SKELETON, Annotation

log = logging.getLogger(__name__)

PROB_EPS = 1e-6


@dataclass
class LossWeights:
    heatmap: float = 1.0
    regression: float = 2.0
    visibility: float = 0.5
    iou: float = 1.0
    skeleton: float = 0.5
    alpha: float = 2.0
    beta: float = 4.0
    huber_delta: float = 1.0

    def __post_init__(self):
        for name in ("heatmap", "regression", "visibility", "iou", "skeleton"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class TargetMaps:
    heatmap: np.ndarray         # (V,) in [0, 1]; exactly 1 at assigned centers
    pos_rows: np.ndarray        # (P,) site rows carrying regression targets
    box_size: np.ndarray        # (P, 3)
    rotation: np.ndarray        # (P, 2) sin, cos
    x_set: np.ndarray           # (P, K + 1) center then keypoints
    y_set: np.ndarray
    z_set: np.ndarray
    visibility: np.ndarray      # (P, K)
    centers: np.ndarray         # (P, 3) box centers, for IoU targets
    batch_size: int
    skipped: int = 0

    @property
    def num_positive(self) -> int:
        return int(self.pos_rows.size)

    @property
    def keypoints(self) -> np.ndarray:
        return np.stack([self.x_set[:, 1:], self.y_set[:, 1:], self.z_set[:, 1:]], axis=-1)

    @property
    def positive_mask(self) -> np.ndarray:
        m = np.zeros(self.heatmap.shape[0], dtype=bool)
        m[self.pos_rows] = True
        return m


def _in_footprint(pos_xy, ann: Annotation, slack: float) -> bool:
    d = np.asarray(pos_xy, dtype=np.float64) - ann.center[:2]
    c, s = np.cos(ann.yaw), np.sin(ann.yaw)
    lx, ly = d[0] * c + d[1] * s, -d[0] * s + d[1] * c
    return abs(lx) <= ann.size[0] / 2 + slack and abs(ly) <= ann.size[1] / 2 + slack


def assign_targets(annotations, indices: np.ndarray, positions: np.ndarray, cell_size: float,
                   batch_size: int | None = None) -> TargetMaps:
    """Build heatmap and regression targets on an active site set.

    Args:
        annotations: per batch sample, a list of ``Annotation``.
        indices: ``(V, 1 + D)`` site indices (batch first).
        positions: ``(V, D)`` metric site centers; D = 2 for BEV, 3 for voxels.
        cell_size: site pitch in meters; floors the Gaussian radius.
    """
    indices = np.asarray(indices)
    positions = np.asarray(positions, dtype=np.float64)
    batch_size = len(annotations) if batch_size is None else batch_size
    V, D = positions.shape
    heat = np.zeros(V, dtype=np.float64)
    rows, anns = [], []
    skipped = 0
    taken = set()
    for b, sample in enumerate(annotations):
        in_b = np.flatnonzero(indices[:, 0] == b)
        for ann in sample:
            if in_b.size == 0:
                skipped += 1
                continue
            d2 = ((positions[in_b] - ann.center[:D]) ** 2).sum(axis=1)
            r = int(in_b[np.argmin(d2)])
            if r in taken or not _in_footprint(positions[r, :2], ann, cell_size / 2):
                skipped += 1
                continue
            taken.add(r)
            radius = 0.5 * np.hypot(ann.size[0], ann.size[1])
            sigma = max(radius / 3.0, cell_size)
            dist2 = ((positions[in_b] - positions[r]) ** 2).sum(axis=1)
            g = np.exp(-dist2 / (2 * sigma ** 2))
            heat[in_b] = np.maximum(heat[in_b], g)
            rows.append(r)
            anns.append(ann)
    if skipped:
        log.warning("skipped %d annotation(s) without a usable active site", skipped)
    # overlapping Gaussians may not reach 1 away from a center
    heat[heat >= 1.0] = np.nextafter(1.0, 0.0)
    pos_rows = np.asarray(rows, dtype=np.int64)
    heat[pos_rows] = 1.0
    k = DEFAULT_SKELETON.num_joints if not anns else anns[0].keypoints.shape[0]

    def stack(fn, width):
        return np.array([fn(a) for a in anns], dtype=np.float64).reshape(len(anns), width)

    return TargetMaps(
        heatmap=heat,
        pos_rows=pos_rows,
        box_size=stack(lambda a: a.size, 3),
        rotation=stack(lambda a: [np.sin(a.yaw), np.cos(a.yaw)], 2),
        x_set=stack(lambda a: np.r_[a.center[0], a.keypoints[:, 0]], k + 1),
        y_set=stack(lambda a: np.r_[a.center[1], a.keypoints[:, 1]], k + 1),
        z_set=stack(lambda a: np.r_[a.center[2], a.keypoints[:, 2]], k + 1),
        visibility=stack(lambda a: a.visibility, k),
        centers=stack(lambda a: a.center, 3),
        batch_size=batch_size,
        skipped=skipped,
    )


# --- losses ----------------------------------------------------------------

def focal_loss(target, prob, batch_size: int = 1, alpha: float = 2.0, beta: float = 4.0) -> Var:
    """Penalty-reduced focal loss on probabilities, normalized by batch size."""
    prob = as_var(prob)
    p = prob.value
    I = np.asarray(target, dtype=p.dtype).reshape(p.shape)
    pos = I == 1
    q = 1 - p
    log_p = np.log(p)
    log_q = np.log(q)
    neg_w = (1 - I) ** beta
    term = np.where(pos, q ** alpha * log_p, log_q * p ** alpha * neg_w)
    inv_n = -1.0 / batch_size
    value = np.asarray(term.sum() * inv_n, dtype=p.dtype)

    def back(g):
        d_pos = -alpha * q ** (alpha - 1) * log_p + q ** alpha / p
        d_neg = (-(p ** alpha) / q + log_q * alpha * p ** (alpha - 1)) * neg_w
        return (g * inv_n * np.where(pos, d_pos, d_neg),)

    return make(value, (prob,), back)


def heatmap_probs(logits) -> Var:
    return ag.clamp(ag.sigmoid(logits), PROB_EPS, 1 - PROB_EPS)


def focal_loss_logits(target, logits, batch_size: int = 1, alpha: float = 2.0, beta: float = 4.0) -> Var:
    """``focal_loss(target, heatmap_probs(logits))`` with a gradient that survives saturation.

    The value is the clamped one. The backward pass is the analytic
    derivative of the unclamped loss in the logit, written without division
    by p or 1 - p. Through the clamp and a float32 sigmoid that rounds to 1,
    a confidently wrong site would otherwise get exactly zero gradient and
    never recover.
    """
    logits = as_var(logits)
    value = focal_loss(target, np.clip(ag.sigmoid(logits).value, PROB_EPS, 1 - PROB_EPS),
                       batch_size, alpha, beta).value
    x = logits.value.astype(np.float64)
    I = np.asarray(target, dtype=np.float64).reshape(x.shape)

    def back(g):
        p, q = ag._sigmoid(x), ag._sigmoid(-x)
        log_p, log_q = -np.logaddexp(0.0, -x), -np.logaddexp(0.0, x)
        d_pos = alpha * p * q ** alpha * log_p - q ** (alpha + 1)
        d_neg = -((1 - I) ** beta) * (alpha * p ** alpha * q * log_q - p ** (alpha + 1))
        d = np.where(I == 1, d_pos, d_neg) / batch_size
        return ((g * d).astype(logits.value.dtype),)

    return make(value, (logits,), back)


def l1_loss(target, pred, mask=None) -> Var:
    """Mean absolute error over masked entries; 0 when nothing is masked in."""
    pred = as_var(pred)
    y = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    m = np.ones(pred.shape, dtype=pred.dtype) if mask is None else \
        np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    count = m.sum()
    if count == 0:
        return make(np.zeros((), dtype=pred.dtype), (pred,), lambda g: (np.zeros_like(pred.value),))
    diff = pred.value - y
    value = np.asarray(np.abs(diff)[m > 0].sum() / count, dtype=pred.dtype)
    return make(value, (pred,), lambda g: (g * np.sign(diff) * m / count,))


def huber(x: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(x)
    return np.where(a <= delta, 0.5 * x ** 2, delta * (a - 0.5 * delta))


def bone_lengths(kps: np.ndarray, bones) -> np.ndarray:
    a = np.array([i for i, _ in bones])
    b = np.array([j for _, j in bones])
    return np.linalg.norm(kps[..., a, :] - kps[..., b, :], axis=-1)


def skeleton_loss(target, pred, bones=DEFAULT_SKELETON.bones, visibility=None, delta: float = 1.0) -> Var:
    """Huber distance between predicted and true bone lengths.

    ``target``/``pred`` are ``(P, K, 3)`` (or ``(K, 3)``); averaged over bones
    whose two endpoints are visible.
    """
    pred = as_var(pred)
    P = pred.value
    Y = np.asarray(target, dtype=np.float64).reshape(P.shape)
    vis = np.ones(P.shape[:-1]) if visibility is None else np.asarray(visibility).reshape(P.shape[:-1])
    a = np.array([i for i, _ in bones])
    b = np.array([j for _, j in bones])
    valid = (vis[..., a] > 0) & (vis[..., b] > 0)
    count = valid.sum()
    if count == 0:
        return make(np.zeros((), dtype=P.dtype), (pred,), lambda g: (np.zeros_like(P),))
    vec = P[..., a, :] - P[..., b, :]
    bl_pred = np.linalg.norm(vec, axis=-1)
    bl_true = bone_lengths(Y, bones)
    r = bl_pred - bl_true
    value = np.asarray((huber(r, delta) * valid).sum() / count, dtype=P.dtype)

    def back(g):
        dr = np.clip(r, -delta, delta) * valid / count
        unit = vec / np.maximum(bl_pred, 1e-12)[..., None]
        dvec = (g * dr)[..., None] * unit
        out = np.zeros_like(P)
        for n in range(len(bones)):
            out[..., a[n], :] += dvec[..., n, :]
            out[..., b[n], :] -= dvec[..., n, :]
        return (out,)

    return make(value, (pred,), back)


def bev_iou_axis_aligned(c1, s1, c2, s2) -> np.ndarray:
    """IoU of axis-aligned BEV rectangles given centers ``(N, 2)`` and sizes ``(N, 2)``."""
    s1 = np.maximum(s1, 0)
    s2 = np.maximum(s2, 0)
    lo = np.maximum(c1 - s1 / 2, c2 - s2 / 2)
    hi = np.minimum(c1 + s1 / 2, c2 + s2 / 2)
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    union = np.prod(s1, axis=-1) + np.prod(s2, axis=-1) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def iou_targets(h, t: TargetMaps) -> np.ndarray:
    """BEV IoU of the predicted box at each positive site against its ground truth (no gradient)."""
    if t.num_positive == 0:
        return np.zeros(0)
    r = t.pos_rows
    pc = np.column_stack([h.value("x_set")[r, 0], h.value("y_set")[r, 0]]).astype(np.float64)
    ps = h.value("box_size")[r, :2].astype(np.float64)
    return bev_iou_axis_aligned(pc, ps, t.centers[:, :2], t.box_size[:, :2])


def total_loss(h, t: TargetMaps, w: LossWeights, iou_target: np.ndarray | None = None,
               bones=DEFAULT_SKELETON.bones):
    """Weighted sum of all terms; returns ``(loss Var, {term: float})``."""
    terms = {}
    terms["heatmap"] = focal_loss_logits(t.heatmap, ag.reshape(h.heatmap, (-1,)), t.batch_size, w.alpha, w.beta)
    if t.num_positive:
        r = t.pos_rows
        k = t.visibility.shape[1]
        reg_pred = ag.concat([ag.gather_rows(h.heads[n], r)
                              for n in ("box_size", "rotation", "x_set", "y_set", "z_set")], axis=1)
        kp_mask = np.column_stack([np.ones((len(r), 1)), t.visibility])
        reg_mask = np.column_stack([np.ones((len(r), 5)), kp_mask, kp_mask, kp_mask])
        reg_target = np.column_stack([t.box_size, t.rotation, t.x_set, t.y_set, t.z_set])
        terms["reg"] = l1_loss(reg_target, reg_pred, reg_mask)
        terms["vis"] = l1_loss(t.visibility, ag.sigmoid(ag.gather_rows(h.visibility, r)))
        if iou_target is None:
            iou_target = iou_targets(h, t)
        terms["iou"] = l1_loss(iou_target[:, None], ag.sigmoid(ag.gather_rows(h.iou, r)))
        sets = [ag.take_cols(ag.gather_rows(h.heads[n], r), 1, k + 1) for n in ("x_set", "y_set", "z_set")]
        kps = ag.stack(sets, axis=-1)
        terms["skeleton"] = skeleton_loss(t.keypoints, kps, bones, t.visibility, w.huber_delta)
    weights = {"heatmap": w.heatmap, "reg": w.regression, "vis": w.visibility,
               "iou": w.iou, "skeleton": w.skeleton}
    weighted = [ag.scale(v, weights[name]) for name, v in terms.items()]
    total = ag.add_n(weighted)
    breakdown = {name: float(terms[name].value) if name in terms else 0.0 for name in weights}
    breakdown["total"] = float(total.value)
    return total, breakdown
