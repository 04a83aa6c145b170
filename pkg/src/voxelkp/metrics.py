"""Keypoint evaluation: Hungarian object matching, MPJPE, PEM, OKS and OKS@AP.

Also reads/writes the prediction / ground-truth interchange records.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .pose import DEFAULT_SKELETON, Annotation, PoseEstimate, SkeletonSpec

OKS_THRESHOLDS = np.round(np.arange(0.50, 0.951, 0.05), 2)
PART_ORDER = ("head", "shoulders", "elbows", "wrists", "hips", "knees", "ankles", "all")


@dataclass
class MatchResult:
    pairs: list                  # (pred_idx, gt_idx)
    costs: list                  # mean keypoint distance per pair
    unmatched_preds: list
    unmatched_gts: list


def _kps(obj) -> np.ndarray:
    return np.asarray(obj.keypoints, dtype=np.float64)


def _gt_vis(gt) -> np.ndarray:
    return np.asarray(gt.visibility, dtype=np.float64) > 0


def match_cost(pred, gt) -> float:
    """Mean 3D distance over the ground truth's visible joints (all joints if none are)."""
    d = np.linalg.norm(_kps(pred) - _kps(gt), axis=1)
    vis = _gt_vis(gt)
    return float(d[vis].mean() if vis.any() else d.mean())


def match_objects(preds: Sequence, gts: Sequence, match_radius: float = 0.5) -> MatchResult:
    """Minimum-cost one-to-one assignment; pairs costing more than ``match_radius`` are dropped."""
    if not preds or not gts:
        return MatchResult([], [], list(range(len(preds))), list(range(len(gts))))
    cost = np.array([[match_cost(p, g) for g in gts] for p in preds])
    rows, cols = linear_sum_assignment(cost)
    pairs, costs = [], []
    for r, c in zip(rows, cols):
        if cost[r, c] <= match_radius:
            pairs.append((int(r), int(c)))
            costs.append(float(cost[r, c]))
    mp = {p for p, _ in pairs}
    mg = {g for _, g in pairs}
    return MatchResult(pairs, costs,
                       [i for i in range(len(preds)) if i not in mp],
                       [j for j in range(len(gts)) if j not in mg])


def mpjpe(pred_kps, gt_kps, visibility) -> float | None:
    """Visibility-weighted mean joint error in meters; None when nothing is visible."""
    v = np.asarray(visibility, dtype=np.float64)
    if v.sum() <= 0:
        return None
    d = np.linalg.norm(np.asarray(pred_kps, float) - np.asarray(gt_kps, float), axis=-1)
    return float((v * d).sum() / v.sum())


def oks(pred_kps, gt_kps, scale: float, constants, visibility) -> float | None:
    if scale <= 0:
        raise ValueError("OKS scale must be positive")
    v = np.asarray(visibility, dtype=np.float64)
    if v.sum() <= 0:
        return None
    d2 = ((np.asarray(pred_kps, float) - np.asarray(gt_kps, float)) ** 2).sum(axis=-1)
    k = np.asarray(constants, dtype=np.float64)
    return float((np.exp(-d2 / (2 * scale ** 2 * k ** 2)) * v).sum() / v.sum())


def oks_ap(instances: Sequence, thresholds=OKS_THRESHOLDS) -> float:
    """Average over thresholds of the fraction of instances with OKS >= threshold.

    ``None`` entries are unmatched ground truths and always count as misses.
    """
    if len(instances) == 0:
        raise ValueError("oks_ap needs at least one instance")
    vals = np.array([-np.inf if x is None else x for x in instances], dtype=np.float64)
    return float(np.mean([(vals >= t).mean() for t in thresholds]))


def object_scale(gt: Annotation) -> float:
    """Square root of the ground-truth box's BEV footprint area."""
    return float(np.sqrt(gt.size[0] * gt.size[1]))


@dataclass
class PartTally:
    dist_sum: float = 0.0
    matched: int = 0
    unmatched: int = 0
    oks: list = field(default_factory=list)


def pem(match: MatchResult, preds, gts, joints=None, penalty: float = 0.25) -> float:
    """Matched visible keypoint error plus ``penalty`` per unmatched keypoint, per keypoint.

    Unmatched keypoints are the visible joints of unmatched ground truths and
    the joints of unmatched predictions.
    """
    tally = PartTally()
    _accumulate(tally, match, preds, gts, np.arange(_num_joints(preds, gts)) if joints is None
                else np.asarray(joints), DEFAULT_SKELETON, with_oks=False)
    return _pem_value(tally, penalty)


def _num_joints(preds, gts) -> int:
    for o in list(gts) + list(preds):
        return _kps(o).shape[0]
    return DEFAULT_SKELETON.num_joints


def _pem_value(t: PartTally, penalty: float) -> float:
    n = t.matched + t.unmatched
    return 0.0 if n == 0 else (t.dist_sum + penalty * t.unmatched) / n


def _accumulate(t: PartTally, match: MatchResult, preds, gts, joints, spec: SkeletonSpec, with_oks=True):
    k = np.asarray(spec.oks_constants)
    for p, g in match.pairs:
        vis = _gt_vis(gts[g])[joints]
        d = np.linalg.norm(_kps(preds[p])[joints] - _kps(gts[g])[joints], axis=1)
        t.dist_sum += float(d[vis].sum())
        t.matched += int(vis.sum())
        if with_oks and vis.any():
            t.oks.append(oks(_kps(preds[p])[joints], _kps(gts[g])[joints], object_scale(gts[g]),
                             k[joints], vis.astype(float)))
    for g in match.unmatched_gts:
        vis = _gt_vis(gts[g])[joints]
        t.unmatched += int(vis.sum())
        if with_oks and vis.any():
            t.oks.append(None)
    for p in match.unmatched_preds:
        t.unmatched += len(joints)


@dataclass
class Report:
    rows: dict        # part -> {"MPJPE": float, "OKS@AP": float, "PEM": float}
    num_matched: int
    num_gt: int
    num_pred: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["part", "MPJPE", "OKS@AP", "PEM"])
        for part in PART_ORDER:
            r = self.rows[part]
            w.writerow([part] + [_fmt(r[c]) for c in ("MPJPE", "OKS@AP", "PEM")])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'part':<10}| {'MPJPE':>8} {'OKS@AP':>8} {'PEM':>8}", "-" * 38]
        for part in PART_ORDER:
            r = self.rows[part]
            if part == "all":
                lines.append("-" * 38)
            lines.append(f"{part.capitalize():<10}| " + " ".join(f"{_fmt(r[c]):>8}" for c in ("MPJPE", "OKS@AP", "PEM")))
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.4f}"


def report(preds_per_frame: Sequence[Sequence], gts_per_frame: Sequence[Sequence],
           spec: SkeletonSpec = DEFAULT_SKELETON, match_radius: float = 0.5) -> Report:
    """Per-part MPJPE / OKS@AP / PEM over a set of frames, in the fixed part order."""
    if len(preds_per_frame) != len(gts_per_frame):
        raise ValueError("prediction and ground-truth frame counts differ")
    groups = {part: np.asarray(spec.parts[part]) for part in PART_ORDER[:-1]}
    groups["all"] = np.arange(spec.num_joints)
    tallies = {part: PartTally() for part in PART_ORDER}
    n_match = n_gt = n_pred = 0
    for preds, gts in zip(preds_per_frame, gts_per_frame):
        m = match_objects(list(preds), list(gts), match_radius)
        n_match += len(m.pairs)
        n_gt += len(gts)
        n_pred += len(preds)
        for part, joints in groups.items():
            _accumulate(tallies[part], m, preds, gts, joints, spec)
    rows = {}
    for part in PART_ORDER:
        t = tallies[part]
        rows[part] = {
            "MPJPE": t.dist_sum / t.matched if t.matched else float("nan"),
            "OKS@AP": oks_ap(t.oks) if t.oks else float("nan"),
            "PEM": _pem_value(t, spec.unmatched_penalty),
        }
    return Report(rows, n_match, n_gt, n_pred)


# --- interchange records ---------------------------------------------------

@dataclass
class PoseRecord:
    frame_id: int
    object_id: int
    score: float
    center: np.ndarray       # (3,)
    size: np.ndarray         # (3,)
    yaw: float
    keypoints: np.ndarray    # (K, 3)
    visibility: np.ndarray   # (K,)

    @classmethod
    def from_annotation(cls, frame_id, object_id, a: Annotation, score=1.0) -> "PoseRecord":
        return cls(frame_id, object_id, score, a.center, a.size, a.yaw, a.keypoints, a.visibility)

    @classmethod
    def from_estimate(cls, frame_id, object_id, e: PoseEstimate) -> "PoseRecord":
        return cls(frame_id, object_id, e.score, e.center, e.size, e.yaw, e.keypoints, e.visibility)

    def to_annotation(self) -> Annotation:
        return Annotation(self.center, self.size, self.yaw, self.keypoints, self.visibility)

    def to_estimate(self) -> PoseEstimate:
        return PoseEstimate(self.score, np.asarray(self.center, float), np.asarray(self.size, float),
                            self.yaw, np.asarray(self.keypoints, float), np.asarray(self.visibility, float),
                            batch=self.frame_id)


def _record_struct(k: int) -> struct.Struct:
    return struct.Struct(f"<II{1 + 3 + 3 + 1 + 4 * k}d")


def pack_records(records: Sequence[PoseRecord], k: int = DEFAULT_SKELETON.num_joints) -> bytes:
    st = _record_struct(k)
    out = []
    for r in records:
        kv = np.column_stack([np.asarray(r.keypoints, float).reshape(k, 3), np.asarray(r.visibility, float)])
        out.append(st.pack(r.frame_id, r.object_id, r.score, *np.asarray(r.center, float),
                           *np.asarray(r.size, float), r.yaw, *kv.reshape(-1)))
    return b"".join(out)


def unpack_records(buf: bytes, k: int = DEFAULT_SKELETON.num_joints) -> list[PoseRecord]:
    st = _record_struct(k)
    if len(buf) % st.size:
        raise ValueError("truncated record block")
    recs = []
    for off in range(0, len(buf), st.size):
        v = st.unpack_from(buf, off)
        f = np.asarray(v[2:], dtype=np.float64)
        kv = f[8:].reshape(k, 4)
        recs.append(PoseRecord(int(v[0]), int(v[1]), float(f[0]), f[1:4], f[4:7], float(f[7]),
                               kv[:, :3], kv[:, 3]))
    return recs


def csv_header(k: int = DEFAULT_SKELETON.num_joints) -> list[str]:
    cols = ["frame", "object", "score", "cx", "cy", "cz", "l", "w", "h", "yaw"]
    for j in range(k):
        cols += [f"x{j}", f"y{j}", f"z{j}", f"v{j}"]
    return cols


def write_records(path, records: Sequence[PoseRecord], k: int = DEFAULT_SKELETON.num_joints):
    """CSV when the suffix is ``.csv``, packed little-endian float64 binary otherwise."""
    path = Path(path)
    if path.suffix.lower() != ".csv":
        path.write_bytes(pack_records(records, k))
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(k))
        for r in records:
            kv = np.column_stack([np.asarray(r.keypoints, float).reshape(k, 3), np.asarray(r.visibility, float)])
            vals = [r.score, *np.asarray(r.center, float), *np.asarray(r.size, float), r.yaw, *kv.reshape(-1)]
            w.writerow([r.frame_id, r.object_id] + [repr(float(x)) for x in vals])


def read_records(path, k: int = DEFAULT_SKELETON.num_joints) -> list[PoseRecord]:
    path = Path(path)
    if path.suffix.lower() != ".csv":
        return unpack_records(path.read_bytes(), k)
    recs = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != csv_header(k):
            raise ValueError("unexpected record CSV header")
        for row in rd:
            f = np.asarray([float(x) for x in row[2:]])
            kv = f[8:].reshape(k, 4)
            recs.append(PoseRecord(int(row[0]), int(row[1]), float(f[0]), f[1:4], f[4:7], float(f[7]),
                                   kv[:, :3], kv[:, 3]))
    return recs


def group_by_frame(records: Sequence[PoseRecord], frames: Sequence[int]) -> list[list[PoseRecord]]:
    by = {f: [] for f in frames}
    for r in records:
        by.setdefault(r.frame_id, []).append(r)
    return [sorted(by[f], key=lambda r: r.object_id) for f in frames]
