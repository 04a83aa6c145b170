"""Synthetic LiDAR scenes with stick-figure humans, augmentation and scene files."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import PoseRecord, pack_records, unpack_records
from .pose import DEFAULT_SKELETON, Annotation, bev_boxes_overlap, points_in_box
from .sparse import PointCloud, SparseError, pack_points, unpack_points

SCENE_MAGIC = b"VKPS"
SCENE_VERSION = 1
GROUND_Z = -1.7
ANKLE_HEIGHT = 0.08
BOX_MARGIN = 0.15


class SceneError(ValueError):
    pass


# --- humans -----------------------------------------------------------------

# nominal segment lengths in meters
NOMINAL = {
    "thigh": 0.45, "shin": 0.44, "torso": 0.52, "neck": 0.26,
    "upper_arm": 0.30, "forearm": 0.27, "hip_half": 0.12, "shoulder_half": 0.19,
}


@dataclass
class SyntheticHuman:
    """Pose parameters for one stick figure; ``keypoints()`` runs forward kinematics.

    Local frame: x forward, y to the person's left, z up. Angles in radians.
    """

    x: float
    y: float
    heading: float
    body_scale: float = 1.0
    lean: float = 0.0
    hip_flex: tuple = (0.0, 0.0)        # left, right; positive swings the thigh forward
    knee_flex: tuple = (0.0, 0.0)
    shoulder_flex: tuple = (0.0, 0.0)
    shoulder_abd: tuple = (0.1, 0.1)
    elbow_flex: tuple = (0.0, 0.0)
    ground_z: float = GROUND_Z

    def lengths(self) -> dict:
        return {k: v * self.body_scale for k, v in NOMINAL.items()}

    def local_keypoints(self) -> np.ndarray:
        L = self.lengths()
        kp = np.zeros((14, 3))
        pelvis = np.zeros(3)
        for side, (hip, knee, ankle) in enumerate(((7, 9, 11), (8, 10, 12))):
            sgn = 1.0 if side == 0 else -1.0
            h = pelvis + np.array([0.0, sgn * L["hip_half"], 0.0])
            a = self.hip_flex[side]
            knee_pos = h + L["thigh"] * np.array([np.sin(a), 0.0, -np.cos(a)])
            b = a - self.knee_flex[side]
            kp[hip], kp[knee] = h, knee_pos
            kp[ankle] = knee_pos + L["shin"] * np.array([np.sin(b), 0.0, -np.cos(b)])
        up = np.array([np.sin(self.lean), 0.0, np.cos(self.lean)])
        mid = pelvis + L["torso"] * up
        for side, (sh, el, wr) in enumerate(((1, 3, 5), (2, 4, 6))):
            sgn = 1.0 if side == 0 else -1.0
            s = mid + np.array([0.0, sgn * L["shoulder_half"], 0.0])
            a, ab = self.shoulder_flex[side], self.shoulder_abd[side]
            d1 = np.array([np.sin(a) * np.cos(ab), sgn * np.sin(ab), -np.cos(a) * np.cos(ab)])
            c = a + self.elbow_flex[side]
            d2 = np.array([np.sin(c) * np.cos(ab), sgn * np.sin(ab), -np.cos(c) * np.cos(ab)])
            kp[sh] = s
            kp[el] = s + L["upper_arm"] * d1
            kp[wr] = kp[el] + L["forearm"] * d2
        kp[13] = mid + L["neck"] * up
        kp[0] = kp[13] + self.body_scale * np.array([0.11, 0.0, -0.03])
        # stand the lowest ankle on the ground
        kp[:, 2] += self.ground_z + ANKLE_HEIGHT - kp[[11, 12], 2].min()
        return kp

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def keypoints(self) -> np.ndarray:
        return self.local_keypoints() @ self.rotation().T + np.array([self.x, self.y, 0.0])

    def annotation(self) -> Annotation:
        """Yawed box around the local keypoint extent plus a limb-radius margin."""
        loc = self.local_keypoints()
        lo = loc.min(axis=0) - BOX_MARGIN
        hi = loc.max(axis=0) + BOX_MARGIN
        lo[2] = self.ground_z
        center_local = (lo + hi) / 2
        center = self.rotation() @ center_local + np.array([self.x, self.y, 0.0])
        return Annotation(center, hi - lo, self.heading, self.keypoints(), np.ones(14))


def random_human(rng: np.random.Generator, x: float, y: float) -> SyntheticHuman:
    u = rng.uniform
    hip = u(-0.5, 0.5, 2)
    sh = u(-0.7, 0.9, 2)
    return SyntheticHuman(
        x=x, y=y, heading=u(-np.pi, np.pi), body_scale=u(0.9, 1.1), lean=u(-0.1, 0.25),
        hip_flex=tuple(hip), knee_flex=tuple(u(0.0, 0.8, 2)),
        shoulder_flex=tuple(sh), shoulder_abd=tuple(u(0.05, 0.6, 2)),
        elbow_flex=tuple(u(0.0, 1.6, 2)),
    )


# (joint a, joint b, radius); torso and head are handled separately
LIMB_CAPSULES = (
    (1, 3, 0.06), (3, 5, 0.05), (2, 4, 0.06), (4, 6, 0.05),
    (7, 9, 0.08), (9, 11, 0.06), (8, 10, 0.08), (10, 12, 0.06),
    (1, 2, 0.07), (7, 8, 0.09), (1, 7, 0.09), (2, 8, 0.09),
)
HEAD_RADIUS = 0.11
TORSO_RADIUS = 0.12


def _sample_capsule(a, b, r, n, rng):
    """Points on the lateral surface of the capsule a-b, with outward normals."""
    axis = b - a
    length = np.linalg.norm(axis)
    t = rng.uniform(0, 1, n)
    u = axis / max(length, 1e-9)
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    phi = rng.uniform(0, 2 * np.pi, n)
    normal = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    return a + t[:, None] * axis + r * normal, normal


def _sample_sphere(c, r, n, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return c + r * v, v


def surface_points(kp: np.ndarray, n: int, rng, cull_backfaces: bool = True) -> np.ndarray:
    """Sample ``n`` candidate surface points; back-facing ones (seen from the origin) are dropped."""
    parts = [(kp[a], kp[b], r) for a, b, r in LIMB_CAPSULES]
    parts.append(((kp[7] + kp[8]) / 2, (kp[1] + kp[2]) / 2, TORSO_RADIUS))
    parts.append(((kp[1] + kp[2]) / 2, kp[13], 0.05))
    areas = np.array([2 * np.pi * r * np.linalg.norm(b - a) for a, b, r in parts] + [4 * np.pi * HEAD_RADIUS ** 2])
    counts = rng.multinomial(n, areas / areas.sum())
    pts, normals = [], []
    for (a, b, r), m in zip(parts, counts[:-1]):
        p, nrm = _sample_capsule(a, b, r, m, rng)
        pts.append(p)
        normals.append(nrm)
    p, nrm = _sample_sphere(kp[13], HEAD_RADIUS, counts[-1], rng)
    pts.append(p)
    normals.append(nrm)
    pts, normals = np.concatenate(pts), np.concatenate(normals)
    if cull_backfaces:
        pts = pts[(normals * -pts).sum(axis=1) > 0]
    return pts


def range_density(base: int, dist: float, ref: float = 8.0, floor: int = 60) -> int:
    """Point budget decaying inversely with range beyond ``ref`` meters."""
    return max(floor, int(round(base * min(1.0, ref / max(dist, 1e-6)))))


# --- scenes -----------------------------------------------------------------

@dataclass
class SceneSample:
    points: PointCloud
    annotations: list = field(default_factory=list)
    humans: list = field(default_factory=list)     # generator parameters, not serialized

    def copy(self) -> "SceneSample":
        return SceneSample(PointCloud(self.points.points.copy()),
                           [a.copy() for a in self.annotations], list(self.humans))

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        if not np.array_equal(self.points.points, other.points.points):
            return False
        if len(self.annotations) != len(other.annotations):
            return False
        return all(_ann_equal(a, b) for a, b in zip(self.annotations, other.annotations))


def _ann_equal(a: Annotation, b: Annotation) -> bool:
    return (np.array_equal(a.center, b.center) and np.array_equal(a.size, b.size) and a.yaw == b.yaw
            and np.array_equal(a.keypoints, b.keypoints) and np.array_equal(a.visibility, b.visibility))


def _with_features(xyz: np.ndarray, intensity: np.ndarray, rng) -> np.ndarray:
    elong = rng.uniform(0.0, 0.05, len(xyz))
    return np.column_stack([xyz, intensity, elong])


def generate_scene(seed, num_humans: int, clutter_density: float = 0.05, extent: float = 24.0,
                   min_separation: float = 2.5, min_range: float = 3.0, ground_points: int = 1200,
                   cull_backfaces: bool = True, max_retries: int = 1000) -> SceneSample:
    """Random scene: humans on a ground plane plus pole/bush clutter.

    ``clutter_density`` is clutter objects per 100 m^2 of the square
    ``[-extent, extent]^2``. Deterministic in ``seed``.
    """
    if num_humans < 0:
        raise SceneError("num_humans must be >= 0")
    rng = np.random.default_rng(seed)
    humans, anns = [], []
    lim = extent - 1.5
    for _ in range(num_humans):
        for _try in range(max_retries):
            x, y = rng.uniform(-lim, lim, 2)
            if np.hypot(x, y) < min_range:
                continue
            if any(np.hypot(x - h.x, y - h.y) < min_separation for h in humans):
                continue
            h = random_human(rng, x, y)
            a = h.annotation()
            if any(bev_boxes_overlap(a, b) for b in anns):
                continue
            humans.append(h)
            anns.append(a)
            break
        else:
            raise SceneError(f"could not place human {len(humans)} after {max_retries} tries")

    blocks = []
    for h in humans:
        n = range_density(int(rng.integers(400, 1600)), float(np.hypot(h.x, h.y)))
        xyz = surface_points(h.keypoints(), n, rng, cull_backfaces)
        blocks.append(_with_features(xyz, rng.normal(0.3, 0.05, len(xyz)).clip(0, 1), rng))

    # ground: uniform in range with density falling off like a scan pattern
    r = extent * np.sqrt(rng.uniform(0, 1, ground_points * 3))
    th = rng.uniform(-np.pi, np.pi, r.size)
    keep = rng.uniform(0, 1, r.size) < np.clip(6.0 / np.maximum(r, 1e-6), 0, 1)
    g = np.column_stack([r * np.cos(th), r * np.sin(th), GROUND_Z + rng.normal(0, 0.02, r.size)])[keep]
    g = g[np.all(np.abs(g[:, :2]) < extent, axis=1)][:ground_points]
    blocks.append(_with_features(g, rng.uniform(0.0, 0.15, len(g)), rng))

    n_clutter = rng.poisson(clutter_density * (2 * extent) ** 2 / 100.0)
    for _ in range(n_clutter):
        cx, cy = rng.uniform(-lim, lim, 2)
        if any(np.hypot(cx - a.center[0], cy - a.center[1]) < 1.5 for a in anns):
            continue
        if rng.uniform() < 0.5:
            rad, height = rng.uniform(0.05, 0.25), rng.uniform(1.0, 4.0)
            base = np.array([cx, cy, GROUND_Z])
            xyz, _ = _sample_capsule(base, base + [0, 0, height], rad, range_density(400, np.hypot(cx, cy)), rng)
        else:
            xyz, _ = _sample_sphere(np.array([cx, cy, GROUND_Z + 0.4]), rng.uniform(0.3, 0.8),
                                    range_density(500, np.hypot(cx, cy)), rng)
            xyz = xyz[xyz[:, 2] >= GROUND_Z]
        blocks.append(_with_features(xyz, rng.uniform(0.2, 1.0, len(xyz)), rng))

    pts = np.concatenate(blocks).astype(np.float32)
    return SceneSample(PointCloud(pts), anns, humans)


# --- augmentation -------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.5
    global_scale: tuple = (0.95, 1.05)
    global_rotation: tuple = (-np.pi / 4, np.pi / 4)
    local_scale: tuple = (0.95, 1.05)
    local_rotation: tuple = (-np.pi / 20, np.pi / 20)
    frustum_dropout: tuple = (0.0, 0.2)
    noise_sigma: float = 0.01
    gt_samples: int = 0

    def __post_init__(self):
        for name in ("global_scale", "global_rotation", "local_scale", "local_rotation", "frustum_dropout"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: range is not ordered")
            setattr(self, name, (float(lo), float(hi)))
        if not (0 <= self.flip_x_prob <= 1 and 0 <= self.flip_y_prob <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")
        if self.noise_sigma < 0 or self.gt_samples < 0:
            raise ValueError("noise_sigma and gt_samples must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), 0.0, 0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown augment config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _apply_linear(xyz: np.ndarray, m: np.ndarray, origin=None) -> np.ndarray:
    """``origin + m (xyz - origin)`` written so an identity ``m`` returns ``xyz`` bit for bit."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if origin is None:
        origin = np.zeros(3)
    return xyz + (xyz - origin) @ (m - np.eye(3)).T


def local_transform(sample: SceneSample, i: int, scale: float, theta: float) -> SceneSample:
    """Scale and rotate object ``i`` and the points inside its box about the box center."""
    out = sample.copy()
    a = out.annotations[i]
    m = scale * rot_z(theta)
    pts = out.points.points.astype(np.float64)
    inside = points_in_box(pts[:, :3], a.center, a.size, a.yaw, margin=0.05)
    pts[inside, :3] = _apply_linear(pts[inside, :3], m, a.center)
    out.points = PointCloud(pts.astype(np.float32))
    out.annotations[i] = Annotation(a.center, a.size * scale, a.yaw + theta,
                                    _apply_linear(a.keypoints, m, a.center), a.visibility)
    return out


def global_matrix(flip_x: bool, flip_y: bool, scale: float, theta: float) -> np.ndarray:
    """Linear map of the global stage: flips, then rotation, then scale."""
    f = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
    return scale * rot_z(theta) @ f


def global_transform(sample: SceneSample, flip_x: bool, flip_y: bool, scale: float, theta: float,
                     spec=DEFAULT_SKELETON) -> SceneSample:
    m = global_matrix(flip_x, flip_y, scale, theta)
    perm = spec.flip_permutation()
    pts = sample.points.points.astype(np.float64)
    pts[:, :3] = _apply_linear(pts[:, :3], m)
    anns = []
    for a in sample.annotations:
        kp, vis, yaw = a.keypoints, a.visibility, a.yaw
        # each mirror turns a left side into a right side
        if flip_x != flip_y:
            kp, vis = kp[perm], vis[perm]
        if flip_x:
            yaw = np.pi - yaw
        if flip_y:
            yaw = -yaw
        anns.append(Annotation(_apply_linear(a.center, m), a.size * scale, yaw + theta,
                               _apply_linear(kp, m), vis))
    return SceneSample(PointCloud(pts.astype(np.float32)), anns, [])


def frustum_dropout(sample: SceneSample, intensity: float, rng, width=(np.pi / 8, np.pi / 3)) -> SceneSample:
    """Remove ``intensity`` of the points inside a random azimuth frustum; labels untouched."""
    if intensity <= 0:
        return sample
    pts = sample.points.points
    az = np.arctan2(pts[:, 1], pts[:, 0])
    center = rng.uniform(-np.pi, np.pi)
    half = rng.uniform(*width) / 2
    inside = np.flatnonzero(np.abs(np.angle(np.exp(1j * (az - center)))) <= half)
    drop = rng.choice(inside, size=int(round(intensity * inside.size)), replace=False)
    keep = np.ones(len(pts), dtype=bool)
    keep[drop] = False
    return SceneSample(PointCloud(pts[keep]), [a.copy() for a in sample.annotations], list(sample.humans))


def augment(sample: SceneSample, cfg: AugmentConfig, rng: np.random.Generator,
            bank: Sequence[SceneSample] = (), trace: dict | None = None) -> SceneSample:
    """Ground-truth sampling, per-object transforms, global transforms, then frustum dropout.

    If ``trace`` is given it receives the per-object local matrices and the
    global matrix, plus the flip flags.
    """
    out = sample
    if cfg.gt_samples and bank:
        out = gt_sampling(out, bank, cfg.gt_samples, rng)
    local = []
    for i in range(len(out.annotations)):
        s = rng.uniform(*cfg.local_scale)
        th = rng.uniform(*cfg.local_rotation)
        out = local_transform(out, i, s, th)
        local.append(s * rot_z(th))
    if cfg.noise_sigma > 0:
        pts = out.points.points.copy()
        pts[:, :3] += rng.normal(0, cfg.noise_sigma, (len(pts), 3)).astype(np.float32)
        out = SceneSample(PointCloud(pts), out.annotations, out.humans)
    fx = bool(rng.uniform() < cfg.flip_x_prob)
    fy = bool(rng.uniform() < cfg.flip_y_prob)
    s = rng.uniform(*cfg.global_scale)
    th = rng.uniform(*cfg.global_rotation)
    out = global_transform(out, fx, fy, s, th)
    out = frustum_dropout(out, rng.uniform(*cfg.frustum_dropout), rng)
    if trace is not None:
        trace.update(local=local, global_matrix=global_matrix(fx, fy, s, th), flip_x=fx, flip_y=fy)
    return out


def gt_sampling(target: SceneSample, bank: Sequence[SceneSample], count: int, rng,
                extent: float = 22.0, tries: int = 20) -> SceneSample:
    """Paste up to ``count`` humans from ``bank`` at random non-overlapping BEV positions."""
    if not bank:
        raise SceneError("gt_sampling needs a non-empty bank")
    out = target.copy()
    pool = [(s, i) for s in bank for i in range(len(s.annotations))]
    if not pool or count <= 0:
        return out
    pts = out.points.points
    for _ in range(count):
        src, i = pool[int(rng.integers(len(pool)))]
        a = src.annotations[i]
        for _try in range(tries):
            dx, dy = rng.uniform(-extent, extent, 2) - a.center[:2]
            shift = np.array([dx, dy, 0.0])
            cand = Annotation(a.center + shift, a.size, a.yaw, a.keypoints + shift, a.visibility)
            if not any(bev_boxes_overlap(cand, b) for b in out.annotations):
                break
        else:
            continue
        sp = src.points.points
        obj = sp[points_in_box(sp[:, :3], a.center, a.size, a.yaw, margin=0.05)].astype(np.float64)
        obj[:, :3] += shift
        # clear whatever occupied the new footprint
        pts = pts[~points_in_box(pts[:, :3], cand.center, cand.size, cand.yaw, margin=0.05)]
        pts = np.concatenate([pts, obj.astype(np.float32)])
        out.annotations.append(cand)
    out.points = PointCloud(pts)
    return out


# --- files ---------------------------------------------------------------------

def pack_scene(sample: SceneSample) -> bytes:
    recs = [PoseRecord.from_annotation(0, i, a) for i, a in enumerate(sample.annotations)]
    body = pack_records(recs)
    return (SCENE_MAGIC + struct.pack("<I", SCENE_VERSION) + pack_points(sample.points)
            + struct.pack("<I", len(recs)) + body)


def unpack_scene(buf: bytes) -> SceneSample:
    if len(buf) < 8 or buf[:4] != SCENE_MAGIC:
        raise SceneError("bad scene magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != SCENE_VERSION:
        raise SceneError(f"unsupported scene version {version}")
    try:
        cloud, off = unpack_points(buf, 8)
    except SparseError as e:
        raise SceneError(f"bad point block: {e}") from e
    if len(buf) < off + 4:
        raise SceneError("truncated scene: missing annotation count")
    (n,) = struct.unpack_from("<I", buf, off)
    body = buf[off + 4:]
    try:
        recs = unpack_records(body)
    except ValueError as e:
        raise SceneError(f"truncated annotation block: {e}") from e
    if len(recs) != n:
        raise SceneError(f"expected {n} annotations, found {len(recs)}")
    return SceneSample(cloud, [r.to_annotation() for r in recs])


def save_scene(path, sample: SceneSample):
    Path(path).write_bytes(pack_scene(sample))


def load_scene(path) -> SceneSample:
    return unpack_scene(Path(path).read_bytes())


MANIFEST = "manifest.txt"


def write_dataset(out_dir, scenes: Sequence[SceneSample]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(scenes):
        p = out / f"scene_{i:05d}.vkps"
        save_scene(p, s)
        paths.append(p)
    (out / MANIFEST).write_text("".join(p.name + "\n" for p in paths))
    return paths


def list_scenes(data_dir) -> list[Path]:
    """Scene paths from the manifest if present, else every ``*.vkps`` in sorted filename order."""
    d = Path(data_dir)
    if not d.is_dir():
        raise SceneError(f"dataset directory {d} does not exist")
    man = d / MANIFEST
    if man.exists():
        return [d / line.strip() for line in man.read_text().splitlines() if line.strip()]
    return sorted(d.glob("*.vkps"), key=lambda p: p.name)


def load_dataset(data_dir) -> list[SceneSample]:
    paths = list_scenes(data_dir)
    if not paths:
        raise SceneError("no scenes")
    return [load_scene(p) for p in paths]
