"""Skeleton layout and the annotation / detection records shared across modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINTS = (
    "nose",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
    "head",
)

BONES = (
    (13, 0), (13, 1), (13, 2), (1, 2),
    (1, 3), (3, 5), (2, 4), (4, 6),
    (1, 7), (2, 8), (7, 8),
    (7, 9), (9, 11), (8, 10), (10, 12),
)

# COCO falloff constants (kappa = 2 * sigma); "head" borrows the nose value
OKS_CONSTANTS = (
    0.052,
    0.158, 0.158,
    0.144, 0.144,
    0.124, 0.124,
    0.214, 0.214,
    0.174, 0.174,
    0.178, 0.178,
    0.052,
)

PARTS = {
    "head": (0, 13),
    "shoulders": (1, 2),
    "elbows": (3, 4),
    "wrists": (5, 6),
    "hips": (7, 8),
    "knees": (9, 10),
    "ankles": (11, 12),
}

FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))


@dataclass(frozen=True)
class SkeletonSpec:
    joints: tuple = JOINTS
    bones: tuple = BONES
    oks_constants: tuple = OKS_CONSTANTS
    parts: dict = field(default_factory=lambda: dict(PARTS))
    flip_pairs: tuple = FLIP_PAIRS
    unmatched_penalty: float = 0.25

    def __post_init__(self):
        k = len(self.joints)
        if len(self.oks_constants) != k or min(self.oks_constants) <= 0:
            raise ValueError("need one positive OKS constant per joint")
        for a, b in self.bones:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"bone ({a}, {b}) references a missing joint")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def flip_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


DEFAULT_SKELETON = SkeletonSpec()


@dataclass
class Annotation:
    """One ground-truth human: yawed 3D box plus keypoints in the scene frame."""

    center: np.ndarray       # (3,)
    size: np.ndarray         # (3,) length, width, height
    yaw: float
    keypoints: np.ndarray    # (K, 3)
    visibility: np.ndarray   # (K,)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        self.visibility = np.asarray(self.visibility, dtype=np.float64).reshape(-1)
        self.yaw = float(self.yaw)

    def copy(self) -> "Annotation":
        return Annotation(self.center.copy(), self.size.copy(), self.yaw,
                          self.keypoints.copy(), self.visibility.copy())


@dataclass
class PoseEstimate:
    score: float
    center: np.ndarray
    size: np.ndarray
    yaw: float
    keypoints: np.ndarray    # (K, 3), global frame
    visibility: np.ndarray   # (K,) in [0, 1]
    batch: int = 0


def box_corners_bev(center, size, yaw) -> np.ndarray:
    """Four BEV corners (counter-clockwise) of a yawed box."""
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = size[0] / 2, size[1] / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center)[:2]


def bev_boxes_overlap(a: Annotation, b: Annotation) -> bool:
    """Separating-axis test on the two BEV rectangles (touching counts as apart)."""
    pa = box_corners_bev(a.center, a.size, a.yaw)
    pb = box_corners_bev(b.center, b.size, b.yaw)
    for poly in (pa, pb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            proj_a, proj_b = pa @ axis, pb @ axis
            if proj_a.max() <= proj_b.min() + 1e-12 or proj_b.max() <= proj_a.min() + 1e-12:
                return False
    return True


def points_in_box(xyz: np.ndarray, center, size, yaw, margin: float = 0.0) -> np.ndarray:
    local = np.asarray(xyz, dtype=np.float64) - np.asarray(center)
    c, s = np.cos(yaw), np.sin(yaw)
    lx = local[:, 0] * c + local[:, 1] * s
    ly = -local[:, 0] * s + local[:, 1] * c
    half = np.asarray(size) / 2 + margin
    return (np.abs(lx) <= half[0]) & (np.abs(ly) <= half[1]) & (np.abs(local[:, 2]) <= half[2])
