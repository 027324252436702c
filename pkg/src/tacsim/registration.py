"""Rigid-transform estimation between two coordinate frames from matched
non-collinear point triples, with combination averaging over 4 points.

The frame construction follows the cross-product recipe: x along the first
edge, z along the triangle normal, y completing the right-handed basis.
Estimates from all 3-point combinations of 4 matched points are averaged
(quaternion mean with hemisphere alignment, arithmetic translation mean)
and re-orthonormalized by polar decomposition.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

COLLINEAR_AREA_THRESHOLD = 1e-12    # m^2


class RegistrationError(ValueError):
    pass


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3),
                           atol=1e-10):
            raise RegistrationError("rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise RegistrationError("rotation must have determinant +1")

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(p) = self(other(p))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation
                              + self.translation)

    def matrix(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.rotation
        h[:3, 3] = self.translation
        return h


@dataclass
class PointCorrespondences:
    """k >= 3 matched points: p in frame R, q in frame B."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.p.shape != self.q.shape or self.p.ndim != 2 \
                or self.p.shape[1] != 3 or len(self.p) < 3:
            raise RegistrationError("need matched (k, 3) arrays with k >= 3")


def apply(t: RigidTransform, point: np.ndarray) -> np.ndarray:
    """R @ point + translation (single point or batch)."""
    p = np.asarray(point, dtype=np.float64)
    return p @ t.rotation.T + t.translation


def _triangle_area(a, b, c) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))


def frame_from_triple(a, b, c) -> RigidTransform:
    """Orthonormal frame built from a non-collinear point triple.

    The returned transform maps coordinates in the constructed frame I to
    the coordinates of the frame the points are expressed in: origin at a,
    x along b-a, z along the triangle normal.
    """
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (a, b, c))
    if _triangle_area(a, b, c) < COLLINEAR_AREA_THRESHOLD:
        raise RegistrationError("triple is collinear")
    x = b - a
    x = x / np.linalg.norm(x)
    z = np.cross(x, c - a)
    z = z / np.linalg.norm(z)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), a)


def register_triple(p_triple, q_triple) -> RigidTransform:
    """Transform mapping frame-R coordinates to frame-B coordinates from a
    matched non-collinear triple: H = H_BI * inv(H_RI)."""
    p = np.asarray(p_triple, dtype=np.float64)
    q = np.asarray(q_triple, dtype=np.float64)
    h_ri = frame_from_triple(*p)
    h_bi = frame_from_triple(*q)
    return h_bi.compose(h_ri.inverse())


def _average_rotations(mats) -> np.ndarray:
    """Normalized quaternion mean with hemisphere alignment, then polar
    re-orthonormalization of the corresponding matrix."""
    quats = Rotation.from_matrix(np.asarray(mats)).as_quat()
    ref = quats[0]
    signs = np.where(quats @ ref < 0, -1.0, 1.0)
    mean = (quats * signs[:, None]).mean(axis=0)
    mean = mean / np.linalg.norm(mean)
    m = Rotation.from_quat(mean).as_matrix()
    u, _ = polar(m)
    return u


def register_averaged(corr: PointCorrespondences) -> RigidTransform:
    """Average the triple estimates over all 3-point combinations of >= 4
    matched points. Collinear combinations are skipped; fewer than 2 valid
    combinations is an error."""
    if len(corr.p) < 4:
        raise RegistrationError("averaging needs at least 4 points")
    rotations, translations = [], []
    for idx in combinations(range(len(corr.p)), 3):
        idx = list(idx)
        try:
            h = register_triple(corr.p[idx], corr.q[idx])
        except RegistrationError:
            continue
        rotations.append(h.rotation)
        translations.append(h.translation)
    if len(rotations) < 2:
        raise RegistrationError("fewer than 2 non-collinear combinations")
    rot = _average_rotations(rotations)
    return RigidTransform(rot, np.mean(translations, axis=0))


# ---------------------------------------------------------------------------
# I/O: correspondences as CSV, transforms as JSON 4x4 row-major
# ---------------------------------------------------------------------------

def save_correspondences(corr: PointCorrespondences, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "point_id", "x", "y", "z"])
        for i, pt in enumerate(corr.p):
            w.writerow(["R", i, *(f"{c:.17g}" for c in pt)])
        for i, pt in enumerate(corr.q):
            w.writerow(["B", i, *(f"{c:.17g}" for c in pt)])


def load_correspondences(path) -> PointCorrespondences:
    rows = {"R": {}, "B": {}}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows[rec["frame"]][int(rec["point_id"])] = [
                float(rec["x"]), float(rec["y"]), float(rec["z"])]
    ids = sorted(rows["R"])
    if ids != sorted(rows["B"]):
        raise RegistrationError("mismatched point ids between frames")
    return PointCorrespondences(np.array([rows["R"][i] for i in ids]),
                                np.array([rows["B"][i] for i in ids]))


def save_transform(t: RigidTransform, path) -> None:
    with open(path, "w") as fh:
        json.dump({"matrix": t.matrix().reshape(-1).tolist()}, fh)


def load_transform(path) -> RigidTransform:
    with open(path) as fh:
        m = np.asarray(json.load(fh)["matrix"], dtype=np.float64).reshape(4, 4)
    return RigidTransform(m[:3, :3], m[:3, 3])
