"""Parametric fingertip and indenter geometry.

Provides triangle meshes with named node sets, enclosed-volume computation,
analytic signed-distance queries for the rigid indenter primitives, and
uniform point sampling on the ventral skin region.

Conventions: the fingertip long axis is +x (proximal at x=0, distal tip at
x=length+radius), +z is dorsal and -z is ventral. All lengths in meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    """Invalid mesh topology, orientation, or shape parameters."""


# ---------------------------------------------------------------------------
# Triangle meshes
# ---------------------------------------------------------------------------

@dataclass
class TriMesh:
    """Triangulated surface with vertex coordinates and named node sets."""

    vertices: np.ndarray                       # (n, 3) float64, meters
    faces: np.ndarray                          # (m, 3) int vertex indices
    node_sets: dict = field(default_factory=dict)   # name -> index array
    closed: bool = False

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError("vertices must be (n, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError("faces must be (m, 3)")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of range")
        self.node_sets = {k: np.asarray(v, dtype=np.int64)
                          for k, v in self.node_sets.items()}
        if self.closed:
            check_closed(self)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def directed_edges(faces: np.ndarray) -> np.ndarray:
    """All directed edges (3 per face) as an (3m, 2) array."""
    return np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])


def check_closed(mesh: TriMesh) -> None:
    """Raise unless every edge is shared by exactly two consistently
    oriented faces (each directed edge appears once, its reverse once)."""
    de = directed_edges(mesh.faces)
    keys = de[:, 0] * len(mesh.vertices) + de[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    if np.any(counts != 1):
        raise GeometryError("mesh is not consistently oriented "
                            "(repeated directed edge)")
    rev = de[:, 1] * len(mesh.vertices) + de[:, 0]
    if not np.array_equal(np.sort(keys), np.sort(rev)):
        raise GeometryError("mesh is not closed (boundary edge found)")


def euler_characteristic(mesh: TriMesh) -> int:
    de = directed_edges(mesh.faces)
    e = np.unique(np.sort(de, axis=1), axis=0)
    return mesh.n_vertices - len(e) + mesh.n_faces


def enclosed_volume(mesh: TriMesh) -> float:
    """Volume enclosed by a closed, outward-oriented mesh.

    Divergence theorem over faces: V = sum (1/6) x1 . (x2 x x3).
    Raises on open meshes and on inward orientation (negative volume).
    """
    check_closed(mesh)
    v = signed_volume(mesh.vertices, mesh.faces)
    if v <= 0.0:
        raise GeometryError(f"mesh is inward-oriented (signed volume {v:g})")
    return v


def signed_volume(x: np.ndarray, faces: np.ndarray) -> float:
    """Signed enclosed volume of the face set at positions ``x`` (no
    topology checks; used by the solver on known-closed meshes)."""
    a, b, c = x[faces[:, 0]], x[faces[:, 1]], x[faces[:, 2]]
    return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)


# ---------------------------------------------------------------------------
# Rigid indenter primitives
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("sphere", "cylinder", "ring", "cube", "flat")

# dimension keys required per kind
_SHAPE_DIMS = {
    "sphere": ("radius",),
    "cylinder": ("radius", "half_length"),
    "ring": ("major_radius", "minor_radius"),
    "cube": ("half_extent",),
    "flat": (),
}


@dataclass
class RigidShape:
    """Analytic rigid primitive with a rigid-body pose.

    Local conventions (pose maps local -> world): sphere and cube are
    centered at the local origin; cylinder axis is local x; ring (torus)
    plane is normal to local z; flat is the half-space z >= 0 with surface
    z = 0. Signed distance is negative inside the solid.
    """

    kind: str
    dims: dict
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise GeometryError(f"unknown shape kind {self.kind!r}")
        for key in _SHAPE_DIMS[self.kind]:
            if key not in self.dims:
                raise GeometryError(f"{self.kind} needs dimension {key!r}")
            if not self.dims[key] > 0:
                raise GeometryError(f"{self.kind} dimension {key!r} must be > 0")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-9):
            raise GeometryError("pose rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise GeometryError("pose rotation must have determinant +1")

    def at_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "RigidShape":
        return RigidShape(self.kind, self.dims, rotation, translation)

    def tip_offset(self) -> float:
        """Distance from the local origin to the leading surface point
        along local -z (used to place the shape by its tip)."""
        d = self.dims
        return {"sphere": lambda: d["radius"],
                "cylinder": lambda: d["radius"],
                "ring": lambda: d["minor_radius"],
                "cube": lambda: d["half_extent"],
                "flat": lambda: 0.0}[self.kind]()


def _sdf_local(shape: RigidShape, q: np.ndarray):
    """Signed distance and outward normal in the local frame.

    q is (..., 3). Returns (dist (...,), normal (..., 3)).
    """
    d = shape.dims
    if shape.kind == "sphere":
        r = np.linalg.norm(q, axis=-1)
        n = np.where(r[..., None] > 1e-300, q / np.maximum(r, 1e-300)[..., None],
                     np.array([0.0, 0.0, 1.0]))
        return r - d["radius"], n
    if shape.kind == "cylinder":
        # finite cylinder, axis local x
        ax = q[..., 0]
        rad = np.hypot(q[..., 1], q[..., 2])
        dr = rad - d["radius"]
        da = np.abs(ax) - d["half_length"]
        radial_dir = np.zeros_like(q)
        safe = np.maximum(rad, 1e-300)
        radial_dir[..., 1] = q[..., 1] / safe
        radial_dir[..., 2] = q[..., 2] / safe
        cap_dir = np.zeros_like(q)
        cap_dir[..., 0] = np.sign(ax)
        outside_r = np.maximum(dr, 0.0)
        outside_a = np.maximum(da, 0.0)
        out = np.hypot(outside_r, outside_a)
        inside = np.minimum(np.maximum(dr, da), 0.0)
        dist = out + inside
        # normal: blend of radial and cap contributions outside, dominant
        # feature inside
        w = np.stack([outside_r, outside_a], axis=-1)
        wn = np.linalg.norm(w, axis=-1)
        use_out = out > 0
        n_out = (radial_dir * (outside_r / np.maximum(wn, 1e-300))[..., None]
                 + cap_dir * (outside_a / np.maximum(wn, 1e-300))[..., None])
        n_in = np.where((dr >= da)[..., None], radial_dir, cap_dir)
        n = np.where(use_out[..., None], n_out, n_in)
        return dist, n
    if shape.kind == "ring":
        # torus, plane normal local z
        rho = np.hypot(q[..., 0], q[..., 1])
        u = rho - d["major_radius"]
        w = np.hypot(u, q[..., 2])
        dist = w - d["minor_radius"]
        safe_rho = np.maximum(rho, 1e-300)
        safe_w = np.maximum(w, 1e-300)
        n = np.empty_like(q)
        n[..., 0] = (u / safe_w) * (q[..., 0] / safe_rho)
        n[..., 1] = (u / safe_w) * (q[..., 1] / safe_rho)
        n[..., 2] = q[..., 2] / safe_w
        return dist, n
    if shape.kind == "cube":
        h = d["half_extent"]
        aq = np.abs(q) - h
        outside = np.maximum(aq, 0.0)
        out_n = np.linalg.norm(outside, axis=-1)
        inside = np.minimum(np.max(aq, axis=-1), 0.0)
        dist = out_n + inside
        sign = np.where(q >= 0, 1.0, -1.0)
        n_out = sign * outside / np.maximum(out_n, 1e-300)[..., None]
        # inside: face of least penetration
        idx = np.argmax(aq, axis=-1)
        n_in = np.zeros_like(q)
        np.put_along_axis(n_in, idx[..., None], 1.0, axis=-1)
        n_in = n_in * sign
        n = np.where((out_n > 0)[..., None], n_out, n_in)
        return dist, n
    if shape.kind == "flat":
        # solid half-space z >= 0, outward normal -z
        dist = -q[..., 2]
        n = np.zeros_like(q)
        n[..., 2] = -1.0
        return dist, n
    raise GeometryError(shape.kind)


def signed_distance(shape: RigidShape, points: np.ndarray):
    """Signed distance (negative inside) and outward unit normal in world
    coordinates. Accepts a single point (3,) or a batch (n, 3)."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    q = (np.atleast_2d(p) - shape.translation) @ shape.rotation
    dist, n_local = _sdf_local(shape, q)
    n = n_local @ shape.rotation.T
    if single:
        return float(dist[0]), n[0]
    return dist, n


# ---------------------------------------------------------------------------
# Fingertip sensor geometry
# ---------------------------------------------------------------------------

@dataclass
class CapsuleCore:
    """Rigid core: sphere-swept segment along the x axis."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from points to the core surface (positive outside)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        axis = self.p1 - self.p0
        denom = float(axis @ axis)
        t = np.clip((p - self.p0) @ axis / denom, 0.0, 1.0)
        closest = self.p0 + t[:, None] * axis
        d = np.linalg.norm(p - closest, axis=1) - self.radius
        return d if np.asarray(points).ndim > 1 else float(d[0])


@dataclass
class FingertipParams:
    """Dimensions and resolution of the parametric fingertip."""

    radius: float = 6.7e-3          # skin midsurface radius
    length: float = 16.0e-3         # cylindrical section length
    core_radius: float = 3.0e-3
    edge_length: float = 0.5e-3     # target maximum mesh edge
    nail_half_angle: float = np.deg2rad(40.0)    # dorsal anchor strip
    ventral_half_angle: float = np.deg2rad(55.0)
    ventral_x: tuple = (0.2, 0.9)   # fraction of cylinder length

    def validate(self):
        if min(self.radius, self.length, self.core_radius,
               self.edge_length) <= 0:
            raise GeometryError("fingertip dimensions must be positive")
        if self.core_radius >= self.radius:
            raise GeometryError("core radius must be smaller than skin radius")

    def to_dict(self) -> dict:
        return {"radius": self.radius, "length": self.length,
                "core_radius": self.core_radius,
                "edge_length": self.edge_length,
                "nail_half_angle": self.nail_half_angle,
                "ventral_half_angle": self.ventral_half_angle,
                "ventral_x": list(self.ventral_x)}

    @classmethod
    def from_dict(cls, d: dict) -> "FingertipParams":
        d = dict(d)
        if "ventral_x" in d:
            d["ventral_x"] = tuple(d["ventral_x"])
        return cls(**d)


@dataclass
class SensorGeometry:
    """Closed skin mesh, rigid core, electrode layout, and sampling bounds."""

    skin: TriMesh
    core: CapsuleCore
    electrode_sites: np.ndarray      # (19, 3) on the core surface
    electrode_normals: np.ndarray    # (19, 3) outward unit normals
    params: FingertipParams

    def __post_init__(self):
        if len(self.electrode_sites) != 19:
            raise GeometryError("expected exactly 19 electrode sites")
        anchors = np.union1d(self.skin.node_sets["clamp"],
                             self.skin.node_sets["nail"])
        free = np.setdiff1d(np.arange(self.skin.n_vertices), anchors)
        if len(free) and self.core.distance(self.skin.vertices[free]).min() <= 0:
            raise GeometryError("skin does not enclose the core")

    @property
    def ventral_bounds(self):
        p = self.params
        return (p.ventral_x[0] * p.length, p.ventral_x[1] * p.length,
                p.ventral_half_angle)


def _ring(x: float, radius: float, n_c: int) -> np.ndarray:
    """Ring of n_c vertices at station x; azimuth 0 is ventral (-z)."""
    phi = 2.0 * np.pi * np.arange(n_c) / n_c
    return np.column_stack([np.full(n_c, x),
                            radius * np.sin(phi),
                            -radius * np.cos(phi)])


def _stitch(verts: list, faces: list, ring_a, ring_b, project=None):
    """Connect two same-length vertex-index rings with quads, each split
    into 4 triangles around a (projected) centroid vertex."""
    n = len(ring_a)
    for k in range(n):
        k2 = (k + 1) % n
        i0, i1 = ring_a[k], ring_a[k2]
        i2, i3 = ring_b[k2], ring_b[k]
        centroid = (verts[i0] + verts[i1] + verts[i2] + verts[i3]) / 4.0
        if project is not None:
            centroid = project(centroid)
        ic = len(verts)
        verts.append(centroid)
        faces.extend([(i0, i1, ic), (i1, i2, ic), (i2, i3, ic), (i3, i0, ic)])


def _fan(faces: list, ring, apex: int, apex_first: bool):
    n = len(ring)
    for k in range(n):
        k2 = (k + 1) % n
        if apex_first:
            faces.append((apex, ring[k], ring[k2]))
        else:
            faces.append((apex, ring[k2], ring[k]))


def build_fingertip(params: FingertipParams | None = None) -> SensorGeometry:
    """Construct the hemisphere-capped-cylinder skin mesh, concentric
    capsule core, 19 electrode sites, and anchor/ventral node sets.

    The mesh is mirror-symmetric about the sagittal (x-z) plane and closed
    with a flat proximal disk. Quad bands are split into 4 triangles around
    surface-projected centroids, which preserves the symmetry.
    """
    p = params or FingertipParams()
    p.validate()
    R, L, h = p.radius, p.length, p.edge_length

    n_c = max(12, int(round(2.0 * np.pi * R / h)))
    n_x = max(2, int(round(L / h)))
    n_p = max(2, int(round(0.5 * np.pi * R / h)))
    n_r = max(1, int(round(R / h)))

    verts: list = []
    faces: list = []

    def add_ring(arr):
        base = len(verts)
        verts.extend(arr)
        return list(range(base, base + len(arr)))

    # proximal disk: center point, then rings growing to the rim at x=0
    center = len(verts)
    verts.append(np.zeros(3))
    disk_rings = [add_ring(_ring(0.0, R * m / n_r, n_c))
                  for m in range(1, n_r + 1)]
    _fan(faces, disk_rings[0], center, apex_first=False)
    for a, b in zip(disk_rings[:-1], disk_rings[1:]):
        _stitch(verts, faces, a, b)

    # cylinder section; its first ring is the disk rim
    cyl_rings = [disk_rings[-1]]
    for i in range(1, n_x + 1):
        cyl_rings.append(add_ring(_ring(L * i / n_x, R, n_c)))

    def proj_cyl(v):
        s = R / np.hypot(v[1], v[2])
        return np.array([v[0], v[1] * s, v[2] * s])

    for a, b in zip(cyl_rings[:-1], cyl_rings[1:]):
        _stitch(verts, faces, a, b, project=proj_cyl)

    # hemispherical cap centered at (L, 0, 0)
    cap_center = np.array([L, 0.0, 0.0])

    def proj_cap(v):
        u = v - cap_center
        return cap_center + u * (R / np.linalg.norm(u))

    cap_rings = [cyl_rings[-1]]
    for j in range(1, n_p):
        alpha = 0.5 * np.pi * j / n_p
        cap_rings.append(add_ring(_ring(L + R * np.sin(alpha),
                                        R * np.cos(alpha), n_c)))
    for a, b in zip(cap_rings[:-1], cap_rings[1:]):
        _stitch(verts, faces, a, b, project=proj_cap)
    pole = len(verts)
    verts.append(np.array([L + R, 0.0, 0.0]))
    _fan(faces, cap_rings[-1], pole, apex_first=True)

    vertices = np.asarray(verts)
    faces_arr = np.asarray(faces, dtype=np.int64)
    if signed_volume(vertices, faces_arr) < 0:
        faces_arr = faces_arr[:, ::-1]

    # node sets
    x = vertices[:, 0]
    azim = np.arctan2(vertices[:, 1], -vertices[:, 2])   # 0 at ventral
    clamp = np.where(x <= 0.5 * L / n_x * 0.5 + 1e-12)[0]
    on_shell = np.hypot(vertices[:, 1], vertices[:, 2]) > 0.5 * R
    nail = np.where((np.abs(np.abs(azim) - np.pi) <= p.nail_half_angle)
                    & (x <= L + 1e-12) & on_shell & (x > 1e-12))[0]
    xlo, xhi, phimax = (p.ventral_x[0] * L, p.ventral_x[1] * L,
                        p.ventral_half_angle)
    ventral = np.where((np.abs(azim) <= phimax) & (x >= xlo) & (x <= xhi)
                       & on_shell)[0]

    skin = TriMesh(vertices, faces_arr,
                   node_sets={"clamp": clamp, "nail": nail,
                              "ventral": ventral},
                   closed=True)

    core = CapsuleCore(np.array([p.core_radius, 0.0, 0.0]),
                       np.array([L, 0.0, 0.0]), p.core_radius)
    sites, normals = _electrode_layout(p)
    return SensorGeometry(skin, core, sites, normals, p)


def _electrode_layout(p: FingertipParams):
    """17 sites in three ventral rows plus 2 at the tip, on the core."""
    rc, L = p.core_radius, p.length
    rows = [(-np.deg2rad(40.0), 6), (0.0, 5), (np.deg2rad(40.0), 6)]
    sites, normals = [], []
    for phi, count in rows:
        for xfrac in np.linspace(0.12, 0.92, count):
            n = np.array([0.0, np.sin(phi), -np.cos(phi)])
            sites.append(np.array([xfrac * L, 0.0, 0.0]) + rc * n)
            normals.append(n)
    for alpha in (np.deg2rad(45.0), 0.0):    # 45 deg below axis, then apex
        u = np.array([np.cos(alpha), 0.0, -np.sin(alpha)])
        sites.append(np.array([L, 0.0, 0.0]) + rc * u)
        normals.append(u)
    return np.asarray(sites), np.asarray(normals)


def core_volume(core: CapsuleCore) -> float:
    length = float(np.linalg.norm(core.p1 - core.p0))
    r = core.radius
    return np.pi * r * r * length + 4.0 / 3.0 * np.pi * r ** 3


def sample_ventral_points(geom: SensorGeometry, n: int, seed: int) -> np.ndarray:
    """Uniformly sample n target points in the ventral parametric bounds,
    projected to the skin midsurface. Deterministic per seed."""
    if n < 1:
        raise GeometryError("need n >= 1 sample points")
    xlo, xhi, phimax = geom.ventral_bounds
    if xhi <= xlo or phimax <= 0:
        raise GeometryError("empty ventral region")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(xlo, xhi, size=n)
    phis = rng.uniform(-phimax, phimax, size=n)
    R = geom.params.radius
    return np.column_stack([xs, R * np.sin(phis), -R * np.cos(phis)])


def ventral_normal(geom: SensorGeometry, point: np.ndarray) -> np.ndarray:
    """Outward skin normal at a point on the cylinder section or cap."""
    L = geom.params.length
    pt = np.asarray(point, dtype=np.float64)
    if pt[0] <= L:
        n = np.array([0.0, pt[1], pt[2]])
    else:
        n = pt - np.array([L, 0.0, 0.0])
    return n / np.linalg.norm(n)


# ---------------------------------------------------------------------------
# Icosphere (membrane test geometry)
# ---------------------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Geodesic sphere from repeated icosahedron subdivision.

    subdivisions=3 gives 1280 faces / 642 vertices.
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        cache: dict = {}
        vlist = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = vlist[i] + vlist[j]
                m /= np.linalg.norm(m)
                cache[key] = len(vlist)
                vlist.append(m)
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc),
                              (ab, bc, ca)])
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)

    mesh = TriMesh(verts * radius, faces, closed=True)
    if signed_volume(mesh.vertices, mesh.faces) < 0:
        mesh = TriMesh(verts * radius, faces[:, ::-1], closed=True)
    return mesh


# ---------------------------------------------------------------------------
# Mesh and config I/O
# ---------------------------------------------------------------------------

def save_obj(mesh: TriMesh, path) -> None:
    """Write vertices and triangular faces as OBJ; node sets go to a JSON
    sidecar <path>.sets.json."""
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    sets = {name: idx.tolist() for name, idx in mesh.node_sets.items()}
    with open(path.with_suffix(path.suffix + ".sets.json"), "w") as fh:
        json.dump(sets, fh, sort_keys=True)


def load_obj(path, closed: bool = False) -> TriMesh:
    path = Path(path)
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(c.split("/")[0]) - 1 for c in parts[1:4]]
                faces.append(idx)
    node_sets = {}
    sidecar = path.with_suffix(path.suffix + ".sets.json")
    if sidecar.exists():
        with open(sidecar) as fh:
            node_sets = {k: np.asarray(v, dtype=np.int64)
                         for k, v in json.load(fh).items()}
    return TriMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64),
                   node_sets=node_sets, closed=closed)


def save_fingertip_config(params: FingertipParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, sort_keys=True, indent=1)


def load_fingertip_config(path) -> FingertipParams:
    with open(path) as fh:
        return FingertipParams.from_dict(json.load(fh))
