"""Quasi-static nonlinear membrane finite-element solver.

Skin: constant-strain triangles with an incompressible Neo-Hookean law in
plane stress (the through-thickness stretch is eliminated by
lambda1*lambda2*lambda3 = 1). Enclosed fluid: a single volume constraint
enforced by augmented-Lagrangian updates on a scalar pressure multiplier.
Indenter contact: node-wise penalty normal forces with elastic-return
Coulomb friction. Each load increment is solved by Newton iteration with
an analytic tangent, direct sparse factorization, and a backtracking line
search on the augmented energy.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from .geometry import RigidShape, TriMesh, signed_distance, signed_volume


class FemError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Parameters and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialParams:
    mu_nh: float            # Neo-Hookean stiffness, Pa
    t_sk: float             # membrane thickness, m

    def __post_init__(self):
        if self.mu_nh <= 0 or self.t_sk <= 0:
            raise FemError("material parameters must be positive")


@dataclass(frozen=True)
class FluidConstraint:
    """Enclosed-fluid bookkeeping; the volume-scale proxy for temperature."""

    v_ref: float            # reference fluid volume, m^3
    beta_t: float = 0.01    # volumetric thermal expansion, 1/degC
    t_ref: float = 25.0     # degC
    t_fl: float = 25.0      # degC
    pressure: float = 0.0   # initial multiplier, Pa

    @property
    def target_volume(self) -> float:
        v = self.v_ref * (1.0 + self.beta_t * (self.t_fl - self.t_ref))
        if v <= 0:
            raise FemError("target fluid volume must be positive")
        return v

    @property
    def volume_delta(self) -> float:
        return self.target_volume - self.v_ref


@dataclass(frozen=True)
class ContactParams:
    mu_fr: float            # Coulomb friction coefficient
    k_n: float = 1.0e5      # normal penalty stiffness, N/m
    k_t: float = 1.0e4      # tangential penalty stiffness, N/m

    def __post_init__(self):
        if self.k_n <= 0 or self.k_t <= 0 or self.mu_fr < 0:
            raise FemError("invalid contact parameters")


@dataclass
class SolverConfig:
    tol: float = 1.0e-6             # residual 2-norm, N
    vol_tol: float = 1.0e-6         # relative volume error
    max_newton: int = 60            # per inner solve
    max_outer: int = 60             # multiplier updates per load step
    pressurization_steps: int = 5
    n_substeps: int = 1             # extra subdivision per indentation step
    backtrack_factor: float = 0.5
    armijo_c: float = 1.0e-4
    max_backtracks: int = 30
    vol_penalty_scale: float = 20.0
    reg_floor: float = 1.0e-12      # relative diagonal regularization

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**d)


@dataclass
class StickState:
    """Per-node tangential anchors, stored in the indenter's local frame."""

    anchors: np.ndarray          # (n, 3)
    has_anchor: np.ndarray      # (n,) bool

    @classmethod
    def empty(cls, n_nodes: int) -> "StickState":
        return cls(np.zeros((n_nodes, 3)), np.zeros(n_nodes, dtype=bool))

    def copy(self) -> "StickState":
        return StickState(self.anchors.copy(), self.has_anchor.copy())


@dataclass
class ContactReport:
    nodes: np.ndarray            # active node indices
    gaps: np.ndarray             # signed gaps (negative = penetrating)
    slipping: np.ndarray        # bool per active node


@dataclass
class SystemState:
    x: np.ndarray                # (n, 3) nodal positions
    pressure: float = 0.0
    converged: bool = True
    residual_norm: float = 0.0
    volume: float = 0.0
    net_contact_force: np.ndarray = field(
        default_factory=lambda: np.zeros(3))
    contacts: ContactReport = field(default_factory=lambda: ContactReport(
        np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=bool)))
    stick: StickState | None = None
    n_iterations: int = 0

    def copy(self) -> "SystemState":
        return SystemState(self.x.copy(), self.pressure, self.converged,
                           self.residual_norm, self.volume,
                           self.net_contact_force.copy(), self.contacts,
                           self.stick.copy() if self.stick else None,
                           self.n_iterations)


@dataclass
class LoadStep:
    target_volume: float
    shape: RigidShape | None = None     # posed indenter, or None


# ---------------------------------------------------------------------------
# Constitutive law on principal stretches
# ---------------------------------------------------------------------------

def energy_density(lambda1: float, lambda2: float, mu_nh: float) -> float:
    """Incompressible Neo-Hookean energy density in plane stress, shifted
    to vanish in the undeformed state:
    W = mu/2 (l1^2 + l2^2 + l1^-2 l2^-2 - 3)."""
    if lambda1 <= 0 or lambda2 <= 0:
        raise FemError("principal stretches must be positive")
    l3sq = 1.0 / (lambda1 * lambda2) ** 2
    return 0.5 * mu_nh * (lambda1 ** 2 + lambda2 ** 2 + l3sq - 3.0)


def principal_stress(lambda1: float, lambda2: float, mu_nh: float):
    """Cauchy stresses along the principal axes with sigma3 = 0:
    sigma_l = mu (l_l^2 - l1^-2 l2^-2)."""
    if lambda1 <= 0 or lambda2 <= 0:
        raise FemError("principal stretches must be positive")
    l3sq = 1.0 / (lambda1 * lambda2) ** 2
    return (mu_nh * (lambda1 ** 2 - l3sq), mu_nh * (lambda2 ** 2 - l3sq))


# ---------------------------------------------------------------------------
# Element kinematics
# ---------------------------------------------------------------------------

def _reference_metric(x_ref: np.ndarray, faces: np.ndarray):
    """Per-element inverse reference edge matrix (in a local 2D frame) and
    reference areas."""
    e1 = x_ref[faces[:, 1]] - x_ref[faces[:, 0]]
    e2 = x_ref[faces[:, 2]] - x_ref[faces[:, 0]]
    nrm = np.cross(e1, e2)
    area2 = np.linalg.norm(nrm, axis=1)
    if np.any(area2 < 1e-30):
        raise FemError("degenerate reference triangle")
    u1 = e1 / np.linalg.norm(e1, axis=1)[:, None]
    nz = nrm / area2[:, None]
    u2 = np.cross(nz, u1)
    # D = [[e1.u1, e2.u1], [0, e2.u2]], G = inv(D)
    d11 = np.einsum("ij,ij->i", e1, u1)
    d12 = np.einsum("ij,ij->i", e2, u1)
    d22 = np.einsum("ij,ij->i", e2, u2)
    g = np.zeros((len(faces), 2, 2))
    g[:, 0, 0] = 1.0 / d11
    g[:, 0, 1] = -d12 / (d11 * d22)
    g[:, 1, 1] = 1.0 / d22
    return g, 0.5 * area2


def _deformation(x: np.ndarray, faces: np.ndarray, g: np.ndarray):
    """Surface deformation gradient F (m, 3, 2) and C = F^T F."""
    d = np.stack([x[faces[:, 1]] - x[faces[:, 0]],
                  x[faces[:, 2]] - x[faces[:, 0]]], axis=2)   # (m, 3, 2)
    f = np.einsum("miq,mqj->mij", d, g)
    c = np.einsum("mij,mik->mjk", f, f)
    return f, c


def _stress_2pk(c: np.ndarray, mu: float):
    """Second Piola-Kirchhoff stress S = mu (I - C^-1 / det C), together
    with det C, C^-1, and the energy density."""
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    if np.any(det <= 0):
        raise FemError("element inverted (det C <= 0)")
    inv = np.empty_like(c)
    inv[:, 0, 0] = c[:, 1, 1]
    inv[:, 1, 1] = c[:, 0, 0]
    inv[:, 0, 1] = -c[:, 0, 1]
    inv[:, 1, 0] = -c[:, 1, 0]
    inv /= det[:, None, None]
    eye = np.zeros_like(c)
    eye[:, 0, 0] = eye[:, 1, 1] = 1.0
    s = mu * (eye - inv / det[:, None, None])
    w = 0.5 * mu * (c[:, 0, 0] + c[:, 1, 1] + 1.0 / det - 3.0)
    return s, det, inv, w


# edge-matrix dependence on nodal positions: d[:, alpha] = sum_p S[p, alpha] x_p
_EDGE_SIGNS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
# map from d-space dofs (i, alpha) -> element dofs (node p, comp i)
_DOF_MAP = np.zeros((9, 6))
for _p in range(3):
    for _i in range(3):
        for _al in range(2):
            _DOF_MAP[3 * _p + _i, 2 * _i + _al] = _EDGE_SIGNS[_p, _al]


def element_forces(x_ref: np.ndarray, x_cur: np.ndarray,
                   mat: MaterialParams) -> np.ndarray:
    """Nodal forces -d(W A_ref t)/dx of one membrane triangle.

    x_ref, x_cur: (3, 3) reference and current vertex positions.
    """
    faces = np.array([[0, 1, 2]])
    g, area = _reference_metric(np.asarray(x_ref, dtype=np.float64), faces)
    f, c = _deformation(np.asarray(x_cur, dtype=np.float64), faces, g)
    s, _, _, _ = _stress_2pk(c, mat.mu_nh)
    p = np.einsum("mij,mjk->mik", f, s)
    h = (area * mat.t_sk)[:, None, None] * np.einsum(
        "mij,mqj->miq", p, g)
    forces = np.zeros((3, 3))
    forces[1] = -h[0, :, 0]
    forces[2] = -h[0, :, 1]
    forces[0] = h[0, :, 0] + h[0, :, 1]
    return forces


def volume_gradient(mesh: TriMesh, x: np.ndarray) -> np.ndarray:
    """d(enclosed volume)/dx per node; the pressure load on node i is
    pressure * gradient_i."""
    if not mesh.closed:
        from .geometry import check_closed
        check_closed(mesh)
    return _volume_gradient(np.asarray(x, dtype=np.float64), mesh.faces)


def _volume_gradient(x: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = x[faces[:, 0]], x[faces[:, 1]], x[faces[:, 2]]
    grad = np.zeros_like(x)
    np.add.at(grad, faces[:, 0], np.cross(b, c) / 6.0)
    np.add.at(grad, faces[:, 1], np.cross(c, a) / 6.0)
    np.add.at(grad, faces[:, 2], np.cross(a, b) / 6.0)
    return grad


def contact_forces(x: np.ndarray, shape: RigidShape, cp: ContactParams,
                   stick: StickState, surface_offset: float = 0.0):
    """Penalty contact forces with elastic-return Coulomb friction.

    Nodes with gap = sdf(x) - surface_offset < 0 receive a normal force
    -k_n * gap * n plus a tangential force of magnitude
    min(k_t * ||slip||, mu_fr * ||f_n||) opposing the slip from their
    anchor. Returns (forces (n,3), updated StickState, ContactReport).
    """
    forces, _, _, report, new_stick = _contact_eval(
        x, shape, cp, stick, surface_offset, need_hessian=False)
    return forces, new_stick, report


def _anchor_world(shape: RigidShape, anchors_local: np.ndarray) -> np.ndarray:
    return anchors_local @ shape.rotation.T + shape.translation


def _to_local(shape: RigidShape, points: np.ndarray) -> np.ndarray:
    return (points - shape.translation) @ shape.rotation


def _contact_eval(x, shape, cp, stick, offset, need_hessian):
    """Energy, forces, per-node 3x3 Hessian blocks (frozen anchors), the
    contact report, and the committed next StickState."""
    n = len(x)
    gaps, normals = signed_distance(shape, x)
    gaps = gaps - offset
    active = gaps < 0.0
    forces = np.zeros_like(x)
    energy = 0.0
    hblocks = np.zeros((0, 3, 3))
    hnodes = np.empty(0, dtype=np.int64)
    slipping = np.zeros(int(active.sum()), dtype=bool)
    new_stick = stick.copy()

    idx = np.nonzero(active)[0]
    if len(idx):
        g_a = gaps[idx]
        n_a = normals[idx]
        fn = -cp.k_n * g_a[:, None] * n_a
        forces[idx] += fn
        energy += 0.5 * cp.k_n * float(g_a @ g_a)
        fn_mag = cp.k_n * (-g_a)

        if need_hessian:
            hnodes = idx
            hblocks = cp.k_n * np.einsum("ni,nj->nij", n_a, n_a)

        fric = stick.has_anchor[idx]
        if cp.mu_fr > 0 and np.any(fric):
            sub = idx[fric]
            na = normals[sub]
            aw = _anchor_world(shape, stick.anchors[sub])
            v = x[sub] - aw
            s = v - np.einsum("ni,ni->n", v, na)[:, None] * na
            smag = np.linalg.norm(s, axis=1)
            cap = cp.mu_fr * fn_mag[fric]
            trial = cp.k_t * smag
            slip = trial > cap
            ft = np.where(slip[:, None],
                          -cap[:, None] * s / np.maximum(smag, 1e-300)[:, None],
                          -cp.k_t * s)
            forces[sub] += ft
            e_stick = 0.5 * cp.k_t * smag ** 2
            e_slip = cap * smag - cap ** 2 / (2.0 * cp.k_t)
            energy += float(np.sum(np.where(slip, e_slip, e_stick)))
            slip_full = np.zeros(len(idx), dtype=bool)
            slip_full[np.nonzero(fric)[0]] = slip
            slipping = slip_full

            if need_hessian:
                eye = np.eye(3)[None]
                pt = eye - np.einsum("ni,nj->nij", na, na)
                shat = s / np.maximum(smag, 1e-300)[:, None]
                h_stick = cp.k_t * pt
                # slip tangent: direction change of the capped force plus
                # the asymmetric coupling of the cap to the normal gap
                h_slip = (cap / np.maximum(smag, 1e-300))[:, None, None] * (
                    pt - np.einsum("ni,nj->nij", shat, shat))
                h_slip = h_slip - cp.mu_fr * cp.k_n * np.einsum(
                    "ni,nj->nij", shat, na)
                add = np.where(slip[:, None, None], h_slip, h_stick)
                # merge into the normal blocks of those nodes
                pos = np.searchsorted(hnodes, sub)
                hblocks[pos] += add

            # committed anchors: drag the anchor so the tangential spring
            # carries exactly the capped force after slipping
            if np.any(slip):
                drag = (smag - cap / cp.k_t)[:, None] * (
                    s / np.maximum(smag, 1e-300)[:, None])
                moved = aw.copy()
                moved[slip] += drag[slip]
                new_stick.anchors[sub] = _to_local(shape, moved)

        # initialize anchors for newly active nodes at their projected
        # contact points
        fresh = idx[~stick.has_anchor[idx]]
        if len(fresh):
            proj = x[fresh] - gaps[fresh][:, None] * normals[fresh]
            new_stick.anchors[fresh] = _to_local(shape, proj)
            new_stick.has_anchor[fresh] = True

    # release anchors of nodes that left contact
    released = new_stick.has_anchor & ~active
    new_stick.has_anchor[released] = False

    report = ContactReport(idx, gaps[idx], slipping)
    return forces, energy, (hnodes, hblocks), report, new_stick


# ---------------------------------------------------------------------------
# Assembled model
# ---------------------------------------------------------------------------

def _skew(v: np.ndarray) -> np.ndarray:
    m = np.zeros(v.shape[:-1] + (3, 3))
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


class MembraneModel:
    """Precomputed assembly data for one mesh + material + boundary set."""

    def __init__(self, mesh: TriMesh, mat: MaterialParams,
                 fixed_nodes: np.ndarray,
                 contact: ContactParams | None = None):
        self.mesh = mesh
        self.mat = mat
        self.contact_params = contact
        self.x_ref = mesh.vertices
        self.faces = mesh.faces
        self.g, self.area = _reference_metric(self.x_ref, self.faces)
        self.coef = self.area * mat.t_sk
        n = mesh.n_vertices
        self.n_nodes = n
        self.fixed_nodes = np.asarray(fixed_nodes, dtype=np.int64)
        free_mask = np.ones(n * 3, dtype=bool)
        free_mask[(self.fixed_nodes[:, None] * 3
                   + np.arange(3)[None, :]).ravel()] = False
        self.free_mask = free_mask
        self.n_free = int(free_mask.sum())
        self.dof_map = np.cumsum(free_mask) - 1       # full dof -> free idx
        self.v_ref = signed_volume(self.x_ref, self.faces)

        # element stiffness scatter pattern (fixed across iterations)
        dof = (self.faces[:, :, None] * 3
               + np.arange(3)[None, None, :]).reshape(-1, 9)   # (m, 9)
        rows = np.repeat(dof, 9, axis=1).ravel()
        cols = np.tile(dof, (1, 9)).ravel()
        self._el_keep = free_mask[rows] & free_mask[cols]
        self._el_rows = self.dof_map[rows[self._el_keep]]
        self._el_cols = self.dof_map[cols[self._el_keep]]

        # volume-hessian scatter pattern: 6 ordered node pairs per face
        pairs = [(0, 1), (0, 2), (1, 2), (1, 0), (2, 0), (2, 1)]
        vr, vc = [], []
        for a, b in pairs:
            ra = (self.faces[:, a][:, None] * 3 + np.arange(3)).repeat(3, axis=1)
            cb = np.tile(self.faces[:, b][:, None] * 3 + np.arange(3), (1, 3))
            vr.append(ra.ravel())
            vc.append(cb.ravel())
        vr = np.concatenate(vr)
        vc = np.concatenate(vc)
        self._vol_keep = free_mask[vr] & free_mask[vc]
        self._vol_rows = self.dof_map[vr[self._vol_keep]]
        self._vol_cols = self.dof_map[vc[self._vol_keep]]

        self.char_radius = 3.0 * abs(self.v_ref) / float(np.sum(self.area))

    # -- elastic terms ----------------------------------------------------

    def elastic_energy(self, x: np.ndarray) -> float:
        _, c = _deformation(x, self.faces, self.g)
        _, _, _, w = _stress_2pk(c, self.mat.mu_nh)
        return float(np.sum(self.coef * w))

    def elastic_energy_forces(self, x: np.ndarray):
        f, c = _deformation(x, self.faces, self.g)
        s, _, _, w = _stress_2pk(c, self.mat.mu_nh)
        p = np.einsum("mij,mjk->mik", f, s)
        h = self.coef[:, None, None] * np.einsum("mij,mqj->miq", p, self.g)
        grad = np.zeros_like(x)
        np.add.at(grad, self.faces[:, 1], h[:, :, 0])
        np.add.at(grad, self.faces[:, 2], h[:, :, 1])
        np.add.at(grad, self.faces[:, 0], -h[:, :, 0] - h[:, :, 1])
        return float(np.sum(self.coef * w)), grad

    def elastic_hessian_data(self, x: np.ndarray) -> np.ndarray:
        """Per-element 9x9 tangent blocks, flattened to match the cached
        scatter pattern.

        Exploits the rank structure of the Neo-Hookean tangent: with
        q = d^T d, M-hat = G C^-1 G^T and u = d M-hat, the material part
        is mu/detC (2 u u^T + swap(u x u) + (d M-hat d^T) x M-hat) and the
        geometric part is I3 x (G S G^T), all in edge-matrix coordinates.
        """
        mu = self.mat.mu_nh
        g = self.g
        d = np.stack([x[self.faces[:, 1]] - x[self.faces[:, 0]],
                      x[self.faces[:, 2]] - x[self.faces[:, 0]]], axis=2)
        f = np.einsum("miq,mqj->mij", d, g)
        c = np.einsum("mij,mik->mjk", f, f)
        s, det, inv, _ = _stress_2pk(c, mu)
        shat = np.einsum("mae,mef,mbf->mab", g, s, g)
        mhat = np.einsum("mae,mef,mbf->mab", g, inv, g)
        u = np.einsum("mig,mga->mia", d, mhat)
        w = np.einsum("mia,mja->mij", u, d)
        m = len(d)
        uf = u.reshape(m, 6)
        hd = 2.0 * uf[:, :, None] * uf[:, None, :]
        hd += (np.einsum("mib,mja->miajb", u, u)
               + np.einsum("mij,mba->miajb", w, mhat)).reshape(m, 6, 6)
        hd *= (mu / det)[:, None, None]
        hd += np.einsum("ij,mab->miajb", np.eye(3), shat).reshape(m, 6, 6)
        h9 = _DOF_MAP @ hd @ _DOF_MAP.T
        return (self.coef[:, None, None] * h9).reshape(m, 81)

    # -- volume terms ------------------------------------------------------

    def volume(self, x: np.ndarray) -> float:
        return signed_volume(x, self.faces)

    def volume_grad(self, x: np.ndarray) -> np.ndarray:
        return _volume_gradient(x, self.faces)

    def volume_hessian_data(self, x: np.ndarray) -> np.ndarray:
        a, b, c = x[self.faces[:, 0]], x[self.faces[:, 1]], x[self.faces[:, 2]]
        blocks = [-_skew(c), _skew(b), -_skew(a),
                  _skew(c), -_skew(b), _skew(a)]
        return np.concatenate([bl.reshape(len(self.faces), 9)
                               for bl in blocks]).ravel() / 6.0

    # -- assembled tangent -------------------------------------------------

    def assemble(self, x: np.ndarray, p_eff: float, contact_blocks,
                 reg: float) -> csc_matrix:
        el_data = self.elastic_hessian_data(x).ravel()[self._el_keep]
        vol_data = -p_eff * self.volume_hessian_data(x)[self._vol_keep]
        rows = [self._el_rows, self._vol_rows]
        cols = [self._el_cols, self._vol_cols]
        data = [el_data, vol_data]

        hnodes, hblocks = contact_blocks
        if len(hnodes):
            dof = hnodes[:, None] * 3 + np.arange(3)
            r = np.repeat(dof, 3, axis=1).ravel()
            cgrid = np.tile(dof, (1, 3)).ravel()
            keep = self.free_mask[r] & self.free_mask[cgrid]
            rows.append(self.dof_map[r[keep]])
            cols.append(self.dof_map[cgrid[keep]])
            data.append(hblocks.ravel()[keep])

        if reg > 0:
            diag = np.arange(self.n_free)
            rows.append(diag)
            cols.append(diag)
            data.append(np.full(self.n_free, reg))

        return csc_matrix((np.concatenate(data),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_free, self.n_free))


# ---------------------------------------------------------------------------
# Newton / augmented-Lagrangian solve
# ---------------------------------------------------------------------------

def _augmented_energy(model, x, p, kappa, load, stick):
    e_el = model.elastic_energy(x)
    e_c = 0.0
    if load.shape is not None and model.contact_params is not None:
        _, e_c, _, _, _ = _contact_eval(
            x, load.shape, model.contact_params, stick,
            0.5 * model.mat.t_sk, need_hessian=False)
    v = model.volume(x)
    dv = v - load.target_volume
    return e_el + e_c - p * dv + 0.5 * kappa * dv * dv / model.v_ref


def _gradient(model, x, p_eff, load, stick, need_hessian):
    _, g_el = model.elastic_energy_forces(x)
    if load.shape is not None and model.contact_params is not None:
        f_c, _, hblocks, report, _ = _contact_eval(
            x, load.shape, model.contact_params, stick,
            0.5 * model.mat.t_sk, need_hessian)
    else:
        f_c = 0.0
        hblocks = (np.empty(0, dtype=np.int64), np.zeros((0, 3, 3)))
        report = ContactReport(np.empty(0, dtype=np.int64), np.empty(0),
                               np.empty(0, dtype=bool))
    grad = g_el - f_c - p_eff * model.volume_grad(x)
    return grad, hblocks, report


def newton_solve(model: MembraneModel, state: SystemState, load: LoadStep,
                 cfg: SolverConfig) -> SystemState:
    """Solve one load step: equilibrium at the target enclosed volume with
    optional indenter contact. Friction anchors in state.stick are held
    fixed during the iteration and committed by the caller.

    Returns a converged state, or a state flagged converged=False carrying
    the last iterate (never raises on divergence, never returns NaN).
    """
    x = state.x.copy()
    p = state.pressure
    stick = state.stick if state.stick is not None \
        else StickState.empty(model.n_nodes)
    kappa = cfg.vol_penalty_scale * model.mat.mu_nh * model.mat.t_sk \
        / model.char_radius
    total_iters = 0
    vt = load.target_volume
    prev_vol_err = np.inf

    for outer in range(cfg.max_outer):
        ok, x, gn, iters = _inner_newton(model, x, p, kappa, load, stick, cfg)
        total_iters += iters
        if not ok:
            return _diverged(model, state, x, p, load, stick, total_iters)
        v = model.volume(x)
        vol_err = abs(v - vt) / vt
        p = p - kappa * (v - vt) / model.v_ref
        if vol_err <= cfg.vol_tol:
            grad, _, report = _gradient(model, x, p, load, stick, False)
            rn = float(np.linalg.norm(grad.ravel()[model.free_mask]))
            net = _net_contact(model, x, load, stick)
            return SystemState(x, p, True, rn, v, net, report, stick.copy(),
                               total_iters)
        if vol_err > 0.3 * prev_vol_err:
            kappa *= 5.0            # slow outer convergence: stiffen
        prev_vol_err = vol_err
    return _diverged(model, state, x, p, load, stick, total_iters)


def _net_contact(model, x, load, stick):
    if load.shape is None or model.contact_params is None:
        return np.zeros(3)
    f_c, _, _, _, _ = _contact_eval(x, load.shape, model.contact_params,
                                    stick, 0.5 * model.mat.t_sk, False)
    return f_c.sum(axis=0)


def _diverged(model, state, x, p, load, stick, iters):
    bad = not np.all(np.isfinite(x))
    grad = None
    if not bad:
        grad, _, _ = _gradient(model, x, p, load, stick, False)
        bad = not np.all(np.isfinite(grad))
    out = state.copy()
    if not bad:
        out.x = x
        out.pressure = p
        out.residual_norm = float(
            np.linalg.norm(grad.ravel()[model.free_mask]))
        out.volume = model.volume(x)
    out.converged = False
    out.n_iterations = iters
    return out


def _inner_newton(model, x, p, kappa, load, stick, cfg):
    """Drive the augmented-energy gradient to zero at fixed multiplier p.

    Without slipping contact the problem is a minimization and steps are
    globalized by an Armijo line search on the augmented energy. Slipping
    Coulomb friction makes the force field non-conservative, so iterations
    with active slip are instead accepted on residual-norm decrease (with
    the exact asymmetric tangent). Returns (ok, x, grad_norm, iterations).
    """
    reg = 0.0
    merit = _augmented_energy(model, x, p, kappa, load, stick)

    def residual_norm(x_at):
        v_at = model.volume(x_at)
        pe = p - kappa * (v_at - load.target_volume) / model.v_ref
        grad_at, _, _ = _gradient(model, x_at, pe, load, stick, False)
        return float(np.linalg.norm(grad_at.ravel()[model.free_mask]))

    for it in range(cfg.max_newton):
        v = model.volume(x)
        p_eff = p - kappa * (v - load.target_volume) / model.v_ref
        grad, hblocks, report = _gradient(model, x, p_eff, load, stick, True)
        g = grad.ravel()[model.free_mask]
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            return False, x, gn, it
        if gn <= cfg.tol:
            return True, x, gn, it
        slip_mode = bool(report.slipping.any()) if len(report.slipping) \
            else False
        gv = model.volume_grad(x).ravel()[model.free_mask]
        coef = kappa / model.v_ref

        step = None
        for _ in range(12):
            try:
                h = model.assemble(x, p_eff, hblocks,
                                   (reg + cfg.reg_floor)
                                   * model.mat.mu_nh * model.mat.t_sk)
                lu = splu(h)
                sol = lu.solve(np.column_stack([-g, gv]))
                y1, y2 = sol[:, 0], sol[:, 1]
                denom = 1.0 + coef * float(gv @ y2)
                step = y1 - (coef * float(gv @ y1) / denom) * y2
            except RuntimeError:
                step = None
            if step is not None and np.all(np.isfinite(step)) \
                    and (slip_mode or float(g @ step) < 0):
                break
            reg = max(4.0 * reg, 1e-8)
            step = None
        if step is None:
            return False, x, gn, it + 1

        def advance(alpha):
            upd = np.zeros(model.n_nodes * 3)
            upd[model.free_mask] = alpha * step
            return x + upd.reshape(-1, 3)

        accepted = False
        if slip_mode:
            alpha = 1.0
            for _ in range(cfg.max_backtracks):
                x_try = advance(alpha)
                gn_try = residual_norm(x_try)
                if np.isfinite(gn_try) and \
                        gn_try <= (1.0 - cfg.armijo_c * alpha) * gn:
                    x = x_try
                    merit = _augmented_energy(model, x, p, kappa, load,
                                              stick)
                    accepted = True
                    break
                alpha *= cfg.backtrack_factor
        else:
            slope = float(g @ step)
            roundoff = 64.0 * np.finfo(float).eps * max(1.0, abs(merit))
            if -slope <= roundoff:
                # merit changes are below round-off: trust the Newton step
                x = advance(1.0)
                merit = _augmented_energy(model, x, p, kappa, load, stick)
                continue
            alpha = 1.0
            for _ in range(cfg.max_backtracks):
                x_try = advance(alpha)
                m_try = _augmented_energy(model, x_try, p, kappa, load,
                                          stick)
                if np.isfinite(m_try) and \
                        m_try <= merit + cfg.armijo_c * alpha * slope:
                    x, merit = x_try, m_try
                    accepted = True
                    break
                alpha *= cfg.backtrack_factor
            if not accepted:
                # fall back to plain residual decrease at the full step
                x_try = advance(1.0)
                gn_try = residual_norm(x_try)
                if np.isfinite(gn_try) and gn_try < 0.9 * gn:
                    x = x_try
                    merit = _augmented_energy(model, x, p, kappa, load,
                                              stick)
                    accepted = True
        if not accepted:
            reg = max(16.0 * reg, 1e-6)
            if reg > 1e6:
                return False, x, gn, it + 1
        else:
            reg *= 0.25
    # max iterations reached: report whether we happen to satisfy the tol
    gn = residual_norm(x)
    return gn <= cfg.tol, x, gn, cfg.max_newton


# ---------------------------------------------------------------------------
# Load programs
# ---------------------------------------------------------------------------

def run_pressurization(model: MembraneModel, fluid: FluidConstraint,
                       cfg: SolverConfig):
    """Ramp the enclosed volume from its reference value to the thermal
    target in equal substeps. Returns (reference state, per-substep
    pressure multipliers)."""
    v0 = model.v_ref
    dv = fluid.volume_delta
    state = SystemState(model.x_ref.copy(), fluid.pressure,
                        volume=v0, stick=StickState.empty(model.n_nodes))
    pressures = []
    for k in range(1, cfg.pressurization_steps + 1):
        target = v0 + dv * k / cfg.pressurization_steps
        state = newton_solve(model, state, LoadStep(target), cfg)
        if not state.converged:
            raise FemError(f"pressurization diverged at substep {k}")
        pressures.append(state.pressure)
    return state, pressures


def _solve_pose_step(model, state, pose_prev, pose, cfg, max_bisections=3):
    """Solve one indenter increment, bisecting the pose motion and
    retrying on divergence. Friction anchors are committed after every
    converged sub-solve."""
    offset = 0.5 * model.mat.t_sk
    target = state.volume
    for level in range(max_bisections + 1):
        nsub = cfg.n_substeps * 2 ** level
        cur = state
        ok = True
        for j in range(1, nsub + 1):
            if pose_prev is None or nsub == 1:
                sub = pose
            else:
                frac = j / nsub
                trans = (1.0 - frac) * pose_prev.translation \
                    + frac * pose.translation
                sub = pose.at_pose(pose.rotation, trans)
            nxt = newton_solve(model, cur, LoadStep(target, sub), cfg)
            if not nxt.converged:
                ok = False
                break
            _, _, _, report, new_stick = _contact_eval(
                nxt.x, sub, model.contact_params, cur.stick, offset, False)
            nxt.stick = new_stick
            nxt.contacts = report
            cur = nxt
        if ok:
            return cur
        if pose_prev is None:
            break
    failed = state.copy()
    failed.converged = False
    return failed


def run_indentation(model: MembraneModel, ref_state: SystemState,
                    poses: list, cfg: SolverConfig,
                    core_gap_fn=None, max_bisections: int = 3):
    """Advance the posed indenter through its increments, solving each to
    equilibrium at constant target volume.

    poses: sequence of RigidShape with per-increment poses (entry 0 is the
    start pose). A diverging increment is retried with bisected substeps;
    persistent divergence truncates the sequence, so the returned list
    holds converged states followed by at most one flagged state.
    core_gap_fn(x) may report the skin-to-core clearance; non-positive
    clearance is treated as divergence (skin-core contact).
    """
    if model.contact_params is None:
        raise FemError("model has no contact parameters")
    offset = 0.5 * model.mat.t_sk
    states = []
    state = ref_state.copy()
    if state.stick is None:
        state.stick = StickState.empty(model.n_nodes)
    state.volume = ref_state.volume
    contact_seen = False
    prev_pose = None
    for pose in poses:
        gaps, _ = signed_distance(pose, state.x)
        min_gap = float(np.min(gaps) - offset)
        if not contact_seen and min_gap > 0:
            free = state.copy()
            free.net_contact_force = np.zeros(3)
            states.append(free)
            prev_pose = pose
            continue
        contact_seen = True
        nxt = _solve_pose_step(model, state, prev_pose, pose, cfg,
                               max_bisections)
        states.append(nxt)
        if not nxt.converged:
            break
        state = nxt
        prev_pose = pose
        if core_gap_fn is not None and core_gap_fn(nxt.x) <= 0.0:
            flagged = nxt.copy()
            flagged.converged = False
            states[-1] = flagged
            break
    return states


# ---------------------------------------------------------------------------
# Result I/O
# ---------------------------------------------------------------------------

def save_increment_table(path, rows, meta: dict | None = None) -> None:
    """CSV with columns increment, displacement, fx, fy, fz, pressure,
    converged."""
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["increment", "displacement", "fx", "fy", "fz",
                    "pressure", "converged"])
        for r in rows:
            w.writerow([r["increment"], f"{r['displacement']:.17g}",
                        *(f"{v:.17g}" for v in r["force"]),
                        f"{r['pressure']:.17g}", int(r["converged"])])


def load_increment_table(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.DictReader(lines)
    for rec in rd:
        rows.append({"increment": int(rec["increment"]),
                     "displacement": float(rec["displacement"]),
                     "force": np.array([float(rec["fx"]), float(rec["fy"]),
                                        float(rec["fz"])]),
                     "pressure": float(rec["pressure"]),
                     "converged": bool(int(rec["converged"]))})
    return rows


def save_displacement_record(path, reference: np.ndarray,
                             displacements: np.ndarray) -> None:
    np.savez_compressed(path, reference=reference,
                        displacements=displacements)


def load_displacement_record(path):
    with np.load(path) as z:
        return z["reference"], z["displacements"]
