"""Deterministic planar rigid-body simulation of articulated characters.

A character is a tree of rigid links: a free-floating trunk (x, y, angle)
plus actuated revolute joints, integrated in reduced coordinates with
semi-implicit Euler at a fixed rate.  Translational dynamics are
integrated at the whole-body center of mass, so in flight the horizontal
momentum is conserved to machine precision regardless of internal
torques.  Ground and inter-character contact use a spring-damper normal
penalty with Coulomb-capped tangential friction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _fastsim

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + math.pi, TWO_PI)
    w = np.where(w <= 0.0, w + TWO_PI, w) - math.pi
    if np.ndim(a) == 0:
        return float(w)
    return w


def unit(phi):
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1)


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Link:
    """One rigid segment of the character tree.

    ``attach_offset`` is measured from the chosen end of the parent along
    the parent axis, which lets limbs attach at interior points (the arms
    hang from the neck, an interior point of the trunk).  ``rest_rel`` is
    the link direction relative to its parent with the joint at zero.
    """

    name: str
    length: float
    mass: float
    parent: int  # -1 for the root link
    attach_end: str = "distal"  # "proximal" | "distal"
    attach_offset: float = 0.0
    rest_rel: float = 0.0
    com_frac: float = 0.5
    inertia: float | None = None  # defaults to a uniform rod, m*L^2/12

    def moment(self) -> float:
        return self.inertia if self.inertia is not None else self.mass * self.length**2 / 12.0


@dataclass(frozen=True)
class Site:
    """Named point on a link used for contact and error metrics."""

    name: str
    link: int
    dist: float  # distance from the link's proximal end


@dataclass(frozen=True)
class CharacterSpec:
    links: tuple[Link, ...]
    sites: tuple[Site, ...]
    kp: tuple[float, ...]
    kd: tuple[float, ...]
    contact_radius: float = 0.05
    tau_max: float = 200.0
    # interior points on the trunk used for scoring regions and fall checks
    torso_center_dist: float = 0.25
    head_center_dist: float = 0.61

    def __post_init__(self):
        if self.links[0].parent != -1:
            raise ValueError("links[0] must be the root")
        for i, l in enumerate(self.links[1:], start=1):
            if not 0 <= l.parent < i:
                raise ValueError(f"link {l.name}: parent must precede it (tree, no loops)")
            if l.length <= 0 or l.mass <= 0:
                raise ValueError(f"link {l.name}: length and mass must be positive")
        if len(self.kp) != self.n_joints or len(self.kd) != self.n_joints:
            raise ValueError("pd gain vectors must match the joint count")

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.links) - 1

    @property
    def ndof(self) -> int:
        """Angular dofs: root angle plus one per joint."""
        return self.n_links

    @cached_property
    def masses(self) -> np.ndarray:
        return np.array([l.mass for l in self.links])

    @cached_property
    def inertias(self) -> np.ndarray:
        return np.array([l.moment() for l in self.links])

    @cached_property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @cached_property
    def lengths(self) -> np.ndarray:
        return np.array([l.length for l in self.links])

    @cached_property
    def path(self) -> np.ndarray:
        """(n_links, ndof) 0/1 matrix: world link angle = rest_abs + path @ theta."""
        a = np.zeros((self.n_links, self.ndof))
        a[0, 0] = 1.0
        for i in range(1, self.n_links):
            a[i] = a[self.links[i].parent]
            a[i, i] = 1.0  # joint i-1 owns dof column i
        return a

    @cached_property
    def rest_abs(self) -> np.ndarray:
        r = np.zeros(self.n_links)
        r[0] = self.links[0].rest_rel
        for i in range(1, self.n_links):
            r[i] = r[self.links[i].parent] + self.links[i].rest_rel
        return r

    @cached_property
    def attach_dist(self) -> np.ndarray:
        """Attachment point distance from the parent's proximal end."""
        d = np.zeros(self.n_links)
        for i in range(1, self.n_links):
            l = self.links[i]
            base = 0.0 if l.attach_end == "proximal" else self.links[l.parent].length
            d[i] = base + l.attach_offset
        return d

    @cached_property
    def prox_coeff(self) -> np.ndarray:
        """(n_links, n_links) C with prox_i - root_pos = C[i] @ unit(phi)."""
        c = np.zeros((self.n_links, self.n_links))
        for i in range(1, self.n_links):
            p = self.links[i].parent
            c[i] = c[p]
            c[i, p] += self.attach_dist[i]
        return c

    @cached_property
    def com_coeff(self) -> np.ndarray:
        c = self.prox_coeff.copy()
        for i, l in enumerate(self.links):
            c[i, i] += l.com_frac * l.length
        return c

    @cached_property
    def site_coeff(self) -> np.ndarray:
        c = np.zeros((len(self.sites), self.n_links))
        for s, site in enumerate(self.sites):
            c[s] = self.prox_coeff[site.link]
            c[s, site.link] += site.dist
        return c

    @cached_property
    def site_index(self) -> dict[str, int]:
        return {s.name: i for i, s in enumerate(self.sites)}

    @cached_property
    def inertia_path(self) -> np.ndarray:
        """Constant Sum_i I_i path_i^T path_i part of the mass matrix."""
        return np.einsum("i,ia,ib->ab", self.inertias, self.path, self.path)

    @cached_property
    def site_radii(self) -> np.ndarray:
        return np.full(len(self.sites), self.contact_radius)

    @cached_property
    def link_sites(self) -> list[list[int]]:
        out = [[] for _ in self.links]
        for i, s in enumerate(self.sites):
            out[s.link].append(i)
        return out


@dataclass
class SimState:
    """Generalized coordinates and velocities of one character.

    ``anchor_x``/``anchor_on`` carry the tangential friction anchors of the
    ground contacts: viscous-only friction lets planted feet creep under
    static shear, so sticking contacts pull toward the anchor point until
    the Coulomb cap slides it.
    """

    root_pos: np.ndarray  # (2,)
    root_angle: float
    joint_angles: np.ndarray  # (n_joints,)
    root_vel: np.ndarray  # (2,)
    root_ang_vel: float
    joint_vels: np.ndarray  # (n_joints,)
    time: float = 0.0
    valid: bool = True
    anchor_x: np.ndarray | None = None  # (n_sites,)
    anchor_on: np.ndarray | None = None  # (n_sites,) bool

    def theta(self) -> np.ndarray:
        return np.concatenate([[self.root_angle], self.joint_angles])

    def theta_dot(self) -> np.ndarray:
        return np.concatenate([[self.root_ang_vel], self.joint_vels])

    def wrapped_joints(self) -> np.ndarray:
        return wrap_angle(self.joint_angles)

    def copy(self) -> "SimState":
        return SimState(
            self.root_pos.copy(),
            self.root_angle,
            self.joint_angles.copy(),
            self.root_vel.copy(),
            self.root_ang_vel,
            self.joint_vels.copy(),
            self.time,
            self.valid,
            None if self.anchor_x is None else self.anchor_x.copy(),
            None if self.anchor_on is None else self.anchor_on.copy(),
        )


@dataclass(frozen=True)
class PhysicsConfig:
    gravity: float = 9.81
    hz: float = 60.0
    # penalty contact is stiff relative to the light limbs, so each control
    # step is integrated in `substeps` sub-intervals with torques held
    substeps: int = 4
    contact_kn: float = 1e4
    contact_dn: float = 100.0
    contact_kt: float = 2e3  # tangential anchor stiffness (ground stiction)
    friction_mu: float = 0.8
    fall_height: float = 0.41
    fall_frac: float = 0.4

    @property
    def dt(self) -> float:
        return 1.0 / self.hz


class KinFrame:
    """Per-state kinematic cache: link angles, site positions, Jacobians."""

    def __init__(self, state: SimState, spec: CharacterSpec):
        self.state = state
        self.spec = spec
        theta = state.theta()
        self.theta_dot = state.theta_dot()
        self.phi = spec.rest_abs + spec.path @ theta
        self.u = unit(self.phi)  # (N,2)
        self.uperp = np.stack([-self.u[:, 1], self.u[:, 0]], axis=1)
        self.phidot = spec.path @ self.theta_dot
        # rel points are root-relative; jac columns are angular dofs
        self.com_rel = spec.com_coeff @ self.u
        self.jac_com = np.einsum("in,nx,na->ixa", spec.com_coeff, self.uperp, spec.path)
        m = spec.masses
        self.r = m @ self.com_rel / spec.total_mass  # body COM relative to root
        self.jac_r = np.einsum("i,ixa->xa", m, self.jac_com) / spec.total_mass
        self.site_rel = spec.site_coeff @ self.u

    @cached_property
    def jac_site(self) -> np.ndarray:
        return np.einsum(
            "sn,nx,na->sxa", self.spec.site_coeff, self.uperp, self.spec.path
        )

    @property
    def com(self) -> np.ndarray:
        return self.state.root_pos + self.r

    @property
    def com_vel(self) -> np.ndarray:
        return self.state.root_vel + self.jac_r @ self.theta_dot

    @property
    def site_pos(self) -> np.ndarray:
        return self.state.root_pos + self.site_rel

    @cached_property
    def site_vel(self) -> np.ndarray:
        # J @ theta_dot collapses to sum_n coeff * u_perp * phidot
        return self.state.root_vel + (
            self.spec.site_coeff * self.phidot[None, :]
        ) @ self.uperp

    @property
    def prox(self) -> np.ndarray:
        return self.state.root_pos + self.spec.prox_coeff @ self.u

    @property
    def dist(self) -> np.ndarray:
        return self.prox + self.spec.lengths[:, None] * self.u

    def point_on_link(self, link: int, dist: float) -> np.ndarray:
        return self.prox[link] + dist * self.u[link]

    def point_jacobian(self, link: int, dist: float) -> np.ndarray:
        coeff = self.spec.prox_coeff[link].copy()
        coeff[link] += dist
        return np.einsum("n,nx,na->xa", coeff, self.uperp, self.spec.path)

    def point_velocity(self, link: int, dist: float) -> np.ndarray:
        return self.state.root_vel + self.point_jacobian(link, dist) @ self.theta_dot

    def mass_matrix(self) -> np.ndarray:
        spec = self.spec
        jr = self.jac_com - self.jac_r[None, :, :]
        m_ang = np.einsum("i,ixa,ixb->ab", spec.masses, jr, jr)
        m_ang += np.einsum("i,ia,ib->ab", spec.inertias, spec.path, spec.path)
        return m_ang

    def bias(self) -> np.ndarray:
        spec = self.spec
        jr = self.jac_com - self.jac_r[None, :, :]
        # velocity-product (centripetal) accelerations of the COM-relative points
        acc = -np.einsum("in,n,nx->ix", spec.com_coeff, self.phidot**2, self.u)
        acc_r = spec.masses @ acc / spec.total_mass
        return np.einsum("i,ixa,ix->a", spec.masses, jr, acc - acc_r[None, :])


@dataclass
class ContactReport:
    """Per-site contact summary for one character after a step."""

    site_force: np.ndarray  # total force magnitude per site
    site_ground: np.ndarray  # ground contribution per site
    site_opponent: np.ndarray  # opponent contribution per site
    opponent_link: np.ndarray  # dominant opponent link per site, -1 if none
    ground_contact: bool

    @classmethod
    def empty(cls, n_sites: int) -> "ContactReport":
        return cls(
            np.zeros(n_sites),
            np.zeros(n_sites),
            np.zeros(n_sites),
            np.full(n_sites, -1, dtype=int),
            False,
        )

    def counterpart(self, site: int) -> str:
        if self.site_ground[site] >= self.site_opponent[site] and self.site_ground[site] > 0:
            return "ground"
        if self.site_opponent[site] > 0:
            return f"opponent_link_{int(self.opponent_link[site])}"
        return "none"


def pd_torque(
    state: SimState, targets: np.ndarray, spec: CharacterSpec
) -> np.ndarray:
    """PD actuation: kp * wrap(target - angle) - kd * vel, clamped to +-tau_max."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (spec.n_joints,):
        raise ValueError(f"expected {spec.n_joints} targets, got {targets.shape}")
    err = wrap_angle(targets - state.joint_angles)
    tau = np.array(spec.kp) * err - np.array(spec.kd) * state.joint_vels
    return np.clip(tau, -spec.tau_max, spec.tau_max)


def _ground_contacts(
    frame: KinFrame, cfg: PhysicsConfig, anchor_x: np.ndarray, anchor_on: np.ndarray
):
    """Per-site ground forces with sticking friction anchors.

    Returns (forces (S,2), magnitudes (S,)); the anchor arrays are updated
    in place (new contacts latch an anchor, the Coulomb cap slides it).
    """
    spec = frame.spec
    pos = frame.site_pos
    pen = spec.contact_radius - pos[:, 1]
    forces = np.zeros_like(pos)
    touching = pen > 0.0
    idx = np.nonzero(touching)[0]
    if idx.size:
        vel = frame.site_vel
        fresh = idx[~anchor_on[idx]]
        anchor_x[fresh] = pos[fresh, 0]
        anchor_on[idx] = True
        normal = np.maximum(cfg.contact_kn * pen[idx] - cfg.contact_dn * vel[idx, 1], 0.0)
        cap = cfg.friction_mu * normal
        spring = -cfg.contact_kt * (pos[idx, 0] - anchor_x[idx])
        # the anchor may store at most cap-level elastic force; beyond that
        # it slides (Coulomb slip)
        over = np.abs(spring) > cap
        if over.any():
            s = idx[over]
            spring[over] = np.sign(spring[over]) * cap[over]
            anchor_x[s] = pos[s, 0] + spring[over] / cfg.contact_kt
        tang = np.clip(spring - cfg.contact_dn * vel[idx, 0], -cap, cap)
        forces[idx, 0] = tang
        forces[idx, 1] = normal
    anchor_on[~touching] = False
    return forces, np.linalg.norm(forces, axis=1)


@dataclass
class _PairContact:
    """One site-vs-capsule contact between two characters."""

    site_a: int  # striking site on character a
    link_b: int  # struck link on character b
    along_b: float  # contact point distance along link_b
    force_a: np.ndarray  # force on a's site; b receives the opposite


def _pair_contacts(fa: KinFrame, fb: KinFrame, cfg: PhysicsConfig) -> list[_PairContact]:
    """Contacts of every site of character a against every link capsule of b."""
    ra, rb = fa.spec.contact_radius, fb.spec.contact_radius
    p = fa.site_pos  # (S,2)
    a0 = fb.prox  # (L,2)
    seg = fb.dist - a0  # (L,2)
    seg_len2 = np.maximum((seg**2).sum(axis=1), 1e-12)
    d = p[:, None, :] - a0[None, :, :]  # (S,L,2)
    t = np.clip((d * seg[None, :, :]).sum(axis=2) / seg_len2[None, :], 0.0, 1.0)
    q = a0[None, :, :] + t[..., None] * seg[None, :, :]
    delta = p[:, None, :] - q
    dist = np.linalg.norm(delta, axis=2)
    pen = (ra + rb) - dist

    out: list[_PairContact] = []
    for s, j in zip(*np.nonzero(pen > 0.0)):
        dj = dist[s, j]
        n = delta[s, j] / dj if dj > 1e-9 else np.array([0.0, 1.0])
        along = float(t[s, j] * fb.spec.lengths[j])
        v_rel = fa.site_vel[s] - fb.point_velocity(j, along)
        vn = float(v_rel @ n)
        normal = max(cfg.contact_kn * pen[s, j] - cfg.contact_dn * vn, 0.0)
        vt = v_rel - vn * n
        speed = np.linalg.norm(vt)
        force = normal * n
        if speed > 1e-9:
            force -= min(cfg.contact_dn * speed, cfg.friction_mu * normal) * (vt / speed)
        out.append(_PairContact(int(s), int(j), along, force))
    return out


def _nearest_site(spec: CharacterSpec, link: int, dist: float) -> int:
    sites = spec.link_sites[link]
    if not sites:
        return -1
    return min(sites, key=lambda s: abs(spec.sites[s].dist - dist))


def step_world(
    states: list[SimState],
    specs: list[CharacterSpec],
    torques: list[np.ndarray] | None,
    dt: float,
    cfg: PhysicsConfig,
    pd_targets: list[np.ndarray] | None = None,
) -> tuple[list[SimState], list[ContactReport]]:
    """Advance one or two coupled characters by one control step.

    The step is split into cfg.substeps semi-implicit Euler sub-intervals.
    Raw ``torques`` are held constant over the step; with ``pd_targets``
    the PD actuation law is instead re-evaluated at every sub-interval
    (PD runs at the simulation rate), which keeps stiff contact stable.
    Reported contact forces are per-site maxima over the sub-intervals,
    since peak forces are what the hit rules care about.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = len(states)
    if n > 2:
        raise ValueError("at most two characters per world")
    if (torques is None) == (pd_targets is None):
        raise ValueError("pass exactly one of torques or pd_targets")
    if torques is not None:
        for i in range(n):
            tau = np.asarray(torques[i], dtype=np.float64)
            if tau.shape != (specs[i].n_joints,):
                raise ValueError(f"expected {specs[i].n_joints} torques, got {tau.shape}")
    if n == 1 and _fastsim.HAVE_NUMBA:
        return _step_single_fast(states[0], specs[0], torques, dt, cfg, pd_targets)
    sub_dt = dt / cfg.substeps
    merged: list[ContactReport] | None = None
    for _ in range(cfg.substeps):
        if pd_targets is not None:
            torques_now = [
                pd_torque(states[i], pd_targets[i], specs[i]) for i in range(n)
            ]
        else:
            torques_now = torques
        states, reps = _substep(states, specs, torques_now, sub_dt, cfg)
        if merged is None:
            merged = reps
        else:
            for m, r in zip(merged, reps):
                m.site_ground = np.maximum(m.site_ground, r.site_ground)
                m.site_opponent = np.maximum(m.site_opponent, r.site_opponent)
                pick = r.site_opponent >= m.site_opponent
                m.opponent_link = np.where(pick, r.opponent_link, m.opponent_link)
                m.ground_contact = m.ground_contact or r.ground_contact
    for m in merged:
        m.site_force = m.site_ground + m.site_opponent
    return states, merged


def _substep(
    states: list[SimState],
    specs: list[CharacterSpec],
    torques: list[np.ndarray],
    dt: float,
    cfg: PhysicsConfig,
) -> tuple[list[SimState], list[ContactReport]]:
    n = len(states)
    frames = [KinFrame(states[i], specs[i]) for i in range(n)]
    site_forces = []
    reports = []
    anchors = []
    for i in range(n):
        ns = len(specs[i].sites)
        ax = states[i].anchor_x.copy() if states[i].anchor_x is not None else np.zeros(ns)
        aon = states[i].anchor_on.copy() if states[i].anchor_on is not None else np.zeros(ns, bool)
        anchors.append((ax, aon))
        gf, gmag = _ground_contacts(frames[i], cfg, ax, aon)
        rep = ContactReport.empty(ns)
        rep.site_ground = gmag
        rep.ground_contact = bool((gmag > 0.0).any())
        reports.append(rep)
        site_forces.append(gf)
    point_forces: list[list[tuple[int, float, np.ndarray]]] = [[] for _ in range(n)]

    if n == 2:
        # per-site force magnitude by opponent link, used to pick the
        # dominant counterpart for each site's report entry
        opp_link_mags = [np.zeros((len(specs[i].sites), specs[1 - i].n_links)) for i in range(2)]
        for a in range(2):
            b = 1 - a
            for c in _pair_contacts(frames[a], frames[b], cfg):
                mag = float(np.linalg.norm(c.force_a))
                site_forces[a][c.site_a] += c.force_a
                point_forces[b].append((c.link_b, c.along_b, -c.force_a))
                opp_link_mags[a][c.site_a, c.link_b] += mag
                # mirror the reaction onto the nearest site of the struck
                # link, attributed to the striking site's link
                sb = _nearest_site(specs[b], c.link_b, c.along_b)
                if sb >= 0:
                    opp_link_mags[b][sb, specs[a].sites[c.site_a].link] += mag
        for i in range(2):
            reports[i].site_opponent = opp_link_mags[i].sum(axis=1)
            has = reports[i].site_opponent > 0.0
            if has.any():
                reports[i].opponent_link[has] = np.argmax(opp_link_mags[i][has], axis=1)

    new_states = []
    for i in range(n):
        frame, spec, state = frames[i], specs[i], states[i]
        if not state.valid:
            # divergence is sticky until the owner resets the state
            frozen = state.copy()
            frozen.time = state.time + dt
            new_states.append(frozen)
            continue
        tau = np.asarray(torques[i], dtype=np.float64)
        mass = spec.total_mass
        q_trans = np.array([0.0, -mass * cfg.gravity])
        q_ang = np.zeros(spec.ndof)
        q_ang[1:] += tau
        jr = frame.jac_r
        for s in range(len(spec.sites)):
            f = site_forces[i][s]
            if f[0] != 0.0 or f[1] != 0.0:
                q_trans += f
                q_ang += (frame.jac_site[s] - jr).T @ f
        for link, along, f in point_forces[i]:
            q_trans += f
            q_ang += (frame.point_jacobian(link, along) - jr).T @ f

        theta_ddot = np.linalg.solve(frame.mass_matrix(), q_ang - frame.bias())
        com_vel = frame.com_vel + dt * q_trans / mass
        theta_dot = frame.theta_dot + dt * theta_ddot
        com = frame.com + dt * com_vel
        theta = state.theta() + dt * theta_dot

        cand = SimState(
            root_pos=np.zeros(2),
            root_angle=float(theta[0]),
            joint_angles=theta[1:].copy(),
            root_vel=np.zeros(2),
            root_ang_vel=float(theta_dot[0]),
            joint_vels=theta_dot[1:].copy(),
            time=state.time + dt,
            anchor_x=anchors[i][0],
            anchor_on=anchors[i][1],
        )
        # reconstruct root pose from the integrated COM
        phi_new = spec.rest_abs + spec.path @ theta
        u_new = unit(phi_new)
        r_new = spec.masses @ (spec.com_coeff @ u_new) / mass
        cand.root_pos = com - r_new
        uperp_new = np.stack([-u_new[:, 1], u_new[:, 0]], axis=1)
        jac_com_new = np.einsum("in,nx,na->ixa", spec.com_coeff, uperp_new, spec.path)
        jr_new = np.einsum("i,ixa->xa", spec.masses, jac_com_new) / mass
        cand.root_vel = com_vel - jr_new @ theta_dot

        finite = (
            np.isfinite(cand.root_pos).all()
            and np.isfinite(cand.root_vel).all()
            and np.isfinite(theta).all()
            and np.isfinite(theta_dot).all()
            and np.abs(theta_dot).max(initial=0.0) < 1e8
        )
        if not finite:
            cand = state.copy()
            cand.valid = False
        new_states.append(cand)

        reports[i].site_force = reports[i].site_ground + reports[i].site_opponent
    return new_states, reports


def _step_single_fast(
    state: SimState,
    spec: CharacterSpec,
    torques: list[np.ndarray] | None,
    dt: float,
    cfg: PhysicsConfig,
    pd_targets: list[np.ndarray] | None,
) -> tuple[list[SimState], list[ContactReport]]:
    ns = len(spec.sites)
    report = ContactReport.empty(ns)
    if not state.valid:
        frozen = state.copy()
        frozen.time = state.time + dt
        return [frozen], [report]
    q = np.concatenate([state.root_pos, [state.root_angle], state.joint_angles])
    qd = np.concatenate([state.root_vel, [state.root_ang_vel], state.joint_vels])
    anchor_x = state.anchor_x.copy() if state.anchor_x is not None else np.zeros(ns)
    anchor_on = (
        state.anchor_on.astype(np.uint8)
        if state.anchor_on is not None
        else np.zeros(ns, dtype=np.uint8)
    )
    pd_mode = pd_targets is not None
    tg = np.asarray(pd_targets[0] if pd_mode else np.zeros(spec.n_joints), dtype=np.float64)
    if pd_mode and tg.shape != (spec.n_joints,):
        raise ValueError(f"expected {spec.n_joints} targets, got {tg.shape}")
    tq = np.asarray(torques[0] if torques is not None else np.zeros(spec.n_joints), dtype=np.float64)
    ground_max = np.zeros(ns)
    status = _fastsim.substeps_kernel(
        q, qd, anchor_x, anchor_on, tg, tq, pd_mode,
        cfg.substeps, dt / cfg.substeps,
        spec.masses, spec.inertias, spec.lengths, spec.path, spec.rest_abs,
        spec.com_coeff, spec.site_coeff, spec.inertia_path,
        np.array(spec.kp), np.array(spec.kd), spec.tau_max, spec.contact_radius,
        cfg.gravity, cfg.contact_kn, cfg.contact_dn, cfg.contact_kt, cfg.friction_mu,
        ground_max,
    )
    if status != 0:
        new = state.copy()
        new.valid = False
        new.time = state.time + dt
    else:
        new = SimState(
            root_pos=q[0:2].copy(),
            root_angle=float(q[2]),
            joint_angles=q[3:].copy(),
            root_vel=qd[0:2].copy(),
            root_ang_vel=float(qd[2]),
            joint_vels=qd[3:].copy(),
            time=state.time + dt,
            anchor_x=anchor_x,
            anchor_on=anchor_on.astype(bool),
        )
    report.site_ground = ground_max
    report.site_force = ground_max.copy()
    report.ground_contact = bool((ground_max > 0.0).any())
    return [new], [report]


def step(
    state: SimState, torques: np.ndarray, dt: float, spec: CharacterSpec, cfg: PhysicsConfig
) -> tuple[SimState, ContactReport]:
    """Single-character convenience wrapper around step_world."""
    states, reports = step_world([state], [spec], [torques], dt, cfg)
    return states[0], reports[0]


def step_pd(
    state: SimState, targets: np.ndarray, dt: float, spec: CharacterSpec, cfg: PhysicsConfig
) -> tuple[SimState, ContactReport]:
    """Advance one character with PD targets re-evaluated per sub-interval."""
    states, reports = step_world([state], [spec], None, dt, cfg, pd_targets=[targets])
    return states[0], reports[0]


def link_endpoints(state: SimState, spec: CharacterSpec) -> np.ndarray:
    """World (proximal, distal) endpoint pair per link, shape (n_links, 2, 2)."""
    frame = KinFrame(state, spec)
    return np.stack([frame.prox, frame.dist], axis=1)


def site_positions(state: SimState, spec: CharacterSpec) -> np.ndarray:
    return KinFrame(state, spec).site_pos


def site_velocities(state: SimState, spec: CharacterSpec) -> np.ndarray:
    return KinFrame(state, spec).site_vel


def sites_and_velocities(state: SimState, spec: CharacterSpec) -> tuple[np.ndarray, np.ndarray]:
    """World positions and velocities of every site, fast path when compiled."""
    if _fastsim.HAVE_NUMBA:
        ns = len(spec.sites)
        pos = np.empty((ns, 2))
        vel = np.empty((ns, 2))
        q = np.concatenate([state.root_pos, [state.root_angle], state.joint_angles])
        qd = np.concatenate([state.root_vel, [state.root_ang_vel], state.joint_vels])
        _fastsim.fk_sites_kernel(
            q, qd, spec.lengths, spec.path, spec.rest_abs, spec.site_coeff, pos, vel
        )
        return pos, vel
    frame = KinFrame(state, spec)
    return frame.site_pos, frame.site_vel


def linear_momentum(state: SimState, spec: CharacterSpec) -> np.ndarray:
    frame = KinFrame(state, spec)
    return spec.total_mass * frame.com_vel


def kinetic_energy(state: SimState, spec: CharacterSpec) -> float:
    frame = KinFrame(state, spec)
    com_vels = frame.state.root_vel[None, :] + np.einsum(
        "ixa,a->ix", frame.jac_com, frame.theta_dot
    )
    trans = 0.5 * spec.masses @ (com_vels**2).sum(axis=1)
    rotk = 0.5 * spec.inertias @ frame.phidot**2
    return float(trans + rotk)


def local_vec(state: SimState, v: np.ndarray) -> np.ndarray:
    return rot(-state.root_angle) @ np.asarray(v, dtype=np.float64)

def local_point(state: SimState, p: np.ndarray) -> np.ndarray:
    return rot(-state.root_angle) @ (np.asarray(p, dtype=np.float64) - state.root_pos)

def world_vec(state: SimState, v: np.ndarray) -> np.ndarray:
    return rot(state.root_angle) @ np.asarray(v, dtype=np.float64)

def world_point(state: SimState, p: np.ndarray) -> np.ndarray:
    return rot(state.root_angle) @ np.asarray(p, dtype=np.float64) + state.root_pos


def torso_center(state: SimState, spec: CharacterSpec) -> np.ndarray:
    frame = KinFrame(state, spec)
    return frame.point_on_link(0, spec.torso_center_dist)


def head_center(state: SimState, spec: CharacterSpec) -> np.ndarray:
    frame = KinFrame(state, spec)
    return frame.point_on_link(0, spec.head_center_dist)


def detect_fall(state: SimState, spec: CharacterSpec, cfg: PhysicsConfig) -> bool:
    """Fallen when the torso center drops below the threshold or a trunk
    endpoint (pelvis or head top) is in ground contact."""
    if not state.valid:
        return True
    if torso_center(state, spec)[1] < cfg.fall_height:
        return True
    pos = site_positions(state, spec)
    pelvis = spec.site_index["pelvis"]
    head = spec.site_index["head_top"]
    r = spec.contact_radius
    return bool(pos[pelvis, 1] < r or pos[head, 1] < r)


# --- default character -------------------------------------------------

JOINT_NAMES = (
    "shoulder_l", "elbow_l", "shoulder_r", "elbow_r",
    "hip_l", "knee_l", "hip_r", "knee_r",
)


def default_character() -> CharacterSpec:
    """Nine-link planar fighter: trunk (torso+head composite), two
    two-segment arms hanging from the neck, two two-segment legs."""
    # trunk = torso rod (0.50 m, 4 kg) + head rod (0.22 m, 1 kg) welded;
    # composite COM sits 0.322 m above the pelvis, inertia 0.19105 kg m^2
    trunk = Link("trunk", 0.72, 5.0, -1, rest_rel=math.pi / 2,
                 com_frac=0.322 / 0.72, inertia=0.191046)
    arm_u = dict(length=0.28, mass=0.5, rest_rel=math.pi,
                 attach_end="proximal", attach_offset=0.50)
    arm_l = dict(length=0.26, mass=0.4, rest_rel=0.0, attach_end="distal")
    leg_u = dict(length=0.40, mass=1.0, rest_rel=math.pi, attach_end="proximal")
    leg_l = dict(length=0.40, mass=0.8, rest_rel=0.0, attach_end="distal")
    links = (
        trunk,
        Link("upper_arm_l", parent=0, **arm_u),
        Link("lower_arm_l", parent=1, **arm_l),
        Link("upper_arm_r", parent=0, **arm_u),
        Link("lower_arm_r", parent=3, **arm_l),
        Link("upper_leg_l", parent=0, **leg_u),
        Link("lower_leg_l", parent=5, **leg_l),
        Link("upper_leg_r", parent=0, **leg_u),
        Link("lower_leg_r", parent=7, **leg_l),
    )
    sites = (
        Site("pelvis", 0, 0.0),
        Site("head_top", 0, 0.72),
        Site("elbow_l", 1, 0.28),
        Site("hand_l", 2, 0.26),
        Site("elbow_r", 3, 0.28),
        Site("hand_r", 4, 0.26),
        Site("knee_l", 5, 0.40),
        Site("foot_l", 6, 0.40),
        Site("knee_r", 7, 0.40),
        Site("foot_r", 8, 0.40),
    )
    # gains assume PD evaluated at the substep rate (step_pd); the damping
    # ratios land around 0.35-0.65 for the light limbs
    kp = (150.0, 40.0, 150.0, 40.0, 300.0, 150.0, 300.0, 150.0)
    kd = (1.5, 0.5, 1.5, 0.5, 4.0, 2.0, 4.0, 2.0)
    return CharacterSpec(links=links, sites=sites, kp=kp, kd=kd)


def character_to_json(spec: CharacterSpec, path: str | Path) -> None:
    import json

    doc = {
        "links": [
            {
                "name": l.name, "length": l.length, "mass": l.mass, "parent": l.parent,
                "attach_end": l.attach_end, "attach_offset": l.attach_offset,
                "rest_rel": l.rest_rel, "com_frac": l.com_frac, "inertia": l.inertia,
            }
            for l in spec.links
        ],
        "sites": [{"name": s.name, "link": s.link, "dist": s.dist} for s in spec.sites],
        "kp": list(spec.kp),
        "kd": list(spec.kd),
        "contact_radius": spec.contact_radius,
        "tau_max": spec.tau_max,
        "torso_center_dist": spec.torso_center_dist,
        "head_center_dist": spec.head_center_dist,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def character_from_json(path: str | Path) -> CharacterSpec:
    import json

    doc = json.loads(Path(path).read_text())
    links = tuple(Link(**l) for l in doc["links"])
    sites = tuple(Site(**s) for s in doc["sites"])
    return CharacterSpec(
        links=links,
        sites=sites,
        kp=tuple(doc["kp"]),
        kd=tuple(doc["kd"]),
        contact_radius=doc.get("contact_radius", 0.05),
        tau_max=doc.get("tau_max", 200.0),
        torso_center_dist=doc.get("torso_center_dist", 0.25),
        head_center_dist=doc.get("head_center_dist", 0.61),
    )


def leg_ik(
    hip: np.ndarray, foot: np.ndarray, l1: float, l2: float, root_angle: float
) -> tuple[float, float]:
    """Two-link leg inverse kinematics, knee-forward branch.

    Returns (hip, knee) joint angles for the rest convention where zero
    joint angles point the leg straight down at zero root angle.
    """
    v = np.asarray(foot, dtype=np.float64) - np.asarray(hip, dtype=np.float64)
    d = float(np.linalg.norm(v))
    d = min(max(d, 1e-6), l1 + l2 - 1e-9)
    chi = math.atan2(v[1], v[0])
    cos_a1 = (l1 * l1 + d * d - l2 * l2) / (2.0 * l1 * d)
    a1 = math.acos(min(1.0, max(-1.0, cos_a1)))
    phi_u = chi + a1
    knee = np.asarray(hip, dtype=np.float64) + l1 * np.array([math.cos(phi_u), math.sin(phi_u)])
    tgt = np.asarray(foot, dtype=np.float64)
    scale = d / max(np.linalg.norm(tgt - np.asarray(hip)), 1e-9)
    tgt = np.asarray(hip) + (tgt - np.asarray(hip)) * scale
    phi_l = math.atan2(tgt[1] - knee[1], tgt[0] - knee[0])
    q_hip = wrap_angle(phi_u - root_angle + math.pi / 2.0)
    q_knee = wrap_angle(phi_l - phi_u)
    return float(q_hip), float(q_knee)


GUARD_ARMS = {"shoulder_l": 1.00, "elbow_l": 1.70, "shoulder_r": 0.80, "elbow_r": 2.00}
STANCE_HALF_SPAN = 0.15  # foot spread around the root; left leads


def nominal_stance(
    spec: CharacterSpec, cfg: PhysicsConfig | None = None
) -> SimState:
    """Neutral standing pose built as a symmetric truss: straight splayed
    legs carry the load axially, trunk vertical, arms hanging straight.

    Gravity torques on the actuated joints are near zero, so commanding
    this pose as the PD target holds it with millimetre-level droop.  The
    feet are preloaded into the ground and the friction anchors are
    pre-tensioned with the inward shear the leg splay needs.
    """
    cfg = cfg or PhysicsConfig()
    preload = spec.total_mass * cfg.gravity / (2.0 * cfg.contact_kn)
    foot_y = spec.contact_radius - preload
    leg = spec.links[5].length + spec.links[6].length
    rise = math.sqrt(leg**2 - STANCE_HALF_SPAN**2)
    joints = np.zeros(spec.n_joints)
    jidx = {n: i for i, n in enumerate(JOINT_NAMES)}
    tilt = math.atan2(STANCE_HALF_SPAN, rise)
    joints[jidx["hip_l"]] = tilt
    joints[jidx["hip_r"]] = -tilt
    state = SimState(
        root_pos=np.array([0.0, foot_y + rise]),
        root_angle=0.0,
        joint_angles=joints,
        root_vel=np.zeros(2),
        root_ang_vel=0.0,
        joint_vels=np.zeros(spec.n_joints),
    )
    pos = site_positions(state, spec)
    state.anchor_x = pos[:, 0].copy()
    state.anchor_on = np.zeros(len(spec.sites), dtype=bool)
    half_weight = spec.total_mass * cfg.gravity / 2.0
    for name, sign in (("foot_l", -1.0), ("foot_r", 1.0)):
        s = spec.site_index[name]
        state.anchor_on[s] = True
        state.anchor_x[s] = pos[s, 0] + sign * half_weight * math.tan(tilt) / cfg.contact_kt
    return state


def default_config(spec: CharacterSpec | None = None, **overrides) -> PhysicsConfig:
    """Physics config with the fall threshold derived from the stance."""
    spec = spec or default_character()
    cfg = PhysicsConfig(**overrides)
    stance = nominal_stance(spec, cfg)
    h = torso_center(stance, spec)[1]
    return replace(cfg, fall_height=cfg.fall_frac * float(h))


def settle_stance(
    spec: CharacterSpec, cfg: PhysicsConfig, seconds: float = 3.0
) -> SimState:
    """Let the guard stance relax under PD control to its true equilibrium.

    The root angle is unactuated, so the physical rest pose leans slightly
    away from the designed stance; generating reference motion around the
    settled pose keeps kinematic clips and PD tracking consistent.
    """
    state = nominal_stance(spec, cfg)
    targets = state.joint_angles.copy()
    for _ in range(int(seconds * cfg.hz)):
        state, _ = step_pd(state, targets, cfg.dt, spec, cfg)
    if not state.valid:
        raise RuntimeError("stance failed to settle: simulation diverged")
    state.root_vel = np.zeros(2)
    state.root_ang_vel = 0.0
    state.joint_vels = np.zeros(spec.n_joints)
    state.time = 0.0
    return state


def mirror_state(state: SimState, about_x: float = 0.0) -> SimState:
    """Reflect a state across the vertical line x = about_x."""
    return SimState(
        root_pos=np.array([2.0 * about_x - state.root_pos[0], state.root_pos[1]]),
        root_angle=-state.root_angle,
        joint_angles=-state.joint_angles.copy(),
        root_vel=np.array([-state.root_vel[0], state.root_vel[1]]),
        root_ang_vel=-state.root_ang_vel,
        joint_vels=-state.joint_vels.copy(),
        time=state.time,
        valid=state.valid,
        anchor_x=None if state.anchor_x is None else 2.0 * about_x - state.anchor_x,
        anchor_on=None if state.anchor_on is None else state.anchor_on.copy(),
    )
