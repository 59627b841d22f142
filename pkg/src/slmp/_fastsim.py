"""Numba-compiled single-character simulation kernel.

Mirrors the reference implementation in physics.py (COM-centric reduced
coordinates, semi-implicit Euler substeps, anchored ground friction) with
explicit loops over the small link arrays.  physics.step_world dispatches
here for one-character worlds; the numpy path stays authoritative for
two-character worlds and as a fallback when numba is unavailable.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard speedup, soft dep
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _wrap(a):
    w = (a + np.pi) % (2.0 * np.pi)
    if w <= 0.0:
        w += 2.0 * np.pi
    return w - np.pi


@njit(cache=True)
def substeps_kernel(
    q,  # (2+ndof,) root_pos then [root_angle, joints]
    qd,  # (2+ndof,)
    anchor_x,  # (n_sites,)
    anchor_on,  # (n_sites,) uint8
    targets,  # (n_joints,) PD targets (pd_mode) or unused
    torques_in,  # (n_joints,) held torques (not pd_mode)
    pd_mode,  # bool
    n_sub,
    dt_sub,
    # spec constants
    masses,
    inertias,
    lengths,
    path,  # (N, ndof)
    rest_abs,
    com_coeff,  # (N, N)
    site_coeff,  # (S, N)
    i_path,  # (ndof, ndof) constant inertia part of the mass matrix
    kp,
    kd,
    tau_max,
    radius,
    # physics constants
    gravity,
    kn,
    dn,
    kt,
    mu,
    # outputs
    ground_max,  # (S,) per-site max ground force magnitude over substeps
):
    nl = masses.shape[0]
    ndof = path.shape[1]
    ns = site_coeff.shape[0]
    nj = ndof - 1
    total_mass = masses.sum()

    for _ in range(n_sub):
        theta = q[2:]
        theta_dot = qd[2:]
        root_vel = qd[0:2]

        phi = np.empty(nl)
        for i in range(nl):
            s = rest_abs[i]
            for a in range(ndof):
                s += path[i, a] * theta[a]
            phi[i] = s
        u = np.empty((nl, 2))
        up = np.empty((nl, 2))
        for i in range(nl):
            c = np.cos(phi[i])
            s = np.sin(phi[i])
            u[i, 0] = c
            u[i, 1] = s
            up[i, 0] = -s
            up[i, 1] = c
        phidot = np.empty(nl)
        for i in range(nl):
            s = 0.0
            for a in range(ndof):
                s += path[i, a] * theta_dot[a]
            phidot[i] = s

        # COM-relative geometry
        com_rel = com_coeff @ u  # (N,2)
        r = np.zeros(2)
        for i in range(nl):
            r[0] += masses[i] * com_rel[i, 0]
            r[1] += masses[i] * com_rel[i, 1]
        r /= total_mass

        jac_com = np.zeros((nl, 2, ndof))
        for i in range(nl):
            for n in range(nl):
                c = com_coeff[i, n]
                if c != 0.0:
                    for a in range(ndof):
                        p = path[n, a]
                        if p != 0.0:
                            jac_com[i, 0, a] += c * up[n, 0] * p
                            jac_com[i, 1, a] += c * up[n, 1] * p
        jac_r = np.zeros((2, ndof))
        for i in range(nl):
            for a in range(ndof):
                jac_r[0, a] += masses[i] * jac_com[i, 0, a]
                jac_r[1, a] += masses[i] * jac_com[i, 1, a]
        jac_r /= total_mass

        # site positions and velocities
        site_pos = np.empty((ns, 2))
        site_vel = np.empty((ns, 2))
        for s in range(ns):
            px = q[0]
            py = q[1]
            vx = root_vel[0]
            vy = root_vel[1]
            for n in range(nl):
                c = site_coeff[s, n]
                if c != 0.0:
                    px += c * u[n, 0]
                    py += c * u[n, 1]
                    vx += c * phidot[n] * up[n, 0]
                    vy += c * phidot[n] * up[n, 1]
            site_pos[s, 0] = px
            site_pos[s, 1] = py
            site_vel[s, 0] = vx
            site_vel[s, 1] = vy

        # ground contact with friction anchors
        forces = np.zeros((ns, 2))
        for s in range(ns):
            pen = radius - site_pos[s, 1]
            if pen > 0.0:
                if anchor_on[s] == 0:
                    anchor_x[s] = site_pos[s, 0]
                    anchor_on[s] = 1
                normal = kn * pen - dn * site_vel[s, 1]
                if normal < 0.0:
                    normal = 0.0
                cap = mu * normal
                spring = -kt * (site_pos[s, 0] - anchor_x[s])
                if spring > cap:
                    spring = cap
                    anchor_x[s] = site_pos[s, 0] + spring / kt
                elif spring < -cap:
                    spring = -cap
                    anchor_x[s] = site_pos[s, 0] + spring / kt
                tang = spring - dn * site_vel[s, 0]
                if tang > cap:
                    tang = cap
                elif tang < -cap:
                    tang = -cap
                forces[s, 0] = tang
                forces[s, 1] = normal
                mag = np.sqrt(tang * tang + normal * normal)
                if mag > ground_max[s]:
                    ground_max[s] = mag
            else:
                anchor_on[s] = 0

        # actuation
        tau = np.empty(nj)
        if pd_mode:
            for j in range(nj):
                err = _wrap(targets[j] - theta[1 + j])
                t = kp[j] * err - kd[j] * theta_dot[1 + j]
                if t > tau_max:
                    t = tau_max
                elif t < -tau_max:
                    t = -tau_max
                tau[j] = t
        else:
            for j in range(nj):
                tau[j] = torques_in[j]

        # generalized forces
        q_trans = np.zeros(2)
        q_trans[1] = -total_mass * gravity
        q_ang = np.zeros(ndof)
        for j in range(nj):
            q_ang[1 + j] += tau[j]
        for s in range(ns):
            fx = forces[s, 0]
            fy = forces[s, 1]
            if fx != 0.0 or fy != 0.0:
                q_trans[0] += fx
                q_trans[1] += fy
                for a in range(ndof):
                    jx = -jac_r[0, a]
                    jy = -jac_r[1, a]
                    for n in range(nl):
                        c = site_coeff[s, n]
                        if c != 0.0 and path[n, a] != 0.0:
                            jx += c * up[n, 0] * path[n, a]
                            jy += c * up[n, 1] * path[n, a]
                    q_ang[a] += jx * fx + jy * fy

        # mass matrix and velocity-product bias
        m_ang = i_path.copy()
        jr = np.empty((nl, 2, ndof))
        for i in range(nl):
            for a in range(ndof):
                jr[i, 0, a] = jac_com[i, 0, a] - jac_r[0, a]
                jr[i, 1, a] = jac_com[i, 1, a] - jac_r[1, a]
        for i in range(nl):
            mi = masses[i]
            for a in range(ndof):
                ja0 = jr[i, 0, a]
                ja1 = jr[i, 1, a]
                for b in range(a, ndof):
                    v = mi * (ja0 * jr[i, 0, b] + ja1 * jr[i, 1, b])
                    m_ang[a, b] += v
                    if b != a:
                        m_ang[b, a] += v

        acc_v = np.zeros((nl, 2))
        for i in range(nl):
            ax = 0.0
            ay = 0.0
            for n in range(nl):
                c = com_coeff[i, n]
                if c != 0.0:
                    w2 = phidot[n] * phidot[n]
                    ax -= c * w2 * u[n, 0]
                    ay -= c * w2 * u[n, 1]
            acc_v[i, 0] = ax
            acc_v[i, 1] = ay
        acc_r = np.zeros(2)
        for i in range(nl):
            acc_r[0] += masses[i] * acc_v[i, 0]
            acc_r[1] += masses[i] * acc_v[i, 1]
        acc_r /= total_mass
        bias = np.zeros(ndof)
        for i in range(nl):
            mi = masses[i]
            gx = acc_v[i, 0] - acc_r[0]
            gy = acc_v[i, 1] - acc_r[1]
            for a in range(ndof):
                bias[a] += mi * (jr[i, 0, a] * gx + jr[i, 1, a] * gy)

        theta_ddot = np.linalg.solve(m_ang, q_ang - bias)

        # semi-implicit Euler in COM coordinates
        com_x = q[0] + r[0]
        com_y = q[1] + r[1]
        vcom_x = root_vel[0]
        vcom_y = root_vel[1]
        for a in range(ndof):
            vcom_x += jac_r[0, a] * theta_dot[a]
            vcom_y += jac_r[1, a] * theta_dot[a]
        vcom_x += dt_sub * q_trans[0] / total_mass
        vcom_y += dt_sub * q_trans[1] / total_mass
        new_theta_dot = theta_dot + dt_sub * theta_ddot
        com_x += dt_sub * vcom_x
        com_y += dt_sub * vcom_y
        new_theta = theta + dt_sub * new_theta_dot

        # reconstruct root pose from the integrated COM
        phi2 = np.empty(nl)
        for i in range(nl):
            s = rest_abs[i]
            for a in range(ndof):
                s += path[i, a] * new_theta[a]
            phi2[i] = s
        u2 = np.empty((nl, 2))
        up2 = np.empty((nl, 2))
        for i in range(nl):
            c = np.cos(phi2[i])
            s = np.sin(phi2[i])
            u2[i, 0] = c
            u2[i, 1] = s
            up2[i, 0] = -s
            up2[i, 1] = c
        com_rel2 = com_coeff @ u2
        r2 = np.zeros(2)
        for i in range(nl):
            r2[0] += masses[i] * com_rel2[i, 0]
            r2[1] += masses[i] * com_rel2[i, 1]
        r2 /= total_mass
        jac_r2 = np.zeros((2, ndof))
        for i in range(nl):
            for n in range(nl):
                c = com_coeff[i, n]
                if c != 0.0:
                    for a in range(ndof):
                        p = path[n, a]
                        if p != 0.0:
                            jac_r2[0, a] += masses[i] * c * up2[n, 0] * p
                            jac_r2[1, a] += masses[i] * c * up2[n, 1] * p
        jac_r2 /= total_mass

        ok = True
        for a in range(ndof):
            if not np.isfinite(new_theta[a]) or not np.isfinite(new_theta_dot[a]):
                ok = False
            elif np.abs(new_theta_dot[a]) >= 1e8:
                ok = False
        if not (np.isfinite(com_x) and np.isfinite(com_y) and np.isfinite(vcom_x) and np.isfinite(vcom_y)):
            ok = False
        if not ok:
            return 1  # diverged; caller keeps the previous state

        q[0] = com_x - r2[0]
        q[1] = com_y - r2[1]
        # root velocity = COM velocity minus the angular contribution
        rvx = vcom_x
        rvy = vcom_y
        for a in range(ndof):
            rvx -= jac_r2[0, a] * new_theta_dot[a]
            rvy -= jac_r2[1, a] * new_theta_dot[a]
        qd[0] = rvx
        qd[1] = rvy
        for a in range(ndof):
            q[2 + a] = new_theta[a]
            qd[2 + a] = new_theta_dot[a]
    return 0


@njit(cache=True)
def fk_sites_kernel(q, qd, lengths, path, rest_abs, site_coeff, out_pos, out_vel):
    """Site world positions and velocities for one state."""
    nl = path.shape[0]
    ndof = path.shape[1]
    ns = site_coeff.shape[0]
    theta = q[2:]
    theta_dot = qd[2:]
    for s in range(ns):
        px = q[0]
        py = q[1]
        vx = qd[0]
        vy = qd[1]
        for n in range(nl):
            c = site_coeff[s, n]
            if c != 0.0:
                phi = rest_abs[n]
                pd = 0.0
                for a in range(ndof):
                    phi += path[n, a] * theta[a]
                    pd += path[n, a] * theta_dot[a]
                cs = np.cos(phi)
                sn = np.sin(phi)
                px += c * cs
                py += c * sn
                vx += c * pd * (-sn)
                vy += c * pd * cs
        out_pos[s, 0] = px
        out_pos[s, 1] = py
        out_vel[s, 0] = vx
        out_vel[s, 1] = vy
