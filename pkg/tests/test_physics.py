import math

import numpy as np
import pytest

from slmp import physics as ph

SPEC = ph.default_character()
CFG = ph.default_config(SPEC)


def single_link_spec():
    return ph.CharacterSpec(
        links=(ph.Link("rod", 1.0, 2.0, -1, rest_rel=0.0),),
        sites=(ph.Site("pelvis", 0, 0.0), ph.Site("head_top", 0, 1.0)),
        kp=(),
        kd=(),
    )


def floating(state, y=8.0):
    s = state.copy()
    s.root_pos = np.array([0.0, y])
    s.anchor_x = None
    s.anchor_on = None
    return s


class TestPdTorque:
    def test_zero_at_setpoint(self):
        st = ph.nominal_stance(SPEC, CFG)
        tau = ph.pd_torque(st, st.joint_angles, SPEC)
        assert np.allclose(tau, 0.0)

    def test_direct_substitution(self):
        spec = ph.CharacterSpec(
            links=(
                ph.Link("trunk", 1.0, 2.0, -1, rest_rel=math.pi / 2),
                ph.Link("arm", 0.5, 0.5, 0, rest_rel=math.pi, attach_end="distal"),
            ),
            sites=(ph.Site("pelvis", 0, 0.0), ph.Site("head_top", 0, 1.0)),
            kp=(10.0,),
            kd=(0.0,),
        )
        st = ph.SimState(np.zeros(2), 0.0, np.zeros(1), np.zeros(2), 0.0, np.zeros(1))
        tau = ph.pd_torque(st, np.array([0.5]), spec)
        assert tau[0] == pytest.approx(5.0)

    def test_clamped_at_tau_max(self):
        st = ph.nominal_stance(SPEC, CFG)
        targets = st.joint_angles + 3.0
        tau = ph.pd_torque(st, targets, SPEC)
        assert np.abs(tau).max() <= SPEC.tau_max + 1e-12
        assert np.abs(tau).max() == pytest.approx(SPEC.tau_max)


class TestStep:
    def test_equilibrium_without_forces(self):
        cfg = ph.PhysicsConfig(gravity=0.0)
        st = floating(ph.nominal_stance(SPEC, CFG))
        out, _ = ph.step(st, np.zeros(8), 1 / 60, SPEC, cfg)
        assert np.allclose(out.root_pos, st.root_pos)
        assert np.allclose(out.joint_angles, st.joint_angles)
        assert np.allclose(out.root_vel, 0.0)

    def test_single_link_gravity_one_step(self):
        spec = single_link_spec()
        st = ph.SimState(np.array([0.0, 5.0]), 0.3, np.zeros(0), np.zeros(2), 0.0, np.zeros(0))
        out, _ = ph.step(st, np.zeros(0), 1 / 60, spec, CFG)
        assert out.root_vel[1] == pytest.approx(-9.81 / 60, abs=1e-12)

    def test_flight_momentum_conservation(self):
        st = floating(ph.nominal_stance(SPEC, CFG))
        st.root_vel = np.array([0.3, 0.5])
        st.root_ang_vel = 0.4
        st.joint_vels = np.linspace(-1, 1, 8)
        rng = np.random.default_rng(0)
        p0 = ph.linear_momentum(st, SPEC)
        for _ in range(12):  # 0.2 s of arbitrary internal torques
            st, _ = ph.step(st, rng.uniform(-20, 20, 8), 1 / 60, SPEC, CFG)
        assert st.valid
        p1 = ph.linear_momentum(st, SPEC)
        assert abs(p1[0] - p0[0]) / abs(p0[0]) < 1e-6
        assert p1[1] - p0[1] == pytest.approx(-SPEC.total_mass * 9.81 * 0.2, rel=1e-9)

    def test_bit_deterministic(self):
        st = ph.nominal_stance(SPEC, CFG)
        targets = st.joint_angles + 0.1
        a, ra = ph.step_pd(st.copy(), targets, 1 / 60, SPEC, CFG)
        b, rb = ph.step_pd(st.copy(), targets, 1 / 60, SPEC, CFG)
        assert np.array_equal(a.root_pos, b.root_pos)
        assert np.array_equal(a.joint_angles, b.joint_angles)
        assert np.array_equal(a.joint_vels, b.joint_vels)
        assert np.array_equal(ra.site_ground, rb.site_ground)

    def test_energy_drift_free_float(self):
        cfg = ph.PhysicsConfig(gravity=0.0)
        st = floating(ph.nominal_stance(SPEC, CFG))
        st.joint_vels = np.full(8, 1.0)
        st.root_ang_vel = 0.5
        e0 = ph.kinetic_energy(st, SPEC)
        for _ in range(60):  # 1 s at 60 Hz
            st, _ = ph.step(st, np.zeros(8), 1 / 60, SPEC, cfg)
        e1 = ph.kinetic_energy(st, SPEC)
        assert abs(e1 - e0) / e0 < 0.02

    def test_contact_forces_nonnegative_and_vanish_off_ground(self):
        st = floating(ph.nominal_stance(SPEC, CFG))
        _, rep = ph.step(st, np.zeros(8), 1 / 60, SPEC, CFG)
        assert not rep.ground_contact
        assert np.all(rep.site_force == 0.0)
        st2 = ph.nominal_stance(SPEC, CFG)
        _, rep2 = ph.step_pd(st2, st2.joint_angles, 1 / 60, SPEC, CFG)
        assert np.all(rep2.site_force >= 0.0)
        assert rep2.ground_contact

    def test_divergence_flags_invalid(self):
        st = floating(ph.nominal_stance(SPEC, CFG))
        st.joint_vels = np.full(8, 1e7)
        for _ in range(200):
            st, _ = ph.step(st, np.full(8, SPEC.tau_max), 1 / 60, SPEC, CFG)
            if not st.valid:
                break
        assert not st.valid
        # invalid is sticky and the state stays finite
        st2, _ = ph.step(st, np.zeros(8), 1 / 60, SPEC, CFG)
        assert not st2.valid
        assert np.isfinite(st2.joint_angles).all()


class TestKinematics:
    def test_rest_pose_cumulative_lengths(self):
        spec = SPEC
        st = ph.SimState(np.zeros(2), 0.0, np.zeros(8), np.zeros(2), 0.0, np.zeros(8))
        ends = ph.link_endpoints(st, spec)
        # trunk points up from the root at zero angles
        assert np.allclose(ends[0, 0], [0.0, 0.0])
        assert np.allclose(ends[0, 1], [0.0, spec.links[0].length])
        # legs hang straight down from the pelvis
        assert np.allclose(ends[5, 1], [0.0, -0.4])
        assert np.allclose(ends[6, 1], [0.0, -0.8])
        # arms hang from the neck attachment point
        assert np.allclose(ends[1, 0], [0.0, 0.5])
        assert np.allclose(ends[2, 1], [0.0, 0.5 - 0.28 - 0.26])

    def test_rigid_rotation_about_root(self):
        st = ph.nominal_stance(SPEC, CFG)
        base = ph.link_endpoints(st, SPEC)
        rot = st.copy()
        rot.root_angle += math.pi / 2
        got = ph.link_endpoints(rot, SPEC)
        want = (base - st.root_pos) @ ph.rot(math.pi / 2).T + st.root_pos
        assert np.allclose(got, want, atol=1e-12)

    def test_fk_matches_independent_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            st = ph.SimState(
                rng.uniform(-1, 1, 2), rng.uniform(-3, 3),
                rng.uniform(-2, 2, 8), np.zeros(2), 0.0, np.zeros(8),
            )
            got = ph.link_endpoints(st, SPEC)
            want = _fk_oracle(st, SPEC)
            assert np.allclose(got, want, atol=1e-10)

    def test_localize_cases(self):
        st = ph.SimState(np.zeros(2), 0.0, np.zeros(8), np.zeros(2), 0.0, np.zeros(8))
        v = np.array([0.3, -0.7])
        assert np.allclose(ph.local_vec(st, v), v)
        assert np.allclose(ph.local_point(st, v), v)
        st.root_angle = math.pi / 2
        assert np.allclose(ph.local_vec(st, np.array([1.0, 0.0])), [0.0, -1.0], atol=1e-15)

    def test_localize_roundtrip(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            st = ph.SimState(
                rng.uniform(-2, 2, 2), rng.uniform(-4, 4),
                np.zeros(8), np.zeros(2), 0.0, np.zeros(8),
            )
            p = rng.uniform(-3, 3, 2)
            assert np.allclose(ph.world_point(st, ph.local_point(st, p)), p, atol=1e-12)
            assert np.allclose(ph.world_vec(st, ph.local_vec(st, p)), p, atol=1e-12)


def _fk_oracle(state, spec):
    """Independent transform-chain forward kinematics."""
    n = spec.n_links
    angles = [0.0] * n
    prox = [None] * n
    angles[0] = state.root_angle + spec.links[0].rest_rel
    prox[0] = np.array(state.root_pos, dtype=float)
    for i in range(1, n):
        link = spec.links[i]
        p = link.parent
        base = 0.0 if link.attach_end == "proximal" else spec.links[p].length
        d = base + link.attach_offset
        angles[i] = angles[p] + link.rest_rel + state.joint_angles[i - 1]
        prox[i] = prox[p] + d * np.array([math.cos(angles[p]), math.sin(angles[p])])
    out = np.zeros((n, 2, 2))
    for i in range(n):
        u = np.array([math.cos(angles[i]), math.sin(angles[i])])
        out[i, 0] = prox[i]
        out[i, 1] = prox[i] + spec.links[i].length * u
    return out


class TestFall:
    def test_standing_not_fallen(self):
        assert not ph.detect_fall(ph.nominal_stance(SPEC, CFG), SPEC, CFG)

    def test_translated_below_threshold(self):
        st = ph.nominal_stance(SPEC, CFG)
        drop = ph.torso_center(st, SPEC)[1] - CFG.fall_height + 0.01
        st.root_pos = st.root_pos - np.array([0.0, drop])
        assert ph.detect_fall(st, SPEC, CFG)

    def test_invalid_state_counts_as_fall(self):
        st = ph.nominal_stance(SPEC, CFG)
        st.valid = False
        assert ph.detect_fall(st, SPEC, CFG)


class TestStance:
    def test_holds_under_reference_pd(self):
        st = ph.nominal_stance(SPEC, CFG)
        targets = st.joint_angles.copy()
        for _ in range(600):
            st, _ = ph.step_pd(st, targets, CFG.dt, SPEC, CFG)
        assert st.valid and not ph.detect_fall(st, SPEC, CFG)

    def test_mirror_state_roundtrip(self):
        st = ph.nominal_stance(SPEC, CFG)
        st.root_vel = np.array([0.4, -0.2])
        st.joint_vels = np.linspace(-1, 1, 8)
        back = ph.mirror_state(ph.mirror_state(st, 0.3), 0.3)
        assert np.allclose(back.root_pos, st.root_pos)
        assert np.allclose(back.joint_angles, st.joint_angles)
        assert np.allclose(back.root_vel, st.root_vel)


class TestTwoCharacterContact:
    def test_punch_transfers_momentum_and_reports(self):
        a = ph.nominal_stance(SPEC, CFG)
        b = ph.mirror_state(ph.nominal_stance(SPEC, CFG), 0.0)
        b.root_pos[0] += 0.52
        if b.anchor_x is not None:
            b.anchor_x += 0.52
        # drive a's lead hand into b's trunk
        a.joint_vels = np.zeros(8)
        jidx = {n: i for i, n in enumerate(ph.JOINT_NAMES)}
        a.joint_angles[jidx["shoulder_l"]] = 1.5
        a.joint_angles[jidx["elbow_l"]] = 0.1
        a.joint_vels[jidx["shoulder_l"]] = 8.0
        hit = False
        for _ in range(30):
            states, reports = ph.step_world(
                [a, b], [SPEC, SPEC], [np.zeros(8), np.zeros(8)], CFG.dt, CFG
            )
            a, b = states
            s = SPEC.site_index["hand_l"]
            if reports[0].site_opponent[s] > 0:
                hit = True
                assert reports[0].opponent_link[s] >= 0
                assert reports[0].counterpart(s).startswith("opponent_link")
                break
        assert hit

    def test_symmetric_world_total_momentum(self):
        a = ph.nominal_stance(SPEC, CFG)
        b = ph.mirror_state(a, 0.0)
        a.root_pos[0] -= 0.3
        b.root_pos[0] += 0.3
        for s, dx in ((a, -0.3), (b, 0.3)):
            if s.anchor_x is not None:
                s.anchor_x += dx
        a.root_vel = np.array([1.0, 0.0])
        b.root_vel = np.array([-1.0, 0.0])
        a.root_pos[1] += 3.0
        b.root_pos[1] += 3.0
        a.anchor_x = None; a.anchor_on = None
        b.anchor_x = None; b.anchor_on = None
        cfg = ph.PhysicsConfig(gravity=0.0)
        px0 = ph.linear_momentum(a, SPEC)[0] + ph.linear_momentum(b, SPEC)[0]
        for _ in range(40):
            (a, b), _ = ph.step_world([a, b], [SPEC, SPEC], [np.zeros(8)] * 2, cfg.dt, cfg)
        px1 = ph.linear_momentum(a, SPEC)[0] + ph.linear_momentum(b, SPEC)[0]
        assert px1 == pytest.approx(px0, abs=1e-9)


class TestCharacterIO:
    def test_json_roundtrip(self, tmp_path):
        ph.character_to_json(SPEC, tmp_path / "char.json")
        spec2 = ph.character_from_json(tmp_path / "char.json")
        assert spec2.n_links == SPEC.n_links
        assert spec2.kp == SPEC.kp
        st1 = ph.nominal_stance(SPEC, CFG)
        st2 = ph.nominal_stance(spec2, CFG)
        assert np.allclose(st1.joint_angles, st2.joint_angles)

    def test_tree_validation(self):
        with pytest.raises(ValueError):
            ph.CharacterSpec(
                links=(
                    ph.Link("trunk", 1.0, 1.0, -1),
                    ph.Link("a", 1.0, 1.0, 5),
                ),
                sites=(ph.Site("pelvis", 0, 0.0), ph.Site("head_top", 0, 1.0)),
                kp=(1.0,),
                kd=(1.0,),
            )


def test_wrap_angle():
    assert ph.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert ph.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert ph.wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    arr = ph.wrap_angle(np.array([0.0, 2 * math.pi, -2 * math.pi]))
    assert np.allclose(arr, 0.0)
