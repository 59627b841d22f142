import math

import numpy as np
import pytest

from slmp import motion as mo
from slmp import nets
from slmp import physics as ph
from slmp import tracking as tr

SPEC = ph.default_character()
CFG = ph.default_config(SPEC)


def relerr(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-4)


class TestImitationReward:
    def test_exact_at_zero_error(self):
        st = ph.nominal_stance(SPEC, CFG)
        r, e = tr.imitation_reward(st, st.copy(), SPEC)
        assert r == pytest.approx(1.0, abs=1e-12)
        assert e == 0.0

    def test_position_only_error_formula(self):
        """0.01 m uniform site offset -> 0.5*e^-1 + 0.5."""
        st = ph.nominal_stance(SPEC, CFG)
        shifted = st.copy()
        shifted.root_pos = st.root_pos + np.array([0.01, 0.0])
        r, e = tr.imitation_reward(shifted, st, SPEC)
        assert e == pytest.approx(0.01, abs=1e-12)
        # translation leaves rotations and velocities untouched
        assert r == pytest.approx(0.5 * math.exp(-1.0) + 0.5, abs=1e-12)

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(0)
        clip = mo.generate_clip("combo", 1, 4.0, spec=SPEC, cfg=CFG)
        for _ in range(10):
            st = clip.frame_state(int(rng.integers(clip.n_frames)))
            ref = clip.frame_state(int(rng.integers(clip.n_frames)))
            st.root_vel = rng.uniform(-1, 1, 2)
            st.joint_vels = rng.uniform(-2, 2, 8)
            got, _ = tr.imitation_reward(st, ref, SPEC)
            ps, vs = ph.sites_and_velocities(st, SPEC)
            pr, vr = ph.sites_and_velocities(ref, SPEC)
            ep = np.linalg.norm(ps - pr, axis=1).mean()
            er = np.abs(
                ph.wrap_angle(
                    np.concatenate([[st.root_angle], st.joint_angles])
                    - np.concatenate([[ref.root_angle], ref.joint_angles])
                )
            ).mean()
            ev = np.linalg.norm(vs - vr, axis=1).mean()
            ew = np.abs(
                np.concatenate([[st.root_ang_vel], st.joint_vels])
                - np.concatenate([[ref.root_ang_vel], ref.joint_vels])
            ).mean()
            want = (
                0.5 * math.exp(-100 * ep)
                + 0.3 * math.exp(-10 * er)
                + 0.1 * math.exp(-0.1 * ev)
                + 0.1 * math.exp(-0.1 * ew)
            )
            assert got == pytest.approx(want, abs=1e-12)

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(1)
        clip = mo.generate_clip("kick", 2, 4.0, spec=SPEC, cfg=CFG)
        for _ in range(30):
            st = clip.frame_state(int(rng.integers(clip.n_frames)))
            st.root_pos = st.root_pos + rng.uniform(-1, 1, 2)
            st.joint_vels = rng.uniform(-20, 20, 8)
            r, _ = tr.imitation_reward(st, clip.frame_state(0), SPEC)
            assert 0.0 < r <= 1.0


class TestEnergyPenalty:
    def test_zero_torques(self):
        assert tr.energy_penalty(np.zeros(8), np.ones(8)) == 0.0

    def test_direct_substitution(self):
        assert tr.energy_penalty(np.array([2.0]), np.array([3.0])) == pytest.approx(
            -0.0005 * 36.0, abs=1e-15
        )

    def test_never_positive(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            tau = rng.uniform(-200, 200, 8)
            om = rng.uniform(-50, 50, 8)
            assert tr.energy_penalty(tau, om) <= 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            tr.energy_penalty(np.zeros(3), np.zeros(4))


class TestGae:
    def test_single_terminal_step(self):
        adv, ret = tr.gae(np.array([1.0]), np.array([0.0]), np.array([1.0]), 0.99, 0.95)
        assert adv[0] == pytest.approx(1.0)
        assert ret[0] == pytest.approx(1.0)

    def test_two_step_recursion(self):
        adv, _ = tr.gae(
            np.array([1.0, 1.0]), np.array([0.0, 0.0]), np.array([0.0, 1.0]), 0.99, 0.95
        )
        assert adv[0] == pytest.approx(1.0 + 0.99 * 0.95 * 1.0)

    def test_zero_rewards_zero_values(self):
        adv, ret = tr.gae(np.zeros(5), np.zeros(5), np.zeros(5), 0.99, 0.95, 0.0)
        assert np.allclose(adv, 0.0)
        assert np.allclose(ret, 0.0)

    def test_lambda_zero_is_one_step_td(self):
        rng = np.random.default_rng(3)
        r = rng.uniform(-1, 1, 20)
        v = rng.uniform(-1, 1, 20)
        d = (rng.uniform(size=20) < 0.2).astype(float)
        boot = 0.37
        adv, _ = tr.gae(r, v, d, 0.9, 0.0, boot)
        v_next = np.concatenate([v[1:], [boot]])
        td = r + 0.9 * v_next * (1 - d) - v
        assert np.allclose(adv, td, atol=1e-12)

    def test_bootstrap_used_for_truncation(self):
        adv, _ = tr.gae(np.array([0.0]), np.array([0.0]), np.array([0.0]), 0.5, 1.0, 2.0)
        assert adv[0] == pytest.approx(1.0)


def _tiny_setup(obs_dim=6, act_dim=2, n=3, seed=0):
    rng = np.random.default_rng(seed)
    policy = tr.GaussianPolicy(nets.MlpSpec(obs_dim, (8,), act_dim, activation="silu"))
    params = policy.init(rng, 0.3)
    vspec = nets.MlpSpec(obs_dim, (8,), 1, activation="silu")
    vparams = nets.init_params(vspec, rng)
    obs = rng.standard_normal((n, obs_dim))
    actions = rng.standard_normal((n, act_dim)) * 0.3
    mlp, log_std = policy.split(params)
    mu = nets.forward_batch(policy.spec, mlp, obs)
    logp = policy.log_prob_batch(mu, log_std, actions)
    batch = tr.PpoBatch(
        obs, actions, logp + rng.uniform(-0.05, 0.05, n),
        rng.standard_normal(n), rng.standard_normal(n),
    )
    return policy, params, vspec, vparams, batch


class TestPpo:
    def test_ratio_one_gives_vanilla_pg_objective(self):
        policy, params, vspec, vparams, batch = _tiny_setup()
        mlp, log_std = policy.split(params)
        mu = nets.forward_batch(policy.spec, mlp, batch.obs)
        batch = tr.PpoBatch(
            batch.obs, batch.actions,
            policy.log_prob_batch(mu, log_std, batch.actions),
            batch.advantages, batch.returns,
        )
        cfg = tr.PpoConfig(clip_eps=0.2)
        m, _, _ = tr.ppo_loss_and_grads(policy, params, vspec, vparams, batch, cfg)
        assert m["clip_fraction"] == 0.0
        assert m["policy_loss"] == pytest.approx(-batch.advantages.mean(), abs=1e-12)

    def test_clip_value_applied(self):
        """Positive advantage with ratio 1.5 contributes 1.2 * adv."""
        policy, params, vspec, vparams, batch = _tiny_setup(n=1)
        mlp, log_std = policy.split(params)
        mu = nets.forward_batch(policy.spec, mlp, batch.obs)
        logp = policy.log_prob_batch(mu, log_std, batch.actions)
        batch = tr.PpoBatch(
            batch.obs, batch.actions, logp - math.log(1.5), np.array([2.0]), batch.returns
        )
        cfg = tr.PpoConfig(clip_eps=0.2)
        m, _, _ = tr.ppo_loss_and_grads(policy, params, vspec, vparams, batch, cfg)
        assert m["policy_loss"] == pytest.approx(-1.2 * 2.0, rel=1e-9)

    def test_gradients_match_finite_differences(self):
        policy, params, vspec, vparams, batch = _tiny_setup(n=3, seed=4)
        cfg = tr.PpoConfig(clip_eps=0.2, entropy_coef=0.01, value_coef=0.7)

        def total_loss(pp, vp):
            m, _, _ = tr.ppo_loss_and_grads(policy, pp, vspec, vp, batch, cfg)
            return m["policy_loss"] + cfg.value_coef * m["value_loss"] - cfg.entropy_coef * m["entropy"]

        _, g_p, g_v = tr.ppo_loss_and_grads(policy, params, vspec, vparams, batch, cfg)
        rng = np.random.default_rng(5)
        step = 1e-5
        for idx in rng.choice(params.size, 40, replace=False):
            p = params.copy()
            p[idx] += step
            hi = total_loss(p, vparams)
            p[idx] -= 2 * step
            lo = total_loss(p, vparams)
            assert relerr(g_p[idx], (hi - lo) / (2 * step)) < 1e-4
        for idx in rng.choice(vparams.size, 30, replace=False):
            v = vparams.copy()
            v[idx] += step
            hi = total_loss(params, v)
            v[idx] -= 2 * step
            lo = total_loss(params, v)
            assert relerr(g_v[idx], (hi - lo) / (2 * step)) < 1e-4

    def test_non_finite_loss_skipped(self):
        policy, params, vspec, vparams, batch = _tiny_setup()
        batch = tr.PpoBatch(
            batch.obs, batch.actions, batch.log_probs,
            np.array([np.inf, 0.0, 0.0]), batch.returns,
        )
        cfg = tr.PpoConfig(epochs_per_update=1)
        rng = np.random.default_rng(0)
        p2, _, v2, _, m = tr.ppo_update(
            policy, params, nets.adam_init(params.size, 1e-4),
            vspec, vparams, nets.adam_init(vparams.size, 1e-4), batch, cfg, rng,
        )
        assert m["skipped"] >= 1.0
        assert np.array_equal(p2, params)
        assert np.array_equal(v2, vparams)


def _small_env(seed=0):
    clips = [
        mo.generate_clip("idle", 0, 4.0, spec=SPEC, cfg=CFG),
        mo.generate_clip("jab", 20, 4.0, spec=SPEC, cfg=CFG),
    ]
    return tr.TrackingEnv(clips, SPEC, CFG, rng=np.random.default_rng(seed))


class TestEnv:
    def test_rollout_determinism(self):
        clips = [mo.generate_clip("idle", 0, 4.0, spec=SPEC, cfg=CFG)]
        outs = []
        for _ in range(2):
            env = tr.TrackingEnv(clips, SPEC, CFG, rng=np.random.default_rng(9))
            policy = tr.GaussianPolicy(
                nets.MlpSpec(tr.track_obs_dim(SPEC), (16,), 8, activation="silu")
            )
            params = policy.init(np.random.default_rng(1), 0.3)
            rng = np.random.default_rng(42)
            rows = []
            for _ in range(20):
                a, _ = policy.sample(params, env.observe(), rng)
                obs, r, d, info = env.step(tr.action_to_targets(a, env.ref_base()))
                rows.append(r)
            outs.append(rows)
        assert outs[0] == outs[1]

    def test_reference_pd_feasibility_on_idle(self):
        """Reference targets alone track an idle clip above 0.8 reward."""
        clip = mo.generate_clip("idle", 0, 4.0, spec=SPEC, cfg=CFG)
        env = tr.TrackingEnv([clip], SPEC, CFG, rng=np.random.default_rng(0))
        env.clip_index = 0
        env.state = clip.frame_state(0)
        env.t = 0.0
        rewards = []
        for _ in range(120):  # 2 s
            _, r, done, info = env.step(env.ref_base())
            rewards.append(info["imitation"])
            if done:
                break
        assert np.mean(rewards) > 0.8

    def test_forced_fall_terminates(self):
        env = _small_env()
        env.state.root_pos = np.array([0.0, 0.1])
        env.state.root_vel = np.array([0.0, -3.0])
        done = False
        for _ in range(3):
            _, _, done, info = env.step(env.ref_base())
            if done:
                break
        assert done

    def test_divergence_resets(self):
        env = _small_env()
        env.state.root_pos = env.state.root_pos + np.array([5.0, 0.0])
        _, _, done, info = env.step(env.ref_base())
        assert done and info["diverged"]


class TestTraining:
    def test_smoke_and_checkpoint_roundtrip(self, tmp_path):
        clips = [mo.generate_clip("idle", 0, 3.0, spec=SPEC, cfg=CFG)]
        cfg = tr.PpoConfig(envs=2, horizon=16, updates=2, epochs_per_update=2)
        ts = tr.train_tracking(clips, cfg, tmp_path, seed=3, spec=SPEC, phys=CFG, log=False)
        policy, params = tr.load_policy(tmp_path / "pi_track.ckpt")
        assert np.array_equal(params, ts.policy_params)
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 3

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        clips = [mo.generate_clip("idle", 0, 3.0, spec=SPEC, cfg=CFG),
                 mo.generate_clip("footwork", 10, 3.0, spec=SPEC, cfg=CFG)]
        cfg2 = tr.PpoConfig(envs=2, horizon=8, updates=2, epochs_per_update=2)
        ts_full = tr.train_tracking(
            clips, cfg2, tmp_path / "full", seed=5, spec=SPEC, phys=CFG, log=False
        )
        cfg1 = tr.PpoConfig(envs=2, horizon=8, updates=1, epochs_per_update=2)
        tr.train_tracking(clips, cfg1, tmp_path / "half", seed=5, spec=SPEC, phys=CFG, log=False)
        ts_res = tr.train_tracking(
            clips, cfg2, tmp_path / "half", seed=5, spec=SPEC, phys=CFG, resume=True, log=False
        )
        assert np.array_equal(ts_full.policy_params, ts_res.policy_params)
        assert np.array_equal(ts_full.value_params, ts_res.value_params)
        full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        half_rows = (tmp_path / "half" / "metrics.csv").read_text().splitlines()
        assert full_rows[2] == half_rows[2]

    def test_first_epoch_clip_fraction_zero(self, tmp_path):
        clips = [mo.generate_clip("idle", 0, 3.0, spec=SPEC, cfg=CFG)]
        cfg = tr.PpoConfig(envs=2, horizon=8, updates=1, epochs_per_update=1)
        env_list = [
            tr.TrackingEnv(clips, SPEC, CFG, rng=np.random.default_rng(i)) for i in range(2)
        ]
        ts = tr.build_networks(tr.track_obs_dim(SPEC), 8, cfg, seed=0)
        buf = tr.collect_rollouts(
            env_list, ts.policy, ts.policy_params, ts.value_spec, ts.value_params,
            cfg.horizon, [np.random.default_rng(7), np.random.default_rng(8)],
        )
        buf.advantages, buf.returns = tr.gae(
            buf.rewards, buf.values, buf.dones, cfg.gamma, cfg.gae_lambda, buf.bootstrap
        )
        *_, m = tr.ppo_update(
            ts.policy, ts.policy_params, ts.policy_adam,
            ts.value_spec, ts.value_params, ts.value_adam,
            buf.flat(), cfg, np.random.default_rng(0),
        )
        assert m["first_clip_fraction"] == 0.0

    def test_worker_split_bit_identical(self):
        clips = [mo.generate_clip("idle", 0, 3.0, spec=SPEC, cfg=CFG),
                 mo.generate_clip("jab", 20, 3.0, spec=SPEC, cfg=CFG)]
        cfg = tr.PpoConfig(envs=4, horizon=8)
        ts = tr.build_networks(tr.track_obs_dim(SPEC), 8, cfg, seed=0)

        def collect(workers):
            envs = [
                tr.TrackingEnv(clips, SPEC, CFG, rng=np.random.default_rng(100 + i))
                for i in range(4)
            ]
            rngs = [np.random.default_rng(200 + i) for i in range(4)]
            return tr.collect_rollouts(
                envs, ts.policy, ts.policy_params, ts.value_spec, ts.value_params,
                cfg.horizon, rngs, workers=workers,
            )

        a = collect(1)
        b = collect(2)
        assert np.array_equal(a.obs, b.obs)
        assert np.array_equal(a.rewards, b.rewards)
        assert np.array_equal(a.log_probs, b.log_probs)
