"""Goal-conditioned motion-tracking expert trained with PPO.

The policy observes localized proprioception plus next-frame reference
discrepancies and outputs residual PD-target offsets around the reference
pose (tanh-squashed to +-pi/2).  Reward is exponential pose/velocity
matching plus an energy penalty.  Episodes use reference-state
initialization and reset on falls, clip ends, or tracking divergence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import motion as mo
from . import nets
from . import physics as ph
from .seeding import seed_for

ACTION_SCALE = math.pi / 2.0

IMITATION_WEIGHTS = (0.5, 0.3, 0.1, 0.1)  # position, rotation, lin vel, ang vel
IMITATION_COEFFS = (100.0, 10.0, 0.1, 0.1)
ENERGY_COEFF = 5e-4


@dataclass
class PpoConfig:
    # lr 5e-5 suits 32k-sample batches; at this batch scale it cannot
    # traverse parameter space within a 2000-update budget
    lr: float = 3e-4
    gamma: float = 0.99
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    envs: int = 32
    horizon: int = 64
    batch_size: int = 4096
    epochs_per_update: int = 4
    entropy_coef: float = 0.0005
    value_coef: float = 1.0
    std_init: float = 0.3
    # exploration noise: "linear" anneals the action std from std_init to
    # std_final over std_anneal_updates; "learned" keeps the log-std a free
    # parameter (it fails to anneal at desk scale, see the training notes)
    std_schedule: str = "linear"
    std_final: float = 0.05
    std_anneal_updates: int = 600
    learn_std: bool = True
    updates: int = 2000
    e_div: float = 0.5  # mean site error (m) that counts as divergence
    # the light limbs make exploration-noise torques explode the energy
    # term to 1e5-scale, drowning the <=1 imitation signal; the env clamps
    # the penalty's reward contribution (the formula itself is untouched)
    energy_floor: float = -0.05
    pi_hidden: tuple[int, ...] = (256, 256, 128)
    critic_hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if self.std_schedule not in ("linear", "learned"):
            raise ValueError("std_schedule must be 'linear' or 'learned'")

    def sigma_at(self, update: int) -> float:
        frac = min(1.0, update / max(1, self.std_anneal_updates))
        return self.std_init + frac * (self.std_final - self.std_init)


def proprio_obs(state: ph.SimState, spec: ph.CharacterSpec) -> np.ndarray:
    """Localized proprioception: root height, facing sin/cos, wrapped joint
    angles, root velocity in the root frame, angular rates."""
    return np.concatenate(
        [
            [state.root_pos[1], math.sin(state.root_angle), math.cos(state.root_angle)],
            state.wrapped_joints(),
            ph.local_vec(state, state.root_vel),
            [state.root_ang_vel],
            state.joint_vels,
        ]
    )


def proprio_dim(spec: ph.CharacterSpec) -> int:
    return 3 + 2 * spec.n_joints + 3


def track_obs(state: ph.SimState, spec: ph.CharacterSpec, clip: mo.MotionClip, t: float) -> np.ndarray:
    return np.concatenate([proprio_obs(state, spec), mo.goal_state(clip, t, state).flat()])


def track_obs_dim(spec: ph.CharacterSpec) -> int:
    return proprio_dim(spec) + mo.Goal.dim(spec.n_joints)


def _rot_vector(state: ph.SimState) -> np.ndarray:
    return np.concatenate([[state.root_angle], state.joint_angles])


def _ang_vel_vector(state: ph.SimState) -> np.ndarray:
    return np.concatenate([[state.root_ang_vel], state.joint_vels])


def imitation_reward(
    state: ph.SimState,
    ref: ph.SimState,
    spec: ph.CharacterSpec,
    weights: tuple[float, float, float, float] = IMITATION_WEIGHTS,
) -> tuple[float, float]:
    """Exponential matching of site positions, rotations, and velocities.

    Returns (reward, mean site position error); the error doubles as the
    divergence signal for episode resets.
    """
    pos_s, vel_s = ph.sites_and_velocities(state, spec)
    pos_r, vel_r = ph.sites_and_velocities(ref, spec)
    e_p = float(np.linalg.norm(pos_s - pos_r, axis=1).mean())
    e_r = float(np.abs(ph.wrap_angle(_rot_vector(state) - _rot_vector(ref))).mean())
    e_v = float(np.linalg.norm(vel_s - vel_r, axis=1).mean())
    e_w = float(np.abs(_ang_vel_vector(state) - _ang_vel_vector(ref)).mean())
    w = weights
    c = IMITATION_COEFFS
    r = (
        w[0] * math.exp(-c[0] * e_p)
        + w[1] * math.exp(-c[1] * e_r)
        + w[2] * math.exp(-c[2] * e_v)
        + w[3] * math.exp(-c[3] * e_w)
    )
    return r, e_p


def energy_penalty(torques: np.ndarray, joint_vels: np.ndarray) -> float:
    """-5e-4 * sum (tau_j * omega_j)^2."""
    torques = np.asarray(torques, dtype=np.float64)
    joint_vels = np.asarray(joint_vels, dtype=np.float64)
    if torques.shape != joint_vels.shape:
        raise ValueError("torques and joint_vels must have equal lengths")
    return float(-ENERGY_COEFF * np.sum((torques * joint_vels) ** 2))


# --- gaussian policy ----------------------------------------------------

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal-Gaussian policy: MLP mean plus a learned state-independent
    log-std stored as the trailing block of the parameter vector."""

    spec: nets.MlpSpec

    @property
    def n_params(self) -> int:
        return self.spec.param_count() + self.spec.output_dim

    def init(self, rng: np.random.Generator, std_init: float) -> np.ndarray:
        return np.concatenate(
            [nets.init_params(self.spec, rng), np.full(self.spec.output_dim, math.log(std_init))]
        )

    def split(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.spec.param_count()
        return params[:n], params[n:]

    def mean(self, params: np.ndarray, obs: np.ndarray) -> np.ndarray:
        mlp, _ = self.split(params)
        return nets.mlp_forward(self.spec, mlp, obs)

    def sample(
        self, params: np.ndarray, obs: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, float]:
        mlp, log_std = self.split(params)
        mu = nets.mlp_forward(self.spec, mlp, obs)
        sigma = np.exp(log_std)
        act = mu + sigma * rng.standard_normal(mu.size)
        return act, self.log_prob_single(mu, log_std, act)

    @staticmethod
    def log_prob_single(mu: np.ndarray, log_std: np.ndarray, act: np.ndarray) -> float:
        z = (act - mu) / np.exp(log_std)
        return float(-0.5 * np.sum(z * z) - np.sum(log_std) - 0.5 * mu.size * LOG_2PI)

    @staticmethod
    def log_prob_batch(mu: np.ndarray, log_std: np.ndarray, act: np.ndarray) -> np.ndarray:
        z = (act - mu) / np.exp(log_std)
        return -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * mu.shape[1] * LOG_2PI

    @staticmethod
    def entropy(log_std: np.ndarray) -> float:
        return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + LOG_2PI))


def action_to_targets(action: np.ndarray, base_pose: np.ndarray) -> np.ndarray:
    """Residual PD targets: reference pose plus a tanh-squashed offset."""
    return base_pose + ACTION_SCALE * np.tanh(action)


# --- GAE and PPO --------------------------------------------------------


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    bootstrap: np.ndarray | float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over (T,) or (T, E) arrays.

    ``bootstrap`` is the value estimate for the state after the last step
    (used when the trajectory is truncated rather than terminal).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
    t_len, n_env = rewards.shape
    boot = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), (n_env,))
    adv = np.zeros_like(rewards)
    next_adv = np.zeros(n_env)
    next_val = boot.copy()
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_val * not_done - values[t]
        next_adv = delta + gamma * lam * not_done * next_adv
        adv[t] = next_adv
        next_val = values[t]
    returns = adv + values
    if squeeze:
        return adv[:, 0], returns[:, 0]
    return adv, returns


@dataclass
class PpoBatch:
    obs: np.ndarray  # (N, obs_dim)
    actions: np.ndarray  # (N, act_dim)
    log_probs: np.ndarray  # (N,)
    advantages: np.ndarray  # (N,) normalized by ppo_update
    returns: np.ndarray  # (N,)


def ppo_loss_and_grads(
    policy: GaussianPolicy,
    policy_params: np.ndarray,
    value_spec: nets.MlpSpec,
    value_params: np.ndarray,
    batch: PpoBatch,
    cfg: PpoConfig,
):
    """Clipped-surrogate PPO loss with analytic gradients.

    Returns (metrics, grad_policy, grad_value).
    """
    n = batch.obs.shape[0]
    mlp, log_std = policy.split(policy_params)
    mu = nets.forward_batch(policy.spec, mlp, batch.obs)
    sigma = np.exp(log_std)
    z = (batch.actions - mu) / sigma
    logp = -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * mu.shape[1] * LOG_2PI
    ratio = np.exp(logp - batch.log_probs)
    adv = batch.advantages
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    obj = np.minimum(s1, s2)
    policy_loss = -float(obj.mean())
    entropy = policy.entropy(log_std)
    clip_frac = float((np.abs(ratio - 1.0) > cfg.clip_eps).mean())

    # gradient flows only through the unclipped branch where it is active
    active = (s1 <= s2).astype(np.float64)
    inside = (np.abs(ratio - 1.0) <= cfg.clip_eps).astype(np.float64)
    gate = np.maximum(active, inside)
    dobj_dlogp = gate * ratio * adv
    dpl_dlogp = -dobj_dlogp / n  # d(policy_loss)/d(logp_i)

    dlogp_dmu = z / sigma  # (N, d)
    g_mu = dpl_dlogp[:, None] * dlogp_dmu
    g_mlp, _ = nets.backward_batch(policy.spec, mlp, batch.obs, g_mu)
    dlogp_dls = z * z - 1.0  # (N, d)
    g_log_std = (dpl_dlogp[:, None] * dlogp_dls).sum(axis=0)
    if cfg.learn_std:
        g_log_std -= cfg.entropy_coef  # entropy bonus: dH/dlog_std = 1
    else:
        g_log_std[:] = 0.0
    grad_policy = np.concatenate([g_mlp, g_log_std])

    v = nets.forward_batch(value_spec, value_params, batch.obs)[:, 0]
    verr = v - batch.returns
    value_loss = float((verr**2).mean())
    g_v = (2.0 * cfg.value_coef / n) * verr[:, None]
    grad_value, _ = nets.backward_batch(value_spec, value_params, batch.obs, g_v)

    total_loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    metrics = {
        "loss": total_loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": clip_frac,
    }
    return metrics, grad_policy, grad_value


def ppo_update(
    policy: GaussianPolicy,
    policy_params: np.ndarray,
    policy_adam: nets.AdamState,
    value_spec: nets.MlpSpec,
    value_params: np.ndarray,
    value_adam: nets.AdamState,
    batch: PpoBatch,
    cfg: PpoConfig,
    rng: np.random.Generator,
):
    """Multi-epoch minibatched PPO step; advantages are normalized here.

    Returns (policy_params, policy_adam, value_params, value_adam, metrics).
    Non-finite losses skip the offending minibatch and are flagged.
    """
    n = batch.obs.shape[0]
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    batch = PpoBatch(batch.obs, batch.actions, batch.log_probs, adv, batch.returns)
    metrics: dict[str, float] = {"skipped": 0.0}
    mb = min(cfg.batch_size, n)
    first = True
    for _epoch in range(cfg.epochs_per_update):
        order = rng.permutation(n) if mb < n else np.arange(n)
        for lo in range(0, n, mb):
            idx = order[lo : lo + mb]
            sub = PpoBatch(
                batch.obs[idx], batch.actions[idx], batch.log_probs[idx],
                batch.advantages[idx], batch.returns[idx],
            )
            m, g_p, g_v = ppo_loss_and_grads(
                policy, policy_params, value_spec, value_params, sub, cfg
            )
            if not math.isfinite(m["loss"]):
                metrics["skipped"] += 1.0
                continue
            policy_params, policy_adam = nets.adam_step(policy_params, g_p, policy_adam)
            value_params, value_adam = nets.adam_step(value_params, g_v, value_adam)
            if first:
                metrics.update({f"first_{k}": v for k, v in m.items()})
                first = False
            metrics.update(m)
    return policy_params, policy_adam, value_params, value_adam, metrics


# --- environment --------------------------------------------------------


class TrackingEnv:
    """One simulated character following one reference clip at a time."""

    def __init__(
        self,
        clips: list[mo.MotionClip],
        spec: ph.CharacterSpec,
        phys: ph.PhysicsConfig,
        e_div: float = 0.5,
        rng: np.random.Generator | None = None,
        energy_floor: float = -5.0,
    ):
        self.clips = clips
        self.spec = spec
        self.phys = phys
        self.e_div = e_div
        self.energy_floor = energy_floor
        self.rng = rng or np.random.default_rng(0)
        self.clip_index = 0
        self.state: ph.SimState | None = None
        self.t = 0.0
        self.reset()

    @property
    def clip(self) -> mo.MotionClip:
        return self.clips[self.clip_index]

    def reset(self) -> np.ndarray:
        """Reference-state initialization at a random clip frame."""
        self.clip_index = int(self.rng.integers(len(self.clips)))
        frame = int(self.rng.integers(self.clip.n_frames - 1))
        self.state = self.clip.frame_state(frame)
        self.t = frame / self.clip.frame_rate
        self.state.time = self.t
        return self.observe()

    def observe(self) -> np.ndarray:
        return track_obs(self.state, self.spec, self.clip, self.t)

    def ref_base(self) -> np.ndarray:
        """Next-frame reference joint pose: the residual action base."""
        return self.clip.joints[self.clip.goal_frame_index(self.t)]

    def step(self, targets: np.ndarray):
        """Advance one control step with absolute PD targets.

        Returns (obs, reward, done, info).
        """
        tau = ph.pd_torque(self.state, targets, self.spec)
        energy = max(energy_penalty(tau, self.state.joint_vels), self.energy_floor)
        next_state, report = ph.step_world(
            [self.state], [self.spec], None, self.phys.dt, self.phys, pd_targets=[targets]
        )
        self.state = next_state[0]
        self.t += self.phys.dt

        rp, ra, jq, rv, rw, jv = self.clip.sample(self.t)
        ref = ph.SimState(rp, ra, jq, rv, rw, jv)
        imit, e_p = imitation_reward(self.state, ref, self.spec)
        reward = imit + energy

        fell = ph.detect_fall(self.state, self.spec, self.phys)
        diverged = (not self.state.valid) or e_p > self.e_div
        clip_end = self.t + self.phys.dt > self.clip.duration - 1.0 / self.clip.frame_rate
        done = fell or diverged or clip_end
        info = {
            "imitation": imit,
            "energy": energy,
            "site_error": e_p,
            "family": self.clip.family,
            "fell": fell,
            "diverged": diverged,
            "clip_end": clip_end,
        }
        obs = self.observe() if not done else self.reset()
        return obs, reward, done, info

    # resume support: the env state is part of the training state
    def snapshot(self) -> dict:
        s = self.state
        vals = np.concatenate(
            [
                s.root_pos, [s.root_angle], s.joint_angles,
                s.root_vel, [s.root_ang_vel], s.joint_vels,
                [self.t, float(self.clip_index)],
                s.anchor_x if s.anchor_x is not None else np.zeros(len(self.spec.sites)),
                (s.anchor_on if s.anchor_on is not None else np.zeros(len(self.spec.sites))).astype(float),
            ]
        )
        return {"values": vals}

    def restore(self, snap: dict) -> None:
        v = snap["values"]
        nj = self.spec.n_joints
        ns = len(self.spec.sites)
        i = 0
        root_pos = v[i : i + 2]; i += 2
        root_angle = v[i]; i += 1
        joints = v[i : i + nj]; i += nj
        root_vel = v[i : i + 2]; i += 2
        root_ang_vel = v[i]; i += 1
        joint_vels = v[i : i + nj]; i += nj
        self.t = v[i]; i += 1
        self.clip_index = int(v[i]); i += 1
        anchor_x = v[i : i + ns]; i += ns
        anchor_on = v[i : i + ns].astype(bool); i += ns
        self.state = ph.SimState(
            root_pos.copy(), float(root_angle), joints.copy(), root_vel.copy(),
            float(root_ang_vel), joint_vels.copy(), time=self.t,
            anchor_x=anchor_x.copy(), anchor_on=anchor_on,
        )


@dataclass
class RolloutBuffer:
    """Per-step arrays shaped (T, E, ...); advantages filled by gae()."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    imitation: np.ndarray
    idle_footwork: np.ndarray  # mask: step belongs to an idle/footwork clip
    bootstrap: np.ndarray  # (E,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self) -> PpoBatch:
        if self.advantages is None:
            raise ValueError("run gae() before flattening the buffer")
        t, e = self.rewards.shape
        return PpoBatch(
            self.obs.reshape(t * e, -1),
            self.actions.reshape(t * e, -1),
            self.log_probs.reshape(t * e),
            self.advantages.reshape(t * e),
            self.returns.reshape(t * e),
        )


def _collect_chunk(
    envs: list[TrackingEnv],
    policy: GaussianPolicy,
    policy_params: np.ndarray,
    value_spec: nets.MlpSpec,
    value_params: np.ndarray,
    horizon: int,
    rngs: list[np.random.Generator],
):
    n_env = len(envs)
    obs_dim = envs[0].observe().size
    act_dim = policy.spec.output_dim
    obs = np.zeros((horizon, n_env, obs_dim))
    actions = np.zeros((horizon, n_env, act_dim))
    rewards = np.zeros((horizon, n_env))
    log_probs = np.zeros((horizon, n_env))
    dones = np.zeros((horizon, n_env))
    imitation = np.zeros((horizon, n_env))
    idle_fw = np.zeros((horizon, n_env))
    cur = [env.observe() for env in envs]
    for t in range(horizon):
        for e, env in enumerate(envs):
            o = cur[e]
            a, lp = policy.sample(policy_params, o, rngs[e])
            targets = action_to_targets(a, env.ref_base())
            o2, r, d, info = env.step(targets)
            obs[t, e] = o
            actions[t, e] = a
            rewards[t, e] = r
            log_probs[t, e] = lp
            dones[t, e] = float(d)
            imitation[t, e] = info["imitation"]
            idle_fw[t, e] = float(info["family"] in ("idle", "footwork"))
            cur[e] = o2
    # batched value evaluation per env keeps results worker-count invariant
    values = np.zeros((horizon, n_env))
    bootstrap = np.zeros(n_env)
    for e in range(n_env):
        values[:, e] = nets.forward_batch(value_spec, value_params, obs[:, e])[:, 0]
        bootstrap[e] = nets.forward_batch(value_spec, value_params, cur[e][None, :])[0, 0]
    return RolloutBuffer(
        obs, actions, rewards, values, log_probs, dones, imitation, idle_fw, bootstrap
    )


def collect_rollouts(
    envs: list[TrackingEnv],
    policy: GaussianPolicy,
    policy_params: np.ndarray,
    value_spec: nets.MlpSpec,
    value_params: np.ndarray,
    horizon: int,
    rngs: list[np.random.Generator],
    workers: int = 1,
) -> RolloutBuffer:
    """Collect fixed-horizon rollouts from every environment.

    Workers split whole environments and results are merged in env-index
    order, so the buffer is bit-identical for any worker count.
    """
    if workers <= 1 or len(envs) < 2:
        return _collect_chunk(envs, policy, policy_params, value_spec, value_params, horizon, rngs)
    import multiprocessing as mp

    chunks = np.array_split(np.arange(len(envs)), min(workers, len(envs)))
    args = [
        ([envs[i] for i in c], policy, policy_params, value_spec, value_params, horizon,
         [rngs[i] for i in c])
        for c in chunks if len(c)
    ]
    with mp.get_context("fork").Pool(len(args)) as pool:
        results = pool.starmap(_collect_chunk_sync, args)
    # merge buffers and push the advanced env states back into this process
    bufs = []
    for (buf, snaps), c in zip(results, chunks):
        bufs.append(buf)
        for i, snap in zip(c, snaps):
            envs[i].restore(snap)
            envs[i].clip_index = int(snap["clip_index"])
            envs[i].rng = snap["rng"]
    return RolloutBuffer(
        np.concatenate([b.obs for b in bufs], axis=1),
        np.concatenate([b.actions for b in bufs], axis=1),
        np.concatenate([b.rewards for b in bufs], axis=1),
        np.concatenate([b.values for b in bufs], axis=1),
        np.concatenate([b.log_probs for b in bufs], axis=1),
        np.concatenate([b.dones for b in bufs], axis=1),
        np.concatenate([b.imitation for b in bufs], axis=1),
        np.concatenate([b.idle_footwork for b in bufs], axis=1),
        np.concatenate([b.bootstrap for b in bufs]),
    )


def _collect_chunk_sync(envs, policy, policy_params, value_spec, value_params, horizon, rngs):
    buf = _collect_chunk(envs, policy, policy_params, value_spec, value_params, horizon, rngs)
    snaps = []
    for env in envs:
        snap = env.snapshot()
        snap["clip_index"] = env.clip_index
        snap["rng"] = env.rng
        snaps.append(snap)
    return buf, snaps


# --- training loop ------------------------------------------------------


@dataclass
class TrainState:
    policy: GaussianPolicy
    policy_params: np.ndarray
    policy_adam: nets.AdamState
    value_spec: nets.MlpSpec
    value_params: np.ndarray
    value_adam: nets.AdamState
    update: int = 0


def build_networks(obs_dim: int, act_dim: int, cfg: PpoConfig, seed: int) -> TrainState:
    policy = GaussianPolicy(
        nets.MlpSpec(obs_dim, tuple(cfg.pi_hidden), act_dim, activation="silu")
    )
    value_spec = nets.MlpSpec(obs_dim, tuple(cfg.critic_hidden), 1, activation="silu")
    policy_params = policy.init(np.random.default_rng(seed_for(seed, "policy-init")), cfg.std_init)
    value_params = nets.init_params(value_spec, np.random.default_rng(seed_for(seed, "value-init")))
    return TrainState(
        policy=policy,
        policy_params=policy_params,
        policy_adam=nets.adam_init(policy_params.size, cfg.lr),
        value_spec=value_spec,
        value_params=value_params,
        value_adam=nets.adam_init(value_params.size, cfg.lr),
    )


def save_train_state(out: Path, ts: TrainState, envs: list[TrackingEnv]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    mlp, _ = ts.policy.split(ts.policy_params)
    nets.save_checkpoint(
        out / "pi_track.ckpt", "pi_track", ts.policy.spec, ts.policy_params,
        extra=ts.policy.spec.output_dim,
    )
    nets.save_checkpoint(out / "critic.ckpt", "critic", ts.value_spec, ts.value_params)
    nets.adam_state_save(out / "adam_policy.txt", ts.policy_adam)
    nets.adam_state_save(out / "adam_value.txt", ts.value_adam)
    lines = [f"update={ts.update}", f"envs={len(envs)}"]
    for env in envs:
        lines.append(" ".join(repr(float(x)) for x in env.snapshot()["values"]))
    (out / "envs.txt").write_text("\n".join(lines) + "\n")


def load_policy(path: str | Path) -> tuple[GaussianPolicy, np.ndarray]:
    name, spec, values, extra = nets.load_checkpoint(path)
    if extra != spec.output_dim:
        raise ValueError(f"{path}: expected a policy checkpoint with log-std tail")
    return GaussianPolicy(spec), values


def resume_train_state(out: Path, cfg: PpoConfig, envs: list[TrackingEnv]) -> TrainState:
    policy, policy_params = load_policy(out / "pi_track.ckpt")
    _, value_spec, value_params, _ = nets.load_checkpoint(out / "critic.ckpt")
    lines = (out / "envs.txt").read_text().splitlines()
    update = int(lines[0].split("=")[1])
    for env, line in zip(envs, lines[2:]):
        env.restore({"values": np.array([float(x) for x in line.split()])})
    return TrainState(
        policy=policy,
        policy_params=policy_params,
        policy_adam=nets.adam_state_load(out / "adam_policy.txt"),
        value_spec=value_spec,
        value_params=value_params,
        value_adam=nets.adam_state_load(out / "adam_value.txt"),
        update=update,
    )


METRIC_FIELDS = (
    "update", "reward", "imitation", "imitation_idle_footwork", "energy",
    "episode_steps", "policy_loss", "value_loss", "entropy", "clip_fraction", "skipped",
)


def train_tracking(
    clips: list[mo.MotionClip],
    cfg: PpoConfig,
    out_dir: str | Path,
    seed: int,
    spec: ph.CharacterSpec | None = None,
    phys: ph.PhysicsConfig | None = None,
    resume: bool = False,
    workers: int = 1,
    log: bool = True,
) -> TrainState:
    """Stage 1: PPO training of the tracking expert on the clip library."""
    spec = spec or ph.default_character()
    phys = phys or ph.default_config(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    envs = [
        TrackingEnv(
            clips, spec, phys, cfg.e_div,
            np.random.default_rng(seed_for(seed, f"env-init-{i}")),
            energy_floor=cfg.energy_floor,
        )
        for i in range(cfg.envs)
    ]
    obs_dim = track_obs_dim(spec)
    if resume and (out / "envs.txt").exists():
        ts = resume_train_state(out, cfg, envs)
    else:
        ts = build_networks(obs_dim, spec.n_joints, cfg, seed)

    metrics_path = out / "metrics.csv"
    if not resume or not metrics_path.exists():
        metrics_path.write_text(",".join(METRIC_FIELDS) + "\n")

    act_dim = spec.n_joints
    for u in range(ts.update, cfg.updates):
        if cfg.std_schedule == "linear":
            ts.policy_params[-act_dim:] = math.log(cfg.sigma_at(u))
            cfg.learn_std = False
        for i, env in enumerate(envs):
            env.rng = np.random.default_rng(seed_for(seed, f"update-{u}-env-{i}"))
        buf = collect_rollouts(
            envs, ts.policy, ts.policy_params, ts.value_spec, ts.value_params,
            cfg.horizon, [env.rng for env in envs], workers=workers,
        )
        buf.advantages, buf.returns = gae(
            buf.rewards, buf.values, buf.dones, cfg.gamma, cfg.gae_lambda, buf.bootstrap
        )
        upd_rng = np.random.default_rng(seed_for(seed, f"update-{u}-shuffle"))
        (
            ts.policy_params, ts.policy_adam, ts.value_params, ts.value_adam, m,
        ) = ppo_update(
            ts.policy, ts.policy_params, ts.policy_adam,
            ts.value_spec, ts.value_params, ts.value_adam,
            buf.flat(), cfg, upd_rng,
        )
        ts.update = u + 1
        ifw = buf.idle_footwork > 0.0
        ep_steps = buf.rewards.size / max(buf.dones.sum(), 1.0)
        row = {
            "update": u,
            "reward": buf.rewards.mean(),
            "imitation": buf.imitation.mean(),
            "imitation_idle_footwork": buf.imitation[ifw].mean() if ifw.any() else 0.0,
            "energy": (buf.rewards - buf.imitation).mean(),
            "episode_steps": ep_steps,
            "policy_loss": m.get("policy_loss", math.nan),
            "value_loss": m.get("value_loss", math.nan),
            "entropy": m.get("entropy", math.nan),
            "clip_fraction": m.get("clip_fraction", math.nan),
            "skipped": m.get("skipped", 0.0),
        }
        with metrics_path.open("a") as f:
            f.write(",".join(repr(float(row[k])) for k in METRIC_FIELDS) + "\n")
        if log and (u % 25 == 0 or u == cfg.updates - 1):
            print(
                f"[track] update {u} reward {row['reward']:.3f} "
                f"imitation {row['imitation']:.3f} idle+fw {row['imitation_idle_footwork']:.3f} "
                f"ep_steps {ep_steps:.1f}",
                flush=True,
            )
    save_train_state(out, ts, envs)
    return ts


def expert_action(
    policy: GaussianPolicy,
    policy_params: np.ndarray,
    state: ph.SimState,
    spec: ph.CharacterSpec,
    clip: mo.MotionClip,
    t: float,
) -> np.ndarray:
    """Deterministic expert output as an absolute PD target vector."""
    obs = track_obs(state, spec, clip, t)
    raw = policy.mean(policy_params, obs)
    base = clip.joints[clip.goal_frame_index(t)]
    return action_to_targets(raw, base)
