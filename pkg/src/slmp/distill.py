"""Distillation of the tracking expert into a unit-sphere latent prior.

Three networks train together: a goal encoder that maps goals onto the
sphere, a latent-conditioned prior policy that outputs absolute PD
targets, and a discriminator that scores state-action pairs.  The prior
and encoder minimize imitation distillation plus a weighted consistency
term that pulls random-latent actions toward the expert action; the
discriminator trains separately on prior-vs-random action pairs.  A
two-phase switch enables the discriminator-based weight only after the
distance-weighted phase plateaus.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import motion as mo
from . import nets
from . import physics as ph
from . import tracking as tr
from .seeding import seed_for

ABLATION_MODES = ("distill", "gan", "nsc", "slmp")


class DegenerateEncodingError(ValueError):
    pass


@dataclass
class SlmpConfig:
    lambda_distill: float = 1.0
    lambda_dlsc: float = 1.0
    lambda_disc: float = 1e-4
    beta: float = 0.1
    lr: float = 5e-5
    disc_lr: float = 5e-5
    latent_dim: int = 8
    window: int = 200  # plateau window (updates) for the w_c switch
    plateau_tol: float = 0.01
    updates: int = 6000
    batch: int = 1024
    fresh_per_update: int = 256
    capacity: int = 16384
    envs: int = 16
    e_div: float = 0.5
    mode: str = "slmp"
    encoder_hidden: tuple[int, ...] = (128, 64)
    pi_phi_hidden: tuple[int, ...] = (256, 256, 128)
    disc_hidden: tuple[int, ...] = (256, 128)

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if min(self.lambda_distill, self.lambda_dlsc, self.lambda_disc) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"mode must be one of {ABLATION_MODES}")


def normalize_rows(y: np.ndarray, min_norm: float = 1e-9) -> np.ndarray:
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    if (norms < min_norm).any():
        raise DegenerateEncodingError("encoder output norm below 1e-9")
    return y / norms


def encode_goal(
    spec: nets.MlpSpec, params: np.ndarray, goal: np.ndarray
) -> np.ndarray:
    """z1 = E(g) projected onto the unit sphere."""
    goal = np.asarray(goal, dtype=np.float64)
    single = goal.ndim == 1
    y = nets.forward_batch(spec, params, goal[None, :] if single else goal)
    z = normalize_rows(y)
    return z[0] if single else z


def sample_sphere(d: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform samples on S^{d-1} via normalized Gaussian noise."""
    if d < 2:
        raise ValueError("latent dimension must be at least 2")
    count = 1 if n is None else n
    out = np.empty((count, d))
    for i in range(count):
        while True:
            eps = rng.standard_normal(d)
            norm = np.linalg.norm(eps)
            if norm >= 1e-9:
                out[i] = eps / norm
                break
    return out[0] if n is None else out


def prior_action(
    spec: nets.MlpSpec, params: np.ndarray, proprio: np.ndarray, z: np.ndarray
) -> np.ndarray:
    """Deterministic PD-target action of the prior for (state, latent)."""
    proprio = np.asarray(proprio, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if proprio.ndim == 1:
        return nets.mlp_forward(spec, params, np.concatenate([proprio, z]))
    return nets.forward_batch(spec, params, np.concatenate([proprio, z], axis=1))


def distill_loss(a1: np.ndarray, a_star: np.ndarray) -> float:
    """Mean squared action error of the encoded-latent branch."""
    a1 = np.atleast_2d(a1)
    a_star = np.atleast_2d(a_star)
    return float(((a1 - a_star) ** 2).sum(axis=1).mean())


def disc_forward(
    spec: nets.MlpSpec, params: np.ndarray, proprio: np.ndarray, action: np.ndarray
) -> np.ndarray:
    """Raw (unbounded) discriminator score; P(expert) = sigmoid(score)."""
    x = np.concatenate([np.atleast_2d(proprio), np.atleast_2d(action)], axis=1)
    return nets.forward_batch(spec, params, x)[:, 0]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def disc_loss(score_pos: np.ndarray, score_neg: np.ndarray) -> float:
    """Binary cross-entropy through the sigmoid of raw scores."""
    return float((_softplus(-score_pos) + _softplus(score_neg)).mean())


def dlsc_weights(
    z1: np.ndarray, z2: np.ndarray, score2: np.ndarray | float, beta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Neighborhood weight w_d = exp(-beta*||z2-z1||) and semantic weight
    w_c = 1 + |min(0, score)|; both are treated as constants downstream."""
    z1 = np.atleast_2d(z1)
    z2 = np.atleast_2d(z2)
    d12 = np.linalg.norm(z2 - z1, axis=1)
    w_d = np.exp(-beta * d12)
    s = np.atleast_1d(np.asarray(score2, dtype=np.float64))
    w_c = 1.0 + np.abs(np.minimum(0.0, s))
    return w_d, w_c


def dlsc_loss(
    w_d: np.ndarray, w_c: np.ndarray, a2: np.ndarray, a_star: np.ndarray
) -> float:
    """Weighted consistency of random-latent actions with the expert."""
    a2 = np.atleast_2d(a2)
    a_star = np.atleast_2d(a_star)
    err = ((a2 - a_star) ** 2).sum(axis=1)
    return float((np.atleast_1d(w_d) * np.atleast_1d(w_c) * err).mean())


@dataclass
class Phase:
    """Latched two-phase switch for the semantic weight."""

    use_wc: bool = False
    updates_completed: int = 0
    window: int = 200
    plateau_tol: float = 0.01
    history: deque = field(default_factory=deque)


def phase_scheduler(phase: Phase, new_loss: float) -> Phase:
    """Latch use_wc once the loss improves < plateau_tol per window.

    Compares the mean of the last W losses against the mean of the W
    before them; the switch happens at most once and never reverts.
    """
    phase.updates_completed += 1
    if phase.use_wc:
        return phase
    phase.history.append(float(new_loss))
    w = phase.window
    if len(phase.history) > 2 * w:
        phase.history.popleft()
    if len(phase.history) >= 2 * w:
        hist = list(phase.history)
        prev = sum(hist[:w]) / w
        cur = sum(hist[w:]) / w
        if prev <= 0.0 or (prev - cur) < phase.plateau_tol * abs(prev):
            phase.use_wc = True
    return phase


@dataclass
class DistillNets:
    enc_spec: nets.MlpSpec
    enc_params: np.ndarray
    enc_adam: nets.AdamState
    phi_spec: nets.MlpSpec
    phi_params: np.ndarray
    phi_adam: nets.AdamState
    disc_spec: nets.MlpSpec
    disc_params: np.ndarray
    disc_adam: nets.AdamState


def build_distill_nets(
    goal_dim: int, proprio_dim: int, act_dim: int, cfg: SlmpConfig, seed: int
) -> DistillNets:
    enc_spec = nets.MlpSpec(goal_dim, tuple(cfg.encoder_hidden), cfg.latent_dim, activation="relu")
    phi_spec = nets.MlpSpec(
        proprio_dim + cfg.latent_dim, tuple(cfg.pi_phi_hidden), act_dim, activation="silu"
    )
    disc_spec = nets.MlpSpec(proprio_dim + act_dim, tuple(cfg.disc_hidden), 1, activation="relu")
    enc_params = nets.init_params(enc_spec, np.random.default_rng(seed_for(seed, "enc-init")))
    phi_params = nets.init_params(phi_spec, np.random.default_rng(seed_for(seed, "phi-init")))
    disc_params = nets.init_params(disc_spec, np.random.default_rng(seed_for(seed, "disc-init")))
    return DistillNets(
        enc_spec, enc_params, nets.adam_init(enc_params.size, cfg.lr),
        phi_spec, phi_params, nets.adam_init(phi_params.size, cfg.lr),
        disc_spec, disc_params, nets.adam_init(disc_params.size, cfg.disc_lr),
    )


@dataclass
class DistillBatch:
    """Samples for one update: states, goals, frozen-expert actions, and a
    random sphere latent paired with each encoded one."""

    proprio: np.ndarray  # (n, proprio_dim)
    goals: np.ndarray  # (n, goal_dim)
    a_star: np.ndarray  # (n, act_dim)
    z2: np.ndarray  # (n, latent_dim)


def slmp_update(
    batch: DistillBatch, n: DistillNets, cfg: SlmpConfig, phase: Phase
) -> dict[str, float]:
    """One optimization step of (prior, encoder) and, when gated, the
    discriminator.  Mutates the parameter arrays inside ``n``.

    Ablation gating: 'distill' uses only the imitation term; 'gan'
    replaces the consistency term with a generator log-score term and
    trains the discriminator every update; 'nsc' drops the semantic
    weight and the discriminator entirely; 'slmp' is the full objective
    with the two-phase semantic-weight switch.
    """
    count = batch.proprio.shape[0]
    y = nets.forward_batch(n.enc_spec, n.enc_params, batch.goals)
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    if (norms < 1e-9).any():
        raise DegenerateEncodingError("encoder output norm below 1e-9")
    z1 = y / norms
    x1 = np.concatenate([batch.proprio, z1], axis=1)
    x2 = np.concatenate([batch.proprio, batch.z2], axis=1)
    a1 = nets.forward_batch(n.phi_spec, n.phi_params, x1)
    a2 = nets.forward_batch(n.phi_spec, n.phi_params, x2)

    l_distill = distill_loss(a1, batch.a_star)
    metrics = {
        "l_distill": l_distill,
        "l_dlsc": 0.0,
        "l_disc": 0.0,
        "w_d": 0.0,
        "w_c": 1.0,
        "use_wc": float(phase.use_wc),
    }

    g_a1 = (2.0 * cfg.lambda_distill / count) * (a1 - batch.a_star)
    g_a2 = np.zeros_like(a2)
    train_disc = False

    if cfg.mode in ("nsc", "slmp"):
        score2 = disc_forward(n.disc_spec, n.disc_params, batch.proprio, a2)
        use_wc = cfg.mode == "slmp" and phase.use_wc
        w_d, w_c = dlsc_weights(z1, batch.z2, score2, cfg.beta)
        if not use_wc:
            w_c = np.ones_like(w_c)
        l_dlsc = dlsc_loss(w_d, w_c, a2, batch.a_star)
        metrics["l_dlsc"] = l_dlsc
        metrics["w_d"] = float(w_d.mean())
        metrics["w_c"] = float(w_c.mean())
        # weights are detached: gradient reaches a2 only
        g_a2 = (2.0 * cfg.lambda_dlsc / count) * (w_d * w_c)[:, None] * (a2 - batch.a_star)
        train_disc = cfg.mode == "slmp" and phase.use_wc
    elif cfg.mode == "gan":
        score2 = disc_forward(n.disc_spec, n.disc_params, batch.proprio, a2)
        l_gen = float(_softplus(-score2).mean())
        metrics["l_dlsc"] = l_gen  # occupies the consistency slot
        d_dscore = (cfg.lambda_dlsc / count) * (_sigmoid(score2) - 1.0)
        x2d = np.concatenate([batch.proprio, a2], axis=1)
        _, gx = nets.backward_batch(n.disc_spec, n.disc_params, x2d, d_dscore[:, None])
        g_a2 = gx[:, batch.proprio.shape[1]:]
        train_disc = True

    loss = cfg.lambda_distill * l_distill + cfg.lambda_dlsc * metrics["l_dlsc"]
    metrics["l_slmp"] = (
        cfg.lambda_distill * l_distill
        + (cfg.lambda_dlsc * metrics["l_dlsc"] if cfg.mode in ("nsc", "slmp") else 0.0)
    )
    if not math.isfinite(loss):
        metrics["skipped"] = 1.0
        return metrics
    metrics["skipped"] = 0.0

    g_phi1, gx1 = nets.backward_batch(n.phi_spec, n.phi_params, x1, g_a1)
    g_phi = g_phi1
    if g_a2.any():
        g_phi2, _ = nets.backward_batch(n.phi_spec, n.phi_params, x2, g_a2)
        g_phi = g_phi + g_phi2
    # encoder gradient: through z1 and the unit-sphere projection
    g_z1 = gx1[:, batch.proprio.shape[1]:]
    g_y = (g_z1 - (g_z1 * z1).sum(axis=1, keepdims=True) * z1) / norms
    g_enc, _ = nets.backward_batch(n.enc_spec, n.enc_params, batch.goals, g_y)

    n.phi_params, n.phi_adam = nets.adam_step(n.phi_params, g_phi, n.phi_adam)
    n.enc_params, n.enc_adam = nets.adam_step(n.enc_params, g_enc, n.enc_adam)

    if train_disc:
        s_pos = disc_forward(n.disc_spec, n.disc_params, batch.proprio, a1)
        s_neg = disc_forward(n.disc_spec, n.disc_params, batch.proprio, a2)
        l_disc = disc_loss(s_pos, s_neg)
        metrics["l_disc"] = l_disc
        scale = cfg.lambda_disc / count
        g_pos = scale * (_sigmoid(s_pos) - 1.0)
        g_neg = scale * _sigmoid(s_neg)
        xp = np.concatenate([batch.proprio, a1], axis=1)
        xn = np.concatenate([batch.proprio, a2], axis=1)
        g_d1, _ = nets.backward_batch(n.disc_spec, n.disc_params, xp, g_pos[:, None])
        g_d2, _ = nets.backward_batch(n.disc_spec, n.disc_params, xn, g_neg[:, None])
        n.disc_params, n.disc_adam = nets.adam_step(n.disc_params, g_d1 + g_d2, n.disc_adam)
    return metrics


# --- DAgger-style training loop ------------------------------------------


class _Ring:
    """Fixed-capacity sample store with deterministic overwrite order."""

    def __init__(self, capacity: int, dims: tuple[int, ...]):
        self.capacity = capacity
        self.buffers = [np.zeros((capacity, d)) for d in dims]
        self.write = 0
        self.size = 0

    def push(self, *rows: np.ndarray) -> None:
        n = rows[0].shape[0]
        for chunk_start in range(0, n, self.capacity):
            block = min(self.capacity - self.write, n - chunk_start)
            for buf, row in zip(self.buffers, rows):
                buf[self.write : self.write + block] = row[chunk_start : chunk_start + block]
            self.write = (self.write + block) % self.capacity
            self.size = min(self.size + block, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        idx = rng.integers(self.size, size=n)
        return [buf[idx] for buf in self.buffers]


DISTILL_METRICS = (
    "update", "l_distill", "l_dlsc", "l_disc", "l_slmp", "w_d", "w_c", "use_wc", "mse_fresh",
)


def expert_success_rate(
    policy: tr.GaussianPolicy,
    policy_params: np.ndarray,
    clips: list[mo.MotionClip],
    spec: ph.CharacterSpec,
    phys: ph.PhysicsConfig,
    e_div: float,
) -> float:
    """Fraction of clips the frozen expert tracks end-to-end."""
    ok = 0
    for clip in clips:
        if _track_one(policy, policy_params, clip, spec, phys, e_div)[0]:
            ok += 1
    return ok / len(clips)


def _track_one(policy, policy_params, clip, spec, phys, e_div):
    state = clip.frame_state(0)
    t = 0.0
    errs = []
    steps = int((clip.duration - 1.0 / clip.frame_rate) * phys.hz) - 1
    for _ in range(steps):
        targets = tr.expert_action(policy, policy_params, state, spec, clip, t)
        state, _ = ph.step_world([state], [spec], None, phys.dt, phys, pd_targets=[targets])
        state = state[0]
        t += phys.dt
        rp, ra, jq, rv, rw, jv = clip.sample(t)
        ref = ph.SimState(rp, ra, jq, rv, rw, jv)
        pos_s, _ = ph.sites_and_velocities(state, spec)
        pos_r, _ = ph.sites_and_velocities(ref, spec)
        e = float(np.linalg.norm(pos_s - pos_r, axis=1).mean())
        errs.append(e)
        if not state.valid or ph.detect_fall(state, spec, phys) or e > e_div:
            return False, float(np.mean(errs))
    return True, float(np.mean(errs))


def train_slmp(
    clips: list[mo.MotionClip],
    expert_ckpt: str | Path,
    cfg: SlmpConfig,
    out_dir: str | Path,
    seed: int,
    spec: ph.CharacterSpec | None = None,
    phys: ph.PhysicsConfig | None = None,
    log: bool = True,
    skip_expert_check: bool = False,
) -> DistillNets:
    """Stage 2: distill the frozen expert into the latent prior.

    Rollouts are driven by the encoded goal latent along reference clips;
    the expert labels every visited state with its PD-target action.
    Fresh on-policy samples feed a replay ring from which update batches
    are drawn (DAgger-style aggregation).
    """
    spec = spec or ph.default_character()
    phys = phys or ph.default_config(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    expert, expert_params = tr.load_policy(expert_ckpt)

    if not skip_expert_check:
        rate = expert_success_rate(expert, expert_params, clips, spec, phys, cfg.e_div)
        if rate < 0.9:
            raise RuntimeError(
                f"expert failure rate {1.0 - rate:.2f} exceeds 10% on the clip library; "
                "train the tracking stage further before distilling"
            )

    pdim = tr.proprio_dim(spec)
    gdim = mo.Goal.dim(spec.n_joints)
    n = build_distill_nets(gdim, pdim, spec.n_joints, cfg, seed)
    phase = Phase(window=cfg.window, plateau_tol=cfg.plateau_tol)
    ring = _Ring(cfg.capacity, (pdim, gdim, spec.n_joints))
    envs = [
        tr.TrackingEnv(clips, spec, phys, cfg.e_div, np.random.default_rng(seed_for(seed, f"denv-{i}")))
        for i in range(cfg.envs)
    ]

    metrics_path = out / "metrics.csv"
    metrics_path.write_text(",".join(DISTILL_METRICS) + "\n")

    steps_per_env = max(1, cfg.fresh_per_update // cfg.envs)
    for u in range(cfg.updates):
        rng_u = np.random.default_rng(seed_for(seed, f"distill-update-{u}"))
        fresh_p = np.zeros((steps_per_env * cfg.envs, pdim))
        fresh_g = np.zeros((steps_per_env * cfg.envs, gdim))
        fresh_a = np.zeros((steps_per_env * cfg.envs, spec.n_joints))
        row = 0
        mse_fresh = 0.0
        for _ in range(steps_per_env):
            for env in envs:
                p = tr.proprio_obs(env.state, spec)
                g = mo.goal_state(env.clip, env.t, env.state).flat()
                a_star = tr.expert_action(expert, expert_params, env.state, spec, env.clip, env.t)
                z1 = encode_goal(n.enc_spec, n.enc_params, g)
                a = prior_action(n.phi_spec, n.phi_params, p, z1)
                mse_fresh += float(((a - a_star) ** 2).sum())
                env.step(a)
                fresh_p[row] = p
                fresh_g[row] = g
                fresh_a[row] = a_star
                row += 1
        mse_fresh /= row
        ring.push(fresh_p, fresh_g, fresh_a)

        take = min(cfg.batch, ring.size)
        s_b, g_b, a_b = ring.sample(take, rng_u)
        z2 = sample_sphere(cfg.latent_dim, rng_u, take)
        batch = DistillBatch(s_b, g_b, a_b, z2)
        m = slmp_update(batch, n, cfg, phase)
        if cfg.mode == "slmp":
            phase = phase_scheduler(phase, m["l_slmp"])
        else:
            phase.updates_completed += 1

        with metrics_path.open("a") as f:
            vals = {**m, "update": u, "mse_fresh": mse_fresh}
            f.write(",".join(repr(float(vals[k])) for k in DISTILL_METRICS) + "\n")
        if log and (u % 200 == 0 or u == cfg.updates - 1):
            print(
                f"[distill:{cfg.mode}] update {u} l_distill {m['l_distill']:.4f} "
                f"l_dlsc {m['l_dlsc']:.4f} mse_fresh {mse_fresh:.4f} use_wc {phase.use_wc}",
                flush=True,
            )

    nets.save_checkpoint(out / "encoder.ckpt", "encoder", n.enc_spec, n.enc_params)
    nets.save_checkpoint(out / "pi_phi.ckpt", "pi_phi", n.phi_spec, n.phi_params)
    nets.save_checkpoint(out / "disc.ckpt", "disc", n.disc_spec, n.disc_params)
    return n


def load_prior(out_dir: str | Path) -> tuple[nets.MlpSpec, np.ndarray, nets.MlpSpec, np.ndarray]:
    """Load (encoder spec/params, prior spec/params) from a distill run."""
    _, enc_spec, enc_params, _ = nets.load_checkpoint(Path(out_dir) / "encoder.ckpt")
    _, phi_spec, phi_params, _ = nets.load_checkpoint(Path(out_dir) / "pi_phi.ckpt")
    return enc_spec, enc_params, phi_spec, phi_params
