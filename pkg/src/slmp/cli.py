"""Command-line entry point wiring configuration, seeding, datasets,
training stages, and evaluations into reproducible commands."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import combat as cb
from . import distill as di
from . import evaluate as ev
from . import motion as mo
from . import nets
from . import physics as ph
from . import tracking as tr
from .config import ConfigError, RunConfig, load_config, write_echo
from .seeding import seed_for


def _load_clips(args, cfg: RunConfig, spec, phys) -> list[mo.MotionClip]:
    if getattr(args, "clips", None):
        paths = sorted(Path(args.clips).glob("*.clip"))
        if not paths:
            raise FileNotFoundError(f"no .clip files in {args.clips}")
        return [mo.load_clip(p) for p in paths]
    return _generate_library(cfg, spec, phys)


def _generate_library(cfg: RunConfig, spec, phys) -> list[mo.MotionClip]:
    base = 0 if cfg.seed == 0 else cfg.seed * 1000
    clips = []
    k = 0
    for family in mo.FAMILIES:
        for _ in range(cfg.data.counts()[family]):
            clips.append(
                mo.generate_clip(
                    family, base + k, cfg.data.duration, cfg.data.hz, spec, phys
                )
            )
            k += 1
    return clips


def cmd_gen_data(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out)
    clips = _generate_library(cfg, spec, phys)
    for clip in clips:
        mo.save_clip(clip, out / f"{clip.clip_id}.clip")
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def cmd_train_track(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    clips = _load_clips(args, cfg, spec, phys)
    if args.updates is not None:
        cfg.ppo.updates = args.updates
    write_echo(cfg, args.out)
    tr.train_tracking(
        clips, cfg.ppo, args.out, seed_for(cfg.seed, "track"), spec, phys,
        resume=args.resume, workers=args.workers,
    )
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    clips = _load_clips(args, cfg, spec, phys)
    if args.updates is not None:
        cfg.slmp.updates = args.updates
    mode_map = {"distill": "distill", "gan": "gan", "nsc": "nsc", "slmp": "slmp"}
    cfg.slmp.mode = mode_map[args.mode]
    write_echo(cfg, args.out)
    expert = Path(args.expert)
    if expert.is_dir():
        expert = expert / "pi_track.ckpt"
    di.train_slmp(
        clips, expert, cfg.slmp, args.out, seed_for(cfg.seed, f"distill-{args.mode}"),
        spec, phys, skip_expert_check=args.skip_expert_check,
    )
    return 0


def cmd_eval_track(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    clips = _load_clips(args, cfg, spec, phys)
    expert = None
    if args.expert:
        expert = Path(args.expert)
        if expert.is_dir():
            expert = expert / "pi_track.ckpt"
    res = ev.latent_tracking_eval(clips, args.slmp, expert, spec, phys, cfg.eval.e_div)
    lines = ["method,success,mean_joint_error"]
    for name, row in res.items():
        lines.append(f"{name},{row['success']!r},{row['mean_joint_error']!r}")
    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_eval_survival(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    _, _, phi_spec, phi_params = di.load_prior(args.slmp)
    trials = args.trials if args.trials is not None else cfg.eval.trials
    period = args.resample_period if args.resample_period is not None else cfg.eval.resample_period
    curve = ev.survival_eval(
        phi_spec, phi_params, trials, tuple(cfg.eval.horizons),
        seed_for(cfg.seed, "survival"), period, args.fixed_z or cfg.eval.fixed_z,
        spec, phys,
    )
    ev.save_survival(curve, args.out)
    print(
        " ".join(f"{h:g}s={f:.3f}" for h, f in zip(curve.horizons, curve.fractions))
    )
    return 0


def cmd_viz_sphere(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    _, _, phi_spec, phi_params = di.load_prior(args.slmp)
    state = ev.fixture_state(args.state, spec, phys)
    decode = ev.prior_decoder(phi_spec, phi_params, state, spec)
    latent_dim = phi_spec.input_dim - tr.proprio_dim(spec)
    cloud = ev.sphere_clusters(
        decode, latent_dim, args.samples or cfg.eval.samples,
        args.k or cfg.eval.clusters, seed_for(cfg.seed, f"sphere-{args.state}"),
    )
    ev.save_cloud(cloud, args.out)
    print(f"wrote {cloud.z.shape[0]} points, {len(set(cloud.cluster_id))} clusters")
    return 0


def cmd_train_combat(args, cfg: RunConfig) -> int:
    spec, phys = cfg.physics.build()
    if args.epochs is not None:
        cfg.combat.epochs = args.epochs
    write_echo(cfg, args.out)
    cb.self_play_train(args.slmp, cfg.combat, args.out, seed_for(cfg.seed, "combat"), spec, phys)
    return 0


def cmd_rollout(args, cfg: RunConfig) -> int:
    if args.mode != "combat":
        raise ValueError(f"unsupported rollout mode {args.mode!r}")
    spec, phys = cfg.physics.build()
    frames = cb.rollout_combat(
        args.ckpt, args.seconds, seed_for(cfg.seed, "rollout"), cfg.combat, spec, phys
    )
    rate = phys.hz / cfg.combat.k_hl
    lines = [
        mo.CLIP_MAGIC,
        f"hz={rate!r}",
        f"frames={len(frames)}",
        "family=combat",
        f"joints={spec.n_joints}",
        "id=combat-rollout",
    ]
    for pair in frames:
        vals = []
        for s in pair:
            vals.extend(
                [*s.root_pos, s.root_angle, *s.joint_angles, *s.root_vel, s.root_ang_vel, *s.joint_vels]
            )
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(args.frames).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(frames)} frames to {args.frames}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slmp",
        description="Planar character control through a spherical latent motion prior.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="path to a section.key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")

    p = sub.add_parser("gen-data", help="write the procedural clip library")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-track", help="stage 1: PPO tracking expert")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", default=None, help="clip directory (default: generate)")
    p.add_argument("--updates", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("distill", help="stage 2: distill the expert into the latent prior")
    common(p)
    p.add_argument("--expert", required=True, help="expert checkpoint file or train-track output dir")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("distill", "gan", "nsc", "slmp"), default="slmp")
    p.add_argument("--clips", default=None)
    p.add_argument("--updates", type=int, default=None)
    p.add_argument("--skip-expert-check", action="store_true")

    p = sub.add_parser("eval-track", help="latent tracking success / mean joint error")
    common(p)
    p.add_argument("--slmp", required=True, help="distill output dir")
    p.add_argument("--expert", default=None)
    p.add_argument("--clips", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-survival", help="random-latent rollout survival curve")
    common(p)
    p.add_argument("--slmp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--resample-period", type=float, default=None)
    p.add_argument("--fixed-z", action="store_true")

    p = sub.add_parser("viz-sphere", help="state-conditioned sphere clustering export")
    common(p)
    p.add_argument("--slmp", required=True)
    p.add_argument("--state", choices=("guard", "airborne"), default="guard")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-combat", help="stage 3: alternating self-play combat")
    common(p)
    p.add_argument("--slmp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("rollout", help="dump a deterministic rollout as text frames")
    common(p)
    p.add_argument("--mode", required=True, choices=("combat",))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--seconds", type=float, default=10.0)

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-track": cmd_train_track,
    "distill": cmd_distill,
    "eval-track": cmd_eval_track,
    "eval-survival": cmd_eval_survival,
    "viz-sphere": cmd_viz_sphere,
    "train-combat": cmd_train_combat,
    "rollout": cmd_rollout,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
