"""Command line pipeline: gen-refs, train-encoder, train-policy, eval, plan.

Every command is deterministic given its configuration and seed, writes
artifacts with a config-hash header, and exits 0 on success, 1 on input
validation problems, and 2 on runtime failures. The output directory
defaults to the MODELOCO_OUT environment variable, then the current
directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc_mod
from . import planner as plan_mod
from . import policy as pol_mod
from . import training as train_mod
from .fileio import ArtifactError, config_hash, read_artifact, write_artifact
from .refmotion import (
    InvalidInputError,
    MODESET_NAMES,
    builtin_library,
    library_from_payload,
    library_to_payload,
    modeset_from_spec,
)
from .sampler import sampler_to_payload
from .sim import RewardConfig, RobotConfig, TERRAIN_PRESETS, Terrain

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# Reward gains per built-in mode set: contact tracking is only rewarded for
# the mode set that ships contact schedules.
MODESET_REWARD_WEIGHTS = {
    "pi1": (0.5, 0.5, 0.0),
    "pi2": (0.5, 0.5, 0.0),
    "pi3": (0.35, 0.35, 0.3),
}


def _out_path(arg: str | None, default_name: str) -> Path:
    if arg:
        return Path(arg)
    root = os.environ.get("MODELOCO_OUT", ".")
    return Path(root) / default_name


def _load_terrain(spec: str) -> Terrain:
    if spec in TERRAIN_PRESETS:
        return TERRAIN_PRESETS[spec]()
    return Terrain.from_payload(read_artifact(spec, "terrain"))


def _reward_config(args) -> RewardConfig:
    if args.reward_weights:
        w = tuple(float(v) for v in args.reward_weights.split(","))
        if len(w) != 3:
            raise InvalidInputError("reward weights must be three comma-separated values")
        return RewardConfig(weights=w)
    return RewardConfig(weights=MODESET_REWARD_WEIGHTS.get(args.modeset, (0.5, 0.5, 0.0)))


def cmd_gen_refs(args) -> int:
    if Path(args.modeset).exists():
        spec = json.loads(Path(args.modeset).read_text())
        library = modeset_from_spec(spec)
        cfg = {"modeset_file": spec}
    else:
        library = builtin_library(args.modeset)
        cfg = {"modeset": args.modeset}
    out = _out_path(args.out, "library.json")
    write_artifact(out, "library", library_to_payload(library), config_hash(cfg))
    print(f"wrote {library.n}-mode library to {out}")
    return EXIT_OK


def cmd_train_encoder(args) -> int:
    library = library_from_payload(read_artifact(args.library, "library"))
    cfg = enc_mod.EncoderTrainConfig(
        learning_rate=args.lr, epochs=args.epochs, seed=args.seed
    )
    result = enc_mod.train_autoencoder(library, cfg)
    cfg_hash = config_hash(dataclasses.asdict(cfg))
    out = _out_path(args.out, "encoder.json")
    write_artifact(
        out, "encoder", enc_mod.params_to_payload(result.encoder, result.decoder), cfg_hash
    )
    write_artifact(
        args.library, "library", library_to_payload(result.library), cfg_hash
    )
    log_path = Path(str(out) + ".loss.csv")
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([i, repr(loss)])
    print(
        f"trained encoder on {library.n} modes: final loss {result.final_loss:.6e}; "
        f"wrote {out}, updated latents in {args.library}, loss log {log_path}"
    )
    return EXIT_OK


def _train_configs(args):
    ppo = pol_mod.PpoConfig(horizon=args.horizon, seed=args.seed)
    tc = train_mod.TrainConfig(
        sampler=args.sampler,
        mode_decay=args.gamma_i,
        transition_decay=args.gamma_f,
        floor=args.epsilon,
        updates=args.updates,
        episodes_per_update=args.episodes_per_update,
        seed=args.seed,
        workers=args.workers,
        checkpoint_every=args.checkpoint_every,
    )
    return ppo, tc


def _write_training_log(path: Path, rows, n: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = ["update", "episode", "mode_from", "mode_to", "switch_step",
                  "episode_return", "normalized_return", "fell",
                  "policy_loss", "value_loss", "entropy"]
        header += [f"mode_return_{i}" for i in range(n)]
        header += [f"transition_return_{i}_{j}" for i in range(n) for j in range(n)]
        w.writerow(header)
        for r in rows:
            line = [r.update, r.episode, r.mode_from, r.mode_to, r.switch_step,
                    repr(r.episode_return), repr(r.normalized_return), int(r.fell),
                    repr(r.policy_loss), repr(r.value_loss), repr(r.entropy)]
            line += [repr(v) for v in r.mode_returns]
            line += [repr(v) for v in r.transition_returns.ravel()]
            w.writerow(line)


def cmd_train_policy(args) -> int:
    library = library_from_payload(read_artifact(args.library, "library"))
    if any(z is None for z in library.latents):
        raise InvalidInputError(
            f"library {args.library} has no latents; run train-encoder first"
        )
    terrain = _load_terrain(args.terrain)
    robot = RobotConfig()
    reward_cfg = _reward_config(args)
    ppo, tc = _train_configs(args)
    cfg_hash = config_hash(
        {"ppo": dataclasses.asdict(ppo), "train": dataclasses.asdict(tc)}
    )
    start = None
    if args.resume:
        start = train_mod.load_checkpoint(args.resume)
        print(f"resuming from {args.resume} at update {start.update_count}")
    out = _out_path(args.out, "policy.json")
    checkpoint_path = args.checkpoint or str(out) + ".checkpoint.json"
    result = train_mod.run_training(
        library,
        terrain,
        robot,
        reward_cfg,
        ppo,
        tc,
        start=start,
        checkpoint_path=checkpoint_path,
    )
    write_artifact(
        out,
        "policy",
        pol_mod.policy_to_payload(result.state.policy, result.state.value),
        cfg_hash,
    )
    train_mod.save_checkpoint(checkpoint_path, result.state)
    log_path = Path(args.log or str(out) + ".train.csv")
    _write_training_log(log_path, result.rows, library.n)
    returns = [r.normalized_return for r in result.rows[-4 * library.n :]]
    print(
        f"trained policy for {result.state.update_count} updates "
        f"({result.state.episode_count} episodes); recent normalized return "
        f"{np.mean(returns):.3f}; wrote {out}, log {log_path}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    library = library_from_payload(read_artifact(args.library, "library"))
    policy, _value = pol_mod.policy_from_payload(read_artifact(args.policy, "policy"))
    terrain = _load_terrain(args.terrain)
    robot = RobotConfig()
    reward_cfg = _reward_config(args)
    mode_scores, transition_scores = pol_mod.evaluate_modes(
        policy,
        library,
        terrain,
        robot,
        reward_cfg,
        horizon=args.horizon,
        rollouts_per_case=args.rollouts,
        clock_rate=args.clock_rate,
    )
    report = {
        "mode_names": list(library.names),
        "clock_rate": args.clock_rate,
        "mode_mra": mode_scores.tolist(),
        "transition_mra": transition_scores.tolist(),
        "mean_mode_mra": float(mode_scores.mean()),
        "mean_transition_mra": float(transition_scores.mean()),
        "traces": {},
    }
    out = _out_path(args.out, "eval.json")
    # Per-mode traces: base height and heading velocity profiles.
    from .sampler import EpisodeScript, switch_step_for

    cycle_steps = round(robot.cycle_duration / robot.control_dt)
    for i, name in enumerate(library.names):
        script = EpisodeScript(
            mode_from=i, mode_to=i, switch_phase=0.5, switch_clip=1,
            switch_step=switch_step_for(1, 0.5, cycle_steps), horizon=args.horizon,
        )
        trace: list = []
        pol_mod.rollout(
            policy, None, library, script, terrain, robot, reward_cfg,
            stochastic=False, clock_rate=args.clock_rate, trace=trace,
        )
        trace_path = Path(str(out) + f".{name}.csv")
        with open(trace_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "x", "z", "pitch", "hip_l", "knee_l", "hip_r", "knee_r",
                        "vx", "vz", "pitch_rate", "dhip_l", "dknee_l", "dhip_r",
                        "dknee_r", "contact_l", "contact_r", "reward", "mode_index"])
            for state, r, mode_idx in trace:
                w.writerow([repr(state.t)] + [repr(v) for v in state.q]
                           + [repr(v) for v in state.qdot]
                           + [int(state.contact_left), int(state.contact_right),
                              repr(r), mode_idx])
        heading = [float(np.cos(s.pitch) * s.qdot[0] + np.sin(s.pitch) * s.qdot[1])
                   for s, _, _ in trace]
        report["traces"][name] = {
            "file": str(trace_path),
            "mean_heading_velocity": float(np.mean(heading)) if heading else 0.0,
        }
    write_artifact(out, "eval", report, config_hash({"clock_rate": args.clock_rate}))
    print(f"mode MRA: {np.array2string(mode_scores, precision=3)}")
    print(f"mean transition MRA: {transition_scores.mean():.3f}; wrote {out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    library = library_from_payload(read_artifact(args.library, "library"))
    policy, _value = pol_mod.policy_from_payload(read_artifact(args.policy, "policy"))
    terrain = _load_terrain(args.terrain)
    robot = RobotConfig()
    cfg = plan_mod.PlannerConfig(
        knots=args.knots,
        knot_dt=args.dt,
        goal_x=args.goal_x,
        goal_z=args.goal_z,
        alpha=args.alpha,
        explore=args.explore,
        episodes=args.episodes,
        seed=args.seed,
    )
    cfg_hash = config_hash(dataclasses.asdict(cfg))
    print(
        f"planning: {cfg.knots} knots x {cfg.knot_dt}s, goal "
        f"({cfg.goal_x}, {cfg.goal_z}), {args.trials} trials x {cfg.episodes} episodes"
    )
    result = plan_mod.parallel_trials(
        policy, library, terrain, robot, cfg,
        trials=args.trials, workers=args.workers, provenance=cfg_hash,
    )
    out = _out_path(args.out, "plan.json")
    payload = plan_mod.plan_to_payload(result.plan, library, cfg)
    payload["best_return"] = result.best_return
    payload["solve_seconds"] = result.solve_seconds
    payload["q_table"] = result.q_table.tolist()
    write_artifact(out, "plan", payload, cfg_hash)
    trace: list = []
    plan_mod.plan_rollout(result.plan, policy, library, terrain, robot, cfg, trace=trace)
    trace_path = Path(str(out) + ".trace.csv")
    with open(trace_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "z", "pitch", "reward", "mode_index"])
        for state, r, mode_idx in trace:
            w.writerow([repr(state.t), repr(state.x), repr(state.z),
                        repr(state.pitch), repr(r), mode_idx])
    names = " ".join(library.names[i] for i in result.plan.mode_indices)
    print(f"best plan (return {result.best_return:.2f}): {names}")
    print(f"wrote {out} and {trace_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="modeloco",
        description="Multimodal biped locomotion: reference library, latent "
        "mode encoder, adaptive-sampling policy training, and mode planning.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-refs", help="build a reference-motion library")
    g.add_argument("--modeset", required=True,
                   help=f"one of {','.join(MODESET_NAMES)} or a modeset JSON file")
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_gen_refs)

    t = sub.add_parser("train-encoder", help="fit latent modes to a library")
    t.add_argument("--library", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--epochs", type=int, default=3000)
    t.add_argument("--lr", type=float, default=5e-3)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train_encoder)

    tp = sub.add_parser("train-policy", help="train the multimodal policy")
    tp.add_argument("--library", required=True)
    tp.add_argument("--out", default=None)
    tp.add_argument("--terrain", default="flat")
    tp.add_argument("--sampler", choices=("adaptive", "uniform"), default="adaptive")
    tp.add_argument("--gamma-i", type=float, default=0.4, dest="gamma_i")
    tp.add_argument("--gamma-f", type=float, default=0.4, dest="gamma_f")
    tp.add_argument("--epsilon", type=float, default=0.2)
    tp.add_argument("--updates", type=int, default=150)
    tp.add_argument("--episodes-per-update", type=int, default=4)
    tp.add_argument("--horizon", type=int, default=200)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--workers", type=int, default=1)
    tp.add_argument("--modeset", default=None, help="selects default reward gains")
    tp.add_argument("--reward-weights", default=None,
                    help="three comma-separated tracking weights")
    tp.add_argument("--checkpoint", default=None)
    tp.add_argument("--checkpoint-every", type=int, default=25)
    tp.add_argument("--resume", default=None)
    tp.add_argument("--log", default=None)
    tp.set_defaults(fn=cmd_train_policy)

    e = sub.add_parser("eval", help="normalized mean returns across modes and transitions")
    e.add_argument("--library", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--terrain", default="flat")
    e.add_argument("--horizon", type=int, default=200)
    e.add_argument("--rollouts", type=int, default=1)
    e.add_argument("--clock-rate", type=float, default=1.0, dest="clock_rate")
    e.add_argument("--modeset", default=None)
    e.add_argument("--reward-weights", default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    pl = sub.add_parser("plan", help="Q-learn an open-loop mode plan for a goal")
    pl.add_argument("--library", required=True)
    pl.add_argument("--policy", required=True)
    pl.add_argument("--terrain", default="gap")
    pl.add_argument("--knots", type=int, default=11)
    pl.add_argument("--dt", type=float, default=0.3)
    pl.add_argument("--goal-x", type=float, default=2.0, dest="goal_x")
    pl.add_argument("--goal-z", type=float, default=0.5, dest="goal_z")
    pl.add_argument("--alpha", type=float, default=0.1)
    pl.add_argument("--explore", type=float, default=0.2)
    pl.add_argument("--episodes", type=int, default=100)
    pl.add_argument("--trials", type=int, default=5)
    pl.add_argument("--workers", type=int, default=1)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", default=None)
    pl.set_defaults(fn=cmd_plan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidInputError, ArtifactError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
