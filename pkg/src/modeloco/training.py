"""Policy training loop: adaptive or uniform episode sampling around PPO.

Each iteration samples a batch of episode scripts from the current return
records (or uniformly), rolls them out, applies one PPO update, and folds the
episode returns back into the records in submission order. All randomness is
derived from (seed, counter) pairs, so a run is bit-reproducible, resumable
from a checkpoint, and independent of how many rollout workers execute the
batch.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from .fileio import array_from_payload, array_to_payload
from .refmotion import ModeLibrary
from .sampler import (
    SWITCH_CLIPS,
    SWITCH_PHASES,
    SamplerState,
    sample_script,
    sampler_from_payload,
    sampler_to_payload,
    switch_step_for,
    uniform_script,
    update_records,
)
from .sim import RewardConfig, RobotConfig, Terrain

ADAPTIVE = "adaptive"
UNIFORM = "uniform"

# Purpose tags for counter-derived rng streams.
_STREAM_EPISODE = 1
_STREAM_SCRIPT = 2
_STREAM_UPDATE = 3
_STREAM_INIT = 4


def derived_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, index)))


@dataclass
class TrainConfig:
    sampler: str = ADAPTIVE
    mode_decay: float = 0.4
    transition_decay: float = 0.4
    floor: float = 0.2
    updates: int = 100
    episodes_per_update: int = 4
    seed: int = 0
    workers: int = 1
    clock_rate: float = 1.0
    checkpoint_every: int = 0  # updates between checkpoints; 0 disables

    def __post_init__(self):
        if self.sampler not in (ADAPTIVE, UNIFORM):
            raise ValueError(f"sampler must be '{ADAPTIVE}' or '{UNIFORM}'")
        if self.episodes_per_update < 1 or self.updates < 0:
            raise ValueError("need a positive episode batch and non-negative updates")


@dataclass
class EpisodeRow:
    """One line of the training log."""

    update: int
    episode: int
    mode_from: int
    mode_to: int
    switch_step: int
    episode_return: float
    normalized_return: float
    fell: bool
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    mode_returns: np.ndarray | None = None
    transition_returns: np.ndarray | None = None


@dataclass
class TrainState:
    policy: pol.PolicyParams
    value: pol.ValueParams
    opt: pol.PpoOptState
    sampler_state: SamplerState
    update_count: int = 0
    episode_count: int = 0


@dataclass
class TrainResult:
    state: TrainState
    rows: list[EpisodeRow] = field(default_factory=list)


def _run_episode(args) -> pol.Trajectory:
    (policy, value, library, script, terrain, robot_cfg, reward_cfg, seed, episode_index,
     clock_rate) = args
    rng = derived_rng(seed, _STREAM_EPISODE, episode_index)
    return pol.rollout(
        policy,
        value,
        library,
        script,
        terrain,
        robot_cfg,
        reward_cfg,
        rng=rng,
        stochastic=True,
        clock_rate=clock_rate,
    )


def fresh_train_state(
    library: ModeLibrary, ppo_cfg: pol.PpoConfig, cfg: TrainConfig, latent_dim: int
) -> TrainState:
    rng = derived_rng(cfg.seed, _STREAM_INIT, 0)
    from .sim import observation_dim

    obs_dim = observation_dim(latent_dim)
    policy = pol.init_policy(rng, obs_dim)
    value = pol.init_value(rng, obs_dim)
    return TrainState(
        policy=policy,
        value=value,
        opt=pol.PpoOptState.fresh(policy, value),
        sampler_state=SamplerState.fresh(
            library.n, cfg.mode_decay, cfg.transition_decay, cfg.floor
        ),
    )


def run_training(
    library: ModeLibrary,
    terrain: Terrain,
    robot_cfg: RobotConfig,
    reward_cfg: RewardConfig,
    ppo_cfg: pol.PpoConfig,
    cfg: TrainConfig,
    start: TrainState | None = None,
    checkpoint_path: str | None = None,
    on_checkpoint=None,
) -> TrainResult:
    """Run cfg.updates training iterations, resuming from `start` if given."""
    if any(z is None for z in library.latents):
        raise ValueError("library has empty latents; run the encoder first")
    latent_dim = np.asarray(
        library.latents[0].z if hasattr(library.latents[0], "z") else library.latents[0]
    ).shape[0]
    state = start or fresh_train_state(library, ppo_cfg, cfg, latent_dim)
    cycle_steps = round(robot_cfg.cycle_duration / robot_cfg.control_dt)
    latest_switch = switch_step_for(max(SWITCH_CLIPS), max(SWITCH_PHASES), cycle_steps)
    if ppo_cfg.horizon <= latest_switch:
        raise ValueError(
            f"episode horizon {ppo_cfg.horizon} cannot contain the switch grid "
            f"(latest switch step {latest_switch}); use at least two clips"
        )
    rows: list[EpisodeRow] = []

    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(max_workers=cfg.workers)
    try:
        for _ in range(cfg.updates):
            scripts = []
            for b in range(cfg.episodes_per_update):
                ep_idx = state.episode_count + b
                rng = derived_rng(cfg.seed, _STREAM_SCRIPT, ep_idx)
                if cfg.sampler == ADAPTIVE:
                    scripts.append(
                        sample_script(state.sampler_state, cycle_steps, ppo_cfg.horizon, rng)
                    )
                else:
                    scripts.append(
                        uniform_script(library.n, rng, cycle_steps, ppo_cfg.horizon)
                    )
            jobs = [
                (
                    state.policy,
                    state.value,
                    library,
                    script,
                    terrain,
                    robot_cfg,
                    reward_cfg,
                    cfg.seed,
                    state.episode_count + b,
                    cfg.clock_rate,
                )
                for b, script in enumerate(scripts)
            ]
            if pool is not None:
                trajectories = list(pool.map(_run_episode, jobs))
            else:
                trajectories = [_run_episode(j) for j in jobs]

            update_rng = derived_rng(cfg.seed, _STREAM_UPDATE, state.update_count)
            new_policy, new_value, new_opt, stats = pol.ppo_update(
                state.policy, state.value, state.opt, trajectories, ppo_cfg, update_rng
            )
            state.policy, state.value, state.opt = new_policy, new_value, new_opt

            for b, (script, tr) in enumerate(zip(scripts, trajectories)):
                state.sampler_state = update_records(
                    state.sampler_state, script, tr.episode_return
                )
                rows.append(
                    EpisodeRow(
                        update=state.update_count,
                        episode=state.episode_count + b,
                        mode_from=script.mode_from,
                        mode_to=script.mode_to,
                        switch_step=script.switch_step,
                        episode_return=tr.episode_return,
                        normalized_return=pol.normalized_return(tr, reward_cfg),
                        fell=tr.fell,
                        policy_loss=stats.policy_loss,
                        value_loss=stats.value_loss,
                        entropy=stats.entropy,
                        mode_returns=np.array(state.sampler_state.mode_returns),
                        transition_returns=np.array(
                            state.sampler_state.transition_returns
                        ),
                    )
                )
            state.episode_count += cfg.episodes_per_update
            state.update_count += 1
            if (
                checkpoint_path
                and cfg.checkpoint_every
                and state.update_count % cfg.checkpoint_every == 0
            ):
                save_checkpoint(checkpoint_path, state)
                if on_checkpoint is not None:
                    on_checkpoint(state)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(state=state, rows=rows)


# --- checkpointing -----------------------------------------------------------


def _opt_payload(s) -> dict:
    return {"m": array_to_payload(s.m), "v": array_to_payload(s.v), "t": s.t}


def _opt_from_payload(p):
    from .optim import AdamState

    return AdamState(m=array_from_payload(p["m"]), v=array_from_payload(p["v"]), t=p["t"])


def checkpoint_payload(state: TrainState) -> dict:
    return {
        "policy": pol.policy_to_payload(state.policy, state.value),
        "opt_policy": _opt_payload(state.opt.policy),
        "opt_value": _opt_payload(state.opt.value),
        "sampler": sampler_to_payload(state.sampler_state),
        "update_count": state.update_count,
        "episode_count": state.episode_count,
    }


def checkpoint_from_payload(payload: dict) -> TrainState:
    policy, value = pol.policy_from_payload(payload["policy"])
    return TrainState(
        policy=policy,
        value=value,
        opt=pol.PpoOptState(
            policy=_opt_from_payload(payload["opt_policy"]),
            value=_opt_from_payload(payload["opt_value"]),
        ),
        sampler_state=sampler_from_payload(payload["sampler"]),
        update_count=payload["update_count"],
        episode_count=payload["episode_count"],
    )


def save_checkpoint(path: str, state: TrainState) -> None:
    from .fileio import write_artifact

    write_artifact(path, "checkpoint", checkpoint_payload(state))


def load_checkpoint(path: str) -> TrainState:
    from .fileio import read_artifact

    return checkpoint_from_payload(read_artifact(path, "checkpoint"))
