"""Open-loop mode planning with tabular Q-learning.

A plan is a zero-order spline over k knots of fixed duration: one mode index
per knot. The planning MDP walks the knot index deterministically from 0 to
k-1; the action is the mode commanded during that knot, and the reward is the
goal-distance shaping accumulated while the knot is active. The planner sees
nothing but per-knot rewards from whole-plan rollouts, so the resulting plan
is purely time-indexed: no terrain or robot state feedback.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .policy import PolicyParams, act
from .refmotion import ModeLibrary
from .sim import RUNNING, RobotConfig, Terrain, initial_state, observe, step, termination


@dataclass(frozen=True)
class PlannerConfig:
    knots: int = 11
    knot_dt: float = 0.3
    goal_x: float = 2.0
    goal_z: float = 0.5
    alpha: float = 0.3  # step-size floor under the 1/visits decay
    explore: float = 0.2
    episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.knots < 1:
            raise ValueError("need at least one knot")
        if self.knot_dt <= 0.0:
            raise ValueError("knot duration must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.explore <= 1.0:
            raise ValueError("explore rate must lie in [0, 1]")


@dataclass(frozen=True)
class ModePlan:
    """One mode index per knot, plus the hash of the config that produced it."""

    mode_indices: tuple[int, ...]
    provenance: str = ""

    def __post_init__(self):
        if any(i < 0 for i in self.mode_indices):
            raise ValueError("mode indices must be non-negative")

    @property
    def k(self) -> int:
        return len(self.mode_indices)


def goal_step_reward(x: float, z: float, goal_x: float, goal_z: float) -> float:
    """Per-control-step reaching reward in (0, 1]."""
    return math.exp(-math.hypot(goal_x - x, goal_z - z))


def plan_rollout(
    plan: ModePlan,
    policy: PolicyParams,
    library: ModeLibrary,
    terrain: Terrain,
    robot_cfg: RobotConfig,
    cfg: PlannerConfig,
    trace: list | None = None,
) -> np.ndarray:
    """Execute a plan with the deterministic policy; per-knot reward buckets.

    The phase clock runs continuously; knot boundaries only swap the latent
    command. A fall ends the rollout and leaves the remaining knots at zero.
    """
    latents = []
    for idx in plan.mode_indices:
        z = library.latents[idx]
        if z is None:
            raise ValueError(f"mode {library.names[idx]} has no latent; train the encoder")
        latents.append(np.asarray(z.z if hasattr(z, "z") else z, dtype=float))
    steps_per_knot = round(cfg.knot_dt / robot_cfg.control_dt)
    if steps_per_knot < 1:
        raise ValueError("knot duration shorter than one control step")

    state = initial_state(robot_cfg, terrain)
    rewards = np.zeros(plan.k)
    for knot in range(plan.k):
        for _ in range(steps_per_knot):
            obs = observe(state, latents[knot])
            a, _ = act(policy, obs, stochastic=False)
            state = step(state, a, terrain, robot_cfg)
            rewards[knot] += goal_step_reward(state.x, state.z, cfg.goal_x, cfg.goal_z)
            if trace is not None:
                trace.append((state, rewards[knot], plan.mode_indices[knot]))
            if termination(state, robot_cfg) != RUNNING:
                return rewards
    return rewards


@dataclass
class QLearnResult:
    q_table: np.ndarray  # (knots, n_modes)
    plan: ModePlan
    best_return: float
    episodes: int
    solve_seconds: float


def q_learn_core(
    rollout_fn: Callable[[ModePlan], np.ndarray],
    knots: int,
    n_modes: int,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    provenance: str = "",
) -> QLearnResult:
    """Episodic Q-learning on the knot-index chain.

    Transitions are deterministic (knot s to s+1, terminal after the last),
    so each episode is one full plan rollout followed by backups applied from
    the last knot backward, letting values propagate the whole chain per
    episode. The step size starts at 1 on a pair's first visit and decays as
    1/visits down to the configured floor alpha; alpha = 0 disables learning
    entirely. Greedy extraction breaks ties toward the lowest mode index.
    """
    t0 = time.monotonic()
    q = np.zeros((knots + 1, n_modes))  # terminal row stays zero
    visits = np.zeros((knots, n_modes), dtype=int)
    for _ in range(cfg.episodes):
        actions = []
        for s in range(knots):
            if rng.random() < cfg.explore:
                actions.append(int(rng.integers(n_modes)))
            else:
                actions.append(int(np.argmax(q[s])))
        plan = ModePlan(tuple(actions), provenance)
        rewards = rollout_fn(plan)
        for s in range(knots - 1, -1, -1):
            a = actions[s]
            visits[s, a] += 1
            step_size = 0.0 if cfg.alpha == 0.0 else max(cfg.alpha, 1.0 / visits[s, a])
            target = rewards[s] + q[s + 1].max()
            q[s, a] += step_size * (target - q[s, a])
    best = ModePlan(tuple(int(np.argmax(q[s])) for s in range(knots)), provenance)
    best_return = float(rollout_fn(best).sum())
    return QLearnResult(
        q_table=q[:knots],
        plan=best,
        best_return=best_return,
        episodes=cfg.episodes,
        solve_seconds=time.monotonic() - t0,
    )


def q_learn(
    policy: PolicyParams,
    library: ModeLibrary,
    terrain: Terrain,
    robot_cfg: RobotConfig,
    cfg: PlannerConfig,
    provenance: str = "",
) -> QLearnResult:
    """Q-learning over whole-plan rollouts in the biped environment."""
    rng = np.random.default_rng(cfg.seed)

    def rollout_fn(plan: ModePlan) -> np.ndarray:
        return plan_rollout(plan, policy, library, terrain, robot_cfg, cfg)

    return q_learn_core(rollout_fn, cfg.knots, library.n, cfg, rng, provenance)


def _trial(args) -> QLearnResult:
    policy, library, terrain, robot_cfg, cfg, provenance = args
    return q_learn(policy, library, terrain, robot_cfg, cfg, provenance)


def parallel_trials(
    policy: PolicyParams,
    library: ModeLibrary,
    terrain: Terrain,
    robot_cfg: RobotConfig,
    cfg: PlannerConfig,
    trials: int = 5,
    workers: int = 1,
    provenance: str = "",
) -> QLearnResult:
    """Independent seeded Q-learning runs; the best-evaluated plan wins.

    Trial i uses seed cfg.seed + i. Aggregation is by evaluated plan return
    with ties going to the earliest trial, so the result does not depend on
    the worker count.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    configs = [replace(cfg, seed=cfg.seed + i) for i in range(trials)]
    jobs = [(policy, library, terrain, robot_cfg, c, provenance) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial, jobs))
    else:
        results = [_trial(j) for j in jobs]
    best = results[0]
    for r in results[1:]:
        if r.best_return > best.best_return:
            best = r
    return best


# --- serialization -----------------------------------------------------------


def plan_to_payload(
    plan: ModePlan, library: ModeLibrary, cfg: PlannerConfig
) -> dict:
    return {
        "k": plan.k,
        "knot_dt": cfg.knot_dt,
        "goal": [cfg.goal_x, cfg.goal_z],
        "knot_times": [round(i * cfg.knot_dt, 9) for i in range(plan.k)],
        "mode_indices": list(plan.mode_indices),
        "mode_names": [library.names[i] for i in plan.mode_indices],
        "provenance": plan.provenance,
    }


def plan_from_payload(payload: dict) -> ModePlan:
    return ModePlan(tuple(payload["mode_indices"]), payload.get("provenance", ""))
