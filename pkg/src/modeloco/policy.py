"""Latent-conditioned Gaussian policy, PPO update, and episode rollouts.

The actor and critic are small tanh MLPs over the 19-dimensional observation
(clock, latent command, proprioception). The actor outputs the mean of a
diagonal Gaussian over the four joint targets with a state-independent
log-std. Everything is handwritten numpy in float64: gradients are exact,
updates are deterministic from seeds, and the surrogate gradient can be
checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fileio import array_from_payload, array_to_payload
from .optim import AdamState, adam_step
from .refmotion import ModeLibrary
from .sampler import EpisodeScript
from .sim import (
    BLOWUP,
    FALLEN,
    RUNNING,
    ModeTracker,
    RewardConfig,
    RobotConfig,
    Terrain,
    initial_state,
    observe,
    reward,
    step,
    termination,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MlpParams:
    """Fully connected tanh network; the last layer is linear."""

    weights: list[np.ndarray] = field(default_factory=list)  # (out, in) per layer
    biases: list[np.ndarray] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class PolicyParams:
    net: MlpParams
    log_std: np.ndarray

    @property
    def action_dim(self) -> int:
        return self.log_std.shape[0]


@dataclass
class ValueParams:
    net: MlpParams


def _init_mlp(
    rng: np.random.Generator,
    dims: list[int],
    final_scale: float = 1.0,
) -> MlpParams:
    p = MlpParams()
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        scale = 1.0 / math.sqrt(d_in)
        if i == len(dims) - 2:
            scale *= final_scale
        p.weights.append(rng.normal(0.0, scale, size=(d_out, d_in)))
        p.biases.append(np.zeros(d_out))
    return p


def init_policy(
    rng: np.random.Generator,
    obs_dim: int,
    act_dim: int = 4,
    hidden: tuple[int, ...] = (64, 64),
    log_std_init: float = -0.7,
) -> PolicyParams:
    # Small final layer keeps the initial mean near zero, i.e. near the
    # straight-leg nominal pose.
    net = _init_mlp(rng, [obs_dim, *hidden, act_dim], final_scale=0.01)
    return PolicyParams(net=net, log_std=np.full(act_dim, log_std_init))


def init_value(
    rng: np.random.Generator, obs_dim: int, hidden: tuple[int, ...] = (64, 64)
) -> ValueParams:
    return ValueParams(net=_init_mlp(rng, [obs_dim, *hidden, 1]))


def mlp_forward(p: MlpParams, x: np.ndarray):
    """Forward pass on a (B, in) batch; returns output and the backward cache."""
    acts = [x]
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_backward(p: MlpParams, acts: list[np.ndarray], d_out: np.ndarray) -> MlpParams:
    """Gradients of a scalar loss given d loss / d output."""
    grads = MlpParams(
        weights=[np.zeros_like(w) for w in p.weights],
        biases=[np.zeros_like(b) for b in p.biases],
    )
    last = len(p.weights) - 1
    d = d_out
    for i in range(last, -1, -1):
        if i < last:
            d = d * (1.0 - acts[i + 1] * acts[i + 1])
        grads.weights[i] = d.T @ acts[i]
        grads.biases[i] = d.sum(axis=0)
        d = d @ p.weights[i]
    return grads


def policy_mean(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(params.net, np.atleast_2d(obs))
    return out[0] if obs.ndim == 1 else out


def value_of(params: ValueParams, obs: np.ndarray) -> float | np.ndarray:
    out, _ = mlp_forward(params.net, np.atleast_2d(obs))
    return float(out[0, 0]) if obs.ndim == 1 else out[:, 0]


def gaussian_log_prob(
    action: np.ndarray, mean: np.ndarray, log_std: np.ndarray
) -> np.ndarray:
    """Row-wise log density of a diagonal Gaussian."""
    action = np.atleast_2d(action)
    mean = np.atleast_2d(mean)
    std = np.exp(log_std)
    y = (action - mean) / std
    return -0.5 * (y * y).sum(axis=1) - log_std.sum() - 0.5 * action.shape[1] * LOG_2PI


def act(
    params: PolicyParams,
    obs: np.ndarray,
    stochastic: bool,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, float]:
    """Sample (or take the mean of) the action distribution at one observation."""
    mean = policy_mean(params, obs)
    if stochastic:
        if rng is None:
            raise ValueError("stochastic sampling needs an rng")
        action = mean + np.exp(params.log_std) * rng.standard_normal(params.action_dim)
    else:
        action = mean.copy()
    log_prob = float(gaussian_log_prob(action, mean, params.log_std)[0])
    return action, log_prob


def entropy(params: PolicyParams) -> float:
    return float(params.log_std.sum() + 0.5 * params.action_dim * (1.0 + LOG_2PI))


# --- parameter packing -------------------------------------------------------


def _pack_mlp(p: MlpParams) -> np.ndarray:
    parts = []
    for w, b in zip(p.weights, p.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def _unpack_mlp(flat: np.ndarray, like: MlpParams, at: int = 0) -> tuple[MlpParams, int]:
    out = MlpParams()
    for w, b in zip(like.weights, like.biases):
        out.weights.append(flat[at : at + w.size].reshape(w.shape).copy())
        at += w.size
        out.biases.append(flat[at : at + b.size].copy())
        at += b.size
    return out, at


def pack_policy(p: PolicyParams) -> np.ndarray:
    return np.concatenate([_pack_mlp(p.net), p.log_std])


def unpack_policy(flat: np.ndarray, like: PolicyParams) -> PolicyParams:
    net, at = _unpack_mlp(flat, like.net)
    return PolicyParams(net=net, log_std=flat[at:].copy())


def pack_value(p: ValueParams) -> np.ndarray:
    return _pack_mlp(p.net)


def unpack_value(flat: np.ndarray, like: ValueParams) -> ValueParams:
    net, _ = _unpack_mlp(flat, like.net)
    return ValueParams(net=net)


# --- trajectories and advantage estimation -----------------------------------


@dataclass
class Trajectory:
    """One episode: per-step records plus the final observation and bootstrap."""

    obs: np.ndarray  # (T+1, obs_dim), last row is the final observation
    actions: np.ndarray  # (T, act_dim)
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    values: np.ndarray  # (T+1,), last entry is the bootstrap value
    script: EpisodeScript | None = None
    fell: bool = False
    blew_up: bool = False

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, discount: float, lam: float
) -> np.ndarray:
    """Generalized advantage estimates; values carries the bootstrap at the end."""
    T = rewards.shape[0]
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + discount * values[t + 1] - values[t]
        running = delta + discount * lam * running
        adv[t] = running
    return adv


@dataclass
class PpoConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    horizon: int = 200  # control steps per episode (4 clips by default)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.discount <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("discount and gae_lambda must lie in (0, 1]")
        if self.clip_ratio <= 0.0:
            raise ValueError("clip_ratio must be positive")


def ppo_loss(
    policy: PolicyParams, value: ValueParams, batch: dict, cfg: PpoConfig
) -> float:
    """Clipped surrogate plus value regression minus the entropy bonus."""
    mean, _ = mlp_forward(policy.net, batch["obs"])
    lp = gaussian_log_prob(batch["actions"], mean, policy.log_std)
    ratio = np.exp(lp - batch["old_log_probs"])
    adv = batch["advantages"]
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    policy_loss = -float(np.minimum(ratio * adv, clipped * adv).mean())
    v, _ = mlp_forward(value.net, batch["obs"])
    value_loss = float(((v[:, 0] - batch["returns"]) ** 2).mean())
    return policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy(policy)


def ppo_loss_and_grad(
    policy: PolicyParams, value: ValueParams, batch: dict, cfg: PpoConfig
):
    """Loss plus analytic gradients as flat vectors (policy, value)."""
    obs = batch["obs"]
    B = obs.shape[0]
    mean, acts_p = mlp_forward(policy.net, obs)
    std = np.exp(policy.log_std)
    var = std * std
    diff = batch["actions"] - mean
    lp = -0.5 * ((diff / std) ** 2).sum(axis=1) - policy.log_std.sum() - 0.5 * mean.shape[
        1
    ] * LOG_2PI
    ratio = np.exp(lp - batch["old_log_probs"])
    adv = batch["advantages"]
    clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    s1 = ratio * adv
    s2 = clipped * adv
    policy_loss = -float(np.minimum(s1, s2).mean())

    # d policy_loss / d ratio: the active min branch; a clipped branch is flat.
    use_first = s1 <= s2
    inside = (ratio > 1.0 - cfg.clip_ratio) & (ratio < 1.0 + cfg.clip_ratio)
    d_ratio = np.where(use_first, adv, np.where(inside, adv, 0.0)) * (-1.0 / B)
    d_lp = d_ratio * ratio
    d_mean = d_lp[:, None] * diff / var
    d_log_std = (d_lp[:, None] * ((diff * diff) / var - 1.0)).sum(axis=0)
    d_log_std -= cfg.entropy_coef  # entropy bonus: dH/dlog_std = 1 per dim
    g_policy_net = mlp_backward(policy.net, acts_p, d_mean)

    v, acts_v = mlp_forward(value.net, obs)
    err = v[:, 0] - batch["returns"]
    value_loss = float((err * err).mean())
    d_v = (2.0 * cfg.value_coef / B) * err[:, None]
    g_value_net = mlp_backward(value.net, acts_v, d_v)

    loss = (
        policy_loss
        + cfg.value_coef * value_loss
        - cfg.entropy_coef * entropy(policy)
    )
    g_policy = np.concatenate([_pack_mlp(g_policy_net), d_log_std])
    g_value = _pack_mlp(g_value_net)
    return loss, g_policy, g_value


@dataclass
class PpoOptState:
    policy: AdamState
    value: AdamState

    @staticmethod
    def fresh(policy: PolicyParams, value: ValueParams) -> "PpoOptState":
        return PpoOptState(
            policy=AdamState.zeros(pack_policy(policy).size),
            value=AdamState.zeros(pack_value(value).size),
        )


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    mean_return: float
    returns_by_pair: dict
    rejected: bool = False


def ppo_update(
    policy: PolicyParams,
    value: ValueParams,
    opt: PpoOptState,
    trajectories: list[Trajectory],
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> tuple[PolicyParams, ValueParams, PpoOptState, UpdateStats]:
    """One clipped-surrogate update over a batch of trajectories.

    Advantages are GAE, normalized across the whole batch. A non-finite loss
    rejects the update and returns the parameters unchanged.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    obs = np.concatenate([tr.obs[:-1] for tr in trajectories])
    actions = np.concatenate([tr.actions for tr in trajectories])
    old_lp = np.concatenate([tr.log_probs for tr in trajectories])
    adv = np.concatenate(
        [
            compute_gae(tr.rewards, tr.values, cfg.discount, cfg.gae_lambda)
            for tr in trajectories
        ]
    )
    returns = adv + np.concatenate([tr.values[:-1] for tr in trajectories])
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    pair_returns: dict = {}
    for tr in trajectories:
        if tr.script is not None:
            key = (tr.script.mode_from, tr.script.mode_to)
            pair_returns.setdefault(key, []).append(tr.episode_return)
    stats = UpdateStats(
        policy_loss=0.0,
        value_loss=0.0,
        entropy=entropy(policy),
        mean_return=float(np.mean([tr.episode_return for tr in trajectories])),
        returns_by_pair={k: float(np.mean(v)) for k, v in pair_returns.items()},
    )

    flat_p = pack_policy(policy)
    flat_v = pack_value(value)
    opt_p, opt_v = opt.policy.copy(), opt.value.copy()
    n = obs.shape[0]
    cur_policy, cur_value = policy, value
    last_pl, last_vl = 0.0, 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for chunk in np.array_split(order, cfg.minibatches):
            if chunk.size == 0:
                continue
            batch = {
                "obs": obs[chunk],
                "actions": actions[chunk],
                "old_log_probs": old_lp[chunk],
                "advantages": adv[chunk],
                "returns": returns[chunk],
            }
            loss, g_p, g_v = ppo_loss_and_grad(cur_policy, cur_value, batch, cfg)
            if not (
                math.isfinite(loss)
                and np.isfinite(g_p).all()
                and np.isfinite(g_v).all()
            ):
                stats.rejected = True
                return policy, value, opt, stats
            flat_p, opt_p = adam_step(flat_p, g_p, opt_p, cfg.learning_rate)
            flat_v, opt_v = adam_step(flat_v, g_v, opt_v, cfg.learning_rate)
            cur_policy = unpack_policy(flat_p, policy)
            cur_value = unpack_value(flat_v, value)
            mean, _ = mlp_forward(cur_policy.net, batch["obs"])
            lp = gaussian_log_prob(batch["actions"], mean, cur_policy.log_std)
            ratio = np.exp(lp - batch["old_log_probs"])
            clipped = np.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
            last_pl = -float(
                np.minimum(ratio * batch["advantages"], clipped * batch["advantages"]).mean()
            )
            v, _ = mlp_forward(cur_value.net, batch["obs"])
            last_vl = float(((v[:, 0] - batch["returns"]) ** 2).mean())
    stats.policy_loss = last_pl
    stats.value_loss = last_vl
    stats.entropy = entropy(cur_policy)
    return cur_policy, cur_value, PpoOptState(policy=opt_p, value=opt_v), stats


# --- episode rollout ----------------------------------------------------------


def rollout(
    policy: PolicyParams,
    value: ValueParams | None,
    library: ModeLibrary,
    script: EpisodeScript,
    terrain: Terrain,
    robot_cfg: RobotConfig,
    reward_cfg: RewardConfig,
    rng: np.random.Generator | None = None,
    stochastic: bool = True,
    clock_rate: float = 1.0,
    start_x: float = 0.0,
    trace: list | None = None,
) -> Trajectory:
    """Run one scripted episode in the biped environment.

    The latent command follows the script: the start mode until the switch
    step, the end mode after. At the switch the reference tracker is
    re-anchored at the robot's current x and the running phase, so the new
    mode's reference continues from where the robot actually is. Falls and
    blowups truncate the episode with a zero bootstrap value.
    """
    if script.mode_from >= library.n or script.mode_to >= library.n:
        raise ValueError("script modes outside the library")
    latents = []
    for idx in (script.mode_from, script.mode_to):
        z = library.latents[idx]
        if z is None:
            raise ValueError(f"mode {library.names[idx]} has no latent; train the encoder")
        latents.append(np.asarray(z.z if hasattr(z, "z") else z, dtype=float))

    state = initial_state(robot_cfg, terrain, x=start_x, clock_rate=clock_rate)
    tracker = ModeTracker(
        library.motions[script.mode_from], anchor_x=state.x, anchor_phase=state.phase
    )
    clips_done = 0
    current = 0  # index into latents / script modes

    obs_list = []
    act_list = []
    rew_list = []
    lp_list = []
    val_list = []
    fell = False
    blew_up = False
    for t in range(script.horizon):
        if t == script.switch_step and current == 0:
            current = 1
            tracker = ModeTracker(
                library.motions[script.mode_to],
                anchor_x=state.x,
                anchor_phase=state.phase,
            )
            clips_done = 0
        o = observe(state, latents[current])
        a, lp = act(policy, o, stochastic, rng)
        obs_list.append(o)
        act_list.append(a)
        lp_list.append(lp)
        if value is not None:
            val_list.append(value_of(value, o))
        else:
            val_list.append(0.0)
        new_state = step(state, a, terrain, robot_cfg)
        if new_state.phase < state.phase:
            clips_done += 1
        ref = tracker.at(new_state.phase, clips_done)
        r, _ = reward(new_state, ref, reward_cfg)
        rew_list.append(r)
        if trace is not None:
            trace.append((new_state, r, script.mode_from if current == 0 else script.mode_to))
        state = new_state
        status = termination(state, robot_cfg)
        if status != RUNNING:
            fell = status == FALLEN
            blew_up = status == BLOWUP
            break

    final_obs = observe(state, latents[current])
    if fell or blew_up:
        bootstrap = 0.0
    else:
        bootstrap = value_of(value, final_obs) if value is not None else 0.0
    return Trajectory(
        obs=np.vstack(obs_list + [final_obs]),
        actions=np.vstack(act_list),
        rewards=np.array(rew_list),
        log_probs=np.array(lp_list),
        values=np.array(val_list + [bootstrap]),
        script=script,
        fell=fell,
        blew_up=blew_up,
    )


def normalized_return(tr: Trajectory, reward_cfg: RewardConfig) -> float:
    """Episode return divided by the best possible sum over the full horizon."""
    ceiling = tr.script.horizon * reward_cfg.max_step_reward if tr.script else (
        tr.length * reward_cfg.max_step_reward
    )
    return tr.episode_return / ceiling if ceiling > 0 else 0.0


def evaluate_modes(
    policy: PolicyParams,
    library: ModeLibrary,
    terrain: Terrain,
    robot_cfg: RobotConfig,
    reward_cfg: RewardConfig,
    horizon: int = 200,
    rollouts_per_case: int = 1,
    clock_rate: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized mean returns per mode and per transition, deterministic policy.

    Mode scores use same-mode scripts; transition scores cycle the switch-time
    grid. Every entry is a mean of per-episode returns normalized by the
    episode ceiling, so 1.0 is perfect tracking and 0.0 is immediate failure.
    """
    from .sampler import SWITCH_CLIPS, SWITCH_PHASES, switch_step_for

    n = library.n
    cycle_steps = round(robot_cfg.cycle_duration / robot_cfg.control_dt)
    combos = [(c, p) for c in SWITCH_CLIPS for p in SWITCH_PHASES]
    mode_scores = np.zeros(n)
    transition_scores = np.zeros((n, n))
    for i in range(n):
        vals = []
        for k in range(rollouts_per_case):
            clip_s, phase_s = combos[k % len(combos)]
            script = EpisodeScript(
                mode_from=i,
                mode_to=i,
                switch_phase=phase_s,
                switch_clip=clip_s,
                switch_step=switch_step_for(clip_s, phase_s, cycle_steps),
                horizon=horizon,
            )
            tr = rollout(
                policy,
                None,
                library,
                script,
                terrain,
                robot_cfg,
                reward_cfg,
                stochastic=False,
                clock_rate=clock_rate,
            )
            vals.append(normalized_return(tr, reward_cfg))
        mode_scores[i] = np.mean(vals)
    for i in range(n):
        for j in range(n):
            vals = []
            for k in range(rollouts_per_case):
                clip_s, phase_s = combos[k % len(combos)]
                script = EpisodeScript(
                    mode_from=i,
                    mode_to=j,
                    switch_phase=phase_s,
                    switch_clip=clip_s,
                    switch_step=switch_step_for(clip_s, phase_s, cycle_steps),
                    horizon=horizon,
                )
                tr = rollout(
                    policy,
                    None,
                    library,
                    script,
                    terrain,
                    robot_cfg,
                    reward_cfg,
                    stochastic=False,
                    clock_rate=clock_rate,
                )
                vals.append(normalized_return(tr, reward_cfg))
            transition_scores[i, j] = np.mean(vals)
    return mode_scores, transition_scores


# --- serialization -------------------------------------------------------------


def policy_to_payload(policy: PolicyParams, value: ValueParams) -> dict:
    return {
        "obs_dim": policy.net.input_dim,
        "act_dim": policy.action_dim,
        "policy": {
            "weights": [array_to_payload(w) for w in policy.net.weights],
            "biases": [array_to_payload(b) for b in policy.net.biases],
            "log_std": array_to_payload(policy.log_std),
        },
        "value": {
            "weights": [array_to_payload(w) for w in value.net.weights],
            "biases": [array_to_payload(b) for b in value.net.biases],
        },
    }


def policy_from_payload(payload: dict) -> tuple[PolicyParams, ValueParams]:
    pol = MlpParams(
        weights=[array_from_payload(w) for w in payload["policy"]["weights"]],
        biases=[array_from_payload(b) for b in payload["policy"]["biases"]],
    )
    val = MlpParams(
        weights=[array_from_payload(w) for w in payload["value"]["weights"]],
        biases=[array_from_payload(b) for b in payload["value"]["biases"]],
    )
    return (
        PolicyParams(net=pol, log_std=array_from_payload(payload["policy"]["log_std"])),
        ValueParams(net=val),
    )
