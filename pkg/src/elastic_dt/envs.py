"""Synthetic finite MDPs engineered so that trajectory stitching is necessary,
plus behavior policies and an exact dynamic-programming value oracle.

Both environments are deterministic; all stochasticity lives in the behavior
policies, which keeps the oracle exact and acceptance thresholds sharp.

* fork: two start states funnel into a shared middle state where a 1-dim
  continuous action decides between a rewarding and an unrewarding ending.
  The canonical dataset contains only good episodes from one start and bad
  episodes from the other, so acting well from the bad start requires
  stitching onto the good continuation.
* chain: a 1-D corridor with a small terminal reward on the left and a larger
  one on the right; discrete actions. Mixing random and mediocre behavior
  gives a replay-buffer-quality dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, Trajectory, fit_normalization
from .errors import ConfigError

FORK_START_A = 0
FORK_START_B = 1
FORK_MID = 2
FORK_END_GOOD = 3
FORK_END_BAD = 4


@dataclass(frozen=True)
class Env:
    """A finite, deterministic, fixed-horizon MDP."""

    name: str
    n_states: int
    obs_dim: int
    horizon: int
    action_kind: str  # "continuous" | "discrete"
    act_dim: int  # action dims (continuous) or arity (discrete)
    initial_states: tuple[int, ...]
    initial_probs: tuple[float, ...]
    terminal: frozenset[int]
    observe: Callable[[int], np.ndarray]
    transition: Callable[[int, object], tuple[int, float]]
    scripted: Callable[[int, str, np.random.Generator], object]
    # finite action menu reaching every distinct transition (for the DP oracle)
    dp_actions: tuple

    def reset(self, rng: np.random.Generator, forced_start: int | None = None) -> int:
        if forced_start is not None:
            return forced_start
        return int(rng.choice(self.initial_states, p=self.initial_probs))

    def step(self, state: int, action) -> tuple[int, float]:
        return self.transition(state, action)


def _one_hot(n: int):
    eye = np.eye(n, dtype=np.float32)

    def observe(state: int) -> np.ndarray:
        return eye[state].copy()

    return observe


def make_fork_env() -> Env:
    """Two-trajectory toy: both starts reach mid, where sign(a) picks the end."""

    def transition(state, action):
        if state in (FORK_START_A, FORK_START_B):
            return FORK_MID, 0.0
        if state == FORK_MID:
            a = float(np.asarray(action).reshape(-1)[0])
            return (FORK_END_GOOD, 1.0) if a >= 0.0 else (FORK_END_BAD, 0.0)
        return state, 0.0

    def scripted(state, kind, rng):
        if kind == "good":
            return np.array([1.0], dtype=np.float32)
        if kind == "bad":
            return np.array([-1.0], dtype=np.float32)
        if kind == "random":
            return rng.uniform(-1.0, 1.0, size=1).astype(np.float32)
        raise ConfigError(f"unknown scripted action kind {kind!r}")

    return Env(
        name="fork",
        n_states=5,
        obs_dim=5,
        horizon=2,
        action_kind="continuous",
        act_dim=1,
        initial_states=(FORK_START_A, FORK_START_B),
        initial_probs=(0.5, 0.5),
        terminal=frozenset({FORK_END_GOOD, FORK_END_BAD}),
        observe=_one_hot(5),
        transition=transition,
        scripted=scripted,
        dp_actions=(np.array([-1.0], dtype=np.float32), np.array([1.0], dtype=np.float32)),
    )


def make_chain_env(
    length: int = 9,
    horizon: int = 12,
    left_reward: float = 0.3,
    right_reward: float = 1.0,
) -> Env:
    """Corridor of `length` cells, start at center, terminal rewards at the ends."""
    if length < 5 or length % 2 == 0:
        raise ConfigError(f"chain length must be an odd integer >= 5, got {length}")
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    if not (right_reward > left_reward > 0):
        raise ConfigError(
            f"need right_reward > left_reward > 0, got ({left_reward}, {right_reward})"
        )
    left_cell, right_cell = 0, length - 1
    center = (length - 1) // 2

    def transition(state, action):
        a = int(np.asarray(action).reshape(())) if not np.isscalar(action) else int(action)
        nxt = state - 1 if a == 0 else state + 1
        nxt = min(max(nxt, 0), length - 1)
        if nxt == left_cell:
            return nxt, float(left_reward)
        if nxt == right_cell:
            return nxt, float(right_reward)
        return nxt, 0.0

    def scripted(state, kind, rng):
        if kind == "good":
            return 1
        if kind == "bad":
            return 0
        if kind == "random":
            return int(rng.integers(0, 2))
        raise ConfigError(f"unknown scripted action kind {kind!r}")

    return Env(
        name="chain",
        n_states=length,
        obs_dim=length,
        horizon=horizon,
        action_kind="discrete",
        act_dim=2,
        initial_states=(center,),
        initial_probs=(1.0,),
        terminal=frozenset({left_cell, right_cell}),
        observe=_one_hot(length),
        transition=transition,
        scripted=scripted,
        dp_actions=(0, 1),
    )


# -- behavior policies ------------------------------------------------------------


@dataclass(frozen=True)
class PolicySpec:
    """Behavior-policy description used to synthesize offline datasets.

    kinds: scripted-good, scripted-bad, epsilon-mediocre (take the bad action
    with probability epsilon, else the good one), random, and mixture (one
    component per episode; `cycle` assigns components round-robin instead of
    sampling, which pins the dataset composition exactly).
    """

    kind: str
    epsilon: float = 0.0
    components: tuple["PolicySpec", ...] = ()
    weights: tuple[float, ...] = ()
    cycle: bool = False
    forced_start: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.kind == "mixture":
            if not self.components:
                raise ConfigError("mixture policy needs components")
            if len(self.weights) != len(self.components):
                raise ConfigError("mixture weights must match components")
            if abs(sum(self.weights) - 1.0) > 1e-9:
                raise ConfigError("mixture weights must sum to 1")
        elif self.kind not in ("scripted-good", "scripted-bad", "epsilon-mediocre", "random"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")


def fork_canonical_policy() -> PolicySpec:
    """The two-trajectory dataset: good episodes from start A, bad from start B."""
    return PolicySpec(
        kind="mixture",
        components=(
            PolicySpec(kind="scripted-good", forced_start=FORK_START_A),
            PolicySpec(kind="scripted-bad", forced_start=FORK_START_B),
        ),
        weights=(0.5, 0.5),
        cycle=True,
    )


def chain_medium_replay_policy(epsilon: float = 0.3, random_weight: float = 0.5) -> PolicySpec:
    """Replay-buffer analog: a mix of random and mediocre episodes."""
    return PolicySpec(
        kind="mixture",
        components=(
            PolicySpec(kind="random"),
            PolicySpec(kind="epsilon-mediocre", epsilon=epsilon),
        ),
        weights=(random_weight, 1.0 - random_weight),
    )


def policy_action(env: Env, spec: PolicySpec, state: int, rng: np.random.Generator):
    if spec.kind == "random":
        return env.scripted(state, "random", rng)
    if spec.kind == "scripted-good":
        return env.scripted(state, "good", rng)
    if spec.kind == "scripted-bad":
        return env.scripted(state, "bad", rng)
    if spec.kind == "epsilon-mediocre":
        which = "bad" if rng.random() < spec.epsilon else "good"
        return env.scripted(state, which, rng)
    raise ConfigError(f"cannot act with policy kind {spec.kind!r}")


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    """Independent per-episode stream so episodes parallelize deterministically."""
    return np.random.default_rng(np.random.SeedSequence((seed, episode)))


def run_episode(
    env: Env,
    act_fn: Callable[[int, int, np.random.Generator], object],
    rng: np.random.Generator,
    forced_start: int | None = None,
) -> Trajectory:
    state = env.reset(rng, forced_start)
    observations = [env.observe(state)]
    actions, rewards = [], []
    for t in range(env.horizon):
        if state in env.terminal:
            break
        action = act_fn(state, t, rng)
        state, reward = env.step(state, action)
        actions.append(action)
        rewards.append(reward)
        observations.append(env.observe(state))
    if env.action_kind == "discrete":
        act_arr = np.asarray(actions, dtype=np.int64)
    else:
        act_arr = np.stack(actions).astype(np.float32) if actions else np.zeros((0, env.act_dim))
    return Trajectory(
        observations=np.stack(observations),
        actions=act_arr,
        rewards=np.asarray(rewards, dtype=np.float32),
    )


def generate_dataset(env: Env, spec: PolicySpec, n_episodes: int, seed: int) -> Dataset:
    """Roll out the behavior policy; deterministic per (seed, episode index)."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    trajectories = []
    for i in range(n_episodes):
        rng = episode_rng(seed, i)
        sub = spec
        if spec.kind == "mixture":
            if spec.cycle:
                sub = spec.components[i % len(spec.components)]
            else:
                sub = spec.components[int(rng.choice(len(spec.components), p=spec.weights))]
        traj = run_episode(
            env,
            lambda s, t, r: policy_action(env, sub, s, r),
            rng,
            forced_start=sub.forced_start,
        )
        trajectories.append(traj)
    dataset = Dataset(
        trajectories=trajectories,
        action_kind=env.action_kind,
        meta={"env": env.name, "seed": seed, "policy": spec.kind},
    )
    return fit_normalization(dataset)


# -- exact value oracle ------------------------------------------------------------


def optimal_return_oracle(env: Env, start_state: int) -> float:
    """Exact optimal undiscounted return by DP over (state, steps remaining)."""
    values = np.zeros(env.n_states, dtype=np.float64)
    for _ in range(env.horizon):
        nxt = np.zeros_like(values)
        for s in range(env.n_states):
            if s in env.terminal:
                continue
            best = -np.inf
            for a in env.dp_actions:
                s2, r = env.step(s, a)
                best = max(best, r + values[s2])
            nxt[s] = best
        values = nxt
    return float(values[start_state])


def random_policy_mean_return(env: Env, n_episodes: int = 1000, seed: int = 0) -> float:
    """Monte-Carlo mean return of the uniform-random policy (seeded)."""
    spec = PolicySpec(kind="random")
    total = 0.0
    for i in range(n_episodes):
        rng = episode_rng(seed, i)
        traj = run_episode(env, lambda s, t, r: policy_action(env, spec, s, r), rng)
        total += traj.episode_return
    return total / n_episodes


def replay_trajectory(env: Env, traj: Trajectory) -> bool:
    """Check the trajectory is reproduced exactly by the env's transitions."""

    def state_of(obs: np.ndarray) -> int:
        for s in range(env.n_states):
            if np.array_equal(env.observe(s), obs):
                return s
        raise ValueError("observation does not match any state")

    state = state_of(traj.observations[0])
    for t in range(traj.steps):
        state, reward = env.step(state, traj.actions[t])
        if reward != traj.rewards[t]:
            return False
        if not np.array_equal(env.observe(state), traj.observations[t + 1]):
            return False
    return True
