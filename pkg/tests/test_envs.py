"""Fork and chain environments, behavior policies, and the DP value oracle."""

import numpy as np
import pytest

from elastic_dt.data import save_dataset
from elastic_dt.envs import (
    FORK_END_BAD,
    FORK_END_GOOD,
    FORK_MID,
    FORK_START_A,
    FORK_START_B,
    PolicySpec,
    chain_medium_replay_policy,
    fork_canonical_policy,
    generate_dataset,
    make_chain_env,
    make_fork_env,
    optimal_return_oracle,
    random_policy_mean_return,
    replay_trajectory,
)
from elastic_dt.errors import ConfigError


def test_fork_transitions():
    env = make_fork_env()
    state, r = env.step(FORK_START_A, np.array([1.0]))
    assert (state, r) == (FORK_MID, 0.0)
    state, r = env.step(FORK_MID, np.array([1.0]))
    assert (state, r) == (FORK_END_GOOD, 1.0)
    state, r = env.step(FORK_MID, np.array([-0.2]))
    assert (state, r) == (FORK_END_BAD, 0.0)
    # boundary: a = 0 counts as the good side
    assert env.step(FORK_MID, np.array([0.0]))[0] == FORK_END_GOOD
    assert np.array_equal(env.observe(FORK_MID), [0, 0, 1, 0, 0])


def test_fork_optimal_returns():
    env = make_fork_env()
    assert optimal_return_oracle(env, FORK_START_A) == 1.0
    assert optimal_return_oracle(env, FORK_START_B) == 1.0
    assert optimal_return_oracle(env, FORK_END_BAD) == 0.0


def test_chain_oracle_values():
    env = make_chain_env(9, 12, 0.3, 1.0)
    center = 4
    assert optimal_return_oracle(env, center) == 1.0
    assert optimal_return_oracle(make_chain_env(9, 5, 0.3, 1.0), center) == 1.0
    # 3 steps cannot reach either end from the center
    assert optimal_return_oracle(make_chain_env(9, 3, 0.3, 1.0), center) == 0.0
    # adjacent to the poor end, short horizon: only 0.3 is reachable
    assert optimal_return_oracle(make_chain_env(9, 2, 0.3, 1.0), 1) == 0.3


def test_chain_validation():
    with pytest.raises(ConfigError):
        make_chain_env(8, 12, 0.3, 1.0)
    with pytest.raises(ConfigError):
        make_chain_env(3, 12, 0.3, 1.0)
    with pytest.raises(ConfigError):
        make_chain_env(9, 12, 1.0, 0.3)
    with pytest.raises(ConfigError):
        make_chain_env(9, 0, 0.3, 1.0)


def test_chain_scripted_bad_reaches_left_reward():
    env = make_chain_env(9, 12, 0.3, 1.0)
    ds = generate_dataset(env, PolicySpec(kind="scripted-bad"), 3, seed=0)
    assert all(t.episode_return == pytest.approx(0.3) for t in ds.trajectories)
    assert all(t.steps == 4 for t in ds.trajectories)


def test_fork_canonical_dataset_shape():
    env = make_fork_env()
    ds = generate_dataset(env, fork_canonical_policy(), 100, seed=7)
    returns = np.array([t.episode_return for t in ds.trajectories])
    assert (returns == 1.0).sum() == 50
    assert (returns == 0.0).sum() == 50
    for i, traj in enumerate(ds.trajectories):
        start = FORK_START_A if i % 2 == 0 else FORK_START_B
        assert np.argmax(traj.observations[0]) == start
        assert np.argmax(traj.observations[1]) == FORK_MID
    assert (ds.return_min, ds.return_max) == (0.0, 1.0)


def test_dataset_generation_deterministic(tmp_path):
    env = make_chain_env(9, 12, 0.3, 1.0)
    spec = chain_medium_replay_policy()
    paths = []
    for run in range(2):
        ds = generate_dataset(env, spec, 40, seed=13)
        p = tmp_path / f"run{run}.jsonl"
        save_dataset(ds, p)
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]


def test_replay_and_oracle_dominance():
    for env, spec in [
        (make_fork_env(), fork_canonical_policy()),
        (make_chain_env(9, 12, 0.3, 1.0), chain_medium_replay_policy()),
    ]:
        ds = generate_dataset(env, spec, 30, seed=5)
        for traj in ds.trajectories:
            assert replay_trajectory(env, traj)
            start = int(np.argmax(traj.observations[0]))
            assert optimal_return_oracle(env, start) >= traj.episode_return - 1e-9


def test_policy_spec_validation():
    with pytest.raises(ConfigError):
        PolicySpec(kind="nonsense")
    with pytest.raises(ConfigError):
        PolicySpec(kind="epsilon-mediocre", epsilon=1.5)
    with pytest.raises(ConfigError):
        PolicySpec(
            kind="mixture",
            components=(PolicySpec(kind="random"),),
            weights=(0.5,),
        )
    with pytest.raises(ConfigError):
        generate_dataset(make_fork_env(), PolicySpec(kind="random"), 0, seed=0)


def test_random_baseline_between_bounds():
    env = make_fork_env()
    mean = random_policy_mean_return(env, n_episodes=400, seed=1)
    assert 0.3 < mean < 0.7  # sign of a uniform action is a fair coin
