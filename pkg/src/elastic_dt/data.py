"""Trajectory storage, return-to-go, return binning, and window sampling.

Returns-to-go use the inclusive convention: rtg[t] counts the reward earned at
step t, so the return token at t conditions the action taken at t.  Returns are
scaled into [0, 1] with the dataset's min/max episode returns before binning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

STD_FLOOR = 1e-6


class DataError(ValueError):
    pass


def compute_rtg(rewards) -> np.ndarray:
    """Suffix sums: rtg[t] = sum of rewards from step t to the end."""
    r = np.asarray(rewards, dtype=np.float32)
    if r.size == 0:
        return np.zeros(0, dtype=np.float32)
    return np.cumsum(r[::-1])[::-1].astype(np.float32)


@dataclass
class Trajectory:
    """One episode; observations include the terminal one (steps + 1 entries)."""

    observations: np.ndarray  # (steps+1, obs_dim) float32
    actions: np.ndarray  # (steps, act_dim) float32, or (steps,) int64
    rewards: np.ndarray  # (steps,) float32
    returns_to_go: np.ndarray = field(init=False)  # (steps+1,), trailing 0

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.actions = np.asarray(self.actions)
        if self.actions.dtype.kind in "iu":
            self.actions = self.actions.astype(np.int64)
        else:
            self.actions = np.atleast_2d(self.actions.astype(np.float32))
            if self.actions.shape[0] != self.steps and self.actions.size == self.steps:
                self.actions = self.actions.reshape(self.steps, -1)
        if self.observations.shape[0] != self.steps + 1:
            raise DataError(
                f"expected {self.steps + 1} observations for {self.steps} steps, "
                f"got {self.observations.shape[0]}"
            )
        self.returns_to_go = np.append(compute_rtg(self.rewards), np.float32(0.0))

    @property
    def steps(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(self.returns_to_go[0]) if self.steps else 0.0


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    action_kind: str  # "continuous" | "discrete"
    meta: dict = field(default_factory=dict)
    obs_mean: np.ndarray | None = None
    obs_std: np.ndarray | None = None
    return_min: float = 0.0
    return_max: float = 1.0

    def __post_init__(self):
        if self.trajectories:
            returns = [t.episode_return for t in self.trajectories]
            self.return_min = float(min(returns))
            self.return_max = float(max(returns))

    @property
    def obs_dim(self) -> int:
        return self.trajectories[0].observations.shape[1]

    @property
    def return_span(self) -> float:
        return max(self.return_max - self.return_min, STD_FLOOR)

    def scale_return(self, raw):
        return (np.asarray(raw, dtype=np.float32) - self.return_min) / self.return_span

    def normalize_obs(self, obs):
        return ((np.asarray(obs, dtype=np.float32) - self.obs_mean) / self.obs_std).astype(
            np.float32
        )

    def denormalize_obs(self, obs):
        return np.asarray(obs, dtype=np.float32) * self.obs_std + self.obs_mean

    def stats_dict(self) -> dict:
        return {
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
            "return_min": self.return_min,
            "return_max": self.return_max,
            "action_kind": self.action_kind,
        }


def fit_normalization(dataset: Dataset) -> Dataset:
    """Per-dimension population mean/std over all stored observations."""
    if not dataset.trajectories:
        raise DataError("cannot fit normalization on an empty dataset")
    all_obs = np.concatenate([t.observations for t in dataset.trajectories], axis=0)
    dataset.obs_mean = all_obs.mean(axis=0, dtype=np.float64).astype(np.float32)
    std = all_obs.std(axis=0, dtype=np.float64).astype(np.float32)
    dataset.obs_std = np.maximum(std, np.float32(STD_FLOOR))
    return dataset


@dataclass(frozen=True)
class ReturnTokenizer:
    """Uniform bins over [return_min, return_max] in scaled units."""

    n_bins: int
    return_min: float = 0.0
    return_max: float = 1.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise DataError("need at least 2 return bins")
        if not self.return_max > self.return_min:
            raise DataError("return_max must exceed return_min")

    @property
    def bin_width(self) -> float:
        return (self.return_max - self.return_min) / self.n_bins

    def tokenize(self, r) -> np.ndarray:
        r = np.clip(np.asarray(r, dtype=np.float64), self.return_min, self.return_max)
        bins = np.floor((r - self.return_min) / self.bin_width).astype(np.int64)
        return np.clip(bins, 0, self.n_bins - 1)

    def detokenize(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        return (self.return_min + (b + 0.5) * self.bin_width).astype(np.float32)

    def centers(self) -> np.ndarray:
        return self.detokenize(np.arange(self.n_bins))


@dataclass
class TokenWindow:
    """Model input covering up to T steps, left-padded and right-aligned.

    All arrays may carry an extra leading batch axis (the trainer collates
    windows by stacking).
    """

    obs: np.ndarray  # (T, obs_dim) normalized
    rtg: np.ndarray  # (T,) scaled into [0, 1]
    actions: np.ndarray  # (T, act_dim) float or (T,) int
    timesteps: np.ndarray  # (T,) global env step indices
    valid: np.ndarray  # (T,) bool, False at padded positions
    traj_id: int = -1
    start_offset: int = 0

    @property
    def T(self) -> int:
        return self.obs.shape[-2]


def sample_training_window(dataset: Dataset, T: int, rng: np.random.Generator) -> TokenWindow:
    """Sample a trajectory proportional to its step count, then a uniform offset.

    The combination is uniform over transitions, and the random offsets put
    every history length ending at every state into the training distribution.
    """
    if not dataset.trajectories:
        raise DataError("empty dataset")
    if T < 1:
        raise DataError("window length must be >= 1")
    lengths = np.array([t.steps for t in dataset.trajectories], dtype=np.float64)
    tid = int(rng.choice(len(lengths), p=lengths / lengths.sum()))
    traj = dataset.trajectories[tid]
    offset = int(rng.integers(0, traj.steps))
    return build_window(dataset, tid, offset, T)


def build_window(dataset: Dataset, traj_id: int, offset: int, T: int) -> TokenWindow:
    traj = dataset.trajectories[traj_id]
    take = min(T, traj.steps - offset)
    pad = T - take
    obs_dim = traj.observations.shape[1]
    obs = np.zeros((T, obs_dim), dtype=np.float32)
    rtg = np.zeros(T, dtype=np.float32)
    timesteps = np.zeros(T, dtype=np.int64)
    valid = np.zeros(T, dtype=bool)
    if dataset.action_kind == "discrete":
        actions = np.zeros(T, dtype=np.int64)
    else:
        actions = np.zeros((T, traj.actions.shape[1]), dtype=np.float32)
    sl = slice(offset, offset + take)
    obs[pad:] = dataset.normalize_obs(traj.observations[sl])
    rtg[pad:] = np.clip(dataset.scale_return(traj.returns_to_go[sl]), 0.0, 1.0)
    actions[pad:] = traj.actions[sl]
    timesteps[pad:] = np.arange(offset, offset + take)
    valid[pad:] = True
    return TokenWindow(obs, rtg, actions, timesteps, valid, traj_id=traj_id, start_offset=offset)


def collate_windows(windows: list[TokenWindow]) -> TokenWindow:
    return TokenWindow(
        obs=np.stack([w.obs for w in windows]),
        rtg=np.stack([w.rtg for w in windows]),
        actions=np.stack([w.actions for w in windows]),
        timesteps=np.stack([w.timesteps for w in windows]),
        valid=np.stack([w.valid for w in windows]),
    )


def next_obs_targets(window: TokenWindow) -> tuple[np.ndarray, np.ndarray]:
    """Normalized next-observation targets, batched or not.

    The target at position t is the observation at t+1 inside the window; the
    last valid position has no in-window successor and is masked out.
    """
    targets = np.zeros_like(window.obs)
    mask = np.zeros(window.valid.shape, dtype=bool)
    targets[..., :-1, :] = window.obs[..., 1:, :]
    mask[..., :-1] = window.valid[..., :-1] & window.valid[..., 1:]
    return targets, mask


# -- JSONL dataset files --------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """One header line of metadata, then one episode per line."""
    with open(path, "w") as fh:
        meta = dict(dataset.meta)
        meta["action_kind"] = dataset.action_kind
        fh.write(json.dumps({"meta": meta}) + "\n")
        for traj in dataset.trajectories:
            row = {
                "obs": [[float(v) for v in o] for o in traj.observations],
                "act": (
                    [int(a) for a in traj.actions]
                    if dataset.action_kind == "discrete"
                    else [[float(v) for v in a] for a in traj.actions]
                ),
                "rew": [float(r) for r in traj.rewards],
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if "meta" not in header:
            raise DataError(f"{path}: missing meta header line")
        meta = header["meta"]
        action_kind = meta.get("action_kind", "continuous")
        trajectories = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            act = np.asarray(row["act"])
            if action_kind == "discrete":
                act = act.astype(np.int64)
            else:
                act = act.astype(np.float32)
            trajectories.append(
                Trajectory(
                    observations=np.asarray(row["obs"], dtype=np.float32),
                    actions=act,
                    rewards=np.asarray(row["rew"], dtype=np.float32),
                )
            )
    dataset = Dataset(trajectories=trajectories, action_kind=action_kind, meta=meta)
    return fit_normalization(dataset)
