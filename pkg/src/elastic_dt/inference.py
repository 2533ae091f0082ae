"""Elastic action selection and rollout evaluation.

Each decision: (1) build the candidate history-length grid, (2) one
return-masked forward pass per candidate to read the scalar max-return
estimate at the current observation, (3) keep the return distribution from the
winning pass, tilt it toward expert-level returns, filter to the top
percentile, and sample this step's return token, (4) one more forward pass
over the winning truncation with that token in place to read the action.

No environment reward is consumed at test time: the return tokens fed back
into the history are the previously sampled ones, and with return masking only
the window-first of them can steer later predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ReturnTokenizer, TokenWindow
from .envs import Env, episode_rng
from .errors import ConfigError
from .model import MODE_EDT, forward
from .training import Checkpoint

DELTA_DEFAULT = 2  # search stride; upstream choice that needs no tuning
KAPPA_DEFAULT = 10.0
TOP_PCT_DEFAULT = 0.85

CHOSEN_LOG_COLUMNS = ["episode", "step", "timestep", "chosen_w", "rtilde_max", "sampled_return_bin"]


@dataclass(frozen=True)
class InferenceConfig:
    T: int = 20
    delta: int = DELTA_DEFAULT
    kappa: float = KAPPA_DEFAULT
    top_pct: float = TOP_PCT_DEFAULT
    fixed_w: int | None = None  # force a constant history length (baseline mode)
    heuristic: bool = False  # local search around the previous step's length
    heuristic_delta: int | None = None  # half-width; defaults to 2 * delta

    def __post_init__(self):
        if self.T < 1 or self.delta < 1:
            raise ConfigError("T and delta must be >= 1")
        if self.kappa < 0:
            raise ConfigError("kappa must be >= 0")
        if not 0.0 < self.top_pct < 1.0:
            raise ConfigError("top_pct must lie in (0, 1)")
        if self.fixed_w is not None and self.fixed_w < 1:
            raise ConfigError("fixed_w must be >= 1")

    @property
    def local_delta(self) -> int:
        return self.heuristic_delta if self.heuristic_delta is not None else 2 * self.delta

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "delta": self.delta,
            "kappa": self.kappa,
            "top_pct": self.top_pct,
            "fixed_w": self.fixed_w,
            "heuristic": self.heuristic,
            "heuristic_delta": self.heuristic_delta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        return cls(**d)


@dataclass
class ForwardCounter:
    """Instrumentation: passes spent searching lengths vs. predicting actions."""

    search_passes: int = 0
    action_passes: int = 0


class TraversedBuffer:
    """The last up-to-T steps walked so far: obs, action, sampled return, time."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.obs: list[np.ndarray] = []
        self.actions: list = []
        self.return_tokens: list[float] = []
        self.timesteps: list[int] = []

    def __len__(self) -> int:
        return len(self.obs)

    def append(self, obs: np.ndarray, action, return_token: float, timestep: int) -> None:
        if self.timesteps and timestep != self.timesteps[-1] + 1:
            raise ConfigError(
                f"non-contiguous timestep {timestep} after {self.timesteps[-1]}"
            )
        self.obs.append(np.asarray(obs, dtype=np.float32))
        self.actions.append(action)
        self.return_tokens.append(float(return_token))
        self.timesteps.append(int(timestep))
        if len(self.obs) > self.capacity:
            self.obs.pop(0)
            self.actions.pop(0)
            self.return_tokens.pop(0)
            self.timesteps.pop(0)


@dataclass
class SearchResult:
    lengths: list[int]
    rtilde: np.ndarray  # one estimate per candidate length
    w_star: int
    return_logits: np.ndarray  # logits retained from the winning pass


def build_search_space(T: int, delta: int, available: int) -> list[int]:
    """Descending grid {T, T-delta, ...} clipped to [1, available]; never empty."""
    if delta < 1 or available < 1 or T < 1:
        raise ConfigError("build_search_space needs T, delta, available >= 1")
    grid = range(T, 0, -delta)
    lengths = [w for w in grid if w <= available]
    return lengths if lengths else [min(T, available)]


def local_search_step(prev_w: int, local_delta: int, T: int, available: int) -> list[int]:
    """Contiguous range around the previous winner, clipped to feasible lengths."""
    if prev_w < 1:
        raise ConfigError("prev_w must be >= 1")
    hi = min(prev_w + local_delta, T, available)
    lo = max(prev_w - local_delta, 1)
    if lo > hi:
        return [min(T, available)]
    return list(range(lo, hi + 1))


def choose_length(lengths: list[int], rtilde: np.ndarray) -> int:
    """Index of the best candidate: max estimate, ties to the longest length."""
    return max(range(len(lengths)), key=lambda i: (rtilde[i], lengths[i]))


def _candidate_window(
    policy: Checkpoint,
    buffer: TraversedBuffer,
    current_obs: np.ndarray,
    current_timestep: int,
    w: int,
    width: int,
    return_token: float | None,
) -> TokenWindow:
    """Window of `width` slots whose last `w` are the truncated history.

    The current step contributes its observation; its return slot holds the
    sampled token during the action pass and a placeholder during the search
    (the observation position cannot causally see either).
    """
    cfg = policy.model_cfg
    obs = np.zeros((width, cfg.obs_dim), dtype=np.float32)
    rtg = np.zeros(width, dtype=np.float32)
    timesteps = np.zeros(width, dtype=np.int64)
    valid = np.zeros(width, dtype=bool)
    if cfg.action.kind == "discrete":
        actions = np.zeros(width, dtype=np.int64)
    else:
        actions = np.zeros((width, cfg.action.dim), dtype=np.float32)
    past = w - 1
    for slot, idx in enumerate(range(len(buffer) - past, len(buffer))):
        pos = width - w + slot
        obs[pos] = buffer.obs[idx]
        rtg[pos] = buffer.return_tokens[idx]
        actions[pos] = buffer.actions[idx]
        timesteps[pos] = buffer.timesteps[idx]
        valid[pos] = True
    obs[-1] = current_obs
    rtg[-1] = 0.0 if return_token is None else return_token
    timesteps[-1] = current_timestep
    valid[-1] = True
    return TokenWindow(obs, rtg, actions, timesteps, valid)


def estimate_max_returns(
    policy: Checkpoint,
    buffer: TraversedBuffer,
    current_obs: np.ndarray,
    current_timestep: int,
    lengths: list[int],
    counter: ForwardCounter | None = None,
) -> SearchResult:
    """One return-masked pass per candidate length, batched for convenience.

    Results are independent of the batching because outputs are invariant to
    the amount of left padding.
    """
    if not lengths:
        raise ConfigError("estimate_max_returns needs at least one candidate")
    width = max(lengths)
    from .data import collate_windows

    windows = [
        _candidate_window(policy, buffer, current_obs, current_timestep, w, width, None)
        for w in lengths
    ]
    out = forward(policy.params, collate_windows(windows), policy.model_cfg, MODE_EDT)
    if counter is not None:
        counter.search_passes += len(lengths)
    rtilde = out.rtilde.data[:, -1].astype(np.float64)
    best = choose_length(lengths, rtilde)
    return SearchResult(
        lengths=list(lengths),
        rtilde=rtilde,
        w_star=lengths[best],
        return_logits=out.return_logits.data[best, -1].astype(np.float64),
    )


def expert_return_distribution(
    return_logits: np.ndarray, tok: ReturnTokenizer, kappa: float
) -> np.ndarray:
    """Tilt the predicted return distribution by exp(kappa * return), in log space."""
    if kappa < 0:
        raise ConfigError("kappa must be >= 0")
    logits = np.asarray(return_logits, dtype=np.float64) + kappa * tok.centers()
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def top_percentile_filter(probs: np.ndarray, pct: float) -> np.ndarray:
    """Zero out bins below the pct-quantile of the probabilities; renormalize.

    The quantile is over the probability multiset with linear interpolation;
    the argmax always survives, so the output is never empty.
    """
    if not 0.0 < pct < 1.0:
        raise ConfigError("pct must lie in (0, 1)")
    probs = np.asarray(probs, dtype=np.float64)
    threshold = np.quantile(probs, pct)
    keep = probs >= threshold
    keep[np.argmax(probs)] = True
    out = probs * keep
    return out / out.sum()


def select_action(
    policy: Checkpoint,
    buffer: TraversedBuffer,
    current_obs: np.ndarray,
    current_timestep: int,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    counter: ForwardCounter | None = None,
    prev_w: int | None = None,
):
    """Full decision pipeline; returns (action, SearchResult, sampled return token)."""
    available = min(len(buffer) + 1, cfg.T)
    if cfg.fixed_w is not None:
        lengths = [min(cfg.fixed_w, available)]
    elif cfg.heuristic and prev_w is not None:
        lengths = local_search_step(prev_w, cfg.local_delta, cfg.T, available)
    else:
        lengths = build_search_space(cfg.T, cfg.delta, available)
    search = estimate_max_returns(
        policy, buffer, current_obs, current_timestep, lengths, counter
    )
    expert = expert_return_distribution(search.return_logits, policy.tokenizer, cfg.kappa)
    filtered = top_percentile_filter(expert, cfg.top_pct)
    sampled_bin = int(rng.choice(len(filtered), p=filtered))
    return_token = float(policy.tokenizer.detokenize(sampled_bin))

    window = _candidate_window(
        policy, buffer, current_obs, current_timestep, search.w_star, search.w_star, return_token
    )
    out = forward(policy.params, window, policy.model_cfg, MODE_EDT)
    if counter is not None:
        counter.action_passes += 1
    if policy.model_cfg.action.kind == "continuous":
        action = out.action_pred.data[-1].astype(np.float32)
    else:
        logits = out.action_pred.data[-1].astype(np.float64)
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        action = int(rng.choice(len(probs), p=top_percentile_filter(probs, cfg.top_pct)))
    return action, search, return_token


@dataclass
class RolloutResult:
    returns: np.ndarray  # per-episode undiscounted returns
    episode_lengths: np.ndarray
    chosen_log: list[dict] = field(default_factory=list)
    counter: ForwardCounter = field(default_factory=ForwardCounter)

    def chosen_length_histogram(self, T: int) -> np.ndarray:
        """Counts over lengths 1..T (index 0 <-> length 1)."""
        counts = np.zeros(T, dtype=np.int64)
        for row in self.chosen_log:
            counts[row["chosen_w"] - 1] += 1
        return counts


def make_normalizer(policy: Checkpoint):
    stats = policy.data_stats
    mean = np.asarray(stats["obs_mean"], dtype=np.float32)
    std = np.asarray(stats["obs_std"], dtype=np.float32)

    def normalize(obs: np.ndarray) -> np.ndarray:
        return ((np.asarray(obs, dtype=np.float32) - mean) / std).astype(np.float32)

    return normalize


def rollout(
    env: Env,
    policy: Checkpoint,
    cfg: InferenceConfig,
    n_episodes: int,
    seed: int,
    start_state: int | None = None,
) -> RolloutResult:
    """Evaluate the policy; per-episode RNG streams make runs seed-deterministic."""
    if policy.model_cfg.action.kind != env.action_kind:
        raise ConfigError(
            f"model action kind {policy.model_cfg.action.kind!r} does not match "
            f"env {env.action_kind!r}"
        )
    if policy.model_cfg.obs_dim != env.obs_dim:
        raise ConfigError("model and env observation dims differ")
    normalize = make_normalizer(policy)
    result = RolloutResult(
        returns=np.zeros(n_episodes, dtype=np.float64),
        episode_lengths=np.zeros(n_episodes, dtype=np.int64),
    )
    for ep in range(n_episodes):
        rng = episode_rng(seed, ep)
        state = env.reset(rng, start_state)
        buffer = TraversedBuffer(cfg.T)
        prev_w: int | None = None
        total = 0.0
        steps = 0
        for t in range(env.horizon):
            if state in env.terminal:
                break
            obs_n = normalize(env.observe(state))
            action, search, return_token = select_action(
                policy, buffer, obs_n, t, cfg, rng, result.counter, prev_w
            )
            buffer.append(obs_n, action, return_token, t)
            prev_w = search.w_star
            state, reward = env.step(state, action)
            total += reward
            steps += 1
            result.chosen_log.append(
                {
                    "episode": ep,
                    "step": t,
                    "timestep": t,
                    "chosen_w": search.w_star,
                    "rtilde_max": float(search.rtilde.max()),
                    "sampled_return_bin": int(policy.tokenizer.tokenize(return_token)),
                }
            )
        result.returns[ep] = total
        result.episode_lengths[ep] = steps
    return result


def write_chosen_log_csv(rows: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CHOSEN_LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) for c in CHOSEN_LOG_COLUMNS) + "\n")
