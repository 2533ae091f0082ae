"""The combined training objective, the optimization loop, and checkpoints.

The scalar max-return head is fit by expectile regression with residual
u = target - prediction, so an expectile level near 1 penalizes
under-prediction and the head approaches the best return achievable in the
dataset from the given history.  At level 0.5 the objective is exactly half
the squared error.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Dataset,
    ReturnTokenizer,
    TokenWindow,
    collate_windows,
    next_obs_targets,
    sample_training_window,
)
from .errors import ConfigError
from .model import MODE_EDT, ModelConfig, ModelOutputs, forward, init_model
from .numerics import (
    NumericFault,
    ParamStore,
    Tensor,
    adamw_update,
    clip_global_norm,
    cross_entropy_logits,
    expectile_l2,
    global_grad_norm,
    masked_mean,
    squared_error,
)

METRIC_COLUMNS = ["step", "total", "l_return", "l_observation", "l_action", "l_max", "grad_norm"]

CHECKPOINT_MAGIC = b"EDT1"


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.99  # expectile level
    c_r: float = 0.001  # return-loss coefficient
    max_coeff: float = 0.5  # max-return-loss coefficient
    action_loss_kind: str = "mse"  # "mse" (continuous) | "ce" (discrete)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64  # 256 upstream; 64 keeps CPU runs short
    n_steps: int = 2000
    grad_clip: float = 0.25
    seed: int = 0
    eval_every: int = 200

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("c_r", "max_coeff", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.action_loss_kind not in ("mse", "ce"):
            raise ConfigError(f"unknown action_loss_kind {self.action_loss_kind!r}")
        if self.batch_size < 1 or self.n_steps < 0 or self.grad_clip <= 0:
            raise ConfigError("batch_size >= 1, n_steps >= 0, grad_clip > 0 required")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    """Scalar loss terms, still on the tape; total drives backward()."""

    total: Tensor
    l_return: Tensor
    l_observation: Tensor
    l_action: Tensor
    l_max: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "total": float(self.total.data),
            "l_return": float(self.l_return.data),
            "l_observation": float(self.l_observation.data),
            "l_action": float(self.l_action.data),
            "l_max": float(self.l_max.data),
        }


def expectile_loss(pred: Tensor, target, alpha: float, valid: np.ndarray | None = None) -> Tensor:
    """Mean of |alpha - 1(u<0)| * u^2 over valid positions, u = target - pred."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    penalty = expectile_l2(pred, target, alpha)
    if valid is None:
        valid = np.ones(penalty.shape, dtype=bool)
    return masked_mean(penalty, valid)


def action_loss_weight(cfg: TrainConfig) -> float:
    """1 for continuous (MSE) actions, 10 * c_r for discrete (CE) actions."""
    return 1.0 if cfg.action_loss_kind == "mse" else 10.0 * cfg.c_r


def edt_loss(
    outputs: ModelOutputs,
    window: TokenWindow,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> LossBreakdown:
    """Combined objective over one (possibly batched) return-masked forward."""
    if (model_cfg.action.kind == "continuous") != (cfg.action_loss_kind == "mse"):
        raise ConfigError(
            f"action head kind {model_cfg.action.kind!r} does not match "
            f"action_loss_kind {cfg.action_loss_kind!r}"
        )
    valid = window.valid
    dt = outputs.rtilde.dtype

    tok = ReturnTokenizer(model_cfg.n_return_bins)
    rtg_bins = tok.tokenize(window.rtg)
    l_return = cross_entropy_logits(outputs.return_logits, rtg_bins, valid)

    obs_targets, obs_mask = next_obs_targets(window)
    if obs_mask.any():
        l_observation = masked_mean(
            squared_error(outputs.next_obs_pred, obs_targets.astype(dt)), obs_mask[..., None]
        )
    else:  # every window is a single step: nothing to predict
        l_observation = Tensor(np.zeros((), dtype=dt))

    if cfg.action_loss_kind == "mse":
        if window.actions.dtype.kind in "iu":
            raise ConfigError("MSE action loss fed integer actions")
        l_action = masked_mean(
            squared_error(outputs.action_pred, window.actions.astype(dt)), valid[..., None]
        )
    else:
        if window.actions.dtype.kind not in "iu":
            raise ConfigError("CE action loss fed continuous actions")
        l_action = cross_entropy_logits(outputs.action_pred, window.actions, valid)

    l_max = expectile_loss(outputs.rtilde, Tensor(window.rtg.astype(dt)), cfg.alpha, valid)

    total = (
        l_return * cfg.c_r
        + l_observation
        + l_action * action_loss_weight(cfg)
        + l_max * cfg.max_coeff
    )
    return LossBreakdown(total, l_return, l_observation, l_action, l_max)


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    init_params: ParamStore | None = None,
    rng_state: dict | None = None,
    verbose: bool = False,
) -> tuple[ParamStore, list[dict], dict]:
    """Run the optimization loop; returns (params, metric rows, final rng state).

    Deterministic given (dataset, configs, seed).  A numeric fault aborts with
    the offending training step in the message.
    """
    if not dataset.trajectories:
        raise ConfigError("cannot train on an empty dataset")
    params = init_params if init_params is not None else init_model(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    metrics: list[dict] = []
    recent: list[float] = []
    for step in range(1, cfg.n_steps + 1):
        windows = [sample_training_window(dataset, model_cfg.T, rng) for _ in range(cfg.batch_size)]
        batch = collate_windows(windows)
        try:
            outputs = forward(params, batch, model_cfg, MODE_EDT)
            breakdown = edt_loss(outputs, batch, cfg, model_cfg)
            params.zero_grads()
            breakdown.total.backward()
        except NumericFault as fault:
            raise NumericFault(f"{fault.op} (training step {step})") from fault
        grads = {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.items()
        }
        norm = global_grad_norm(grads)
        adamw_update(
            params,
            clip_global_norm(grads, cfg.grad_clip),
            lr=cfg.lr,
            wd=cfg.weight_decay,
        )
        row = {"step": step, **breakdown.floats(), "grad_norm": norm}
        metrics.append(row)
        recent.append(row["total"])
        if verbose and cfg.eval_every and step % cfg.eval_every == 0:
            print(
                f"step {step}: smoothed total {np.mean(recent):.5f} "
                f"(last {len(recent)} steps), grad norm {norm:.4f}"
            )
            recent = []
    params.zero_grads()
    return params, metrics, rng.bit_generator.state


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if c != "step" else str(row[c]) for c in METRIC_COLUMNS) + "\n")


def scalar_expectile(sample, alpha: float, tol: float = 1e-10) -> float:
    """Minimize the implemented expectile loss over a scalar by bisection.

    The loss is convex with an increasing derivative, so bisecting the
    reverse-mode gradient brackets the minimizer to any precision.
    """
    sample = np.asarray(sample, dtype=np.float64)
    lo, hi = float(sample.min()), float(sample.max())
    if lo == hi:
        return lo

    def grad_at(m: float) -> float:
        pred = Tensor(np.array(m), requires_grad=True)
        expectile_loss(pred, Tensor(sample), alpha).backward()
        return float(pred.grad)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo < tol:
            break
        if grad_at(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# -- checkpoint format -----------------------------------------------------------


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    model_cfg: ModelConfig
    data_stats: dict
    tokenizer: ReturnTokenizer
    train_config: dict = field(default_factory=dict)
    rng_state: dict | None = None


def _array_entries(params: ParamStore) -> list[tuple[str, str, np.ndarray]]:
    entries = [("param", name, t.data) for name, t in params.items()]
    entries += [("opt_m", name, params.opt_m[name]) for name in params.names()]
    entries += [("opt_v", name, params.opt_v[name]) for name in params.names()]
    return entries


def save_checkpoint(
    path,
    params: ParamStore,
    model_cfg: ModelConfig,
    data_stats: dict,
    tokenizer: ReturnTokenizer,
    train_config: dict | None = None,
    rng_state: dict | None = None,
) -> None:
    """Magic, little-endian u32 header length, JSON header, raw f32 arrays."""
    entries = _array_entries(params)
    header = {
        "model_config": model_cfg.to_dict(),
        "train_config": train_config or {},
        "data_stats": data_stats,
        "tokenizer": {
            "n_bins": tokenizer.n_bins,
            "return_min": tokenizer.return_min,
            "return_max": tokenizer.return_max,
        },
        "rng_state": rng_state,
        "opt_step": params.step,
        "arrays": [
            {"kind": kind, "name": name, "shape": list(arr.shape)} for kind, name, arr in entries
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, _, arr in entries:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    model_cfg = ModelConfig.from_dict(header["model_config"])
    params = ParamStore(np.float32)
    offset = 8 + header_len
    arrays: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4").reshape(shape).copy()
        arrays[(entry["kind"], entry["name"])] = arr
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    for (kind, name), arr in arrays.items():
        if kind == "param":
            params.add(name, arr)
    for (kind, name), arr in arrays.items():
        if kind == "opt_m":
            params.opt_m[name] = arr
        elif kind == "opt_v":
            params.opt_v[name] = arr
    params.step = int(header.get("opt_step", 0))
    tok = header["tokenizer"]
    return Checkpoint(
        params=params,
        model_cfg=model_cfg,
        data_stats=header["data_stats"],
        tokenizer=ReturnTokenizer(tok["n_bins"], tok["return_min"], tok["return_max"]),
        train_config=header.get("train_config", {}),
        rng_state=header.get("rng_state"),
    )
