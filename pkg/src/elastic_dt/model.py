"""Return-conditioned causal transformer with four heads.

Token layout is (observation, return-to-go, action) per timestep.  Per
position, the heads read:

* return-bin logits and the scalar max-return estimate from the observation
  token (causally before that step's return and action tokens, so both are
  well-defined during the inference-time length search);
* the action prediction from the return token's position, whose residual
  stream carries the return value the action is conditioned on;
* the next-observation prediction from the concatenated hidden states of the
  same step's observation and action tokens.

In return-masked mode every return token after the window-first valid one is
invisible as an attention key, so the max-return estimate depends only on
observations, actions, and the initial return: stacking layers cannot leak
intermediate return values forward.  Timestep embeddings index the global
environment step, which makes outputs independent of the amount of left
padding (a truncated history has one well-defined representation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TokenWindow
from .errors import ConfigError
from .numerics import ParamStore, Tensor
from .numerics import engine as ops

MODE_STANDARD = "standard-causal"
MODE_EDT = "edt-return-masked"

INIT_STD = 0.02
MLP_MULT = 4


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "continuous" | "discrete"
    dim: int  # action dims (continuous) or arity (discrete)

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ConfigError(f"unknown action kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigError("action dim must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int
    action: ActionSpace
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    max_timestep: int = 64
    n_return_bins: int = 60
    T: int = 20

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if min(self.obs_dim, self.n_layers, self.n_heads, self.n_return_bins) < 1:
            raise ConfigError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "action_kind": self.action.kind,
            "action_dim": self.action.dim,
            "embed_dim": self.embed_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_timestep": self.max_timestep,
            "n_return_bins": self.n_return_bins,
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            obs_dim=d["obs_dim"],
            action=ActionSpace(d["action_kind"], d["action_dim"]),
            embed_dim=d["embed_dim"],
            n_layers=d["n_layers"],
            n_heads=d["n_heads"],
            max_timestep=d["max_timestep"],
            n_return_bins=d["n_return_bins"],
            T=d["T"],
        )


@dataclass
class ModelOutputs:
    """Per-position predictions; arrays are Tensors on the autodiff tape."""

    return_logits: Tensor  # (..., T, n_bins)
    rtilde: Tensor  # (..., T) scalar max-return estimates, scaled units
    action_pred: Tensor  # (..., T, act_dim) tanh output, or (..., T, arity) logits
    next_obs_pred: Tensor  # (..., T, obs_dim)


def _param_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d = cfg.embed_dim
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("embed_timestep", (cfg.max_timestep + 1, d), "normal"),
        ("embed_obs_w", (cfg.obs_dim, d), "normal"),
        ("embed_obs_b", (d,), "zeros"),
        ("embed_return_w", (1, d), "normal"),
        ("embed_return_b", (d,), "zeros"),
    ]
    if cfg.action.kind == "continuous":
        spec += [("embed_action_w", (cfg.action.dim, d), "normal"), ("embed_action_b", (d,), "zeros")]
    else:
        spec += [("embed_action_table", (cfg.action.dim, d), "normal")]
    spec += [("embed_ln_g", (d,), "ones"), ("embed_ln_b", (d,), "zeros")]
    for i in range(cfg.n_layers):
        b = f"block{i}."
        spec += [
            (b + "ln1_g", (d,), "ones"),
            (b + "ln1_b", (d,), "zeros"),
            (b + "attn_qkv_w", (d, 3 * d), "normal"),
            (b + "attn_qkv_b", (3 * d,), "zeros"),
            (b + "attn_proj_w", (d, d), "normal"),
            (b + "attn_proj_b", (d,), "zeros"),
            (b + "ln2_g", (d,), "ones"),
            (b + "ln2_b", (d,), "zeros"),
            (b + "mlp_fc_w", (d, MLP_MULT * d), "normal"),
            (b + "mlp_fc_b", (MLP_MULT * d,), "zeros"),
            (b + "mlp_proj_w", (MLP_MULT * d, d), "normal"),
            (b + "mlp_proj_b", (d,), "zeros"),
        ]
    spec += [
        ("ln_f_g", (d,), "ones"),
        ("ln_f_b", (d,), "zeros"),
        ("head_return_w", (d, cfg.n_return_bins), "normal"),
        ("head_return_b", (cfg.n_return_bins,), "zeros"),
        ("head_rtilde_w", (d, 1), "normal"),
        ("head_rtilde_b", (1,), "zeros"),
        ("head_action_w", (d, cfg.action.dim), "normal"),
        ("head_action_b", (cfg.action.dim,), "zeros"),
        ("head_next_obs_w", (2 * d, cfg.obs_dim), "normal"),
        ("head_next_obs_b", (cfg.obs_dim,), "zeros"),
    ]
    return spec


def init_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Deterministic initialization: draws happen in fixed parameter order."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for name, shape, kind in _param_spec(cfg):
        if kind == "normal":
            values = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "ones":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        store.add(name, values)
    return store


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_spec(cfg))


def build_attention_mask(T: int, valid: np.ndarray, mode: str) -> np.ndarray:
    """Boolean (3T, 3T) matrix; entry [q, k] means token q may attend token k.

    Base rule: causal over the (o, R, a) token grid, padded positions are
    attendable by nothing.  Return-masked mode additionally hides every return
    token after the window-first valid one from all other tokens, so only the
    initial return value can steer later positions.  Padded query rows keep a
    self-connection so softmax rows are never empty.
    """
    if mode not in (MODE_STANDARD, MODE_EDT):
        raise ConfigError(f"unknown attention mode {mode!r}")
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (T,):
        raise ConfigError(f"valid mask must have shape ({T},)")
    L = 3 * T
    valid_tok = np.repeat(valid, 3)
    allowed = np.tril(np.ones((L, L), dtype=bool)) & valid_tok[None, :]
    if mode == MODE_EDT:
        steps = np.flatnonzero(valid)
        for j in steps[1:]:
            col = 3 * j + 1
            allowed[:, col] = False
            allowed[col, col] = True
    empty = ~allowed.any(axis=1)
    allowed[empty, np.arange(L)[empty]] = True
    return allowed


def _batched(window: TokenWindow) -> tuple[TokenWindow, bool]:
    if window.obs.ndim == 3:
        return window, True
    return (
        TokenWindow(
            obs=window.obs[None],
            rtg=window.rtg[None],
            actions=window.actions[None],
            timesteps=window.timesteps[None],
            valid=window.valid[None],
        ),
        False,
    )


def forward(
    params: ParamStore,
    window: TokenWindow,
    cfg: ModelConfig,
    mode: str = MODE_EDT,
) -> ModelOutputs:
    """Run the transformer over one window or a batch of windows."""
    window, was_batched = _batched(window)
    B, T = window.valid.shape
    if window.obs.shape[-1] != cfg.obs_dim:
        raise ConfigError(
            f"window obs dim {window.obs.shape[-1]} does not match model {cfg.obs_dim}"
        )
    dt = params.dtype
    d = cfg.embed_dim
    n_heads = cfg.n_heads
    head_dim = d // n_heads

    timesteps = np.minimum(window.timesteps, cfg.max_timestep)
    time_emb = ops.embedding(params["embed_timestep"], timesteps)

    obs_in = Tensor(window.obs.astype(dt))
    obs_tok = ops.matmul(obs_in, params["embed_obs_w"]) + params["embed_obs_b"] + time_emb

    ret_in = Tensor(window.rtg.astype(dt)[..., None])
    ret_tok = ops.matmul(ret_in, params["embed_return_w"]) + params["embed_return_b"] + time_emb

    if cfg.action.kind == "continuous":
        act_in = Tensor(window.actions.astype(dt))
        act_tok = ops.matmul(act_in, params["embed_action_w"]) + params["embed_action_b"]
    else:
        if window.actions.dtype.kind not in "iu":
            raise ConfigError("discrete action model fed non-integer actions")
        act_tok = ops.embedding(params["embed_action_table"], window.actions)
    act_tok = act_tok + time_emb

    tokens = ops.concat(
        [
            ops.reshape(obs_tok, (B, T, 1, d)),
            ops.reshape(ret_tok, (B, T, 1, d)),
            ops.reshape(act_tok, (B, T, 1, d)),
        ],
        axis=2,
    )
    x = ops.reshape(tokens, (B, 3 * T, d))
    x = ops.layer_norm(x, params["embed_ln_g"], params["embed_ln_b"])

    mask = np.stack([build_attention_mask(T, window.valid[b], mode) for b in range(B)])
    mask = mask[:, None, :, :]  # broadcast over heads
    scale = 1.0 / np.sqrt(head_dim)
    L = 3 * T

    for i in range(cfg.n_layers):
        b = f"block{i}."
        h = ops.layer_norm(x, params[b + "ln1_g"], params[b + "ln1_b"])
        qkv = ops.matmul(h, params[b + "attn_qkv_w"]) + params[b + "attn_qkv_b"]
        q = ops.transpose(ops.reshape(qkv[:, :, 0 * d : 1 * d], (B, L, n_heads, head_dim)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(qkv[:, :, 1 * d : 2 * d], (B, L, n_heads, head_dim)), (0, 2, 1, 3))
        v = ops.transpose(ops.reshape(qkv[:, :, 2 * d : 3 * d], (B, L, n_heads, head_dim)), (0, 2, 1, 3))
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * scale
        probs = ops.masked_softmax(scores, mask)
        ctx = ops.reshape(ops.transpose(ops.matmul(probs, v), (0, 2, 1, 3)), (B, L, d))
        x = x + (ops.matmul(ctx, params[b + "attn_proj_w"]) + params[b + "attn_proj_b"])
        h2 = ops.layer_norm(x, params[b + "ln2_g"], params[b + "ln2_b"])
        inner = ops.gelu(ops.matmul(h2, params[b + "mlp_fc_w"]) + params[b + "mlp_fc_b"])
        x = x + (ops.matmul(inner, params[b + "mlp_proj_w"]) + params[b + "mlp_proj_b"])

    x = ops.layer_norm(x, params["ln_f_g"], params["ln_f_b"])

    h_obs = x[:, 0::3, :]
    h_ret = x[:, 1::3, :]
    h_act = x[:, 2::3, :]

    return_logits = ops.matmul(h_obs, params["head_return_w"]) + params["head_return_b"]
    rtilde = (ops.matmul(h_obs, params["head_rtilde_w"]) + params["head_rtilde_b"])[..., 0]
    action_pred = ops.matmul(h_ret, params["head_action_w"]) + params["head_action_b"]
    if cfg.action.kind == "continuous":
        action_pred = ops.tanh(action_pred)
    next_obs_pred = (
        ops.matmul(ops.concat([h_obs, h_act], axis=-1), params["head_next_obs_w"])
        + params["head_next_obs_b"]
    )

    if not was_batched:
        return ModelOutputs(return_logits[0], rtilde[0], action_pred[0], next_obs_pred[0])
    return ModelOutputs(return_logits, rtilde, action_pred, next_obs_pred)
