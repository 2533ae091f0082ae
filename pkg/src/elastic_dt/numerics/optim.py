"""AdamW with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .params import ParamStore

# Defaults the hyperparameter record does not pin down.
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLIP_MAX_NORM = 0.25

_CLIP_SLACK = 1e-6


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over every entry of every gradient tensor."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/norm when the global norm exceeds it.

    The slack in the trigger makes clipping exactly idempotent: a second pass
    over already-clipped gradients is the identity.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm <= max_norm * (1.0 + _CLIP_SLACK):
        return dict(grads)
    scale = max_norm / norm
    return {name: (g * np.asarray(scale, dtype=g.dtype)) for name, g in grads.items()}


def adamw_update(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    wd: float = 0.0,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> ParamStore:
    """One AdamW step, in place; weight decay is decoupled from the moments."""
    b1, b2 = betas
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {params[name].data.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    params.step += 1
    t = params.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name].data
        g = g.astype(p.dtype, copy=False)
        m = params.opt_m[name]
        v = params.opt_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (lr * (m_hat / (np.sqrt(v_hat) + eps)) + lr * wd * p).astype(p.dtype)
    return params
