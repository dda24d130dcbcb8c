"""Discrete-state bridge over binary activation vectors: endpoint mixtures,
posterior cross-entropy, and a factorized per-gene CTMC Euler sampler.

The time grid is shared with the continuous sampler (same BridgeConfig).
"""

import numpy as np

from .errors import NumericalError


def discretize(x):
    """Binary activation state: 1 wherever the value is nonzero."""
    return (np.asarray(x) != 0).astype(np.int8)


def kappa(t, horizon):
    """Mixing schedule for the discrete bridge: linear from 0 to 1."""
    return np.asarray(t, dtype=np.float64) / horizon


def discrete_interpolate(d0, d_end, t, horizon, rng):
    """Per-coordinate mixture state: each bit equals the terminal bit with
    probability kappa(t) and the initial bit otherwise.

    Accepts single vectors with scalar t or (B, N) batches with a length-B t.
    """
    d0 = np.asarray(d0)
    d_end = np.asarray(d_end)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > horizon):
        raise ValueError(f"t must lie in [0, {horizon}]")
    k = kappa(t_arr, horizon)
    u = rng.random(d0.shape)
    if d0.ndim == 2:
        k = k[:, None]
    return np.where(u < k, d_end, d0).astype(np.int8)


def posterior_loss(logits, d_end):
    """Summed per-gene binary cross-entropy against the true terminal state.

    Evaluated in the log-sum-exp stable form; returns (loss, grad) with
    grad = sigmoid(logits) - d_end.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(d_end, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {target.shape}")
    # BCE(sigmoid(l), d) = max(l, 0) - l*d + log(1 + exp(-|l|))
    loss = float((np.maximum(logits, 0.0) - logits * target
                  + np.log1p(np.exp(-np.abs(logits)))).sum())
    grad = _sigmoid(logits) - target
    return loss, grad


def posterior_loss_batch(logits, d_end):
    """Batch mean of the per-row summed cross-entropy; grad is dL/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(d_end, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {target.shape}")
    b = logits.shape[0]
    per_row = (np.maximum(logits, 0.0) - logits * target
               + np.log1p(np.exp(-np.abs(logits)))).sum(axis=1)
    grad = (_sigmoid(logits) - target) / b
    return float(per_row.mean()), grad


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ctmc_step(d_t, q, t, h, horizon, rng):
    """One Euler step of the per-gene jump process.

    q[i] is the predicted probability that gene i is active at the horizon.
    Inactive genes turn on with probability clamp(h * q / (T - t), 0, 1) and
    active genes turn off with probability clamp(h * (1 - q) / (T - t), 0, 1),
    so the final step (T - t = h) lands on the posterior sample exactly.
    """
    d_t = np.asarray(d_t)
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("q must lie in [0, 1]")
    if t + h > horizon + 1e-9 * horizon:
        raise ValueError("t + h must not exceed the horizon")
    remaining = horizon - t
    # the last grid step has remaining == h up to accumulated roundoff; snap
    # the ratio to 1 so the clamp makes the terminal draw exact
    rate_scale = 1.0 if remaining <= h * (1.0 + 1e-9) else h / remaining
    p_on = np.clip(rate_scale * q, 0.0, 1.0)
    p_off = np.clip(rate_scale * (1.0 - q), 0.0, 1.0)
    flip_p = np.where(d_t == 0, p_on, p_off)
    u = rng.random(d_t.shape)
    return np.where(u < flip_p, 1 - d_t, d_t).astype(np.int8)


def sample_activation(d0, predictor, condition, cfg, rng):
    """Iterate ctmc_step over the sampler's uniform grid and return the
    terminal activation vector (or batch of vectors)."""
    d = np.array(d0, dtype=np.int8, copy=True)
    single = d.ndim == 1
    if single:
        d = d[None, :]
    h = cfg.step_size
    for k in range(cfg.steps):
        t = k * h
        q = np.asarray(predictor(t, d if not single else d[0], condition),
                       dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if not np.all(np.isfinite(q)):
            raise NumericalError(f"predictor returned non-finite values at step {k}")
        d = ctmc_step(d, q, t, h, cfg.horizon, rng)
    return d[0] if single else d
