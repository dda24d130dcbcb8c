"""Continuous-state bridge over expression vectors: pinned Gaussian
interpolation, masked endpoint regression loss, drift reconstruction, and
Euler-Maruyama generation toward a predicted endpoint.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass
class BridgeConfig:
    """Shared time discretization for both bridge samplers."""

    horizon: float = 1.0
    sigma: float = 0.2
    steps: int = 50

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def step_size(self):
        return self.horizon / self.steps


def interpolate(x0, x_t_target, t, cfg, rng):
    """Sample the pinned bridge state x_t between endpoints x0 and xT.

    x_t = (t/T) xT + (1 - t/T) x0 + sigma * z with z ~ N(0, t(1 - t/T) Id),
    so both endpoints are reproduced exactly. Accepts single vectors with a
    scalar t, or (B, N) batches with a length-B t array.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    xt_target = np.asarray(x_t_target, dtype=np.float64)
    horizon = cfg.horizon
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > horizon):
        raise ValueError(f"t must lie in [0, {horizon}]")
    frac = t_arr / horizon
    var = np.maximum(t_arr * (1.0 - frac), 0.0)
    if x0.ndim == 1:
        mix = frac * xt_target + (1.0 - frac) * x0
        if cfg.sigma == 0.0:
            return mix
        return mix + cfg.sigma * np.sqrt(var) * rng.standard_normal(x0.shape)
    mix = frac[:, None] * xt_target + (1.0 - frac)[:, None] * x0
    if cfg.sigma == 0.0:
        return mix
    noise = rng.standard_normal(x0.shape)
    return mix + cfg.sigma * np.sqrt(var)[:, None] * noise


def masked_endpoint_loss(pred, true):
    """Squared error restricted to coordinates where the true endpoint is
    nonzero, normalized by the active count.

    Returns (loss, grad_wrt_pred). An all-zero target contributes zero loss
    and zero gradient (the degenerate-sample convention; callers count these).
    """
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    mask = (true != 0).astype(np.float64)
    n_active = mask.sum()
    if n_active == 0:
        return 0.0, np.zeros_like(pred)
    diff = (pred - true) * mask
    loss = float((diff * diff).sum() / n_active)
    grad = 2.0 * diff / n_active
    return loss, grad


def masked_endpoint_loss_batch(pred, true):
    """Batch mean of the per-row masked loss.

    Returns (mean_loss, grad_wrt_pred, degenerate_row_mask); degenerate rows
    (all-zero targets) contribute zero to both loss and gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    mask = (true != 0).astype(np.float64)
    n_active = mask.sum(axis=1)
    degenerate = n_active == 0
    safe = np.where(degenerate, 1.0, n_active)
    diff = (pred - true) * mask
    per_row = (diff * diff).sum(axis=1) / safe
    per_row[degenerate] = 0.0
    b = pred.shape[0]
    grad = 2.0 * diff / (safe[:, None] * b)
    grad[degenerate] = 0.0
    return float(per_row.mean()), grad, degenerate


def drift_from_endpoint(pred_end, x_t, t, cfg):
    """Convert an endpoint prediction into the bridge drift at time t.

    v = (pred_end - x_t) / max(T - t, h), clamping the denominator at one
    step size to remove the t -> T singularity.
    """
    denom = max(cfg.horizon - t, cfg.step_size)
    return (np.asarray(pred_end, dtype=np.float64)
            - np.asarray(x_t, dtype=np.float64)) / denom


def sample_endpoint(x0, predictor, condition, cfg, rng):
    """Simulate the bridge SDE from x0 to the horizon and return the endpoint.

    Euler-Maruyama over cfg.steps uniform steps with the endpoint-predictor
    drift; the final step is taken without noise and lands exactly on the
    prediction (the drift's * h/(T-t) factor clamps to 1 there). Accepts a
    single vector or a (B, N) batch simulated row-wise.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    horizon, h, sigma = cfg.horizon, cfg.step_size, cfg.sigma
    sqrt_h = np.sqrt(h)
    for k in range(cfg.steps):
        t = k * h
        pred = np.asarray(predictor(t, x if not single else x[0], condition),
                          dtype=np.float64)
        if pred.ndim == 1:
            pred = pred[None, :]
        if not np.all(np.isfinite(pred)):
            raise NumericalError(f"predictor returned non-finite values at step {k}")
        remaining = horizon - t
        final = k == cfg.steps - 1
        if final or remaining <= h:
            # here drift * h == pred - x; assign to avoid roundoff
            x = pred.copy()
        else:
            x = x + (h / remaining) * (pred - x)
        if sigma > 0.0 and not final:
            x += sigma * sqrt_h * rng.standard_normal(x.shape)
    return x[0] if single else x
