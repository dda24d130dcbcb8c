"""Source-target couplings per condition: batch cost matrices, log-domain
entropic OT, and pair extraction.

Batches are always square (equal numbers of control and perturbed cells,
sampling controls with replacement when they are scarce) and both marginals
are uniform at 1/B.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .conditioning import ConditionKey
from .errors import DataError, DegenerateInputError, DimensionError

COST_METRICS = ("squared_euclidean", "euclidean", "cosine_distance")


@dataclass
class SinkhornConfig:
    """Entropic OT solver settings.

    epsilon=None scales the regularization to 0.05 * mean(cost) of each
    problem, which keeps behavior comparable across datasets.
    """

    epsilon: float | None = None
    max_iters: int = 1000
    tolerance: float = 1e-6
    metric: str = "squared_euclidean"

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.metric not in COST_METRICS:
            raise ValueError(f"metric must be one of {COST_METRICS}")


@dataclass
class CouplingPlan:
    """Entropic plan over one source/target batch plus the dataset row ids
    the batch positions refer to."""

    plan: np.ndarray
    source_ids: np.ndarray
    target_ids: np.ndarray
    condition: ConditionKey | None = None
    residual: float = 0.0
    converged: bool = True
    n_iters: int = 0


class SinkhornWarning(RuntimeWarning):
    """Marginal residual still above tolerance at the iteration cap."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def pairwise_sq_dists(a, b, chunk=256):
    """Exact squared Euclidean distances between rows of a and rows of b.

    Computed per-pair (no Gram expansion) to keep full double precision;
    chunked over rows of `a` to bound memory.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for lo in range(0, a.shape[0], chunk):
        hi = min(lo + chunk, a.shape[0])
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def cost_matrix(source, target, metric="squared_euclidean"):
    """Pairwise transport costs, C[i, j] = metric(source row i, target row j)."""
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if source.shape[1] != target.shape[1]:
        raise DimensionError(
            f"source has {source.shape[1]} columns, target {target.shape[1]}")
    if metric not in COST_METRICS:
        raise ValueError(f"metric must be one of {COST_METRICS}")
    if metric == "cosine_distance":
        ns = np.linalg.norm(source, axis=1)
        nt = np.linalg.norm(target, axis=1)
        if np.any(ns == 0) or np.any(nt == 0):
            raise DegenerateInputError("cosine distance undefined for zero rows")
        sims = (source / ns[:, None]) @ (target / nt[:, None]).T
        return np.maximum(1.0 - sims, 0.0)
    d2 = pairwise_sq_dists(source, target)
    if metric == "euclidean":
        return np.sqrt(np.maximum(d2, 0.0))
    return d2


def _logsumexp(m, axis):
    mx = m.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(m - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(cost, cfg=None):
    """Entropically regularized OT plan with uniform marginals 1/B.

    Runs log-domain scaling updates until the worst row/column marginal
    residual drops below cfg.tolerance or cfg.max_iters is reached (the
    latter emits a SinkhornWarning carrying the achieved residual).

    Returns (plan, residual, n_iters, converged).
    """
    if cfg is None:
        cfg = SinkhornConfig()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise DimensionError(f"cost must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    n = cost.shape[0]
    mass = 1.0 / n
    eps = cfg.epsilon
    if eps is None:
        mean_cost = float(cost.mean())
        eps = 0.05 * mean_cost if mean_cost > 0 else 1.0
    log_mu = -np.log(n)
    log_k = -cost / eps
    f = np.zeros(n)
    g = np.zeros(n)
    residual = np.inf
    it = 0
    plan = None
    check_every = 5  # the marginal check builds the full plan; amortize it
    for it in range(1, cfg.max_iters + 1):
        f = log_mu - _logsumexp(log_k + g[None, :], axis=1)
        g = log_mu - _logsumexp(log_k + f[:, None], axis=0)
        if it % check_every and it != cfg.max_iters:
            continue
        plan = np.exp(log_k + f[:, None] + g[None, :])
        residual = max(np.abs(plan.sum(axis=1) - mass).max(),
                       np.abs(plan.sum(axis=0) - mass).max())
        if residual < cfg.tolerance:
            return plan, residual, it, True
    warnings.warn(SinkhornWarning(
        f"sinkhorn stopped at max_iters={cfg.max_iters} with marginal "
        f"residual {residual:.3e}", residual))
    return plan, residual, it, False


def extract_pairs(coupling, rng, argmax=False):
    """Draw one (source_id, target_id) pair per target index.

    The source for target column j follows the plan's normalized column
    distribution; `argmax` switches to the deterministic column mode used by
    the ablation harness.
    """
    plan = coupling.plan
    col_sums = plan.sum(axis=0)
    if np.any(col_sums <= 0):
        raise DegenerateInputError("coupling plan has an all-zero column")
    if argmax:
        rows = plan.argmax(axis=0)
    else:
        cum = np.cumsum(plan / col_sums[None, :], axis=0)
        cum[-1, :] = 1.0
        u = rng.random(plan.shape[1])
        rows = (cum >= u[None, :]).argmax(axis=0)
    return [(int(coupling.source_ids[i]), int(coupling.target_ids[j]))
            for j, i in enumerate(rows)]


def _condition_rows(dataset):
    """Perturbed row indices grouped by condition key, in sorted key order."""
    groups = {}
    for row in np.flatnonzero(~dataset.control_mask):
        key = dataset.condition_of(row)
        groups.setdefault(key, []).append(row)
    order = sorted(groups, key=lambda k: (k.cell_type_id, k.perturbation_id,
                                          k.dosage))
    return [(k, np.array(groups[k])) for k in order]


def epoch_pairing(dataset, cfg, rng, method="ot", argmax=False):
    """Build one (source, target) pair per perturbed cell, per condition.

    For each condition with B perturbed cells: sample B same-cell-type
    controls (with replacement only if controls are scarcer), then either
    couple them entropically and sample pairs from the plan (method="ot") or
    pair uniformly at random (method="random", the ablation baseline).
    """
    if method not in ("ot", "random"):
        raise ValueError("pairing method must be 'ot' or 'random'")
    control_rows = np.flatnonzero(dataset.control_mask)
    controls_by_ct = {}
    for row in control_rows:
        controls_by_ct.setdefault(int(dataset.cell_type_ids[row]), []).append(row)
    result = {}
    for key, targets in _condition_rows(dataset):
        pool = controls_by_ct.get(key.cell_type_id)
        if not pool:
            raise DataError(
                f"no control cells share the cell type of condition {key}")
        pool = np.array(pool)
        b = len(targets)
        sources = rng.choice(pool, size=b, replace=len(pool) < b)
        if method == "random":
            result[key] = list(zip(sources.tolist(), targets.tolist()))
            continue
        cost = cost_matrix(dataset.matrix[sources], dataset.matrix[targets],
                           cfg.metric)
        plan, residual, n_iters, converged = sinkhorn(cost, cfg)
        coupling = CouplingPlan(plan, sources, targets, key, residual,
                                converged, n_iters)
        result[key] = extract_pairs(coupling, rng, argmax=argmax)
    return result
