"""Distributional evaluation: energy distance, gene-wise earth mover's
distance (squared 2-Wasserstein via sorted pairing), differential-expression
gene ranking, and activation-probability Pearson correlation.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError
from .pairing import pairwise_sq_dists


def _euclidean(a, b):
    return np.sqrt(np.maximum(pairwise_sq_dists(a, b), 0.0))


def e_distance(a, b):
    """Two-sample energy distance.

    2 E||a - b|| - E||a - a'|| - E||b - b'||, with the within-set means taken
    over ordered distinct pairs (the unbiased variant). Cross pairs of
    bitwise-identical rows are excluded from the cross mean, so identical
    multisets score exactly 0. Both sets need at least two rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("inputs must be 2-D with matching gene counts")
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise ValueError("each set needs at least 2 rows")
    dists = _euclidean(a, b)
    n_matched = int((dists == 0.0).sum())
    n_cross = dists.size - n_matched
    cross = dists.sum() / n_cross if n_cross else 0.0
    within_a = _euclidean(a, a).sum() / (na * (na - 1))
    within_b = _euclidean(b, b).sum() / (nb * (nb - 1))
    return float(2.0 * cross - within_a - within_b)


def emd_per_gene(a, b, seed=0):
    """Mean over genes of the squared 1-D 2-Wasserstein distance.

    Per gene this is the mean of squared differences of the sorted samples
    (sorting is the optimal 1-D assignment). Unequal sample counts are
    resolved by seeded without-replacement downsampling of the larger set.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("inputs must be 2-D with matching gene counts")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("inputs must be nonempty")
    if a.shape[0] != b.shape[0]:
        rng = np.random.default_rng(seed)
        if a.shape[0] > b.shape[0]:
            a = a[rng.choice(a.shape[0], size=b.shape[0], replace=False)]
        else:
            b = b[rng.choice(b.shape[0], size=a.shape[0], replace=False)]
    diff = np.sort(a, axis=0) - np.sort(b, axis=0)
    return float((diff * diff).mean())


def de_genes(control, perturbed, k):
    """Indices of the k genes with largest |mean shift| between populations,
    ties broken toward the lower index."""
    control = np.asarray(control, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if control.shape[1] != perturbed.shape[1]:
        raise ValueError("gene counts differ")
    n_genes = control.shape[1]
    if k > n_genes:
        raise ValueError(f"k={k} exceeds {n_genes} genes")
    shift = np.abs(perturbed.mean(axis=0) - control.mean(axis=0))
    order = np.lexsort((np.arange(n_genes), -shift))
    return order[:k].tolist()


def activation_pcc(pred_states, true_states):
    """Pearson correlation across genes between the two per-gene activation
    frequency vectors."""
    pred = np.asarray(pred_states, dtype=np.float64)
    true = np.asarray(true_states, dtype=np.float64)
    if pred.ndim != 2 or true.ndim != 2 or pred.shape[1] != true.shape[1]:
        raise ValueError("inputs must be 2-D with matching gene counts")
    if pred.shape[0] < 1 or true.shape[0] < 1:
        raise ValueError("inputs must be nonempty")
    fp = pred.mean(axis=0)
    ft = true.mean(axis=0)
    dp = fp - fp.mean()
    dt = ft - ft.mean()
    denom = np.sqrt((dp * dp).sum() * (dt * dt).sum())
    if denom == 0.0:
        raise DegenerateInputError(
            "activation frequencies are constant; correlation undefined")
    return float((dp * dt).sum() / denom)


@dataclass
class MetricsReport:
    """Evaluation summary for one condition (or an aggregate)."""

    e_distance: float
    emd_all: float
    emd_de20: float
    emd_de40: float
    activation_pcc_all: float
    activation_pcc_de20: float
    activation_pcc_de40: float
    n_pred: int
    n_true: int

    FIELDS = ("e_distance", "emd_all", "emd_de20", "emd_de40",
              "activation_pcc_all", "activation_pcc_de20",
              "activation_pcc_de40", "n_pred", "n_true")

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv_row(self):
        return ",".join(str(getattr(self, name)) for name in self.FIELDS)

    @classmethod
    def csv_header(cls):
        return ",".join(cls.FIELDS)
