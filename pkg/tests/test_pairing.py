"""Entropic OT pairing checks: cost matrices against hand values, the
Sinkhorn plan against exhaustive-assignment optima, pair extraction against
Monte Carlo frequencies, and the OT-beats-random cost property."""

import itertools
import warnings

import numpy as np
import pytest

from cellbridge.conditioning import ConditionKey
from cellbridge.data import ExpressionDataset
from cellbridge.conditioning import Vocabulary
from cellbridge.errors import (DataError, DegenerateInputError,
                               DimensionError)
from cellbridge.pairing import (CouplingPlan, SinkhornConfig, SinkhornWarning,
                                cost_matrix, epoch_pairing, extract_pairs,
                                sinkhorn)

# ---------------------------------------------------------------- cost matrix


def test_cost_identical_rows_zero():
    row = np.array([[1.0, 2.0, 3.0]])
    for metric in ("squared_euclidean", "euclidean", "cosine_distance"):
        c = cost_matrix(row, row, metric)
        assert c.shape == (1, 1)
        assert c[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_cost_squared_euclidean_hand_value():
    assert cost_matrix([[0.0]], [[3.0]])[0, 0] == 9.0
    assert cost_matrix([[0.0]], [[3.0]], "euclidean")[0, 0] == 3.0


def test_cost_cosine_orthogonal():
    c = cost_matrix([[1.0, 0.0]], [[0.0, 1.0]], "cosine_distance")
    assert c[0, 0] == pytest.approx(1.0)


def test_cost_cosine_zero_row_rejected():
    with pytest.raises(DegenerateInputError):
        cost_matrix([[0.0, 0.0]], [[1.0, 0.0]], "cosine_distance")


def test_cost_width_mismatch():
    with pytest.raises(DimensionError):
        cost_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


def test_cost_matches_double_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(9, 5))
    c = cost_matrix(a, b)
    for i in range(7):
        for j in range(9):
            assert c[i, j] == pytest.approx(((a[i] - b[j]) ** 2).sum(),
                                            rel=1e-12)

# ------------------------------------------------------------------- sinkhorn


def test_sinkhorn_single_point():
    plan, residual, _, converged = sinkhorn(np.array([[2.0]]))
    assert converged
    assert plan[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_sinkhorn_uniform_cost_symmetry():
    plan, _, _, _ = sinkhorn(np.full((2, 2), 3.0))
    assert np.allclose(plan, 0.25, atol=1e-9)


def test_sinkhorn_rejects_nonfinite_and_nonsquare():
    with pytest.raises(ValueError):
        sinkhorn(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(DimensionError):
        sinkhorn(np.zeros((2, 3)))


def test_sinkhorn_antidiagonal_concentrates():
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=200000)
    plan, _, _, converged = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), cfg)
    assert converged
    assert np.allclose(np.diag(plan), 0.5, atol=1e-6)
    assert plan[0, 1] < 1e-6 and plan[1, 0] < 1e-6


def _brute_force_optimum(cost):
    """Exhaustive assignment oracle: min over all permutations, mass 1/B."""
    n = cost.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(cost[i, perm[i]] for i in range(n)) / n)
    return best


@pytest.mark.parametrize("n", [2, 4, 6])
def test_sinkhorn_cost_near_exhaustive_optimum(n):
    rng = np.random.default_rng(n)
    cost = rng.random((n, n))
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=500000)
    plan, _, _, converged = sinkhorn(cost, cfg)
    assert converged
    assert (plan * cost).sum() <= 1.01 * _brute_force_optimum(cost)


def test_sinkhorn_cost_decreases_with_epsilon():
    rng = np.random.default_rng(5)
    cost = rng.random((5, 5))
    opt = _brute_force_optimum(cost)
    costs = []
    for eps in (1e-1, 1e-2, 1e-3):
        plan, _, _, _ = sinkhorn(cost, SinkhornConfig(epsilon=eps,
                                                      max_iters=500000))
        costs.append((plan * cost).sum())
    assert costs[0] >= costs[1] - 1e-9 >= costs[2] - 2e-9
    assert costs[-1] <= 1.01 * opt


def test_sinkhorn_marginals_within_tolerance():
    rng = np.random.default_rng(7)
    cost = rng.random((64, 64))
    cfg = SinkhornConfig(tolerance=1e-6, max_iters=5000)
    plan, residual, _, converged = sinkhorn(cost, cfg)
    assert converged and residual < 1e-6
    assert np.abs(plan.sum(axis=1) - 1 / 64).max() < 1e-6
    assert np.abs(plan.sum(axis=0) - 1 / 64).max() < 1e-6
    assert np.all(plan >= 0)


def test_sinkhorn_scale_invariance():
    # scaling costs and epsilon together leaves the plan unchanged
    rng = np.random.default_rng(9)
    cost = rng.random((6, 6))
    cfg1 = SinkhornConfig(epsilon=0.01, max_iters=500000)
    cfg2 = SinkhornConfig(epsilon=0.17, max_iters=500000)
    p1, _, _, c1 = sinkhorn(cost, cfg1)
    p2, _, _, c2 = sinkhorn(17.0 * cost, cfg2)
    assert c1 and c2
    assert np.allclose(p1, p2, atol=1e-9)


def test_sinkhorn_nonconvergence_warns_with_residual():
    rng = np.random.default_rng(11)
    cost = rng.random((8, 8))
    cfg = SinkhornConfig(epsilon=1e-4, max_iters=2, tolerance=1e-12)
    with pytest.warns(SinkhornWarning) as record:
        _, residual, _, converged = sinkhorn(cost, cfg)
    assert not converged
    assert record[0].message.residual == residual

# -------------------------------------------------------------- extract_pairs


def _coupling(plan):
    n = plan.shape[0]
    return CouplingPlan(plan, np.arange(n), np.arange(100, 100 + n))


def test_extract_pairs_near_diagonal():
    plan = np.eye(3) / 3
    plan += 1e-12
    pairs = extract_pairs(_coupling(plan), np.random.default_rng(0))
    assert pairs == [(0, 100), (1, 101), (2, 102)]


def test_extract_pairs_zero_column_rejected():
    plan = np.array([[0.5, 0.0], [0.5, 0.0]])
    with pytest.raises(DegenerateInputError):
        extract_pairs(_coupling(plan), np.random.default_rng(0))


def test_extract_pairs_uniform_frequencies():
    # Monte Carlo oracle: each source should serve each target about half
    # the time; bound at 4 standard errors
    plan = np.full((2, 2), 0.25)
    rng = np.random.default_rng(1)
    n_trials = 4000
    hits = 0
    for _ in range(n_trials):
        pairs = extract_pairs(_coupling(plan), rng)
        hits += pairs[0][0] == 0
    se = np.sqrt(0.25 / n_trials)
    assert abs(hits / n_trials - 0.5) < 4 * se


def test_extract_pairs_skewed_column_frequencies():
    plan = np.array([[0.45, 0.25], [0.05, 0.25]])  # col 0 is 0.9 / 0.1
    rng = np.random.default_rng(2)
    n_trials = 4000
    hits = sum(extract_pairs(_coupling(plan), rng)[0][0] == 0
               for _ in range(n_trials))
    se = np.sqrt(0.9 * 0.1 / n_trials)
    assert abs(hits / n_trials - 0.9) < 4 * se


def test_extract_pairs_argmax_mode():
    plan = np.array([[0.45, 0.25], [0.05, 0.25]])
    pairs = extract_pairs(_coupling(plan), np.random.default_rng(0),
                          argmax=True)
    assert pairs[0] == (0, 100)

# -------------------------------------------------------------- epoch_pairing


def make_dataset(control, perturbed, pert_id=1, dosage=1.0):
    control = np.asarray(control, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    n_c, n_p = control.shape[0], perturbed.shape[0]
    matrix = np.vstack([control, perturbed])
    vocab = Vocabulary(cell_types=["lineA"],
                       perturbations=["control", "pertA"])
    return ExpressionDataset(
        matrix=np.abs(matrix),
        gene_names=[f"g{i}" for i in range(matrix.shape[1])],
        cell_ids=[f"c{i}" for i in range(n_c + n_p)],
        cell_type_ids=np.zeros(n_c + n_p, dtype=int),
        perturbation_ids=np.array([0] * n_c + [pert_id] * n_p),
        dosages=np.array([0.0] * n_c + [dosage] * n_p),
        vocab=vocab,
        provenance="log1p",
    )


def test_epoch_pairing_duplicate_sets_zero_cost():
    # well-separated duplicated points: every cell must pair its twin
    base = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    ds = make_dataset(base, base)
    pairs = epoch_pairing(ds, SinkhornConfig(), np.random.default_rng(0))
    key = ConditionKey(0, 1, 1.0)
    assert len(pairs[key]) == 4
    total = sum(((ds.matrix[s] - ds.matrix[t]) ** 2).sum()
                for s, t in pairs[key])
    assert total == 0.0


def test_epoch_pairing_covers_each_perturbed_once():
    rng = np.random.default_rng(3)
    ds = make_dataset(rng.random((6, 3)), rng.random((4, 3)))
    pairs = epoch_pairing(ds, SinkhornConfig(), np.random.default_rng(0))
    key = ConditionKey(0, 1, 1.0)
    targets = [t for _, t in pairs[key]]
    assert sorted(targets) == [6, 7, 8, 9]


def test_epoch_pairing_samples_with_replacement_when_scarce():
    rng = np.random.default_rng(4)
    ds = make_dataset(rng.random((2, 3)), rng.random((5, 3)))
    pairs = epoch_pairing(ds, SinkhornConfig(), np.random.default_rng(0))
    assert len(pairs[ConditionKey(0, 1, 1.0)]) == 5


def test_epoch_pairing_missing_controls_errors():
    rng = np.random.default_rng(5)
    ds = make_dataset(rng.random((3, 2)), rng.random((3, 2)))
    ds.cell_type_ids[3:] = 1  # perturbed cells in a cell type with no controls
    ds.vocab.cell_types.append("lineB")
    with pytest.raises(DataError):
        epoch_pairing(ds, SinkhornConfig(), np.random.default_rng(0))


def _shifted_cluster_data(rng, n=20, dim=4):
    """Two well-separated control clusters translated by a constant shift."""
    centers = np.array([[0.0] * dim, [8.0] * dim])
    labels = rng.integers(2, size=n)
    control = centers[labels] + 0.2 * rng.normal(size=(n, dim))
    labels_p = rng.integers(2, size=n)
    perturbed = centers[labels_p] + 1.0 + 0.2 * rng.normal(size=(n, dim))
    return np.abs(control), np.abs(perturbed)


def _mean_pair_cost(matrix, pairs):
    return np.mean([((matrix[s] - matrix[t]) ** 2).sum() for s, t in pairs])


def test_ot_pairing_beats_random_pairing_on_average():
    # one-sided comparison in expectation over 100 seeds
    ot_costs, random_costs = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        control, perturbed = _shifted_cluster_data(rng)
        ds = make_dataset(control, perturbed)
        key = ConditionKey(0, 1, 1.0)
        ot = epoch_pairing(ds, SinkhornConfig(), np.random.default_rng(seed),
                           method="ot")[key]
        rnd = epoch_pairing(ds, SinkhornConfig(), np.random.default_rng(seed),
                            method="random")[key]
        ot_costs.append(_mean_pair_cost(ds.matrix, ot))
        random_costs.append(_mean_pair_cost(ds.matrix, rnd))
    assert np.mean(ot_costs) <= np.mean(random_costs)
