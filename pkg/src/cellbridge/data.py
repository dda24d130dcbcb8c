"""Expression data handling: CSV ingest/emit, normalization, highly variable
gene selection, synthetic benchmark generation, and train/test splitting.

Canonical interchange format is a CSV with header
`cell_id,cell_type,perturbation,dosage,<gene_1>,...,<gene_N>`; the
perturbation value "control" maps to id 0. Ground-truth shift files use
`perturbation,dosage,cell_type,<gene shifts...>`.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .conditioning import CONTROL_ID, ConditionKey, Vocabulary
from .errors import DataError, ParseError, SplitError

_META_COLUMNS = ["cell_id", "cell_type", "perturbation", "dosage"]

PROVENANCE_RAW = "raw"
PROVENANCE_LOG1P = "log1p"


@dataclass
class ExpressionDataset:
    """Cells x genes matrix with per-cell condition labels.

    Control cells are those with perturbation id 0. Every perturbed
    condition's cell type must also appear among the controls.
    """

    matrix: np.ndarray
    gene_names: list
    cell_ids: list
    cell_type_ids: np.ndarray
    perturbation_ids: np.ndarray
    dosages: np.ndarray
    vocab: Vocabulary
    provenance: str = PROVENANCE_RAW

    def __post_init__(self):
        n = self.matrix.shape[0]
        if not (len(self.cell_ids) == len(self.cell_type_ids)
                == len(self.perturbation_ids) == len(self.dosages) == n):
            raise DataError("per-cell annotation lengths do not match the matrix")
        if self.matrix.shape[1] != len(self.gene_names):
            raise DataError("gene name count does not match the matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("expression matrix contains non-finite values")
        if np.any(self.matrix < 0):
            raise DataError("expression values must be nonnegative")

    def check_control_coverage(self):
        """Every perturbed condition's cell type must appear among controls.

        Full datasets satisfy this; test splits (which hold no controls) are
        validated against their training counterpart instead.
        """
        control_cts = set(self.cell_type_ids[self.control_mask].tolist())
        perturbed_cts = set(self.cell_type_ids[~self.control_mask].tolist())
        missing = perturbed_cts - control_cts
        if missing:
            names = [self.vocab.cell_types[i] for i in sorted(missing)]
            raise DataError(f"no control cells for cell type(s) {names}")

    @property
    def n_cells(self):
        return self.matrix.shape[0]

    @property
    def n_genes(self):
        return self.matrix.shape[1]

    @property
    def control_mask(self):
        return self.perturbation_ids == CONTROL_ID

    def condition_of(self, row):
        return ConditionKey(int(self.cell_type_ids[row]),
                            int(self.perturbation_ids[row]),
                            float(self.dosages[row]))

    def condition_keys(self):
        """Distinct perturbed conditions, sorted for deterministic iteration."""
        keys = {self.condition_of(r) for r in np.flatnonzero(~self.control_mask)}
        return sorted(keys, key=lambda k: (k.cell_type_id, k.perturbation_id,
                                           k.dosage))

    def rows_of(self, key):
        return np.flatnonzero((self.cell_type_ids == key.cell_type_id)
                              & (self.perturbation_ids == key.perturbation_id)
                              & (self.dosages == key.dosage))

    def subset(self, rows):
        rows = np.asarray(rows)
        return ExpressionDataset(
            matrix=self.matrix[rows].copy(),
            gene_names=list(self.gene_names),
            cell_ids=[self.cell_ids[i] for i in rows],
            cell_type_ids=self.cell_type_ids[rows].copy(),
            perturbation_ids=self.perturbation_ids[rows].copy(),
            dosages=self.dosages[rows].copy(),
            vocab=self.vocab,
            provenance=self.provenance,
        )


def _fmt(x):
    """Shortest exact decimal for a float; reload gives the identical bits."""
    return repr(float(x))


def load_matrix(path, provenance=PROVENANCE_RAW):
    """Parse an expression CSV into a dataset.

    Raises ParseError with the offending 1-based line number for ragged rows,
    negative values, or malformed numbers; the header must start with the
    four metadata columns.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if header[:4] != _META_COLUMNS:
            raise ParseError(
                f"header must start with {','.join(_META_COLUMNS)}", line=1)
        gene_names = header[4:]
        if not gene_names:
            raise ParseError("no gene columns in header", line=1)
        width = len(header)
        cell_ids, ct_names, pert_names, dosages, rows = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(
                    f"expected {width} fields, found {len(row)}", line=lineno)
            cell_ids.append(row[0])
            ct_names.append(row[1])
            pert_names.append(row[2])
            try:
                dosages.append(float(row[3]))
                values = np.array([float(v) for v in row[4:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if np.any(values < 0):
                raise ParseError("negative expression value", line=lineno)
            if not np.all(np.isfinite(values)):
                raise ParseError("non-finite expression value", line=lineno)
            rows.append(values)
    if not rows:
        raise ParseError("file contains no cells", line=2)
    vocab = Vocabulary()
    ct_ids = np.array([vocab.cell_type_id(n, create=True) for n in ct_names])
    pert_ids = np.array([vocab.perturbation_id(n, create=True) if n != "control"
                         else CONTROL_ID for n in pert_names])
    ds = ExpressionDataset(
        matrix=np.vstack(rows),
        gene_names=gene_names,
        cell_ids=cell_ids,
        cell_type_ids=ct_ids,
        perturbation_ids=pert_ids,
        dosages=np.array(dosages),
        vocab=vocab,
        provenance=provenance,
    )
    ds.check_control_coverage()
    return ds


def save_matrix(ds, path):
    """Emit the canonical CSV; byte-stable for a given dataset."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(_META_COLUMNS + list(ds.gene_names)) + "\n")
        for i in range(ds.n_cells):
            pert = ds.vocab.perturbations[ds.perturbation_ids[i]]
            fields = [ds.cell_ids[i], ds.vocab.cell_types[ds.cell_type_ids[i]],
                      pert, _fmt(ds.dosages[i])]
            fields.extend(_fmt(v) for v in ds.matrix[i])
            fh.write(",".join(fields) + "\n")


def log1p_normalize(ds):
    """Scale each cell's total count to the median cell total, then ln(1+x).

    Cells with zero total are dropped with a warning. Re-normalizing an
    already normalized dataset is rejected.
    """
    if ds.provenance != PROVENANCE_RAW:
        raise ValueError("dataset is already normalized")
    totals = ds.matrix.sum(axis=1)
    keep = totals > 0
    if not np.all(keep):
        warnings.warn(f"dropping {int((~keep).sum())} zero-total cell(s)")
        ds = ds.subset(np.flatnonzero(keep))
        totals = totals[keep]
    median_total = np.median(totals)
    scaled = ds.matrix * (median_total / totals)[:, None]
    return ExpressionDataset(
        matrix=np.log1p(scaled),
        gene_names=list(ds.gene_names),
        cell_ids=list(ds.cell_ids),
        cell_type_ids=ds.cell_type_ids.copy(),
        perturbation_ids=ds.perturbation_ids.copy(),
        dosages=ds.dosages.copy(),
        vocab=ds.vocab,
        provenance=PROVENANCE_LOG1P,
    )


def select_hvg(ds, n):
    """Restrict to the n genes with largest cross-cell variance, keeping the
    surviving genes in their original order. Ties break toward lower index."""
    if n > ds.n_genes:
        raise ValueError(f"cannot keep {n} of {ds.n_genes} genes")
    if ds.provenance != PROVENANCE_LOG1P:
        raise ValueError("select_hvg expects normalized data")
    if n == ds.n_genes:
        return ds
    variances = ds.matrix.var(axis=0)
    order = np.lexsort((np.arange(ds.n_genes), -variances))
    keep = np.sort(order[:n])
    return ExpressionDataset(
        matrix=ds.matrix[:, keep].copy(),
        gene_names=[ds.gene_names[i] for i in keep],
        cell_ids=list(ds.cell_ids),
        cell_type_ids=ds.cell_type_ids.copy(),
        perturbation_ids=ds.perturbation_ids.copy(),
        dosages=ds.dosages.copy(),
        vocab=ds.vocab,
        provenance=ds.provenance,
    )


@dataclass
class SyntheticSpec:
    """Settings for the clustered synthetic benchmark with known shifts."""

    n_genes: int = 100
    n_cells_per_condition: int = 200
    n_conditions: int = 4
    cluster_count: int = 2
    shift_magnitude: float = 1.0
    sparsity: float = 0.1
    seed: int = 0

    # generator internals, fixed rather than exposed
    _active_fraction: float = field(default=0.6, repr=False)
    _shift_support: float = field(default=0.25, repr=False)
    _noise_std: float = field(default=0.3, repr=False)

    def __post_init__(self):
        if min(self.n_genes, self.n_cells_per_condition, self.n_conditions,
               self.cluster_count) < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")


def _synthetic_conditions(n_conditions):
    """(perturbation index, dosage) per condition: perturbations are reused
    across two dosage levels so held-out groups keep a seen vocabulary."""
    out = []
    for c in range(n_conditions):
        out.append((c // 2 + 1, 1.0 if c % 2 == 0 else 0.5))
    return out


def synth_generate(spec):
    """Clustered control population plus shifted, resparsified perturbed
    populations; returns (dataset, ground-truth shift per condition).

    Controls come from a Gaussian mixture with cluster-specific activity
    masks; each condition adds dosage * base shift of its perturbation, zeroes
    genes independently with probability `sparsity`, and clips at 0. The data
    is emitted in normalized (log1p-scale) provenance.
    """
    rng = np.random.default_rng(spec.seed)
    g, k = spec.n_genes, spec.cluster_count
    active = rng.random((k, g)) < spec._active_fraction
    for c in range(k):
        if not active[c].any():
            active[c, rng.integers(g)] = True
    means = np.where(active, rng.uniform(0.5, 3.0, (k, g)), 0.0)

    conditions = _synthetic_conditions(spec.n_conditions)
    n_perts = max(p for p, _ in conditions)
    base_shifts = np.zeros((n_perts + 1, g))
    for p in range(1, n_perts + 1):
        support = rng.random(g) < spec._shift_support
        if not support.any():
            support[rng.integers(g)] = True
        signs = rng.choice([-1.0, 1.0], size=g)
        base_shifts[p] = np.where(
            support, signs * rng.uniform(0.5, 1.5, g), 0.0)

    def draw_cells(n):
        clusters = rng.integers(k, size=n)
        noise = rng.normal(0.0, spec._noise_std, (n, g))
        vals = np.where(active[clusters], means[clusters] + noise, 0.0)
        return np.maximum(vals, 0.0)

    n = spec.n_cells_per_condition
    blocks = [draw_cells(n)]
    pert_ids = [np.zeros(n, dtype=int)]
    dosages = [np.zeros(n)]
    ground_truth = {}
    vocab = Vocabulary(cell_types=["lineA"])
    for p in range(1, n_perts + 1):
        vocab.perturbation_id(f"pert{p:02d}", create=True)
    for p, dose in conditions:
        shift = spec.shift_magnitude * dose * base_shifts[p]
        cells = np.maximum(draw_cells(n) + shift, 0.0)
        drop = rng.random((n, g)) < spec.sparsity
        cells = np.where(drop, 0.0, cells)
        blocks.append(cells)
        pert_ids.append(np.full(n, p))
        dosages.append(np.full(n, dose))
        ground_truth[ConditionKey(0, p, dose)] = shift
    matrix = np.vstack(blocks)
    total = matrix.shape[0]
    ds = ExpressionDataset(
        matrix=matrix,
        gene_names=[f"gene{i:04d}" for i in range(g)],
        cell_ids=[f"cell{i:06d}" for i in range(total)],
        cell_type_ids=np.zeros(total, dtype=int),
        perturbation_ids=np.concatenate(pert_ids),
        dosages=np.concatenate(dosages),
        vocab=vocab,
        provenance=PROVENANCE_LOG1P,
    )
    return ds, ground_truth


def save_shifts(ground_truth, vocab, gene_names, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["perturbation", "dosage", "cell_type"]
                          + list(gene_names)) + "\n")
        keys = sorted(ground_truth, key=lambda k: (k.cell_type_id,
                                                   k.perturbation_id, k.dosage))
        for key in keys:
            fields = [vocab.perturbations[key.perturbation_id],
                      _fmt(key.dosage), vocab.cell_types[key.cell_type_id]]
            fields.extend(_fmt(v) for v in ground_truth[key])
            fh.write(",".join(fields) + "\n")


SPLIT_MODES = ("by_perturbation", "by_condition_group")


def split(ds, mode, fraction, seed):
    """Partition into (train, test) holding out whole perturbations or whole
    condition groups; controls always stay in train."""
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_rows = np.zeros(ds.n_cells, dtype=bool)
    if mode == "by_perturbation":
        perts = sorted(set(ds.perturbation_ids.tolist()) - {CONTROL_ID})
        n_hold = int(round(len(perts) * fraction))
        if n_hold == 0 or n_hold == len(perts):
            raise SplitError(
                f"holding out {n_hold} of {len(perts)} perturbations leaves an "
                "empty set; adjust the fraction")
        held = rng.choice(np.array(perts), size=n_hold, replace=False)
        test_rows = np.isin(ds.perturbation_ids, held)
    else:
        for key in ds.condition_keys():
            if rng.random() < fraction:
                test_rows[ds.rows_of(key)] = True
    test_rows &= ~ds.control_mask
    if not test_rows.any():
        raise SplitError("test set came out empty; try a different seed")
    if not (~test_rows & ~ds.control_mask).any():
        raise SplitError("no perturbed cells left for training; try a different seed")
    train = ds.subset(np.flatnonzero(~test_rows))
    test = ds.subset(np.flatnonzero(test_rows))
    return train, test
