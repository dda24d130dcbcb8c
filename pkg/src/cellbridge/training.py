"""Joint training of the continuous and discrete bridge predictors with
per-epoch OT re-pairing, plus conditional generation and distributional
evaluation of held-out conditions.
"""

import json
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .conditioning import ConditionEmbedder, EMBED_WIDTH, Vocabulary
from .continuous import (BridgeConfig, interpolate, masked_endpoint_loss_batch,
                         sample_endpoint)
from .discrete import (discrete_interpolate, discretize, posterior_loss_batch,
                       sample_activation, _sigmoid)
from .errors import DataError, NumericalError, VocabularyError
from .nn import (MLP, N_TIME_FEATURES, OptimizerConfig, ParameterSet,
                 optimizer_step, time_features)
from .pairing import SinkhornConfig, epoch_pairing

_CKPT_MAGIC = b"CBCK\x01"


class ConditionedPredictor:
    """MLP over concat(state, time features, condition embedding).

    One instance realizes the continuous endpoint regressor, another the
    per-gene activation-logit head; the two never share parameters.
    """

    def __init__(self, n_genes, n_cell_types, n_perturbations, hidden,
                 horizon, rng):
        self.n_genes = n_genes
        self.horizon = horizon
        self.params = ParameterSet()
        self.embedder = ConditionEmbedder(self.params, "emb/", n_cell_types,
                                          n_perturbations, rng)
        self.net = MLP(self.params, "net/",
                       in_dim=n_genes + N_TIME_FEATURES + EMBED_WIDTH,
                       out_dim=n_genes, hidden=hidden, depth=3, rng=rng)

    def predict(self, t, state, ct_ids, pert_ids, dosages, record=False):
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        b = state.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        feats = time_features(t_arr, self.horizon)
        emb = self.embedder.embed(ct_ids, pert_ids, dosages)
        x = np.concatenate([state, feats, emb], axis=1)
        if record:
            out, acts = self.net.forward(x, record=True)
            return out, (acts, ct_ids, pert_ids, dosages)
        return self.net.forward(x)

    def predict_key(self, t, state, key, record=False):
        b = np.atleast_2d(state).shape[0]
        return self.predict(
            t, state,
            np.full(b, key.cell_type_id), np.full(b, key.perturbation_id),
            np.full(b, key.dosage), record=record)

    def backward(self, cache, grad_out):
        acts, ct_ids, pert_ids, dosages = cache
        grad_in = self.net.backward(acts, grad_out)
        self.embedder.backward(ct_ids, pert_ids, dosages,
                               grad_in[:, self.n_genes + N_TIME_FEATURES:])


@dataclass
class TrainConfig:
    seed: int
    epochs: int = 200
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    pairing_method: str = "ot"
    pairing_argmax: bool = False
    hidden_width: int = 256
    train_discrete: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss_continuous: float
    loss_discrete: float
    wallclock_s: float

    @property
    def loss_total(self):
        return self.loss_continuous + self.loss_discrete


@dataclass
class TrainResult:
    x_model: ConditionedPredictor
    d_model: ConditionedPredictor | None
    log: list
    vocab: Vocabulary
    gene_names: list


def _flatten_pairs(pairs_by_condition):
    sources, targets = [], []
    for key in sorted(pairs_by_condition,
                      key=lambda k: (k.cell_type_id, k.perturbation_id, k.dosage)):
        for s, t in pairs_by_condition[key]:
            sources.append(s)
            targets.append(t)
    return np.array(sources), np.array(targets)


def train(dataset, cfg):
    """Run the joint bridge-matching loop.

    Each epoch: fresh per-condition couplings, shuffled pooled minibatches,
    one interpolation time per sample shared by both bridges, masked endpoint
    regression for the continuous model and posterior cross-entropy for the
    discrete one, one optimizer step per model per batch. The combined loss
    is the plain sum of the two parts.
    """
    dataset.check_control_coverage()
    rng = np.random.default_rng(cfg.seed)
    n_ct = dataset.vocab.n_cell_types
    n_pert = dataset.vocab.n_perturbations
    x_model = ConditionedPredictor(dataset.n_genes, n_ct, n_pert,
                                   cfg.hidden_width, cfg.bridge.horizon, rng)
    d_model = None
    if cfg.train_discrete:
        d_model = ConditionedPredictor(dataset.n_genes, n_ct, n_pert,
                                       cfg.hidden_width, cfg.bridge.horizon, rng)

    perturbed = dataset.matrix[~dataset.control_mask]
    if perturbed.shape[0] == 0:
        raise DataError("dataset has no perturbed cells to train on")
    degenerate_frac = float((discretize(perturbed).sum(axis=1) == 0).mean())
    if degenerate_frac > 0.01:
        warnings.warn(
            f"{degenerate_frac:.1%} of perturbed cells are all-zero; these "
            "contribute no continuous loss")

    horizon = cfg.bridge.horizon
    h = cfg.bridge.step_size
    log = []
    for epoch in range(1, cfg.epochs + 1):
        t_start = time.perf_counter()
        pairs = epoch_pairing(dataset, cfg.sinkhorn, rng,
                              method=cfg.pairing_method,
                              argmax=cfg.pairing_argmax)
        sources, targets = _flatten_pairs(pairs)
        order = rng.permutation(len(sources))
        sources, targets = sources[order], targets[order]
        sum_cont = sum_disc = 0.0
        n_seen = 0
        for lo in range(0, len(sources), cfg.batch_size):
            hi = min(lo + cfg.batch_size, len(sources))
            src, tgt = sources[lo:hi], targets[lo:hi]
            x0 = dataset.matrix[src]
            x_end = dataset.matrix[tgt]
            ct = dataset.cell_type_ids[tgt]
            pert = dataset.perturbation_ids[tgt]
            dos = dataset.dosages[tgt]
            t_batch = rng.uniform(0.0, horizon - h, size=hi - lo)
            x_t = interpolate(x0, x_end, t_batch, cfg.bridge, rng)
            d0 = discretize(x0)
            d_end = discretize(x_end)
            d_t = discrete_interpolate(d0, d_end, t_batch, horizon, rng)

            pred, cache = x_model.predict(t_batch, x_t, ct, pert, dos,
                                          record=True)
            loss_c, grad_c, _ = masked_endpoint_loss_batch(pred, x_end)
            x_model.backward(cache, grad_c)
            optimizer_step(x_model.params, cfg.optimizer)

            loss_d = 0.0
            if d_model is not None:
                logits, cache_d = d_model.predict(
                    t_batch, d_t.astype(np.float64), ct, pert, dos, record=True)
                loss_d, grad_d = posterior_loss_batch(logits, d_end)
                d_model.backward(cache_d, grad_d)
                optimizer_step(d_model.params, cfg.optimizer)

            if not (np.isfinite(loss_c) and np.isfinite(loss_d)):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            sum_cont += loss_c * (hi - lo)
            sum_disc += loss_d * (hi - lo)
            n_seen += hi - lo
        log.append(EpochStats(epoch, sum_cont / n_seen, sum_disc / n_seen,
                              time.perf_counter() - t_start))
    return TrainResult(x_model, d_model, log, dataset.vocab,
                       list(dataset.gene_names))


def generate(x_model, d_model, controls, key, cfg, rng):
    """Transport control cells to the requested condition.

    Returns (expression matrix, activation matrix). Each output row is the
    elementwise product of the continuous sample and the sampled activation
    state; without a discrete model the raw continuous sample is returned and
    the activation matrix is None.
    """
    if not (0 <= key.cell_type_id < x_model.embedder.n_cell_types
            and 0 <= key.perturbation_id < x_model.embedder.n_perturbations):
        raise VocabularyError(f"condition {key} outside the trained vocabulary")
    controls = np.atleast_2d(np.asarray(controls, dtype=np.float64))

    def x_predictor(t, state, cond):
        return x_model.predict_key(t, state, cond)

    x_hat = sample_endpoint(controls, x_predictor, key, cfg, rng)
    if d_model is None:
        return x_hat, None

    def q_predictor(t, states, cond):
        logits = d_model.predict_key(t, np.asarray(states, dtype=np.float64),
                                     cond)
        return _sigmoid(logits)

    d_hat = sample_activation(discretize(controls), q_predictor, key, cfg, rng)
    return x_hat * d_hat, d_hat


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return (float(np.mean(vals)), float(np.std(vals))) if vals else (None, None)


def evaluate(x_model, d_model, test_ds, train_ds, cfg, rng, de_ks=(20, 40)):
    """Generate for every held-out condition and score against the truth.

    Controls are drawn from the training controls of the matching cell type,
    one per true perturbed cell. DE gene sets come from true control vs true
    perturbed expression. Returns (per-condition reports, aggregate
    mean/std over conditions).
    """
    if test_ds.n_cells == 0:
        raise DataError("test set is empty")
    control_rows = np.flatnonzero(train_ds.control_mask)
    per_condition = {}
    for key in test_ds.condition_keys():
        true = test_ds.matrix[test_ds.rows_of(key)]
        pool = control_rows[train_ds.cell_type_ids[control_rows]
                            == key.cell_type_id]
        if pool.size == 0:
            raise DataError(f"no train controls for condition {key}")
        chosen = rng.choice(pool, size=true.shape[0],
                            replace=pool.size < true.shape[0])
        controls = train_ds.matrix[chosen]
        pred, act = generate(x_model, d_model, controls, key, cfg, rng)
        per_condition[key] = _score_condition(pred, act, true,
                                              train_ds.matrix[pool], de_ks)
    aggregate = {}
    for name in metrics_mod.MetricsReport.FIELDS:
        if name in ("n_pred", "n_true"):
            continue
        aggregate[name] = _mean_or_none(
            [getattr(r, name) for r in per_condition.values()])
    return per_condition, aggregate


def _score_condition(pred, act, true, true_controls, de_ks):
    # DE subsets cap at the gene count so tiny datasets stay evaluable
    de_sets = {k: metrics_mod.de_genes(true_controls, true,
                                       min(k, true.shape[1])) for k in de_ks}
    pred_states = act if act is not None else discretize(pred)
    true_states = discretize(true)

    def pcc(cols=None):
        p = pred_states if cols is None else pred_states[:, cols]
        q = true_states if cols is None else true_states[:, cols]
        try:
            return metrics_mod.activation_pcc(p, q)
        except Exception:
            return None

    return metrics_mod.MetricsReport(
        e_distance=metrics_mod.e_distance(pred, true),
        emd_all=metrics_mod.emd_per_gene(pred, true),
        emd_de20=metrics_mod.emd_per_gene(pred[:, de_sets[de_ks[0]]],
                                          true[:, de_sets[de_ks[0]]]),
        emd_de40=metrics_mod.emd_per_gene(pred[:, de_sets[de_ks[1]]],
                                          true[:, de_sets[de_ks[1]]]),
        activation_pcc_all=pcc(),
        activation_pcc_de20=pcc(de_sets[de_ks[0]]),
        activation_pcc_de40=pcc(de_sets[de_ks[1]]),
        n_pred=pred.shape[0],
        n_true=true.shape[0],
    )


def save_checkpoint(path, result, cfg):
    """Self-contained model file: JSON header (gene names, vocabulary,
    architecture) followed by the parameter sets. Byte-stable."""
    header = {
        "format": 1,
        "gene_names": result.gene_names,
        "cell_types": result.vocab.cell_types,
        "perturbations": result.vocab.perturbations,
        "hidden_width": cfg.hidden_width,
        "horizon": cfg.bridge.horizon,
        "has_discrete": result.d_model is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<q", len(blob)))
        fh.write(blob)
        result.x_model.params.write_to(fh)
        if result.d_model is not None:
            result.d_model.params.write_to(fh)


def load_checkpoint(path):
    """Rebuild the predictors from a checkpoint; returns a TrainResult with
    an empty log."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise DataError(f"{path} is not a model checkpoint")
        (blob_len,) = struct.unpack("<q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        x_params = ParameterSet.read_from(fh)
        d_params = ParameterSet.read_from(fh) if header["has_discrete"] else None
    vocab = Vocabulary(header["cell_types"], header["perturbations"])
    n_genes = len(header["gene_names"])
    rng = np.random.default_rng(0)

    def build(params):
        model = ConditionedPredictor(n_genes, vocab.n_cell_types,
                                     vocab.n_perturbations,
                                     header["hidden_width"],
                                     header["horizon"], rng)
        for name in model.params.names:
            if name not in params.values:
                raise DataError(f"checkpoint is missing parameter {name!r}")
            if model.params.values[name].shape != params.values[name].shape:
                raise DataError(f"checkpoint shape mismatch for {name!r}")
            model.params.values[name][...] = params.values[name]
        model.params.step_count = params.step_count
        return model

    x_model = build(x_params)
    d_model = build(d_params) if d_params is not None else None
    return TrainResult(x_model, d_model, [], vocab, header["gene_names"])


def write_train_log(log, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,l_cont,l_disc,wallclock_s\n")
        for row in log:
            fh.write(f"{row.epoch},{row.loss_continuous!r},"
                     f"{row.loss_discrete!r},{row.wallclock_s:.3f}\n")
