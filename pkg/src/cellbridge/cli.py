"""Command-line entry point: synthetic data generation, training, conditional
generation, and evaluation.

Configuration is a JSON file of flat dotted keys, overridable with repeated
`--set key=value` flags (flags win). Every run requires an explicit seed.
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import training as training_mod
from .conditioning import ConditionKey, Vocabulary
from .continuous import BridgeConfig
from .errors import DataError, NumericalError, VocabularyError
from .metrics import MetricsReport
from .nn import OptimizerConfig
from .pairing import SinkhornConfig

# key -> (type, default); None default means "must be provided when used"
CONFIG_KEYS = {
    "seed": (int, None),
    "data.path": (str, None),
    "data.provenance": (str, "raw"),
    "data.hvg": (int, 0),
    "split.mode": (str, "by_perturbation"),
    "split.fraction": (float, 0.3),
    "train.epochs": (int, 200),
    "train.batch_size": (int, 64),
    "train.discrete": (bool, True),
    "opt.learning_rate": (float, 1e-3),
    "opt.beta1": (float, 0.9),
    "opt.beta2": (float, 0.999),
    "opt.epsilon": (float, 1e-8),
    "opt.weight_decay": (float, 0.0),
    "bridge.horizon": (float, 1.0),
    "bridge.sigma": (float, 0.2),
    "bridge.steps": (int, 50),
    "sinkhorn.epsilon": (float, None),
    "sinkhorn.max_iters": (int, 1000),
    "sinkhorn.tolerance": (float, 1e-6),
    "sinkhorn.metric": (str, "squared_euclidean"),
    "pairing.method": (str, "ot"),
    "pairing.argmax": (bool, False),
    "model.hidden_width": (int, 256),
    "model.dir": (str, None),
    "synth.n_genes": (int, 100),
    "synth.n_cells_per_condition": (int, 200),
    "synth.n_conditions": (int, 4),
    "synth.cluster_count": (int, 2),
    "synth.shift_magnitude": (float, 1.0),
    "synth.sparsity": (float, 0.1),
    "generate.perturbation": (str, None),
    "generate.cell_type": (str, None),
    "generate.dosage": (float, 0.0),
    "generate.count": (int, 0),
    "evaluate.self_test": (bool, False),
}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _coerce(key, value):
    typ, _ = CONFIG_KEYS[key]
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise UsageError(f"{key} expects true/false, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"{key} expects {typ.__name__}, got {value!r}") from None


def load_config(args):
    cfg = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object of dotted keys")
        for key, value in loaded.items():
            if key not in CONFIG_KEYS:
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value) if value is not None else None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if cfg["seed"] is None:
        raise UsageError("a seed is required (config key 'seed' or --seed)")
    return cfg


def _require(cfg, key, why):
    if cfg[key] is None:
        raise UsageError(f"{key} must be set ({why})")
    return cfg[key]


def _bridge_config(cfg):
    return BridgeConfig(horizon=cfg["bridge.horizon"], sigma=cfg["bridge.sigma"],
                        steps=cfg["bridge.steps"])


def _train_config(cfg):
    return training_mod.TrainConfig(
        seed=cfg["seed"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        optimizer=OptimizerConfig(
            learning_rate=cfg["opt.learning_rate"], beta1=cfg["opt.beta1"],
            beta2=cfg["opt.beta2"], epsilon=cfg["opt.epsilon"],
            weight_decay=cfg["opt.weight_decay"]),
        bridge=_bridge_config(cfg),
        sinkhorn=SinkhornConfig(
            epsilon=cfg["sinkhorn.epsilon"], max_iters=cfg["sinkhorn.max_iters"],
            tolerance=cfg["sinkhorn.tolerance"], metric=cfg["sinkhorn.metric"]),
        pairing_method=cfg["pairing.method"],
        pairing_argmax=cfg["pairing.argmax"],
        hidden_width=cfg["model.hidden_width"],
        train_discrete=cfg["train.discrete"],
    )


def _load_dataset(cfg):
    path = _require(cfg, "data.path", "input expression CSV")
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    ds = data_mod.load_matrix(path, provenance=cfg["data.provenance"])
    if ds.provenance == data_mod.PROVENANCE_RAW:
        ds = data_mod.log1p_normalize(ds)
    if cfg["data.hvg"]:
        ds = data_mod.select_hvg(ds, cfg["data.hvg"])
    return ds


def _out_dir(args):
    if not args.out:
        raise UsageError("--out directory is required")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_synth(args, cfg):
    out = _out_dir(args)
    spec = data_mod.SyntheticSpec(
        n_genes=cfg["synth.n_genes"],
        n_cells_per_condition=cfg["synth.n_cells_per_condition"],
        n_conditions=cfg["synth.n_conditions"],
        cluster_count=cfg["synth.cluster_count"],
        shift_magnitude=cfg["synth.shift_magnitude"],
        sparsity=cfg["synth.sparsity"],
        seed=cfg["seed"],
    )
    ds, shifts = data_mod.synth_generate(spec)
    data_mod.save_matrix(ds, os.path.join(out, "expression.csv"))
    data_mod.save_shifts(shifts, ds.vocab, ds.gene_names,
                         os.path.join(out, "shifts.csv"))
    print(f"wrote {ds.n_cells} cells x {ds.n_genes} genes to {out}")
    return EXIT_OK


def _write_split(train_ds, test_ds, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("cell_id,role\n")
        for cid in train_ds.cell_ids:
            fh.write(f"{cid},train\n")
        for cid in test_ds.cell_ids:
            fh.write(f"{cid},test\n")


def _read_split(ds, path):
    if not os.path.exists(path):
        raise DataError(f"split file not found: {path}")
    roles = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "cell_id,role":
            raise DataError(f"bad split file header in {path}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cid, _, role = line.partition(",")
            roles[cid] = role
    index = {cid: i for i, cid in enumerate(ds.cell_ids)}
    missing = [cid for cid in roles if cid not in index]
    if missing:
        raise DataError(f"split references unknown cell ids, e.g. {missing[0]!r}")
    train_rows = [index[c] for c, r in roles.items() if r == "train"]
    test_rows = [index[c] for c, r in roles.items() if r == "test"]
    return ds.subset(sorted(train_rows)), ds.subset(sorted(test_rows))


def cmd_train(args, cfg):
    out = _out_dir(args)
    ds = _load_dataset(cfg)
    train_ds, test_ds = data_mod.split(ds, cfg["split.mode"],
                                       cfg["split.fraction"], cfg["seed"])
    tcfg = _train_config(cfg)
    result = training_mod.train(train_ds, tcfg)
    training_mod.save_checkpoint(os.path.join(out, "checkpoint.bin"), result, tcfg)
    result.vocab.save(os.path.join(out, "vocab.txt"))
    _write_split(train_ds, test_ds, os.path.join(out, "split.csv"))
    training_mod.write_train_log(result.log, os.path.join(out, "train_log.csv"))
    final = result.log[-1]
    print(f"trained {tcfg.epochs} epochs; final l_cont={final.loss_continuous:.5f} "
          f"l_disc={final.loss_discrete:.5f}; artifacts in {out}")
    return EXIT_OK


def _write_prediction_csv(path, gene_names, matrix, formatter=repr):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(gene_names) + "\n")
        for row in matrix:
            fh.write(",".join(formatter(float(v)) for v in row) + "\n")


def cmd_generate(args, cfg):
    out = _out_dir(args)
    model_dir = _require(cfg, "model.dir", "directory containing checkpoint.bin")
    result = training_mod.load_checkpoint(os.path.join(model_dir, "checkpoint.bin"))
    ds = _load_dataset(cfg)
    if ds.gene_names != result.gene_names:
        raise DataError("dataset gene set does not match the checkpoint")
    if ds.vocab != result.vocab:
        raise DataError("dataset vocabulary does not match the checkpoint")
    pert_name = _require(cfg, "generate.perturbation", "condition to generate")
    ct_name = _require(cfg, "generate.cell_type", "cell type to generate for")
    key = ConditionKey(result.vocab.cell_type_id(ct_name),
                       result.vocab.perturbation_id(pert_name),
                       cfg["generate.dosage"])
    pool = np.flatnonzero(ds.control_mask
                          & (ds.cell_type_ids == key.cell_type_id))
    if pool.size == 0:
        raise DataError(f"no control cells of cell type {ct_name!r}")
    rng = np.random.default_rng(cfg["seed"])
    count = cfg["generate.count"] or pool.size
    chosen = rng.choice(pool, size=count, replace=pool.size < count)
    expr, act = training_mod.generate(result.x_model, result.d_model,
                                      ds.matrix[chosen], key,
                                      _bridge_config(cfg), rng)
    _write_prediction_csv(os.path.join(out, "predictions.csv"),
                          result.gene_names, expr)
    if act is not None:
        _write_prediction_csv(os.path.join(out, "activations.csv"),
                              result.gene_names, act,
                              formatter=lambda v: str(int(v)))
    print(f"generated {count} cells for {pert_name}@{cfg['generate.dosage']} "
          f"in {ct_name}; wrote {out}")
    return EXIT_OK


def _report_to_row(key, vocab, report):
    return {
        "perturbation": vocab.perturbations[key.perturbation_id],
        "dosage": key.dosage,
        "cell_type": vocab.cell_types[key.cell_type_id],
        **report.to_dict(),
    }


def cmd_evaluate(args, cfg):
    out = _out_dir(args)
    model_dir = _require(cfg, "model.dir", "directory containing checkpoint.bin")
    ds = _load_dataset(cfg)
    train_ds, test_ds = _read_split(ds, os.path.join(model_dir, "split.csv"))
    rng = np.random.default_rng(cfg["seed"])
    if cfg["evaluate.self_test"]:
        per_condition = {}
        for key in test_ds.condition_keys():
            true = test_ds.matrix[test_ds.rows_of(key)]
            ctrl = train_ds.matrix[train_ds.control_mask]
            per_condition[key] = training_mod._score_condition(
                true, None, true, ctrl, (20, 40))
        aggregate = {
            name: training_mod._mean_or_none(
                [getattr(r, name) for r in per_condition.values()])
            for name in MetricsReport.FIELDS if name not in ("n_pred", "n_true")
        }
    else:
        result = training_mod.load_checkpoint(
            os.path.join(model_dir, "checkpoint.bin"))
        if ds.gene_names != result.gene_names:
            raise DataError("dataset gene set does not match the checkpoint")
        per_condition, aggregate = training_mod.evaluate(
            result.x_model, result.d_model, test_ds, train_ds,
            _bridge_config(cfg), rng)
    payload = {
        "aggregate": {k: {"mean": v[0], "std": v[1]}
                      for k, v in aggregate.items()},
        "conditions": [_report_to_row(k, ds.vocab, r)
                       for k, r in sorted(per_condition.items(),
                                          key=lambda kv: (kv[0].cell_type_id,
                                                          kv[0].perturbation_id,
                                                          kv[0].dosage))],
    }
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8",
              newline="") as fh:
        fh.write("perturbation,dosage,cell_type," + MetricsReport.csv_header()
                 + "\n")
        for row in payload["conditions"]:
            fh.write(",".join(str(row[c]) for c in
                              ["perturbation", "dosage", "cell_type"]
                              + list(MetricsReport.FIELDS)) + "\n")
    e_mean = payload["aggregate"]["e_distance"]["mean"]
    print(f"evaluated {len(per_condition)} condition(s); "
          f"mean e_distance={e_mean}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="cellbridge",
                     description="bridge-based transport between control and "
                                 "perturbed cell populations")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
            ("synth", "generate a synthetic benchmark dataset"),
            ("train", "train the paired bridge models"),
            ("generate", "sample perturbation outcomes for one condition"),
            ("evaluate", "score held-out conditions against the truth")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config of flat dotted keys")
        p.add_argument("--seed", type=int, help="random seed (required here "
                                                "or in the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


_COMMANDS = {"synth": cmd_synth, "train": cmd_train,
             "generate": cmd_generate, "evaluate": cmd_evaluate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VocabularyError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
