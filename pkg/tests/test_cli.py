"""CLI behavior: subcommand wiring, config precedence, exit codes, and
byte-level determinism of every artifact under a fixed seed."""

import json

import numpy as np
import pytest

from cellbridge.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser,
                            main)

TINY = [
    "--set", "synth.n_genes=12",
    "--set", "synth.n_cells_per_condition=16",
    "--set", "synth.n_conditions=4",
    "--set", "synth.sparsity=0.1",
]
FAST_TRAIN = [
    "--set", "data.provenance=log1p",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=16",
    "--set", "model.hidden_width=16",
    "--set", "bridge.steps=5",
    "--set", "sinkhorn.max_iters=200",
    "--set", "split.mode=by_condition_group",
    "--set", "split.fraction=0.4",
]


def run_synth(tmp_path, seed=7, extra=()):
    out = tmp_path / f"synth{seed}"
    code = main(["synth", "--seed", str(seed), "--out", str(out),
                 *TINY, *extra])
    assert code == EXIT_OK
    return out


def run_train(tmp_path, data_dir, seed=7, extra=()):
    out = tmp_path / f"model{seed}{'-'.join(extra)}"
    code = main(["train", "--seed", str(seed), "--out", str(out),
                 "--set", f"data.path={data_dir / 'expression.csv'}",
                 *FAST_TRAIN, *extra])
    assert code == EXIT_OK
    return out


# -------------------------------------------------------------------- parsing

def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0


def test_unknown_flag_is_usage_error():
    assert main(["synth", "--bogus"]) == EXIT_USAGE


def test_unknown_config_key_rejected(tmp_path):
    assert main(["synth", "--seed", "1", "--out", str(tmp_path / "o"),
                 "--set", "nonsense.key=1"]) == EXIT_USAGE


def test_unknown_json_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["synth", "--config", str(cfg), "--seed", "1",
                 "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_seed_is_mandatory(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_config_file_supplies_values_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "synth.n_genes": 5,
                               "synth.n_cells_per_condition": 4,
                               "synth.n_conditions": 2}))
    out = tmp_path / "o"
    assert main(["synth", "--config", str(cfg), "--out", str(out),
                 "--set", "synth.n_genes=6"]) == EXIT_OK
    header = (out / "expression.csv").read_text().split("\n")[0]
    assert header.count("gene") == 6


# ---------------------------------------------------------------------- synth

def test_synth_writes_loadable_files(tmp_path):
    out = run_synth(tmp_path)
    assert (out / "expression.csv").exists()
    assert (out / "shifts.csv").exists()
    from cellbridge.data import load_matrix
    ds = load_matrix(out / "expression.csv", provenance="log1p")
    assert ds.n_genes == 12
    assert ds.n_cells == 16 * 5  # controls + 4 conditions


def test_synth_byte_identical_across_runs(tmp_path):
    a = run_synth(tmp_path / "a", seed=9)
    b = run_synth(tmp_path / "b", seed=9)
    assert (a / "expression.csv").read_bytes() == (b / "expression.csv").read_bytes()
    assert (a / "shifts.csv").read_bytes() == (b / "shifts.csv").read_bytes()


def test_synth_sparsity_reflected_in_output(tmp_path):
    out = run_synth(tmp_path, seed=11,
                    extra=["--set", "synth.sparsity=0.3",
                           "--set", "synth.n_cells_per_condition=200",
                           "--set", "synth.n_genes=40"])
    from cellbridge.data import load_matrix
    ds = load_matrix(out / "expression.csv", provenance="log1p")
    pert = ds.matrix[~ds.control_mask]
    ctrl = ds.matrix[ds.control_mask]
    observed = (pert == 0).mean()
    # resparsification alone guarantees ~0.3, plus the base zero rate
    assert observed >= 0.3
    assert observed > (ctrl == 0).mean()


# ---------------------------------------------------------------------- train

def test_train_writes_artifacts_and_is_deterministic(tmp_path):
    data = run_synth(tmp_path, seed=13)
    m1 = run_train(tmp_path / "m1", data, seed=13)
    m2 = run_train(tmp_path / "m2", data, seed=13)
    for name in ("checkpoint.bin", "vocab.txt", "split.csv"):
        assert (m1 / name).exists()
        assert (m1 / name).read_bytes() == (m2 / name).read_bytes(), name
    log = (m1 / "train_log.csv").read_text().strip().split("\n")
    assert log[0] == "epoch,l_cont,l_disc,wallclock_s"
    assert len(log) == 3
    # logs match except the wallclock column
    strip = lambda text: ["," .join(l.split(",")[:3]) for l in text]
    assert strip(log) == strip((m2 / "train_log.csv").read_text()
                               .strip().split("\n"))


def test_train_missing_dataset_exits_data_error(tmp_path, capsys):
    code = main(["train", "--seed", "1", "--out", str(tmp_path / "o"),
                 "--set", "data.path=/nonexistent/file.csv"])
    assert code == EXIT_DATA
    assert "/nonexistent/file.csv" in capsys.readouterr().err


# ------------------------------------------------------------------- generate

def test_generate_counts_and_determinism(tmp_path):
    data = run_synth(tmp_path, seed=17)
    model = run_train(tmp_path, data, seed=17)
    outs = []
    for name in ("g1", "g2"):
        out = tmp_path / name
        code = main(["generate", "--seed", "23", "--out", str(out),
                     "--set", f"data.path={data / 'expression.csv'}",
                     "--set", "data.provenance=log1p",
                     "--set", f"model.dir={model}",
                     "--set", "generate.perturbation=pert01",
                     "--set", "generate.cell_type=lineA",
                     "--set", "generate.dosage=1.0",
                     "--set", "generate.count=5",
                     "--set", "bridge.steps=5"])
        assert code == EXIT_OK
        outs.append(out)
    pred = (outs[0] / "predictions.csv").read_text().strip().split("\n")
    assert len(pred) == 6  # header + 5 rows
    act = (outs[0] / "activations.csv").read_text().strip().split("\n")
    assert len(act) == 6
    assert set(act[1].split(",")) <= {"0", "1"}
    assert ((outs[0] / "predictions.csv").read_bytes()
            == (outs[1] / "predictions.csv").read_bytes())
    assert ((outs[0] / "activations.csv").read_bytes()
            == (outs[1] / "activations.csv").read_bytes())


def test_generate_unknown_perturbation_is_data_error(tmp_path, capsys):
    data = run_synth(tmp_path, seed=19)
    model = run_train(tmp_path, data, seed=19)
    code = main(["generate", "--seed", "1", "--out", str(tmp_path / "g"),
                 "--set", f"data.path={data / 'expression.csv'}",
                 "--set", "data.provenance=log1p",
                 "--set", f"model.dir={model}",
                 "--set", "generate.perturbation=not_a_gene",
                 "--set", "generate.cell_type=lineA"])
    assert code == EXIT_DATA
    assert "not_a_gene" in capsys.readouterr().err


# ------------------------------------------------------------------- evaluate

def _evaluate(tmp_path, data, model, out_name, seed=29, extra=()):
    out = tmp_path / out_name
    code = main(["evaluate", "--seed", str(seed), "--out", str(out),
                 "--set", f"data.path={data / 'expression.csv'}",
                 "--set", "data.provenance=log1p",
                 "--set", f"model.dir={model}",
                 "--set", "bridge.steps=5", *extra])
    assert code == EXIT_OK
    return out


def test_evaluate_writes_reports_and_is_deterministic(tmp_path):
    data = run_synth(tmp_path, seed=31)
    model = run_train(tmp_path, data, seed=31)
    e1 = _evaluate(tmp_path, data, model, "e1")
    e2 = _evaluate(tmp_path, data, model, "e2")
    assert (e1 / "metrics.json").read_bytes() == (e2 / "metrics.json").read_bytes()
    assert (e1 / "metrics.csv").read_bytes() == (e2 / "metrics.csv").read_bytes()
    payload = json.loads((e1 / "metrics.json").read_text())
    assert set(payload) == {"aggregate", "conditions"}
    assert "e_distance" in payload["aggregate"]
    for row in payload["conditions"]:
        assert "emd_de20" in row and "activation_pcc_all" in row


def test_evaluate_self_test_perfect_scores(tmp_path):
    data = run_synth(tmp_path, seed=37)
    model = run_train(tmp_path, data, seed=37)
    out = _evaluate(tmp_path, data, model, "self",
                    extra=["--set", "evaluate.self_test=true"])
    payload = json.loads((out / "metrics.json").read_text())
    assert payload["aggregate"]["e_distance"]["mean"] == 0.0
    assert payload["aggregate"]["emd_all"]["mean"] == 0.0
    assert payload["aggregate"]["activation_pcc_all"]["mean"] == pytest.approx(1.0)


def test_evaluate_random_pairing_ablation_produces_report(tmp_path):
    data = run_synth(tmp_path, seed=41)
    full = run_train(tmp_path / "full", data, seed=41)
    rand = run_train(tmp_path / "rand", data, seed=41,
                     extra=["--set", "pairing.method=random"])
    e_full = _evaluate(tmp_path, data, full, "efull")
    e_rand = _evaluate(tmp_path, data, rand, "erand")
    a = json.loads((e_full / "metrics.json").read_text())
    b = json.loads((e_rand / "metrics.json").read_text())
    assert a["aggregate"]["e_distance"]["mean"] is not None
    assert b["aggregate"]["e_distance"]["mean"] is not None
