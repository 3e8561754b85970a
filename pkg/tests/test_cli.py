"""Command-line interface: the full subcommand chain, file outputs, and
exit-code contract (0 ok, 1 usage, 2 data error, 3 partial failure)."""

import csv
import json

import pytest

from exqual.cli import main
from exqual.encoding import read_matrix
from exqual.eventlog import LogSchema

from test_harness import small_gen_spec, tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> encode -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cliwork")
    spec_path = root / "gen.json"
    spec_path.write_text(json.dumps(small_gen_spec(n_traces=80)), encoding="utf-8")
    data_dir = root / "data"
    enc_dir = root / "encoded"
    model_path = root / "model.json"

    assert main(["synth", "--gen-spec", str(spec_path), "--seed", "3",
                 "--out", str(data_dir)]) == 0
    assert main(["encode", "--log", str(data_dir / "log.csv"),
                 "--schema", str(data_dir / "schema.json"),
                 "--bucketing", "single", "--encoding", "aggregate",
                 "--min-prefix", "2", "--max-prefix", "4",
                 "--out", str(enc_dir)]) == 0
    assert main(["train", "--matrix", str(enc_dir / "bucket_all"),
                 "--seed", "5", "--out", str(model_path)]) == 0
    return root


def test_synth_outputs(workspace):
    data = workspace / "data"
    assert (data / "log.csv").exists()
    assert (data / "schema.json").exists()
    meta = json.loads((data / "meta.json").read_text(encoding="utf-8"))
    assert meta["label_rule"]["kind"] == "activity_occurs"
    # schema file loads back into a usable schema
    schema = LogSchema.from_json(str(data / "schema.json"))
    assert schema.label_column == "label"


def test_encode_outputs(workspace):
    enc = workspace / "encoded"
    assert (enc / "vocab.json").exists()
    matrix = read_matrix(str(enc / "bucket_all"))
    assert matrix.d == 10
    assert matrix.n > 0


def test_explain_and_eval_chain(workspace, tmp_path):
    enc = workspace / "encoded"
    matrix = read_matrix(str(enc / "bucket_all"))
    expl_dir = tmp_path / "explanations"
    expl_dir.mkdir()
    # two instances, one per explainer flavor
    case_a, len_a = matrix.case_ids[0], int(matrix.prefix_lengths[0])
    case_b, len_b = matrix.case_ids[-1], int(matrix.prefix_lengths[-1])
    assert main(["explain", "--model", str(workspace / "model.json"),
                 "--matrix", str(enc / "bucket_all"),
                 "--case", case_a, "--prefix-length", str(len_a),
                 "--explainer", "surrogate", "--m", "3", "--seed", "7",
                 "--n-samples", "200", "--k", "4",
                 "--out", str(expl_dir / "a.json")]) == 0
    assert main(["explain", "--model", str(workspace / "model.json"),
                 "--matrix", str(enc / "bucket_all"),
                 "--case", case_b, "--prefix-length", str(len_b),
                 "--explainer", "shapley", "--m", "2", "--seed", "7",
                 "--n-background", "4", "--n-permutations", "50",
                 "--out", str(expl_dir / "b.json")]) == 0

    stab_csv = tmp_path / "stability.csv"
    assert main(["eval-stability", "--explanations", str(expl_dir),
                 "--k", "4", "--out", str(stab_csv)]) == 0
    with open(stab_csv, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert {r["case_id"] for r in rows} == {case_a, case_b}
    shapley_row = next(r for r in rows if r["case_id"] == case_b)
    assert float(shapley_row["by_subset"]) == 1.0  # exact repeats

    fid_csv = tmp_path / "fidelity.csv"
    assert main(["eval-fidelity", "--explanations", str(expl_dir),
                 "--model", str(workspace / "model.json"),
                 "--matrix", str(enc / "bucket_all"),
                 "--k", "4", "--seed", "1", "--out", str(fid_csv)]) == 0
    with open(fid_csv, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    for r in rows:
        assert float(r["fidelity"]) >= 0.0
        assert 0.5 <= float(r["y_original"]) < 1.0


def test_run_and_report(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(tiny_config()), encoding="utf-8")
    out_dir = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--seed", "5",
                 "--workers", "2", "--out", str(out_dir)]) == 0
    assert (out_dir / "records.csv").exists()
    assert (out_dir / "bundle.json").exists()
    assert (out_dir / "manifest.json").exists()

    re_dir = tmp_path / "rendered"
    assert main(["report", "--bundle", str(out_dir / "bundle.json"),
                 "--format", "markdown", "--out", str(re_dir)]) == 0
    assert "Stability by subset" in (re_dir / "report.md").read_text(encoding="utf-8")


def test_run_partial_failure_exit_code(tmp_path):
    doc = tiny_config(datasets=[
        {"name": "broken", "csv": str(tmp_path / "nope.csv"),
         "schema": str(tmp_path / "nope.json")},
        {"name": "ok", "gen_spec": small_gen_spec()},
    ])
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["run", "--config", str(cfg_path),
                 "--out", str(tmp_path / "out")]) == 3


def test_usage_errors_exit_1(tmp_path):
    assert main(["frobnicate"]) == 1  # unknown subcommand
    assert main(["run"]) == 1  # missing required --config
    assert main(["run", "--config", str(tmp_path / "absent.json"),
                 "--out", str(tmp_path)]) == 1
    # config present but no out dir anywhere
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(tiny_config()), encoding="utf-8")
    assert main(["run", "--config", str(cfg)]) == 1


def test_help_exits_0():
    assert main(["--help"]) == 0


def test_data_errors_exit_2(tmp_path):
    # structurally broken config file
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text("{\"combos\": []", encoding="utf-8")
    assert main(["run", "--config", str(bad_cfg), "--out", str(tmp_path)]) == 2

    # CSV missing the columns its schema promises
    log = tmp_path / "log.csv"
    log.write_text("foo,bar\n1,2\n", encoding="utf-8")
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({
        "case_id_column": "case_id", "activity_column": "activity",
        "timestamp_column": "timestamp", "attribute_decls": [],
        "label_column": "label", "positive_label": "deviant",
    }), encoding="utf-8")
    assert main(["encode", "--log", str(log), "--schema", str(schema),
                 "--out", str(tmp_path / "enc")]) == 2


def test_eval_stability_partial_exit_3(tmp_path, workspace):
    enc = workspace / "encoded"
    matrix = read_matrix(str(enc / "bucket_all"))
    expl_dir = tmp_path / "expl"
    expl_dir.mkdir()
    case_a, len_a = matrix.case_ids[0], int(matrix.prefix_lengths[0])
    assert main(["explain", "--model", str(workspace / "model.json"),
                 "--matrix", str(enc / "bucket_all"),
                 "--case", case_a, "--prefix-length", str(len_a),
                 "--m", "2", "--n-samples", "200", "--k", "4",
                 "--out", str(expl_dir / "good.json")]) == 0
    (expl_dir / "broken.json").write_text("{}", encoding="utf-8")
    out = tmp_path / "stab.csv"
    assert main(["eval-stability", "--explanations", str(expl_dir),
                 "--k", "4", "--out", str(out)]) == 3
    with open(out, encoding="utf-8") as fh:
        assert len(list(csv.DictReader(fh))) == 1
