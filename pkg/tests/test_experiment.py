import glob
import json
import os

import numpy as np
import pytest

from fusionrec import evaluation as ev
from fusionrec import experiment as ex
from fusionrec import training as tr
from fusionrec.cli import main
from fusionrec.modality import ModalityFeatures, write_features
from fusionrec.models import ModelConfig

N_USERS, N_ITEMS = 15, 35


def write_corpus(root):
    """Tiny raw corpus: modular interaction pattern, two feature files.

    Every user rates 10 items at stride 3, so every item lands well above
    the 2-core threshold and every user keeps >= 20 ranking candidates.
    """
    rng = np.random.default_rng(7)
    lines = []
    for u in range(N_USERS):
        for j in range(10):
            lines.append(f"u{u}\ti{(u * 3 + j) % N_ITEMS}\t5\t{100 + j}")
    inter = os.path.join(root, "interactions.tsv")
    with open(inter, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    ids = [f"i{i}" for i in range(N_ITEMS)]
    vis = ModalityFeatures("visual", 4, ids,
                           rng.normal(size=(N_ITEMS, 4)).astype(np.float32))
    write_features(vis, os.path.join(root, "visual.bin"))
    with open(os.path.join(root, "textual.tsv"), "w", encoding="utf-8") as fh:
        for i in ids:
            vals = "\t".join(repr(float(x)) for x in rng.normal(size=3))
            fh.write(f"{i}\t{vals}\n")
    return inter


def base_config(root, out_dir, **over):
    defaults = dict(
        interactions=os.path.join(root, "interactions.tsv"),
        features={"visual": os.path.join(root, "visual.bin"),
                  "textual": os.path.join(root, "textual.tsv")},
        model=ModelConfig(tag="vbpr", embedding_dim=8, knn_k=3),
        trainer=tr.TrainerConfig(epochs=2, batch_size=32, eval_every=1),
        kcore=2,
        grid_lrs=(0.01, 0.05),
        grid_regs=(1e-5,),
        cutoffs=(5, 10),
        out_dir=str(out_dir),
    )
    defaults.update(over)
    return ex.ExperimentConfig(**defaults)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("corpus"))
    write_corpus(root)
    return root


@pytest.fixture(scope="module")
def single_run(corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("single"))
    config = base_config(corpus, out)
    report = ex.run_single(config)
    return config, report


@pytest.fixture(scope="module")
def bench_run(corpus, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("bench"))
    config = base_config(corpus, out)
    rows = ex.cmd_benchmark(config, models=("vbpr", "bm3"))
    return config, rows


# -------------------------------------------------------------- config text

def test_config_roundtrip_is_exact(corpus):
    config = base_config(
        corpus, "runs/x",
        model=ModelConfig(tag="mmgcn", embedding_dim=16, layers=1,
                          modality_weights=(0.25, 0.75), activation="linear"),
        trainer=tr.TrainerConfig(epochs=7, batch_size=64, lr=0.0003,
                                 reg=0.007, optimizer="sgd", seed=3,
                                 eval_every=2),
        missing_policy="zero_fill",
        kcore=3,
        train_ratio=0.75,
        split_seed=11,
        grid_lrs=(0.001, 0.0123),
        grid_regs=(1e-05, 0.01),
        cutoffs=(5, 10, 20),
    )
    assert ex.parse_config(ex.serialize_config(config)) == config


def test_config_roundtrip_keeps_env_references(corpus):
    config = base_config(corpus, "runs/x",
                         interactions="${DATA_ROOT}/interactions.tsv",
                         features={"visual": "${DATA_ROOT}/visual.bin"})
    back = ex.parse_config(ex.serialize_config(config))
    assert back.interactions == "${DATA_ROOT}/interactions.tsv"
    assert back.features["visual"] == "${DATA_ROOT}/visual.bin"


def test_env_substitution_happens_at_resolve_time(corpus, tmp_path,
                                                  monkeypatch):
    monkeypatch.setenv("DATA_ROOT", corpus)
    config = base_config(corpus, str(tmp_path / "out"),
                         interactions="${DATA_ROOT}/interactions.tsv",
                         features={"visual": "${DATA_ROOT}/visual.bin"})
    assert ex.resolve_path(config.interactions) == \
        os.path.join(corpus, "interactions.tsv")
    split, store = ex.cmd_prepare(config)
    assert split.dataset.n_users == N_USERS


def test_unset_env_variable_is_a_config_error():
    with pytest.raises(ex.ConfigError, match="NO_SUCH_VAR_XYZ"):
        ex.resolve_path("${NO_SUCH_VAR_XYZ}/a.tsv")


def test_parse_rejects_malformed_input():
    with pytest.raises(ex.ConfigError, match="syntax"):
        ex.parse_config("not an ini file at all [")
    with pytest.raises(ex.ConfigError, match=r"\[data\]"):
        ex.parse_config("[model]\ntag = vbpr\n")
    with pytest.raises(ex.ConfigError, match="unknown key"):
        ex.parse_config(
            "[data]\ninteractions = a\nfeature.visual = b\n"
            "[model]\ntag = vbpr\nnot_a_field = 1\n")
    with pytest.raises(ex.ConfigError, match="true/false"):
        ex.parse_config(
            "[data]\ninteractions = a\nfeature.visual = b\n"
            "[model]\ntag = vbpr\nwith_bias = maybe\n")


def test_config_validation(corpus):
    with pytest.raises(ex.ConfigError, match="modality"):
        base_config(corpus, "o", features={})
    with pytest.raises(ex.ConfigError, match="cutoffs"):
        base_config(corpus, "o", cutoffs=(0, 10))
    with pytest.raises(ex.ConfigError, match="train_ratio"):
        base_config(corpus, "o", train_ratio=1.0)
    with pytest.raises(ex.ConfigError, match="policy"):
        base_config(corpus, "o", missing_policy="ignore")
    with pytest.raises(ex.ConfigError, match="kcore"):
        base_config(corpus, "o", kcore=0)
    # env substitution is for data paths; a templated out dir would create
    # a directory literally named ${...}
    with pytest.raises(ex.ConfigError, match="data paths only"):
        base_config(corpus, "${RUN_ROOT}/out")


def test_save_and_load_config_file(corpus, tmp_path):
    config = base_config(corpus, str(tmp_path / "out"))
    path = str(tmp_path / "exp.ini")
    ex.save_config(config, path)
    assert ex.load_config(path) == config


# ----------------------------------------------------------------- prepare

def test_missing_feature_file_fails_before_any_work(corpus, tmp_path):
    out = tmp_path / "never"
    config = base_config(
        corpus, str(out),
        features={"visual": os.path.join(corpus, "absent.bin")})
    with pytest.raises(ex.ConfigError, match="absent.bin"):
        ex.cmd_prepare(config)
    assert not out.exists()


def test_kcore_emptying_the_corpus_is_a_config_error(corpus, tmp_path):
    config = base_config(corpus, str(tmp_path / "out"), kcore=50)
    with pytest.raises(ex.ConfigError, match="removed every interaction"):
        ex.cmd_prepare(config)


def test_prepare_writes_split_and_stats(corpus, tmp_path):
    config = base_config(corpus, str(tmp_path / "out"))
    split, store = ex.cmd_prepare(config)
    prepared = tmp_path / "out" / "prepared"
    for name in ("train.tsv", "validation.tsv", "test.tsv",
                 "split.json", "stats.json"):
        assert (prepared / name).is_file(), name
    stats = json.loads((prepared / "stats.json").read_text())
    assert stats["n_users"] == N_USERS
    assert stats["min_user_degree"] >= config.kcore
    assert stats["min_item_degree"] >= config.kcore
    assert store.matrix("visual").shape == (split.dataset.n_items, 4)


def test_feature_modality_mismatch_is_rejected(corpus, tmp_path):
    config = base_config(
        corpus, str(tmp_path / "out"),
        features={"textual": os.path.join(corpus, "visual.bin")})
    with pytest.raises(ex.ConfigError, match="declares modality"):
        ex.cmd_prepare(config)


# ------------------------------------------------------------ run artifacts

def test_tune_selects_from_grid_and_writes_table(single_run):
    config, _ = single_run
    body = json.loads(
        open(os.path.join(config.out_dir, "vbpr", "tune.json")).read())
    assert body["best"]["lr"] in config.grid_lrs
    assert body["best"]["reg"] in config.grid_regs
    # 2 grid points x 2 epochs at eval_every=1
    assert len(body["table"]) == 4
    values = [row["value"] for row in body["table"]]
    assert body["best"]["best_value"] == max(values)


def test_manifest_is_deterministic_and_timings_live_apart(single_run):
    config, _ = single_run
    run_dir = os.path.join(config.out_dir, "vbpr")
    manifest = json.loads(open(os.path.join(run_dir, "manifest.json")).read())
    assert set(manifest) == {"config", "seed", "version", "stats", "chosen"}
    assert manifest["config"]["model"]["tag"] == "vbpr"
    assert manifest["chosen"]["lr"] in config.grid_lrs
    assert manifest["stats"]["n_users"] == N_USERS
    timings = json.loads(open(os.path.join(run_dir, "timings.json")).read())
    assert timings["train_seconds"] > 0


def test_trace_has_one_row_per_epoch(single_run):
    config, _ = single_run
    lines = open(os.path.join(config.out_dir, "vbpr", "trace.tsv")).read() \
        .strip().split("\n")
    assert lines[0] == "epoch\tloss\tval_recall20\tseconds"
    assert len(lines) == 1 + config.trainer.epochs


def test_metrics_files_cover_every_cutoff(single_run):
    config, report = single_run
    run_dir = os.path.join(config.out_dir, "vbpr")
    body = json.loads(open(os.path.join(run_dir, "metrics.json")).read())
    want_keys = {f"{m}@{k}" for k in config.cutoffs for m in ev.METRIC_ORDER}
    assert set(body["values"]) == want_keys
    assert body["values"]["recall@10"] == report.get("recall", 10)
    tsv = open(os.path.join(run_dir, "metrics.tsv")).read().strip().split("\n")
    assert len(tsv) == 1 + len(want_keys)


def test_recommendations_rows_are_ranked(single_run):
    config, _ = single_run
    rows = [line.split("\t") for line in
            open(os.path.join(config.out_dir, "vbpr",
                              "recommendations.tsv")).read().strip().split("\n")]
    ranks = {}
    for u, i, rank, score in rows:
        ranks.setdefault(int(u), []).append((int(rank), float(score)))
    for u, pairs in ranks.items():
        assert [r for r, _ in pairs] == list(range(1, len(pairs) + 1))
        scores = [s for _, s in pairs]
        assert scores == sorted(scores, reverse=True)


def test_completed_run_dir_passes_audit(single_run):
    config, _ = single_run
    assert ex.audit_run_dir(os.path.join(config.out_dir, "vbpr")) == []


def test_audit_names_missing_artifacts(tmp_path):
    missing = ex.audit_run_dir(str(tmp_path))
    assert "manifest.json" in missing
    assert "metrics.json" in missing
    assert len(missing) == 6


# ------------------------------------------------------------------ reports

def hand_report(values):
    report = ev.MetricReport()
    for metric, value in values.items():
        report.set(metric, 10, value)
    return report


def test_report_marks_best_and_second_by_hand():
    a = hand_report({"recall": 0.5, "ndcg": 0.25, "efd": 1.5,
                     "gini": 0.8, "aplt": 0.3, "icov": 62.5})
    b = hand_report({"recall": 0.25, "ndcg": 0.5, "efd": 1.5,
                     "gini": 0.7, "aplt": 0.4, "icov": 50.0})
    md, tsv = ex.render_report([("alpha", a), ("beta", b)], (10,))
    lines = md.strip().split("\n")
    assert lines[0] == ("| Model | Recall@10 | nDCG@10 | EFD@10 | Gini@10 "
                        "| APLT@10 | iCov@10 |")
    assert lines[2] == ("| alpha | **0.5000** | <u>0.2500</u> | **1.5000** "
                        "| **0.8000** | <u>0.3000</u> | **62.50** |")
    assert lines[3] == ("| beta | <u>0.2500</u> | **0.5000** | **1.5000** "
                        "| <u>0.7000</u> | **0.4000** | <u>50.00</u> |")
    assert "alpha\trecall\t10\t0.5" in tsv


def test_single_row_report_has_no_markers():
    a = hand_report({"recall": 0.5, "ndcg": 0.25, "efd": 1.5,
                     "gini": 0.8, "aplt": 0.3, "icov": 62.5})
    md, _ = ex.render_report([("alpha", a)], (10,))
    assert "**" not in md and "<u>" not in md


def test_benchmark_report_lists_roster_in_order(bench_run):
    config, rows = bench_run
    assert [tag for tag, _ in rows] == ["vbpr", "bm3"]
    md = open(os.path.join(config.out_dir, "report.md")).read()
    body_rows = [line for line in md.strip().split("\n")[2:]]
    assert body_rows[0].startswith("| vbpr |")
    assert body_rows[1].startswith("| bm3 |")
    assert ex.audit_run_dir(os.path.join(config.out_dir, "vbpr")) == []
    assert ex.audit_run_dir(os.path.join(config.out_dir, "bm3")) == []


def test_cmd_report_reproduces_benchmark_table(bench_run):
    config, _ = bench_run
    dirs = [os.path.join(config.out_dir, tag) for tag in ("vbpr", "bm3")]
    md = ex.cmd_report(dirs)
    assert md == open(os.path.join(config.out_dir, "report.md")).read()


def test_cmd_report_rejects_bad_merges(bench_run, tmp_path):
    config, _ = bench_run
    with pytest.raises(ex.ConfigError, match="at least one"):
        ex.cmd_report([])
    with pytest.raises(ex.ConfigError, match="no metrics.json"):
        ex.cmd_report([str(tmp_path)])
    other = tmp_path / "other"
    other.mkdir()
    body = {"tag": "zz", "cutoffs": [7],
            "values": {f"{m}@7": 0.1 for m in ev.METRIC_ORDER}}
    (other / "metrics.json").write_text(json.dumps(body))
    with pytest.raises(ex.ConfigError, match="conflicting cutoff"):
        ex.cmd_report([os.path.join(config.out_dir, "vbpr"), str(other)])


def test_unknown_roster_tag_is_rejected(corpus, tmp_path):
    config = base_config(corpus, str(tmp_path / "out"))
    with pytest.raises(ex.ConfigError, match="unknown model tag"):
        ex.cmd_benchmark(config, models=("vbpr", "nope"))


# -------------------------------------------------------------- determinism

def test_same_config_reproduces_artifact_bytes(corpus, tmp_path):
    config = base_config(corpus, str(tmp_path / "out"), grid_lrs=(0.01,))

    def run_and_snapshot():
        ex.run_single(config)
        run_dir = os.path.join(config.out_dir, "vbpr")
        names = ["manifest.json", "metrics.json", "metrics.tsv",
                 "recommendations.tsv", "report.md", "tune.json",
                 os.path.join("checkpoint", "checkpoint.json")]
        names += sorted(
            os.path.join("checkpoint", os.path.basename(p))
            for p in glob.glob(os.path.join(run_dir, "checkpoint", "*.bin")))
        return {n: open(os.path.join(run_dir, n), "rb").read()
                for n in names}

    first = run_and_snapshot()
    second = run_and_snapshot()
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], name


# ---------------------------------------------------------------------- cli

def test_cli_prepare_and_report_succeed(corpus, tmp_path, capsys):
    out = str(tmp_path / "out")
    ini = str(tmp_path / "exp.ini")
    ex.save_config(base_config(corpus, out, grid_lrs=(0.01,)), ini)
    assert main(["--config", ini, "prepare"]) == 0
    assert main(["--config", ini, "benchmark", "--models", "vbpr"]) == 0
    assert main(["report", os.path.join(out, "vbpr")]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[-3].startswith("| Model |")
    assert lines[-1].startswith("| vbpr |")
    merged = str(tmp_path / "merged")
    assert main(["--out", merged, "report", os.path.join(out, "vbpr")]) == 0
    with open(os.path.join(merged, "report.md"), encoding="utf-8") as fh:
        assert fh.read().startswith("| Model |")


def test_cli_validation_failures_exit_1(corpus, tmp_path, capsys):
    assert main(["--config", str(tmp_path / "none.ini"), "prepare"]) == 1
    assert main(["prepare"]) == 1          # --config required
    assert main(["report"]) == 1           # usage error
    ini = str(tmp_path / "exp.ini")
    ex.save_config(base_config(corpus, str(tmp_path / "out")), ini)
    assert main(["--config", ini, "benchmark", "--models", "nope"]) == 1
    capsys.readouterr()


def test_cli_runtime_failures_exit_2(corpus, tmp_path, capsys):
    config = base_config(
        corpus, str(tmp_path / "out"),
        trainer=tr.TrainerConfig(epochs=1, batch_size=8, lr=1e30,
                                 optimizer="sgd", eval_every=1),
        grid_lrs=(1e30,))
    ini = str(tmp_path / "exp.ini")
    ex.save_config(config, ini)
    assert main(["--config", ini, "train"]) == 2
    err = capsys.readouterr().err
    assert "runtime failure" in err


def test_cli_seed_override_reaches_split_and_trainer(corpus, tmp_path,
                                                     capsys):
    out = str(tmp_path / "out")
    ini = str(tmp_path / "exp.ini")
    ex.save_config(base_config(corpus, out), ini)
    assert main(["--config", ini, "--seed", "7", "prepare"]) == 0
    sidecar = json.loads(
        open(os.path.join(out, "prepared", "split.json")).read())
    assert sidecar["seed"] == 7
    capsys.readouterr()
