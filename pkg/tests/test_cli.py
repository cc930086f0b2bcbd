import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from uccf_apsel import cli, store
from uccf_apsel.config import DEFAULT_TRAIN, load_run_config, parse_run_config
from uccf_apsel.pipeline import Variant

SCENARIO = """\
L=4
N=2
K=5
area_side=200
snr_levels_db=0,10,20
"""

RUN = """\
scenario=scenario.txt
n_instances=30
folds=5
bench_trials=3
train.epochs=2
train.batch_size=16
"""


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "scenario.txt").write_text(SCENARIO)
    (tmp_path / "run.txt").write_text(RUN)
    return tmp_path


def uccf(run_dir, *args, out="out"):
    return cli.main([*args, "--config", str(run_dir / "run.txt"), "--output-dir", str(run_dir / out)])


def csv_files(root: Path):
    return sorted(p for p in root.rglob("*.csv"))


def read(path):
    return store.read_csv(path)


# ---------------------------------------------------------------- config

def test_run_config_layers_scenario_and_overrides(run_dir):
    cfg = load_run_config(run_dir / "run.txt", {"master_seed": "4", "train.DistributedLsf.epochs": "7"})
    assert (cfg.params.L, cfg.params.K, cfg.n_instances, cfg.master_seed) == (4, 5, 30, 4)
    assert cfg.train[Variant.DISTRIBUTED_LSF].epochs == 7
    assert cfg.train[Variant.CENTRALIZED_LSF].epochs == 2
    assert cfg.train[Variant.CENTRALIZED_LSF].monitor == DEFAULT_TRAIN[Variant.CENTRALIZED_LSF].monitor


def test_config_hash_tracks_content(run_dir):
    a = load_run_config(run_dir / "run.txt")
    b = load_run_config(run_dir / "run.txt")
    c = load_run_config(run_dir / "run.txt", {"n_instances": "60"})
    assert a.config_hash() == b.config_hash() != c.config_hash()


@pytest.mark.parametrize("pairs", [[("bogus", "1")], [("train.nope", "1")], [("train.Foo.epochs", "1")],
                                   [("train.a.b.c", "1")]])
def test_unknown_keys_rejected(pairs):
    with pytest.raises(ValueError):
        parse_run_config(pairs)


def test_missing_scenario_include(tmp_path):
    (tmp_path / "run.txt").write_text("scenario=absent.txt\n")
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "run.txt")


# ---------------------------------------------------------------- generate

def test_generate_writes_four_datasets(run_dir):
    assert uccf(run_dir, "generate") == 0
    dirs = sorted(p.name for p in (run_dir / "out" / "datasets").iterdir())
    assert dirs == sorted(v.value for v in Variant)
    for v in Variant:
        d = run_dir / "out" / "datasets" / v.value
        assert {p.name for p in d.iterdir()} == {"manifest.txt", "features.csv", "labels.csv", "rows.csv"}
        ds = store.read_dataset(d)
        assert ds.variant is v
        assert ds.n_instances == 30


def test_generate_is_byte_identical_on_rerun(run_dir):
    assert uccf(run_dir, "generate", out="a") == 0
    assert uccf(run_dir, "generate", out="b") == 0
    fa, fb = csv_files(run_dir / "a"), csv_files(run_dir / "b")
    assert [p.relative_to(run_dir / "a") for p in fa] == [p.relative_to(run_dir / "b") for p in fb]
    for x, y in zip(fa, fb):
        assert x.read_bytes() == y.read_bytes(), x.name


def test_dataset_round_trip_preserves_everything(run_dir):
    from uccf_apsel.config import load_run_config
    from uccf_apsel.pipeline import generate_datasets

    cfg = load_run_config(run_dir / "run.txt")
    assert uccf(run_dir, "generate") == 0
    mem = generate_datasets(cfg.params, 30, 0)
    for v in Variant:
        disk = store.read_dataset(run_dir / "out" / "datasets" / v.value)
        np.testing.assert_allclose(disk.features, mem[v].features, rtol=1e-8)
        assert np.array_equal(disk.labels, mem[v].labels)
        assert np.array_equal(disk.instance, mem[v].instance)
        assert np.array_equal(disk.snr_db, mem[v].snr_db)
        assert np.array_equal(disk.ue, mem[v].ue)
        assert disk.manifest["master_seed"] == "0"
        assert disk.manifest["L"] == "4"


def test_every_csv_has_hash_comment_and_header(run_dir):
    assert uccf(run_dir, "generate") == 0
    h = load_run_config(run_dir / "run.txt").config_hash()
    for path in csv_files(run_dir / "out"):
        first, second = path.read_text().splitlines()[:2]
        assert first == f"# config_hash={h} seed=0", path
        assert not second[0].isdigit(), path


def test_smoke_generation_is_quick(tmp_path):
    t0 = time.perf_counter()
    assert cli.main(["generate", "--output-dir", str(tmp_path), "--set", "n_instances=60"]) == 0
    assert time.perf_counter() - t0 < 60


def test_generate_threads_do_not_change_output(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedBsr", out="one") == 0
    assert uccf(run_dir, "generate", "--variant", "DistributedBsr", "--threads", "2", out="two") == 0
    for a, b in zip(csv_files(run_dir / "one"), csv_files(run_dir / "two")):
        assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------- train

def test_train_all_folds_and_history(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf") == 0
    assert uccf(run_dir, "train", "--variant", "DistributedLsf") == 0
    d = run_dir / "out" / "models" / "DistributedLsf"
    assert sorted(p.name for p in d.glob("*.mlp")) == [f"fold{f}.mlp" for f in range(5)]
    for f in range(5):
        hist = read(d / f"fold{f}.history.csv")
        fm = store.load_fold_model(d, f"fold{f}")
        assert len(hist) == len(fm.history) == 2
        assert hist["best"].sum() == 1


def test_train_single_fold(run_dir):
    assert uccf(run_dir, "generate", "--variant", "CentralizedLsf") == 0
    assert uccf(run_dir, "train", "--variant", "CentralizedLsf", "--fold", "0") == 0
    d = run_dir / "out" / "models" / "CentralizedLsf"
    assert [p.name for p in d.glob("*.mlp")] == ["fold0.mlp"]


def test_train_per_ue_models(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedBsr") == 0
    assert uccf(run_dir, "train", "--variant", "DistributedBsr", "--fold", "1", "--per-ue-models") == 0
    d = run_dir / "out" / "models" / "DistributedBsr"
    assert sorted(p.name for p in d.glob("*.mlp")) == sorted(f"fold1_ue{k}.mlp" for k in range(5))
    assert uccf(run_dir, "eval", "--variant", "DistributedBsr", "--fold", "1", "--per-ue-models") == 0


def test_train_without_dataset_fails_with_one_line(run_dir, capsys):
    assert uccf(run_dir, "train") != 0
    err = capsys.readouterr().err.strip()
    assert "\n" not in err and "missing dataset" in err


def test_fold_out_of_range(run_dir, capsys):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf") == 0
    assert uccf(run_dir, "train", "--variant", "DistributedLsf", "--fold", "9") != 0
    assert "out of range" in capsys.readouterr().err


def test_model_files_round_trip(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf") == 0
    assert uccf(run_dir, "train", "--variant", "DistributedLsf", "--fold", "0") == 0
    d = run_dir / "out" / "models" / "DistributedLsf"
    fm = store.load_fold_model(d, "fold0")
    ds = store.read_dataset(run_dir / "out" / "datasets" / "DistributedLsf")
    store.save_fold_model(run_dir / "copy", "fold0", fm, "x", 0)
    again = store.load_fold_model(run_dir / "copy", "fold0")
    assert again.proba(ds.features).tobytes() == fm.proba(ds.features).tobytes()
    assert again.history == fm.history and again.best_epoch == fm.best_epoch


# ---------------------------------------------------------------- eval

def _ctx(run_dir, out="out", **overrides):
    cfg = load_run_config(run_dir / "run.txt", {k: str(v) for k, v in overrides.items()})
    return cli.Context(cfg, run_dir / out, 1)


def test_eval_with_perfect_teacher_stub(run_dir):
    assert uccf(run_dir, "generate") == 0
    ctx = _ctx(run_dir)
    stubs = {}
    for v in Variant:
        ds = ctx.load_dataset(v)
        stubs[v] = (lambda d: (lambda fold, rows: d.labels[rows].astype(float)))(ds)
    cli.cmd_eval(ctx, predictors=stubs)
    for v in Variant:
        r = ctx.report_dir(v)
        tpr = read(r / "tpr_tnr.csv")
        assert len(tpr) == ctx.cfg.folds + 1
        assert tpr["fold"].astype(str).tolist()[-1] == "mean"
        assert np.all(tpr["tpr"] == 1.0) and np.all(tpr["tnr"] == 1.0)
        rates = read(r / "sumrate_by_snr.csv")
        assert rates["snr_db"].tolist() == [0.0, 10.0, 20.0]
        np.testing.assert_array_equal(rates["dnn"], rates["teacher"])
        by_snr = read(r / "tpr_tnr_by_snr.csv")
        assert set(by_snr["fold"].astype(str)) == {"0", "1", "2", "3", "4", "mean"}


def test_eval_with_all_ones_stub_matches_cooperative_curve(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf") == 0
    ctx = _ctx(run_dir)
    cli.cmd_eval(ctx, "DistributedLsf", predictors={Variant.DISTRIBUTED_LSF: lambda f, rows: np.ones((len(rows), 8))})
    rates = read(ctx.report_dir(Variant.DISTRIBUTED_LSF) / "sumrate_by_snr.csv")
    np.testing.assert_array_equal(rates["dnn"], rates["cf"])


def test_sumrate_rows_follow_default_snr_levels(tmp_path):
    assert cli.main(["generate", "--output-dir", str(tmp_path), "--set", "n_instances=60",
                     "--variant", "DistributedLsf"]) == 0
    ctx = cli.Context(load_run_config(None, {"n_instances": "60"}), tmp_path, 1)
    ds = ctx.load_dataset(Variant.DISTRIBUTED_LSF)
    cli.cmd_eval(ctx, "DistributedLsf", predictors={Variant.DISTRIBUTED_LSF: lambda f, r: ds.labels[r].astype(float)})
    rates = read(ctx.report_dir(Variant.DISTRIBUTED_LSF) / "sumrate_by_snr.csv")
    assert len(rates) == 6


def test_eval_mean_row_is_mean_of_folds(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf") == 0
    assert uccf(run_dir, "train", "--variant", "DistributedLsf") == 0
    assert uccf(run_dir, "eval", "--variant", "DistributedLsf") == 0
    tpr = read(run_dir / "out" / "reports" / "DistributedLsf" / "tpr_tnr.csv")
    folds, mean = tpr.iloc[:-1], tpr.iloc[-1]
    assert mean["tpr"] == pytest.approx(folds["tpr"].mean(), abs=1e-11)
    assert mean["tnr"] == pytest.approx(folds["tnr"].mean(), abs=1e-11)
    assert 0 <= mean["tpr"] <= 1 and 0 <= mean["tnr"] <= 1


def test_eval_without_models_fails(run_dir, capsys):
    assert uccf(run_dir, "generate", "--variant", "CentralizedBsr") == 0
    assert uccf(run_dir, "eval", "--variant", "CentralizedBsr") != 0
    err = capsys.readouterr().err.strip()
    assert "\n" not in err and "missing model" in err


def test_train_and_eval_are_byte_identical_on_rerun(run_dir):
    for out in ("a", "b"):
        assert uccf(run_dir, "generate", "--variant", "CentralizedLsf", out=out) == 0
        assert uccf(run_dir, "train", "--variant", "CentralizedLsf", out=out) == 0
        assert uccf(run_dir, "eval", "--variant", "CentralizedLsf", out=out) == 0
    fa, fb = csv_files(run_dir / "a"), csv_files(run_dir / "b")
    assert len(fa) == len(fb) > 0
    for x, y in zip(fa, fb):
        assert x.read_bytes() == y.read_bytes(), x.name
    for x, y in zip(sorted((run_dir / "a").rglob("*.mlp")), sorted((run_dir / "b").rglob("*.mlp"))):
        assert x.read_bytes() == y.read_bytes()


# ---------------------------------------------------------------- bench

@pytest.fixture
def trained_bsr(run_dir):
    for v in ("CentralizedBsr", "DistributedBsr"):
        assert uccf(run_dir, "generate", "--variant", v) == 0
        assert uccf(run_dir, "train", "--variant", v, "--fold", "0") == 0
    return run_dir


def test_bench_rows(trained_bsr):
    assert uccf(trained_bsr, "bench") == 0
    rt = read(trained_bsr / "out" / "reports" / "runtime.csv")
    assert rt["method"].tolist() == ["UCCF-LSF", "UCCF-BSR", "DNN-centralized", "DNN-distributed"]
    assert np.all(rt["per_ue_ms"] > 0)
    assert np.all(rt["trials"] == 3)


def test_bench_without_models_fails(run_dir, capsys):
    assert uccf(run_dir, "bench", "--teacher", "LSF") != 0
    assert "missing model" in capsys.readouterr().err


def test_bench_dnn_rows_beat_every_heuristic_fivefold(tmp_path):
    # default scenario, untrained weights: timing does not depend on values
    from uccf_apsel import mlp
    from uccf_apsel.pipeline import FoldModel, Standardizer

    ctx = cli.Context(load_run_config(None, {"bench_trials": "30"}), tmp_path, 1)
    for v in (Variant.CENTRALIZED_BSR, Variant.DISTRIBUTED_BSR):
        n_in, layers = v.layout(ctx.params)
        fm = FoldModel(mlp.build_network(n_in, layers), Standardizer(np.zeros(n_in), np.ones(n_in)), [(1.0, None)], 0)
        store.save_fold_model(ctx.model_dir(v), "fold0", fm, ctx.hash, ctx.seed)
    rt = read(cli.cmd_bench(ctx)).set_index("method")["per_ue_ms"]
    for dnn in ("DNN-centralized", "DNN-distributed"):
        for heuristic in ("UCCF-LSF", "UCCF-BSR"):
            assert rt[dnn] <= rt[heuristic] / 5, f"{dnn} {rt[dnn]:.5f} ms vs {heuristic} {rt[heuristic]:.5f} ms"


# ---------------------------------------------------------------- flags and environment

def test_seed_flag_overrides_file(run_dir):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf", "--seed", "5") == 0
    ds = store.read_dataset(run_dir / "out" / "datasets" / "DistributedLsf")
    assert ds.manifest["master_seed"] == "5"
    assert "seed=5" in (run_dir / "out" / "datasets" / "DistributedLsf" / "labels.csv").read_text().splitlines()[0]


def test_environment_variables(run_dir, monkeypatch):
    monkeypatch.setenv("UCCF_CONFIG", str(run_dir / "run.txt"))
    monkeypatch.setenv("UCCF_OUTPUT_DIR", str(run_dir / "env"))
    monkeypatch.setenv("UCCF_SEED", "2")
    monkeypatch.setenv("UCCF_VARIANT", "DistributedLsf")
    assert cli.main(["generate"]) == 0
    assert [p.name for p in (run_dir / "env" / "datasets").iterdir()] == ["DistributedLsf"]
    assert store.read_dataset(run_dir / "env" / "datasets" / "DistributedLsf").manifest["master_seed"] == "2"


def test_seed_mismatch_between_dataset_and_config(run_dir, capsys):
    assert uccf(run_dir, "generate", "--variant", "DistributedLsf") == 0
    assert uccf(run_dir, "train", "--variant", "DistributedLsf", "--seed", "3") != 0
    assert "seed" in capsys.readouterr().err


def test_bad_arguments(run_dir, capsys):
    assert cli.main(["generate", "--config", str(run_dir / "nope.txt")]) != 0
    assert "not found" in capsys.readouterr().err
    assert cli.main(["generate", "--output-dir", str(run_dir), "--set", "oops"]) != 0
    assert cli.main(["generate", "--output-dir", str(run_dir), "--threads", "0"]) != 0
    with pytest.raises(SystemExit):
        cli.main(["generate", "--variant", "Nope"])


def test_console_script_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "uccf_apsel.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "generate" in res.stdout and "bench" in res.stdout
