import csv

import pytest

import misrank.generator as generator
from misrank import cli
from misrank.data import load_dataset

TINY_ATTACK = ["--set", "generator_width=4", "--set", "disc_widths=4,8,8,8", "--set", "disc_fusion_width=8",
               "--set", "P=2", "--set", "C=2", "--epochs", "1"]


def _run(tmp_path, *argv):
    return cli.main(["--runs-dir", str(tmp_path / "runs"), *argv])


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_read_config_strips_comments(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# header\nepochs = 3  # inline\n\n ratio=1/8\n")
    assert cli.read_config(p) == {"epochs": "3", "ratio": "1/8"}
    p.write_text("epochs 3\n")
    with pytest.raises(cli.ConfigError, match="a.cfg:1"):
        cli.read_config(p)


def test_precedence_defaults_file_set_flag():
    schema = {"a": (int, 1), "b": (float, 0.5), "c": ("ints", (1, 2)), "d": (bool, False)}
    cfg = cli.resolve(schema, {"a": "2", "b": "0.25"}, ["a=3", "c=4,5", "d=yes"], {"a": 9, "b": None})
    assert cfg == {"a": 9, "b": 0.25, "c": (4, 5), "d": True}


def test_unknown_key_lists_valid_keys(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("epsilon = 16\n")
    assert _run(tmp_path, "train-attack", "--config", str(p)) == 2
    err = capsys.readouterr().err
    assert "epsilon" in err and "epsilon_byte" in err


def test_bad_values_fail_fast(tmp_path, capsys):
    assert _run(tmp_path, "train-attack", "--set", "epochs=many") == 2
    assert _run(tmp_path, "train-attack", "--set", "ratio=0") == 2
    assert _run(tmp_path, "train-attack", "--set", "noequals") == 2
    assert "error" in capsys.readouterr().err


def test_list_keys(tmp_path, capsys):
    assert _run(tmp_path, "ablate", "--list-keys") == 0
    out = capsys.readouterr().out
    assert "preset = ratio-sweep" in out and "eps_grid = 40,20,16,10" in out


def test_parse_ratio_eps():
    from fractions import Fraction

    assert cli.parse_ratio_eps("1/32:40, 1/64:40") == {Fraction(1, 32): 40.0, Fraction(1, 64): 40.0}
    with pytest.raises(cli.ConfigError):
        cli.parse_ratio_eps("1/32")


def test_make_data_and_no_silent_overwrite(tmp_path, capsys):
    out = tmp_path / "d"
    assert _run(tmp_path, "make-data", "--ids", "6", "--per-id", "4", "--out", str(out)) == 0
    m = load_dataset(out)
    assert len(m.records) == 24 and m.num_ids == 3
    assert "ids = 6" in (out / "config.txt").read_text()
    assert {r["split"] for r in _rows(out / "summary.csv")} == {"train", "query", "gallery"}
    assert (out / "summary.txt").exists()
    assert _run(tmp_path, "make-data", "--ids", "6", "--per-id", "4", "--out", str(out)) == 2
    assert "--overwrite" in capsys.readouterr().err
    assert _run(tmp_path, "make-data", "--ids", "8", "--per-id", "4", "--out", str(out), "--overwrite") == 0
    assert len(load_dataset(out).records) == 32


def test_runs_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "env_runs"))
    assert cli.main(["make-data", "--ids", "4", "--per-id", "4", "--set", "name=tiny"]) == 0
    assert (tmp_path / "env_runs" / "make-data" / "tiny" / "config.txt").exists()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """make-data -> train-target -> train-attack on a tiny dataset, via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    run = lambda *a: cli.main(["--runs-dir", str(root / "runs"), *a])  # noqa: E731
    data = root / "data"
    assert run("make-data", "--ids", "8", "--per-id", "4", "--out", str(data)) == 0
    assert run("train-target", "--data", str(data), "--epochs", "1", "--set", "P=2", "--set", "C=2",
               "--name", "victim", "--out", str(root / "target")) == 0
    assert run("train-attack", "--data", str(data), "--target", "victim", "--name", "att",
               "--out", str(root / "attack"), *TINY_ATTACK) == 0
    return root, run, data


def test_pipeline_artifacts(pipeline):
    root, _, _ = pipeline
    assert (root / "target" / "meta.txt").exists()
    assert _rows(root / "target" / "clean_report.csv")[0]["condition"] == "clean"
    for name in ("attacker.txt", "losses.csv", "epoch_losses.csv", "final_losses.csv", "losses.png", "config.txt"):
        assert (root / "attack" / name).exists(), name
    reg = (root / "runs" / "registry.txt").read_text()
    assert "victim\t" in reg and "att\t" in reg


def test_attack_eval_command(pipeline):
    root, run, data = pipeline
    out = root / "eval"
    assert run("attack-eval", "--data", str(data), "--target", "victim", "--attacker", "att", "--eps", "10",
               "--out", str(out)) == 0
    rows = _rows(out / "report.csv")
    assert [r["condition"] for r in rows] == ["clean", "attacked"]
    assert float(rows[1]["eps"]) == 10.0
    assert len(list((out / "examples").glob("*_noise.png"))) == 4


def test_noise_baseline_and_mask_stats(pipeline):
    root, run, data = pipeline
    assert run("noise-baseline", "--data", str(data), "--target", "victim", "--attacker", "att", "--trials", "1",
               "--out", str(root / "noise")) == 0
    rows = _rows(root / "noise" / "baselines.csv")
    assert {(r["location"], r["condition"]) for r in rows} >= {
        ("random", "baseline_uniform"), ("random", "baseline_gaussian"),
        ("learned", "baseline_uniform"), ("learned", "attacked")}
    assert run("mask-stats", "--data", str(data), "--attacker", "att", "--ratio", "1/8",
               "--out", str(root / "masks")) == 0
    (row,) = _rows(root / "masks" / "mask_stats.csv")
    assert int(row["k"]) == 256 and float(row["figure_mean"]) >= 0
    assert (root / "masks" / "heatmap.png").exists()


def test_transfer_command(pipeline):
    root, run, data = pipeline
    assert run("transfer-eval", "--attacker", "att", "--set", f"victims=victim@{data}",
               "--out", str(root / "transfer")) == 0
    (row,) = _rows(root / "transfer" / "transfer.csv")
    assert row["target_model"] == "victim"
    assert run("transfer-eval", "--attacker", "att", "--out", str(root / "t2")) == 2


def test_eps_sweep_ablation(pipeline):
    root, run, data = pipeline
    out = root / "ablate"
    assert run("ablate", "--preset", "eps-sweep", "--data", str(data), "--target", "victim", "--set", "eps_grid=20,10",
               "--out", str(out), *TINY_ATTACK) == 0
    rows = _rows(out / "ablation.csv")
    assert [r["variant"] for r in rows] == ["clean", "eps=20", "eps=10"]
    assert (out / "eps_vs_rank1.png").exists() and (out / "ablation.txt").exists()


def test_ratio_sweep_uses_eps_overrides(pipeline):
    root, run, data = pipeline
    out = root / "ratios"
    assert run("ablate", "--preset", "ratio-sweep", "--data", str(data), "--target", "victim",
               "--set", "ratios=1,1/64", "--set", "ratio_eps=1/64:40", "--out", str(out), *TINY_ATTACK) == 0
    rows = _rows(out / "ablation.csv")
    assert [(r["ratio"], float(r["eps"])) for r in rows[1:]] == [("1", 16.0), ("1/64", 40.0)]


def test_budget_violation_exits_1(pipeline, monkeypatch, capsys):
    root, run, data = pipeline
    monkeypatch.setattr(generator, "_enforce_budget", lambda p, o, e: (p + 0.5).clamp(0, 1))
    assert run("attack-eval", "--data", str(data), "--target", "victim", "--attacker", "att",
               "--out", str(root / "violate")) == 1
    assert "budget" in capsys.readouterr().err
