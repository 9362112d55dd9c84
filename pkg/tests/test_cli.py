import json
from pathlib import Path

import pytest

from cyclefuse.cli import main

SMOKE = Path(__file__).parents[1] / "configs" / "smoke.json"


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["experiment", "--config", str(missing)]) != 0
    assert str(missing) in capsys.readouterr().err


def test_invalid_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"version": 1}))
    assert main(["synth", "--config", str(bad)]) != 0
    assert "error" in capsys.readouterr().err


def test_synth_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--config", str(SMOKE), "--seed", "4", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_pipeline_subcommands(tmp_path, capsys):
    cohort = tmp_path / "cohort"
    assert main(["synth", "--config", str(SMOKE), "--out", str(cohort)]) == 0
    assert main(["train-gan", "--config", str(SMOKE), "--cohort", str(cohort), "--out", str(tmp_path / "gan")]) == 0
    assert (tmp_path / "gan" / "gan_log.csv").read_text().startswith("epoch,L_adv_D1")
    assert main(["impute", "--cohort", str(cohort), "--checkpoint", str(tmp_path / "gan" / "gan.ckpt"),
                 "--out", str(tmp_path / "done")]) == 0
    assert main(["train-clf", "--config", str(SMOKE), "--cohort", str(tmp_path / "done"),
                 "--out", str(tmp_path / "clf")]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--cohort", str(tmp_path / "done"), "--classifier", str(tmp_path / "clf" / "classifier.ckpt"),
                 "--out", str(tmp_path / "scores.json")]) == 0
    scores = json.loads((tmp_path / "scores.json").read_text())
    assert 0 <= scores["accuracy"] <= 1


def test_impute_incomplete_requires_model(tmp_path, capsys):
    cohort = tmp_path / "cohort"
    main(["synth", "--config", str(SMOKE), "--out", str(cohort)])
    assert main(["impute", "--cohort", str(cohort), "--strategy", "generative"]) != 0
    assert main(["impute", "--cohort", str(cohort), "--strategy", "zero_fill", "--out", str(tmp_path / "z")]) == 0


def test_experiment_and_plot(tmp_path, capsys):
    assert main(["experiment", "--config", str(SMOKE), "--out", str(tmp_path)]) == 0
    out = tmp_path / "smoke"
    assert (out / "result.json").exists() and (out / "tables" / "metrics.csv").exists()
    capsys.readouterr()
    assert main(["plot", "--result", str(out), "--out", str(tmp_path / "replot")]) == 0
    assert len(list((tmp_path / "replot").glob("*.png"))) == 3


def test_plot_missing_result(tmp_path, capsys):
    assert main(["plot", "--result", str(tmp_path / "nothing")]) != 0
    assert "nothing" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
