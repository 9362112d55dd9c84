import json

import numpy as np
import pytest
from jsonschema import ValidationError

from cyclefuse import harness as H
from cyclefuse.classifier import ClassifierTrainConfig
from cyclefuse.cohort import SyntheticSpec, generate_synthetic_cohort
from cyclefuse.cyclegan import GanTrainConfig, train_gan
from cyclefuse.metrics import mean_std


def tiny_config(tmp_path, **kw):
    cfg = H.ExperimentConfig(
        synthetic=SyntheticSpec(n_cn=8, n_ad=8, missing_fnc_fraction=0.25, n_components=5,
                                volume_shape=(8, 8, 8), seed=3),
        k=2,
        gan=GanTrainConfig(epochs=1, batch_size=8, lr_initial=0.002),
        classifier=ClassifierTrainConfig(epochs=1, lr_grid=(0.001,)),
        output_dir=str(tmp_path / "out"),
        experiment_id="tiny",
        seed=11,
    )
    for key, val in kw.items():
        setattr(cfg, key, val)
    return cfg


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = tiny_config(tmp)
    return cfg, H.run_experiment(cfg)


class TestConfig:
    def test_defaults_follow_protocol(self):
        cfg = H.ExperimentConfig()
        assert cfg.k == 5 and cfg.strategies == ("subsample", "zero_fill", "generative")

    def test_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        back = H.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()
        assert back.digest() == cfg.digest()

    def test_schema_rejects_unknown(self, tmp_path):
        d = tiny_config(tmp_path).to_dict()
        d["bogus"] = 1
        with pytest.raises(ValidationError):
            H.ExperimentConfig.from_dict(d)
        d = tiny_config(tmp_path).to_dict()
        d["version"] = 99
        with pytest.raises(ValidationError):
            H.ExperimentConfig.from_dict(d)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.json"):
            H.ExperimentConfig.load(tmp_path / "nope.json")

    def test_shipped_desk_config(self):
        from pathlib import Path

        cfg = H.ExperimentConfig.load(Path(__file__).parents[1] / "configs" / "desk.json")
        assert cfg.synthetic.n_cn + cfg.synthetic.n_ad == 200
        assert cfg.synthetic.effect_size == pytest.approx(2 * cfg.synthetic.noise_sigma)
        assert cfg.synthetic.missing_fnc_fraction == 0.3


class TestRun:
    def test_structure(self, tiny_run):
        cfg, res = tiny_run
        assert set(res.classification) == set(cfg.strategies)
        assert len(res.folds) == 2
        assert len(res.significance) == 3 * len(H.METRICS)
        assert set(res.fidelity["pooled"]) >= {"ssim", "psnr", "mse", "pearson"}
        assert "generated_tmap" in res.group_patterns and "ground_truth" in res.group_patterns

    def test_aggregation_recomputes(self, tiny_run):
        _, res = tiny_run
        for name, ms in res.classification.items():
            for metric in H.METRICS:
                vals = [f["strategies"][name][metric] for f in res.folds]
                want = mean_std(vals)
                assert ms[metric]["mean"] == pytest.approx(want["mean"], abs=1e-12)
                assert ms[metric]["std"] == pytest.approx(want["std"], abs=1e-12)

    def test_artifacts(self, tiny_run):
        cfg, _ = tiny_run
        out = H.experiment_dir(cfg)
        for rel in ("result.json", "run_info.json", "tables/metrics.csv", "tables/significance.csv",
                    "checkpoints/fold-0/gan.ckpt", "checkpoints/fold-1/clf-generative.ckpt",
                    "plots/tmap_montage.png", "plots/fnc_difference.png", "plots/strategies.png"):
            assert (out / rel).stat().st_size > 0, rel

    def test_fold_checkpoint_binding(self, tiny_run):
        from cyclefuse.cyclegan import load_checkpoint

        cfg, res = tiny_run
        out = H.experiment_dir(cfg)
        for k in range(2):
            m = load_checkpoint(out / "checkpoints" / f"fold-{k}" / "gan.ckpt")
            assert m.fold_tag == k
            assert len(m.train_ids) == res.folds[k]["n_train"]

    def test_result_json_round_trip(self, tiny_run):
        _, res = tiny_run
        back = H.ExperimentResult.from_json(res.to_json())
        assert back.to_json() == res.to_json()

    def test_deterministic(self, tiny_run, tmp_path):
        cfg, res = tiny_run
        again = H.run_experiment(tiny_config(tmp_path))
        assert again.to_json() == res.to_json()

    def test_single_strategy(self, tmp_path):
        res = H.run_experiment(tiny_config(tmp_path, strategies=("subsample",), save_checkpoints=False), write=False)
        assert list(res.classification) == ["subsample"] and res.significance == []
        assert res.fidelity == {}

    def test_single_fold_subset(self, tmp_path, tiny_run):
        _, full = tiny_run
        res = H.run_experiment(tiny_config(tmp_path, folds=(0,)), write=False)
        assert len(res.folds) == 1 and res.significance == []
        assert res.folds[0] == full.folds[0]
        H.emit_tables(res, tmp_path / "t")
        assert H.emit_plots(res, tmp_path / "p")

    def test_empty_strategies(self, tmp_path):
        with pytest.raises(H.ExperimentError):
            H.run_experiment(tiny_config(tmp_path, strategies=()), write=False)

    def test_failure_names_fold(self, tmp_path):
        cfg = tiny_config(tmp_path, strategies=("subsample",))
        cfg.synthetic = SyntheticSpec(n_cn=4, n_ad=4, missing_fnc_fraction=1.0, n_components=5, volume_shape=(8, 8, 8))
        with pytest.raises(H.ExperimentError, match="fold 0"):
            H.run_experiment(cfg, write=False)

    def test_no_test_ids_reach_training(self, tmp_path, monkeypatch):
        seen = []
        real_gan, real_clf = H.train_gan, H.train_classifier

        def spy_gan(cohort, *a, **kw):
            seen.append(("gan", set(cohort.ids)))
            return real_gan(cohort, *a, **kw)

        def spy_clf(cohort, *a, **kw):
            seen.append(("clf", set(cohort.ids)))
            return real_clf(cohort, *a, **kw)

        monkeypatch.setattr(H, "train_gan", spy_gan)
        monkeypatch.setattr(H, "train_classifier", spy_clf)
        cfg = tiny_config(tmp_path)
        H.run_experiment(cfg, write=False)
        cohort, _ = H._load_cohort(cfg)
        folds = H.stratified_kfold(cohort, cfg.k, H.derive_seed(cfg.seed, "folds"))
        per_fold = 1 + len(cfg.strategies)
        for k, (_, test) in enumerate(folds):
            for _, ids in seen[k * per_fold:(k + 1) * per_fold]:
                assert not ids & set(test)

    def test_disjoint_guard(self):
        with pytest.raises(H.ExperimentError, match="fold 2"):
            H._assert_disjoint(["a", "b"], ["b"], "x", 2)

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(H.OUT_ENV, str(tmp_path / "elsewhere"))
        assert H.experiment_dir(tiny_config(tmp_path)) == tmp_path / "elsewhere" / "tiny"


class TestTables:
    def test_rows_and_round_trip(self, tiny_run, tmp_path):
        _, res = tiny_run
        files = H.emit_tables(res, tmp_path)
        table = H.read_metrics_table(files["metrics"])
        assert list(table) == list(res.classification)
        for name, row in table.items():
            for metric in H.METRICS:
                assert abs(row[f"{metric}_mean"] - res.classification[name][metric]["mean"]) <= 1e-9
        with files["significance"].open() as fh:
            assert len(fh.readlines()) == 1 + len(res.significance)

    def test_empty_result_writes_nothing(self, tmp_path):
        empty = H.ExperimentResult({}, [], {}, [], {}, {}, {})
        with pytest.raises(H.ExperimentError):
            H.emit_tables(empty, tmp_path / "t")
        assert not (tmp_path / "t").exists()


class TestPlots:
    def test_one_strategy(self, tmp_path):
        res = H.run_experiment(tiny_config(tmp_path, strategies=("zero_fill",)), write=False)
        files = H.emit_plots(res, tmp_path / "p")
        assert [f.name for f in files] == ["strategies.png"]
        assert files[0].stat().st_size > 0

    def test_identical_groups_give_zero_map(self, tmp_path):
        c, _ = generate_synthetic_cohort(SyntheticSpec(n_cn=4, n_ad=4, n_components=5, volume_shape=(8, 8, 8),
                                                       effect_size=0.0))
        # give both groups the same volumes and vectors
        cn = [r for r in c if r.diagnosis == "CN"]
        twins = [type(r)(f"ad{i}", "AD", fnc=r.fnc, t1=r.t1) for i, r in enumerate(cn)]
        same = c.with_records(cn + twins)
        gan, _ = train_gan(same, GanTrainConfig(epochs=0))
        maps = H.compute_maps(gan, same)
        np.testing.assert_array_equal(maps["real_tmap"], 0.0)
        np.testing.assert_array_equal(maps["generated_tmap"], 0.0)
        res = H.ExperimentResult({}, [], {}, [], {}, {}, {})
        files = H.emit_plots(res, tmp_path, gan_model=gan, cohort=same)
        assert {f.name for f in files} == {"tmap_montage.png", "fnc_difference.png"}
