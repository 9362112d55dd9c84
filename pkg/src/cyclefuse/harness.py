"""Cross-validated comparison of imputation strategies, end to end.

For every fold a GAN is trained on the training records only, each strategy
completes the training and test portions independently, a classifier is
trained per strategy on the completed training portion and scored on the
completed test portion. Seeds for every component derive from the master
seed through :func:`cyclefuse.utils.derive_seed`.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from jsonschema import validate as _validate_schema

from . import __version__
from .classifier import ClassifierTrainConfig, predict, save_classifier, train_classifier
from .cohort import Cohort, GroundTruth, SyntheticSpec, generate_synthetic_cohort, load_cohort, stratified_kfold
from .cyclegan import GanModel, GanTrainConfig, LOG_FIELDS, generate_fnc, generate_t1, save_checkpoint, train_gan
from .imputation import STRATEGIES, ImputationStrategy, apply_strategy
from .metrics import (
    annotate_significance, classification_metrics, fidelity_report, fnc_group_difference, mean_std,
    volume_tmap,
)
from .utils import derive_seed

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
RESULT_VERSION = 1
METRICS = ("accuracy", "precision", "recall", "f1")
OUT_ENV = "CYCLEFUSE_OUT"
TOP_K_PAIRS = 5

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["version", "cohort"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "cohort": {
            "type": "object",
            "oneOf": [{"required": ["synthetic"]}, {"required": ["data"]}],
            "properties": {
                "synthetic": {"type": "object"},
                "data": {
                    "type": "object",
                    "required": ["volume_dir", "fnc_table", "manifest"],
                    "properties": {
                        "volume_dir": {"type": "string"},
                        "fnc_table": {"type": "string"},
                        "manifest": {"type": "string"},
                        "intensity_range": {"type": ["array", "null"], "items": {"type": "number"}},
                    },
                },
            },
        },
        "k": {"type": "integer", "minimum": 2},
        "strategies": {"type": "array", "items": {"enum": list(STRATEGIES)}},
        "gan": {"type": "object"},
        "classifier": {"type": "object"},
        "output_dir": {"type": "string"},
        "experiment_id": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
        "folds": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
        "save_checkpoints": {"type": "boolean"},
        "plots": {"type": "boolean"},
    },
    "additionalProperties": False,
}


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    synthetic: SyntheticSpec | None = None
    data: dict | None = None
    k: int = 5
    strategies: tuple = STRATEGIES
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    output_dir: str = "out"
    experiment_id: str | None = None
    seed: int = 0
    folds: tuple | None = None
    save_checkpoints: bool = True
    plots: bool = True

    def to_dict(self) -> dict:
        cohort = {}
        if self.synthetic is not None:
            spec = dict(self.synthetic.__dict__)
            spec["volume_shape"] = list(spec["volume_shape"])
            cohort["synthetic"] = spec
        if self.data is not None:
            cohort["data"] = dict(self.data)
        return {
            "version": CONFIG_VERSION,
            "cohort": cohort,
            "k": self.k,
            "strategies": list(self.strategies),
            "gan": self.gan.to_dict(),
            "classifier": self.classifier.to_dict(),
            "output_dir": self.output_dir,
            "experiment_id": self.experiment_id,
            "seed": self.seed,
            "folds": list(self.folds) if self.folds is not None else None,
            "save_checkpoints": self.save_checkpoints,
            "plots": self.plots,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _validate_schema(d, CONFIG_SCHEMA)
        cohort = d["cohort"]
        synthetic = None
        if "synthetic" in cohort:
            spec = dict(cohort["synthetic"])
            if "volume_shape" in spec:
                spec["volume_shape"] = tuple(spec["volume_shape"])
            synthetic = SyntheticSpec(**spec)
        return cls(
            synthetic=synthetic,
            data=cohort.get("data"),
            k=d.get("k", 5),
            strategies=tuple(d.get("strategies", STRATEGIES)),
            gan=GanTrainConfig.from_dict(d.get("gan", {})),
            classifier=ClassifierTrainConfig.from_dict(d.get("classifier", {})),
            output_dir=d.get("output_dir", "out"),
            experiment_id=d.get("experiment_id"),
            seed=d.get("seed", 0),
            folds=tuple(d["folds"]) if d.get("folds") is not None else None,
            save_checkpoints=d.get("save_checkpoints", True),
            plots=d.get("plots", True),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def content_dict(self) -> dict:
        """Config without the output location, which never affects results."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.content_dict(), sort_keys=True).encode()).hexdigest()


def desk_config(seed: int = 0, **overrides) -> ExperimentConfig:
    """Single-desktop settings: 200 subjects, 16^3 volumes, 8 components,
    30% of FNC missing, effect size twice the noise level.

    The GAN keeps the per-epoch decay but rescales it to the desk's ~10 steps
    per epoch (0.9 ** (10 / 56) ~ 0.98), at the largest stable learning rate.
    """
    cfg = ExperimentConfig(
        synthetic=SyntheticSpec(n_cn=100, n_ad=100, missing_fnc_fraction=0.3, n_components=8,
                                volume_shape=(16, 16, 16), effect_size=0.2, noise_sigma=0.1, seed=seed),
        gan=GanTrainConfig(epochs=60, batch_size=16, lr_initial=0.005, lr_decay=0.98),
        classifier=ClassifierTrainConfig(epochs=50),
        seed=seed,
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


# ---------------------------------------------------------------------------
# result


@dataclass
class ExperimentResult:
    config: dict
    folds: list  # per-fold dicts
    classification: dict  # strategy -> metric -> {"mean", "std", "per_fold"}
    significance: list  # [{"a", "b", "metric", "p_value", "stars"}]
    fidelity: dict
    group_patterns: dict
    provenance: dict
    maps: dict | None = None  # arrays for plotting; not serialized

    def to_dict(self) -> dict:
        return {
            "result_version": RESULT_VERSION,
            "config": self.config,
            "provenance": self.provenance,
            "folds": self.folds,
            "classification": self.classification,
            "significance": self.significance,
            "fidelity": self.fidelity,
            "group_patterns": self.group_patterns,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentResult":
        d = _from_jsonable(json.loads(text))
        return cls(d["config"], d["folds"], d["classification"], d["significance"], d["fidelity"],
                   d["group_patterns"], d["provenance"])

    @property
    def strategies(self) -> list[str]:
        return list(self.classification)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        if np.isnan(v):
            return "nan"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


# ---------------------------------------------------------------------------
# pipeline


def _assert_disjoint(used_ids, test_ids, what: str, fold: int) -> None:
    overlap = set(used_ids) & set(test_ids)
    if overlap:
        raise ExperimentError(f"fold {fold}: {what} saw test records {sorted(overlap)[:5]}")


def _load_cohort(config: ExperimentConfig) -> tuple[Cohort, GroundTruth | None]:
    if config.synthetic is not None:
        return generate_synthetic_cohort(config.synthetic)
    if config.data is None:
        raise ExperimentError("config needs a synthetic spec or data paths")
    d = config.data
    return load_cohort(d["volume_dir"], d["fnc_table"], d["manifest"], d.get("intensity_range")), None


def experiment_dir(config: ExperimentConfig) -> Path:
    root = Path(os.environ.get(OUT_ENV) or config.output_dir)
    return root / (config.experiment_id or config.digest()[:12])


def _write_gan_log(records: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(records)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run the cross-validated comparison; writes artifacts when ``write``."""
    if not config.strategies:
        raise ExperimentError("no strategies to compare")
    unknown = set(config.strategies) - set(STRATEGIES)
    if unknown:
        raise ExperimentError(f"unknown strategies {sorted(unknown)}")
    started = time.time()
    out = experiment_dir(config) if write else None
    cohort, truth = _load_cohort(config)
    fold_seed = derive_seed(config.seed, "folds")
    splits = stratified_kfold(cohort, config.k, fold_seed)
    fold_ids = list(config.folds) if config.folds is not None else list(range(config.k))
    generative = "generative" in config.strategies

    folds = []
    seeds = {"folds": fold_seed}
    held_out = {"fake_t1": [], "fake_t1_labels": [], "fake_fnc": [], "fake_fnc_labels": []}
    fidelity_pairs = {"real_t1": [], "fake_t1": [], "real_fnc": [], "fake_fnc": []}
    for i in fold_ids:
        train_ids, test_ids = splits[i]
        _assert_disjoint(train_ids, test_ids, "fold split", i)
        train, test = cohort.subset(train_ids), cohort.subset(test_ids)
        fold = {"fold": i, "n_train": len(train), "n_test": len(test), "strategies": {}}
        model = None
        if generative:
            gan_cfg = GanTrainConfig(**{**config.gan.__dict__, "seed": derive_seed(config.seed, "fold", i, "gan")})
            seeds[f"fold-{i}/gan"] = gan_cfg.seed
            log.info("fold %d: training GAN on %d records", i, len(train))
            model, gan_log = train_gan(train, gan_cfg, fold_tag=i)
            _assert_disjoint(model.train_ids, test_ids, "GAN training", i)
            fold["gan_final"] = gan_log[-1] if gan_log else None
            if out is not None and config.save_checkpoints:
                save_checkpoint(model, out / "checkpoints" / f"fold-{i}" / "gan.ckpt", gan_cfg)
                _write_gan_log(gan_log, out / "checkpoints" / f"fold-{i}" / "gan_log.csv")
            fold["fidelity"] = _fold_fidelity(model, test, fidelity_pairs)
            _collect_generated(model, test, held_out)
        for name in config.strategies:
            strategy = ImputationStrategy(name, model if name == "generative" else None, fold_tag=i)
            try:
                train_c = apply_strategy(strategy, train)
                test_c = apply_strategy(strategy, test)
            except Exception as exc:
                raise ExperimentError(f"fold {i}, strategy {name}: {exc}") from exc
            clf_cfg = ClassifierTrainConfig(**{**config.classifier.__dict__,
                                               "seed": derive_seed(config.seed, "fold", i, "clf", name)})
            seeds[f"fold-{i}/clf/{name}"] = clf_cfg.seed
            _assert_disjoint(train_c.ids, test_ids, f"{name} classifier training", i)
            clf, lr, info = train_classifier(train_c, clf_cfg)
            pred, _ = predict(clf, test_c)
            scores = classification_metrics(test_c.labels, pred)
            fold["strategies"][name] = {
                **scores.as_dict(), "selected_lr": lr, "n_train": len(train_c), "n_test": len(test_c),
                "grid": info["grid"],
            }
            if out is not None and config.save_checkpoints:
                save_classifier(clf, out / "checkpoints" / f"fold-{i}" / f"clf-{name}.ckpt", clf_cfg, lr)
            log.info("fold %d %s: accuracy %.3f", i, name, scores.accuracy)
        folds.append(fold)

    classification = {}
    for name in config.strategies:
        classification[name] = {}
        for metric in METRICS:
            vals = [f["strategies"][name][metric] for f in folds]
            classification[name][metric] = {**mean_std(vals), "per_fold": vals}
    significance = []
    # Welch tests need two folds per group; a single-fold run reports none
    pairs = combinations(config.strategies, 2) if len(folds) >= 2 else ()
    for a, b in pairs:
        for metric in METRICS:
            ann = annotate_significance(classification[a][metric]["per_fold"], classification[b][metric]["per_fold"])
            significance.append({"a": a, "b": b, "metric": metric, **ann.as_dict()})

    fidelity, patterns, maps = {}, {}, None
    if generative:
        fidelity = {
            "per_fold": {str(f["fold"]): f.get("fidelity", {}) for f in folds},
            "pooled": fidelity_report(**fidelity_pairs),
        }
        patterns, maps = _group_patterns(cohort, test_ids_all=[i for f in fold_ids for i in splits[f][1]],
                                         held_out=held_out, truth=truth)
    result = ExperimentResult(
        config=config.content_dict(),
        folds=folds,
        classification=classification,
        significance=significance,
        fidelity=fidelity,
        group_patterns=patterns,
        provenance={"config_sha256": config.digest(), "master_seed": config.seed, "seeds": seeds,
                    "package_version": __version__},
        maps=maps,
    )
    if out is not None:
        write_outputs(result, out, cohort, started)
    return result


def _fold_fidelity(model: GanModel, test: Cohort, acc: dict) -> dict:
    paired = test.paired()
    if len(paired) == 0:
        return {}
    real_fnc = list(paired.fnc_array())
    real_t1 = list(paired.t1_array())
    fake_t1 = generate_t1(model, real_fnc)
    fake_fnc = generate_fnc(model, real_t1)
    acc["real_t1"] += real_t1
    acc["fake_t1"] += fake_t1
    acc["real_fnc"] += real_fnc
    acc["fake_fnc"] += fake_fnc
    return fidelity_report(real_t1, fake_t1, real_fnc, fake_fnc)


def _collect_generated(model: GanModel, test: Cohort, held_out: dict) -> None:
    with_fnc = [r for r in test if r.fnc is not None]
    with_t1 = [r for r in test if r.t1 is not None]
    held_out["fake_t1"] += generate_t1(model, [r.fnc for r in with_fnc])
    held_out["fake_t1_labels"] += [r.label for r in with_fnc]
    held_out["fake_fnc"] += generate_fnc(model, [r.t1 for r in with_t1])
    held_out["fake_fnc_labels"] += [r.label for r in with_t1]


def _split_by_label(arrays, labels):
    labels = np.asarray(labels)
    return [a for a, l in zip(arrays, labels) if l == 1], [a for a, l in zip(arrays, labels) if l == 0]


def _group_patterns(cohort: Cohort, test_ids_all, held_out: dict, truth: GroundTruth | None):
    """AD-minus-CN maps for real and generated held-out data."""
    test = cohort.subset(test_ids_all)
    real_v = [r for r in test if r.t1 is not None]
    real_f = [r for r in test if r.fnc is not None]
    maps = {}
    patterns = {}
    for key, (ad, cn) in {
        "real_tmap": _split_by_label([r.t1 for r in real_v], [r.label for r in real_v]),
        "generated_tmap": _split_by_label(held_out["fake_t1"], held_out["fake_t1_labels"]),
    }.items():
        if len(ad) >= 2 and len(cn) >= 2:
            t = volume_tmap(ad, cn)
            maps[key] = t
            peak = np.unravel_index(int(np.argmax(np.abs(t))), t.shape)
            patterns[key] = {"peak_voxel": [int(v) for v in peak], "peak_abs_t": float(np.abs(t)[peak])}
            if truth is not None:
                patterns[key]["peak_in_region"] = bool(truth.region_mask(t.shape)[peak])
    for key, (ad, cn) in {
        "real_fnc_diff": _split_by_label([r.fnc for r in real_f], [r.label for r in real_f]),
        "generated_fnc_diff": _split_by_label(held_out["fake_fnc"], held_out["fake_fnc_labels"]),
    }.items():
        if ad and cn:
            diff, _ = fnc_group_difference(ad, cn)
            maps[key] = diff
            top = np.argsort(-np.abs(diff), kind="stable")[:TOP_K_PAIRS]
            patterns[key] = {"top_pairs": [int(v) for v in top], "top_values": [float(diff[v]) for v in top]}
            if truth is not None:
                patterns[key]["overlap_with_affected"] = int(len(set(top.tolist()) & set(truth.affected_pairs.tolist())))
    if truth is not None:
        patterns["ground_truth"] = {"region": [list(b) for b in truth.region],
                                    "affected_pairs": truth.affected_pairs.tolist()}
    return patterns, maps


# ---------------------------------------------------------------------------
# outputs


def write_outputs(result: ExperimentResult, out: Path, cohort: Cohort | None = None, started: float | None = None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(result.to_json())
    emit_tables(result, out / "tables")
    if result.maps:
        np.savez(out / "maps.npz", **result.maps)
    if result.config.get("plots", True):
        emit_plots(result, out / "plots")
    info = {"finished_unix": time.time(), "package_version": __version__}
    if started is not None:
        info["started_unix"] = started
        info["elapsed_seconds"] = info["finished_unix"] - started
    (out / "run_info.json").write_text(json.dumps(info, indent=2))


def emit_tables(result: ExperimentResult, path) -> dict:
    """Write ``metrics.csv``, ``significance.csv`` and ``folds.csv`` under ``path``."""
    if not result.classification:
        raise ExperimentError("result has no strategies; nothing to tabulate")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {"metrics": path / "metrics.csv", "significance": path / "significance.csv", "folds": path / "folds.csv"}
    with files["metrics"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
        for name, ms in result.classification.items():
            w.writerow([name] + [repr(float(ms[m][s])) for m in METRICS for s in ("mean", "std")])
    with files["significance"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy_a", "strategy_b", "metric", "p_value", "stars"])
        for s in result.significance:
            w.writerow([s["a"], s["b"], s["metric"], repr(float(s["p_value"])), s["stars"]])
    with files["folds"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "strategy", *METRICS, "selected_lr", "n_train", "n_test"])
        for f in result.folds:
            for name, s in f["strategies"].items():
                w.writerow([f["fold"], name, *(repr(float(s[m])) for m in METRICS), repr(float(s["selected_lr"])),
                            s["n_train"], s["n_test"]])
    return files


def read_metrics_table(path) -> dict:
    with Path(path).open(newline="") as fh:
        return {row["strategy"]: {k: float(v) for k, v in row.items() if k != "strategy"} for row in csv.DictReader(fh)}


def compute_maps(gan_model: GanModel, cohort: Cohort) -> dict:
    """Real and generated AD-minus-CN maps for a cohort and one trained GAN."""
    held = {"fake_t1": [], "fake_t1_labels": [], "fake_fnc": [], "fake_fnc_labels": []}
    _collect_generated(gan_model, cohort, held)
    _, maps = _group_patterns(cohort, cohort.ids, held, None)
    return maps


def emit_plots(result: ExperimentResult, path, gan_model: GanModel | None = None, cohort: Cohort | None = None) -> list[Path]:
    """Central-slice t-map montage, split-triangle FNC difference matrix and
    strategy bars with significance stars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import split_triangle_matrix

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    maps = result.maps
    if not maps and gan_model is not None and cohort is not None:
        maps = compute_maps(gan_model, cohort)
    maps = maps or {}
    written = []

    tmaps = [(k, maps[k]) for k in ("real_tmap", "generated_tmap") if k in maps]
    if tmaps:
        vmax = max(float(np.nanmax(np.abs(t))) for _, t in tmaps) or 1.0
        fig, axes = plt.subplots(len(tmaps), 3, figsize=(9, 3 * len(tmaps)), squeeze=False)
        for row, (name, t) in enumerate(tmaps):
            c = [s // 2 for s in t.shape]
            for col, sl in enumerate((t[c[0]], t[:, c[1]], t[:, :, c[2]])):
                im = axes[row, col].imshow(sl.T, cmap="RdBu_r", vmin=-vmax, vmax=vmax, origin="lower")
                axes[row, col].set_xticks([])
                axes[row, col].set_yticks([])
            axes[row, 0].set_ylabel(name.replace("_", " "))
        fig.colorbar(im, ax=axes, shrink=0.8, label="t (AD - CN)")
        written.append(path / "tmap_montage.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)

    if "real_fnc_diff" in maps:
        lower = maps.get("generated_fnc_diff", np.zeros_like(maps["real_fnc_diff"]))
        mat = split_triangle_matrix(maps["real_fnc_diff"], lower)
        vmax = float(np.abs(mat).max()) or 1.0
        fig, ax = plt.subplots(figsize=(5, 4.5))
        im = ax.imshow(mat, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
        ax.set_title("FNC AD - CN (U: real, L: generated)")
        fig.colorbar(im, ax=ax)
        written.append(path / "fnc_difference.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)

    names = result.strategies
    if names:
        fig, ax = plt.subplots(figsize=(8, 4))
        width = 0.8 / len(names)
        x = np.arange(len(METRICS))
        for j, name in enumerate(names):
            means = [result.classification[name][m]["mean"] for m in METRICS]
            stds = [result.classification[name][m]["std"] for m in METRICS]
            ax.bar(x + j * width, means, width, yerr=stds, label=name, capsize=3)
        if "generative" in names:
            gi = names.index("generative")
            for s in result.significance:
                if "generative" not in (s["a"], s["b"]):
                    continue
                other = s["b"] if s["a"] == "generative" else s["a"]
                mi = METRICS.index(s["metric"])
                oj = names.index(other)
                top = max(result.classification[n][s["metric"]]["mean"] for n in (other, "generative"))
                ax.text(x[mi] + (gi + oj) / 2 * width, min(top + 0.04 + 0.04 * oj, 1.12), s["stars"],
                        ha="center", fontsize=8)
        ax.set_xticks(x + width * (len(names) - 1) / 2)
        ax.set_xticklabels(METRICS)
        ax.set_ylim(0, 1.2)
        ax.legend(loc="lower right", fontsize=8)
        ax.set_title("AD vs CN classification")
        written.append(path / "strategies.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written
