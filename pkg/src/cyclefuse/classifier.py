"""Late-fusion AD/CN classifier over an FNC vector and a volume.

Each modality is reduced to 8 features (FNC: F -> 64 -> 8; volume: five
convolutions then 64 -> 8); the two are concatenated into a 16-wide fused
layer and a small head produces two class scores.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import layers
from .cohort import Cohort
from .layers import L, LayerSpec, propagate_shapes
from .utils import (
    CheckpointError, check_cohort, derive_seed, load_container, save_container, to_tensor,
    torch_generator,
)

FEATURES = 8
LR_GRID = (0.01, 0.001, 0.0001, 0.00001)
PAPER_CHANNELS = (64, 128, 192, 192, 128)
DESK_CHANNELS = (8, 16, 16, 16, 16)


@dataclass
class ClassifierTrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr_grid: tuple = LR_GRID
    lr_decay: float = 0.98
    seed: int = 0
    preset: str = "desk"
    inner_val_fraction: float = 0.2
    class_weight: tuple | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        d["class_weight"] = list(self.class_weight) if self.class_weight else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierTrainConfig":
        d = dict(d)
        if "lr_grid" in d:
            d["lr_grid"] = tuple(d["lr_grid"])
        if d.get("class_weight"):
            d["class_weight"] = tuple(d["class_weight"])
        return cls(**d)


RELU = L("activation", name="relu")


def fnc_branch_spec(fnc_dim: int) -> LayerSpec:
    return LayerSpec((
        L("linear", in_features=fnc_dim, out_features=64), RELU,
        L("linear", in_features=64, out_features=FEATURES), RELU,
    ), (fnc_dim,), (FEATURES,)).check()


def t1_branch_spec(volume_shape, channels=DESK_CHANNELS) -> LayerSpec:
    """Five conv+ReLU+max-pool stages (pool skipped once an axis reaches 1),
    flatten, then 64 -> 8."""
    vs = tuple(volume_shape)
    if len(channels) != 5:
        raise ValueError("the volume branch has exactly five convolutions")
    seq = [L("reshape", shape=(1, *vs))]
    cin = 1
    for cout in channels:
        seq += [L("conv3d", in_channels=cin, out_channels=cout, kernel=3, stride=1, padding=1), RELU]
        spatial = propagate_shapes(seq, vs)[-1][1:]
        if min(spatial) >= 2:
            seq.append(L("max_pool3d", kernel=2))
        cin = cout
    flat = math.prod(propagate_shapes(seq, vs)[-1])
    seq += [L("flatten"), L("linear", in_features=flat, out_features=64), RELU,
            L("linear", in_features=64, out_features=FEATURES), RELU]
    return LayerSpec(tuple(seq), vs, (FEATURES,)).check()


def head_spec() -> LayerSpec:
    return LayerSpec((
        L("linear", in_features=2 * FEATURES, out_features=8), RELU,
        L("linear", in_features=8, out_features=2),
    ), (2 * FEATURES,), (2,)).check()


class FusionClassifier(nn.Module):
    def __init__(self, fnc_spec: LayerSpec, t1_spec: LayerSpec, head: LayerSpec):
        super().__init__()
        if fnc_spec.output_shape[0] + t1_spec.output_shape[0] != head.input_shape[0]:
            raise layers.ShapeError("branch feature widths must sum to the head input width")
        self.fnc_spec, self.t1_spec, self.head_spec = fnc_spec, t1_spec, head
        self.fnc_dim = fnc_spec.input_shape[0]
        self.volume_shape = tuple(t1_spec.input_shape)
        self.fnc_branch = layers.build(fnc_spec)
        self.t1_branch = layers.build(t1_spec)
        self.head = layers.build(head)

    @classmethod
    def from_preset(cls, fnc_dim: int, volume_shape, preset: str = "desk", channels=None):
        if channels is None:
            channels = PAPER_CHANNELS if preset == "paper" else DESK_CHANNELS
        return cls(fnc_branch_spec(fnc_dim), t1_branch_spec(volume_shape, channels), head_spec())

    @property
    def fused_width(self) -> int:
        return self.head_spec.input_shape[0]

    def fused_features(self, fnc: torch.Tensor, t1: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.fnc_branch(fnc), self.t1_branch(t1)], dim=1)

    def forward(self, fnc: torch.Tensor, t1: torch.Tensor) -> torch.Tensor:
        return self.head(self.fused_features(fnc, t1))


def classifier_forward(model: FusionClassifier, fnc, t1) -> torch.Tensor:
    return model(fnc, t1)


def _arrays(cohort: Cohort):
    check_cohort(cohort, complete=True)
    return to_tensor(cohort.fnc_array()), to_tensor(cohort.t1_array()), torch.as_tensor(cohort.labels)


def _fit(model: FusionClassifier, fnc, t1, y, lr: float, config: ClassifierTrainConfig, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    weight = torch.tensor(config.class_weight, dtype=torch.float32) if config.class_weight else None
    log = []
    model.train()
    for epoch in range(config.epochs):
        cur = lr * config.lr_decay**epoch
        for group in opt.param_groups:
            group["lr"] = cur
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(fnc[idx], t1[idx]), y[idx], weight=weight)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        if not math.isfinite(total):
            raise RuntimeError(f"classifier loss became non-finite at epoch {epoch + 1}")
        log.append({"epoch": epoch + 1, "loss": total / len(y), "lr": cur})
    model.eval()
    return log


def _new_model(cohort: Cohort, config: ClassifierTrainConfig, seed: int) -> FusionClassifier:
    model = FusionClassifier.from_preset(cohort.fnc_dim, cohort.volume_shape, config.preset)
    layers.init_kaiming(model, torch_generator(seed))
    return model


@torch.no_grad()
def _scores(model: FusionClassifier, fnc, t1, chunk: int = 64) -> torch.Tensor:
    model.eval()
    return torch.cat([model(fnc[i:i + chunk], t1[i:i + chunk]) for i in range(0, len(fnc), chunk)])


def train_classifier(cohort: Cohort, config: ClassifierTrainConfig | None = None):
    """Grid-search the starting learning rate on an inner stratified split,
    then retrain on the whole cohort with the selected rate.

    Returns ``(model, selected_lr, info)``; ``info`` holds the inner
    validation accuracy of every grid value and the final training log.
    """
    config = config or ClassifierTrainConfig()
    check_cohort(cohort, complete=True, both_classes=True)
    fnc, t1, y = _arrays(cohort)
    init_seed = derive_seed(config.seed, "clf-init")
    if config.epochs <= 0:
        return _new_model(cohort, config, init_seed).eval(), float(min(config.lr_grid)), {"grid": {}, "log": []}

    grid_scores = {}
    if len(config.lr_grid) > 1:
        tr, va = train_test_split(
            np.arange(len(y)), test_size=config.inner_val_fraction, stratify=y.numpy(),
            random_state=derive_seed(config.seed, "clf-inner-split"),
        )
        for lr in config.lr_grid:
            model = _new_model(cohort, config, init_seed)
            _fit(model, fnc[tr], t1[tr], y[tr], lr, config, derive_seed(config.seed, "clf-batches-inner"))
            pred = _scores(model, fnc[va], t1[va]).argmax(dim=1)
            grid_scores[float(lr)] = float((pred == y[va]).float().mean())
        best = max(grid_scores.values())
        selected = min(lr for lr, acc in grid_scores.items() if acc == best)
    else:
        selected = float(config.lr_grid[0])
    model = _new_model(cohort, config, init_seed)
    log = _fit(model, fnc, t1, y, selected, config, derive_seed(config.seed, "clf-batches"))
    return model, selected, {"grid": grid_scores, "log": log}


def predict(model: FusionClassifier, cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (AD=1) and per-record class probabilities."""
    fnc, t1, _ = _arrays(cohort)
    probs = torch.softmax(_scores(model, fnc, t1).double(), dim=1).numpy()
    return probs.argmax(axis=1), probs


def save_classifier(model: FusionClassifier, path, config: ClassifierTrainConfig | None = None,
                    selected_lr: float | None = None) -> None:
    save_container({
        "kind": "classifier",
        "specs": {"fnc": model.fnc_spec.to_dict(), "t1": model.t1_spec.to_dict(), "head": model.head_spec.to_dict()},
        "state_dict": model.state_dict(),
        "config": config.to_dict() if config else None,
        "seed": config.seed if config else None,
        "selected_lr": selected_lr,
    }, path)


def load_classifier(path) -> FusionClassifier:
    payload = load_container(path)
    if payload.get("kind") != "classifier":
        raise CheckpointError(f"{path}: expected a classifier checkpoint, got {payload.get('kind')!r}")
    specs = {k: LayerSpec.from_dict(v) for k, v in payload["specs"].items()}
    model = FusionClassifier(specs["fnc"], specs["t1"], specs["head"])
    model.load_state_dict(payload["state_dict"])
    model.selected_lr = payload["selected_lr"]
    return model.eval()


class FusionClassifierEstimator(ClassifierMixin, BaseEstimator):
    """scikit-learn style wrapper around :func:`train_classifier`.

    ``fit(cohort)`` reads labels from the cohort; ``y`` is accepted for API
    compatibility and must match them when given.
    """

    def __init__(self, epochs=200, batch_size=16, lr_grid=LR_GRID, lr_decay=0.98, preset="desk",
                 inner_val_fraction=0.2, class_weight=None, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_grid = lr_grid
        self.lr_decay = lr_decay
        self.preset = preset
        self.inner_val_fraction = inner_val_fraction
        self.class_weight = class_weight
        self.seed = seed

    def fit(self, cohort: Cohort, y=None):
        if y is not None and not np.array_equal(np.asarray(y), cohort.labels):
            raise ValueError("y does not match the cohort labels")
        config = ClassifierTrainConfig(**self.get_params())
        self.model_, self.selected_lr_, self.info_ = train_classifier(cohort, config)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, cohort: Cohort) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict(self.model_, cohort)[1]

    def predict(self, cohort: Cohort) -> np.ndarray:
        return self.predict_proba(cohort).argmax(axis=1)

    def score(self, cohort: Cohort, y=None, sample_weight=None) -> float:
        y = cohort.labels if y is None else np.asarray(y)
        return float(np.mean(self.predict(cohort) == y))
