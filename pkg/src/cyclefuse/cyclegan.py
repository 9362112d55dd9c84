"""Weakly-supervised cycle-consistent GAN between FNC vectors and volumes.

``g1`` maps connectivity vectors to volumes, ``g2`` maps volumes to vectors,
``d1`` scores volumes and ``d2`` scores vectors. Training alternates a
generator step on the least-squares adversarial, cycle and paired identity
losses with a discriminator step fed from per-discriminator replay buffers.

L1 terms are means over elements and over the batch (or pairs). The L1
subgradient at zero is zero (``torch.abs`` convention), so exact inverse
generators sit at a stationary point of the cycle loss.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import layers
from .cohort import Cohort, SubjectRecord
from .layers import LayerSpec
from .utils import (
    check_cohort, derive_seed, load_container, save_container, to_tensor, torch_generator,
)

LOG_FIELDS = ("epoch", "L_adv_D1", "L_adv_D2", "L_adv_G", "L_cyc", "L_id", "lr")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, losses: dict):
        super().__init__(f"non-finite loss at epoch {epoch}: {losses}")
        self.epoch = epoch
        self.losses = losses


@dataclass
class GanTrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_initial: float = 0.05
    lr_decay: float = 0.9
    lambda1: float = 10.0
    lambda2: float = 40.0
    seed: int = 0
    buffer_capacity: int = 50
    betas: tuple = (0.5, 0.999)
    preset: str = "desk"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanTrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class GanModel(nn.Module):
    def __init__(self, g1_spec: LayerSpec, g2_spec: LayerSpec, d1_spec: LayerSpec, d2_spec: LayerSpec,
                 lambda1: float = 10.0, lambda2: float = 40.0, fold_tag=None):
        super().__init__()
        self.g1_spec, self.g2_spec, self.d1_spec, self.d2_spec = g1_spec, g2_spec, d1_spec, d2_spec
        self.fnc_dim = g1_spec.input_shape[0]
        self.volume_shape = tuple(g1_spec.output_shape)
        if tuple(g2_spec.input_shape) != self.volume_shape or tuple(g2_spec.output_shape) != (self.fnc_dim,):
            raise layers.ShapeError("g2 must map the g1 output shape back to the g1 input shape")
        if tuple(d1_spec.input_shape) != self.volume_shape or tuple(d2_spec.input_shape) != (self.fnc_dim,):
            raise layers.ShapeError("discriminator inputs must match the generator domains")
        self.g1 = layers.build(g1_spec)
        self.g2 = layers.build(g2_spec)
        self.d1 = layers.build(d1_spec)
        self.d2 = layers.build(d2_spec)
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.fold_tag = fold_tag

    @classmethod
    def from_preset(cls, fnc_dim: int, volume_shape, preset: str = "desk", **kw) -> "GanModel":
        return cls(
            layers.g1_spec(fnc_dim, volume_shape, preset),
            layers.g2_spec(fnc_dim, volume_shape, preset),
            layers.d1_spec(volume_shape, preset),
            layers.d2_spec(fnc_dim, preset),
            **kw,
        )

    def g1_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.g1(x)

    def g2_forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.g2(y)

    def d1_forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.d1(y).reshape(-1)

    def d2_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.d2(x).reshape(-1)

    def generator_parameters(self):
        return [*self.g1.parameters(), *self.g2.parameters()]

    def discriminator_parameters(self):
        return [*self.d1.parameters(), *self.d2.parameters()]


# ---------------------------------------------------------------------------
# losses


def adversarial_loss_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """E[(D(real) - 1)^2] + E[D(fake)^2]."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("score batches must be nonempty")
    return ((real_scores - 1) ** 2).mean() + (fake_scores**2).mean()


def adversarial_loss_g(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator target: E[(D(G(.)) - 1)^2]."""
    if fake_scores.numel() == 0:
        raise ValueError("score batch must be nonempty")
    return ((fake_scores - 1) ** 2).mean()


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def cycle_loss(model, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return l1_mean(model.g2(model.g1(x)), x) + l1_mean(model.g1(model.g2(y)), y)


def identity_loss(model, x_paired: torch.Tensor, y_paired: torch.Tensor) -> torch.Tensor:
    """Paired L1 loss; zero for an empty paired set."""
    if len(x_paired) == 0:
        return torch.zeros((), dtype=x_paired.dtype)
    return l1_mean(model.g1(x_paired), y_paired) + l1_mean(model.g2(y_paired), x_paired)


def combine_losses(adv1, adv2, cyc, idl, lambda1: float, lambda2: float):
    return adv1 + adv2 + lambda1 * cyc + lambda2 * idl


def total_loss(model: GanModel, x, y, x_paired, y_paired) -> tuple[torch.Tensor, dict]:
    """Full objective and its components for one set of batches."""
    adv1 = adversarial_loss_d(model.d1_forward(y), model.d1_forward(model.g1(x)))
    adv2 = adversarial_loss_d(model.d2_forward(x), model.d2_forward(model.g2(y)))
    cyc = cycle_loss(model, x, y)
    idl = identity_loss(model, x_paired, y_paired)
    total = combine_losses(adv1, adv2, cyc, idl, model.lambda1, model.lambda2)
    parts = {"adv_g1_d1": adv1, "adv_g2_d2": adv2, "cycle": cyc, "identity": idl}
    return total, parts


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """FIFO history of generated samples for discriminator updates.

    Each push stores the new sample (evicting the oldest beyond ``capacity``)
    and returns, with probability 1/2, the new sample itself, otherwise a
    uniformly drawn stored sample.
    """

    def __init__(self, capacity: int = 50, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.stored = deque(maxlen=capacity)
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.stored)

    def push(self, sample):
        self.stored.append(sample)
        if self._rng.random() < 0.5:
            return sample
        return self.stored[int(self._rng.integers(len(self.stored)))]

    def push_batch(self, batch: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.push(s.detach().clone()) for s in batch])


# ---------------------------------------------------------------------------
# training


def _lr(config: GanTrainConfig, epoch: int) -> float:
    return config.lr_initial * config.lr_decay**epoch


def _cycled(rng: np.random.Generator, n: int, batch: int, steps: int) -> list[np.ndarray]:
    order = []
    while len(order) < batch * steps:
        order.extend(rng.permutation(n).tolist())
    return [np.array(order[i * batch:(i + 1) * batch]) for i in range(steps)]


def init_model(cohort: Cohort, config: GanTrainConfig, fold_tag=None) -> GanModel:
    model = GanModel.from_preset(cohort.fnc_dim, cohort.volume_shape, config.preset,
                                 lambda1=config.lambda1, lambda2=config.lambda2, fold_tag=fold_tag)
    layers.init_gaussian(model, torch_generator(derive_seed(config.seed, "gan-init")))
    return model


def train_gan(cohort: Cohort, config: GanTrainConfig | None = None, fold_tag=None,
              callback: Callable[[dict], None] | None = None) -> tuple[GanModel, list[dict]]:
    """Fit a GanModel on every present modality of ``cohort``.

    Returns the model (in eval mode) and one log record per epoch holding
    epoch means of each loss component and the learning rate used.
    """
    config = config or GanTrainConfig()
    check_cohort(cohort, both_modalities=True)
    model = init_model(cohort, config, fold_tag)
    model.train_ids = tuple(cohort.ids)
    log: list[dict] = []
    if config.epochs <= 0:
        return model.eval(), log

    X = to_tensor(cohort.fnc_array())
    Y = to_tensor(cohort.t1_array())
    paired = cohort.paired()
    Xp = to_tensor(paired.fnc_array())
    Yp = to_tensor(paired.t1_array())

    rng = np.random.default_rng(derive_seed(config.seed, "gan-batches"))
    buf_y = ReplayBuffer(config.buffer_capacity, derive_seed(config.seed, "buffer-d1"))
    buf_x = ReplayBuffer(config.buffer_capacity, derive_seed(config.seed, "buffer-d2"))
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.lr_initial, betas=tuple(config.betas))
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.lr_initial, betas=tuple(config.betas))

    bx = min(config.batch_size, len(X))
    by = min(config.batch_size, len(Y))
    bp = min(config.batch_size, len(Xp))
    steps = math.ceil(max(len(X), len(Y)) / config.batch_size)
    model.train()
    for epoch in range(config.epochs):
        lr = _lr(config, epoch)
        for opt in (opt_g, opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        xs = _cycled(rng, len(X), bx, steps)
        ys = _cycled(rng, len(Y), by, steps)
        ps = _cycled(rng, len(Xp), bp, steps) if len(Xp) else [None] * steps
        sums = dict.fromkeys(LOG_FIELDS[1:-1], 0.0)
        for ix, iy, ip in zip(xs, ys, ps):
            x, y = X[ix], Y[iy]
            # generator step
            opt_g.zero_grad(set_to_none=True)
            fake_y = model.g1(x)
            fake_x = model.g2(y)
            adv_g = adversarial_loss_g(model.d1_forward(fake_y)) + adversarial_loss_g(model.d2_forward(fake_x))
            cyc = l1_mean(model.g2(fake_y), x) + l1_mean(model.g1(fake_x), y)
            if ip is not None:
                idl = identity_loss(model, Xp[ip], Yp[ip])
            else:
                idl = torch.zeros(())
            (adv_g + config.lambda1 * cyc + config.lambda2 * idl).backward()
            opt_g.step()
            # discriminator step
            opt_d.zero_grad(set_to_none=True)
            hist_y = buf_y.push_batch(fake_y.detach())
            hist_x = buf_x.push_batch(fake_x.detach())
            d1_loss = adversarial_loss_d(model.d1_forward(y), model.d1_forward(hist_y))
            d2_loss = adversarial_loss_d(model.d2_forward(x), model.d2_forward(hist_x))
            (d1_loss + d2_loss).backward()
            opt_d.step()
            for key, val in (("L_adv_D1", d1_loss), ("L_adv_D2", d2_loss), ("L_adv_G", adv_g),
                             ("L_cyc", cyc), ("L_id", idl)):
                sums[key] += float(val.detach())
        record = {"epoch": epoch + 1, **{k: v / steps for k, v in sums.items()}, "lr": lr}
        if not all(math.isfinite(v) for v in record.values()):
            raise TrainingDivergedError(epoch + 1, record)
        log.append(record)
        if callback is not None:
            callback(record)
    return model.eval(), log


# ---------------------------------------------------------------------------
# inference


@torch.no_grad()
def _apply(net: nn.Module, arrays: list[np.ndarray], chunk: int = 64) -> list[np.ndarray]:
    out = []
    for i in range(0, len(arrays), chunk):
        batch = to_tensor(np.stack(arrays[i:i + chunk]), dtype=next(net.parameters()).dtype)
        out.extend(np.clip(net(batch).double().numpy(), -1.0, 1.0))
    return out


def generate_t1(model: GanModel, fnc: list[np.ndarray]) -> list[np.ndarray]:
    model.eval()
    return _apply(model.g1, list(fnc)) if len(fnc) else []


def generate_fnc(model: GanModel, t1: list[np.ndarray]) -> list[np.ndarray]:
    model.eval()
    return _apply(model.g2, list(t1)) if len(t1) else []


def impute_missing(model: GanModel, cohort: Cohort) -> Cohort:
    """Fill every absent modality with the generator output from the present one."""
    if model.fnc_dim != cohort.fnc_dim or model.volume_shape != cohort.volume_shape:
        raise ValueError(
            f"model dims ({model.fnc_dim}, {model.volume_shape}) do not match cohort "
            f"({cohort.fnc_dim}, {cohort.volume_shape})"
        )
    need_fnc = [r for r in cohort if r.fnc is None]
    need_t1 = [r for r in cohort if r.t1 is None]
    if not need_fnc and not need_t1:
        return cohort
    fake_fnc = dict(zip((r.subject_id for r in need_fnc), generate_fnc(model, [r.t1 for r in need_fnc])))
    fake_t1 = dict(zip((r.subject_id for r in need_t1), generate_t1(model, [r.fnc for r in need_t1])))
    records = []
    for r in cohort:
        if r.is_paired:
            records.append(r)
        else:
            records.append(SubjectRecord(
                r.subject_id, r.diagnosis,
                fnc=r.fnc if r.fnc is not None else fake_fnc[r.subject_id],
                t1=r.t1 if r.t1 is not None else fake_t1[r.subject_id],
            ))
    return cohort.with_records(records)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GanModel, path, config: GanTrainConfig | None = None) -> None:
    save_container({
        "kind": "cyclegan",
        "specs": {name: getattr(model, f"{name}_spec").to_dict() for name in ("g1", "g2", "d1", "d2")},
        "state_dict": model.state_dict(),
        "lambda1": model.lambda1,
        "lambda2": model.lambda2,
        "fold_tag": model.fold_tag,
        "train_ids": list(getattr(model, "train_ids", ())),
        "config": config.to_dict() if config else None,
        "seed": config.seed if config else None,
        "dtype": str(next(model.parameters()).dtype),
    }, path)


def load_checkpoint(path) -> GanModel:
    from .utils import CheckpointError

    payload = load_container(path)
    if payload.get("kind") != "cyclegan":
        raise CheckpointError(f"{path}: expected a cyclegan checkpoint, got {payload.get('kind')!r}")
    specs = {k: LayerSpec.from_dict(v) for k, v in payload["specs"].items()}
    model = GanModel(specs["g1"], specs["g2"], specs["d1"], specs["d2"],
                     payload["lambda1"], payload["lambda2"], payload["fold_tag"])
    if payload["dtype"] == "torch.float64":
        model = model.double()
    model.load_state_dict(payload["state_dict"])
    model.train_ids = tuple(payload["train_ids"])
    model.config = payload["config"]
    return model.eval()


# ---------------------------------------------------------------------------
# estimator


class CycleGANImputer(TransformerMixin, BaseEstimator):
    """scikit-learn style wrapper: ``fit`` trains the GAN, ``transform`` imputes.

    ``fit`` and ``transform`` take :class:`~cyclefuse.cohort.Cohort` objects.
    """

    def __init__(self, epochs=300, batch_size=32, lr_initial=0.05, lr_decay=0.9, lambda1=10.0,
                 lambda2=40.0, buffer_capacity=50, betas=(0.5, 0.999), preset="desk", seed=0,
                 fold_tag=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_initial = lr_initial
        self.lr_decay = lr_decay
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.buffer_capacity = buffer_capacity
        self.betas = betas
        self.preset = preset
        self.seed = seed
        self.fold_tag = fold_tag

    def _config(self) -> GanTrainConfig:
        p = self.get_params()
        p.pop("fold_tag")
        return GanTrainConfig(**p)

    def fit(self, cohort: Cohort, y=None):
        self.model_, self.log_ = train_gan(cohort, self._config(), fold_tag=self.fold_tag)
        return self

    def transform(self, cohort: Cohort) -> Cohort:
        check_is_fitted(self, "model_")
        return impute_missing(self.model_, check_cohort(cohort))
