"""Missing-modality strategies: subsample, zero_fill and generative."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .cohort import Cohort, CohortError, SubjectRecord
from .cyclegan import GanModel, impute_missing
from .utils import check_cohort

STRATEGIES = ("subsample", "zero_fill", "generative")


class LeakageError(RuntimeError):
    """A generative model was applied outside the fold it was trained for."""


@dataclass
class ImputationStrategy:
    kind: str
    model: GanModel | None = None
    fold_tag: object = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind == "generative" and self.model is None:
            raise ValueError("generative strategy requires a trained GanModel")


def apply_strategy(strategy: ImputationStrategy, cohort: Cohort) -> Cohort:
    """Return a complete cohort; present modalities and labels are never altered."""
    check_cohort(cohort)
    if strategy.kind == "subsample":
        out = cohort.paired()
        if len(out) == 0:
            raise CohortError("subsampling left no records with both modalities")
        if len(set(out.labels.tolist())) < 2:
            raise CohortError("subsampling left a single-class cohort")
        return out
    if strategy.kind == "zero_fill":
        if cohort.is_complete:
            return cohort
        records = [
            r if r.is_paired else SubjectRecord(
                r.subject_id, r.diagnosis,
                fnc=r.fnc if r.fnc is not None else np.zeros(cohort.fnc_dim),
                t1=r.t1 if r.t1 is not None else np.zeros(cohort.volume_shape),
            )
            for r in cohort
        ]
        return cohort.with_records(records)
    model = strategy.model
    if model.fnc_dim != cohort.fnc_dim or model.volume_shape != cohort.volume_shape:
        raise ValueError("generative model dimensions do not match the cohort")
    if strategy.fold_tag is not None and model.fold_tag != strategy.fold_tag:
        raise LeakageError(
            f"model trained for fold {model.fold_tag!r} applied to fold {strategy.fold_tag!r}"
        )
    return impute_missing(model, cohort)


class ModalityImputer(TransformerMixin, BaseEstimator):
    """Stateless transformer form of :func:`apply_strategy`.

    ``model`` must be a trained :class:`~cyclefuse.cyclegan.GanModel` when
    ``strategy="generative"``.
    """

    def __init__(self, strategy="zero_fill", model=None, fold_tag=None):
        self.strategy = strategy
        self.model = model
        self.fold_tag = fold_tag

    def fit(self, cohort: Cohort, y=None):
        self.strategy_ = ImputationStrategy(self.strategy, self.model, self.fold_tag)
        return self

    def transform(self, cohort: Cohort) -> Cohort:
        strategy = getattr(self, "strategy_", None) or ImputationStrategy(self.strategy, self.model, self.fold_tag)
        return apply_strategy(strategy, cohort)
