"""Fidelity, classification and group-difference statistics."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from scipy.ndimage import uniform_filter

from .cohort import n_components_from_length

PSNR_INF = math.inf
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 2.0


class UndefinedMetricError(ValueError):
    pass


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    na = math.sqrt(float(da @ da))
    nb = math.sqrt(float(db @ db))
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation undefined for zero-variance input")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = mse(a, b)
    if err == 0:
        return PSNR_INF
    return float(10.0 * math.log10(data_range**2 / err))


def ssim(a, b, data_range: float = DATA_RANGE, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over every fully-contained cubic window.

    Local statistics use uniform weights and population (1/N) moments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    if min(a.shape) < window:
        raise ValueError(f"window {window} larger than volume {a.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    half = window // 2
    inner = tuple(slice(half, s - half) for s in a.shape)

    def local_mean(x):
        return uniform_filter(x, size=window, mode="constant")[inner]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def welch_t(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Welch two-sample t statistic along ``axis``.

    Where both groups are constant the statistic is 0 for equal means and
    signed infinity otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.shape[axis], b.shape[axis]
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least 2 samples")
    diff = a.mean(axis=axis) - b.mean(axis=axis)
    se = np.sqrt(a.var(axis=axis, ddof=1) / na + b.var(axis=axis, ddof=1) / nb)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / se
        t = np.where(se == 0, np.where(diff == 0, 0.0, np.sign(diff) * np.inf), t)
    return t


def volume_tmap(group_a, group_b) -> np.ndarray:
    """Voxelwise Welch t-map of group_a minus group_b."""
    return welch_t(np.stack(list(group_a)), np.stack(list(group_b)), axis=0)


def fnc_group_difference(group_a, group_b) -> tuple[np.ndarray, np.ndarray]:
    """Mean(a) - mean(b) per connectivity entry, plus its matrix form."""
    a = np.asarray(np.stack(list(group_a)), dtype=np.float64)
    b = np.asarray(np.stack(list(group_b)), dtype=np.float64)
    diff = a.mean(axis=0) - b.mean(axis=0)
    return diff, _devectorize_unbounded(diff)


def _devectorize_unbounded(v):
    c = n_components_from_length(v.size)
    m = np.zeros((c, c))
    r, k = np.triu_indices(c, 1)
    m[r, k] = v
    m[k, r] = v
    return m


def split_triangle_matrix(upper_vec, lower_vec) -> np.ndarray:
    """Matrix showing ``upper_vec`` above the diagonal and ``lower_vec`` below."""
    up = _devectorize_unbounded(np.asarray(upper_vec, dtype=np.float64))
    lo = _devectorize_unbounded(np.asarray(lower_vec, dtype=np.float64))
    return np.triu(up, 1) + np.tril(lo, -1)


@dataclass
class ClassificationScores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def classification_metrics(truth, predicted, positive_class=1) -> ClassificationScores:
    """Accuracy, precision, recall and F1 with ``positive_class`` as positive.

    Labels may be ints (AD=1) or diagnosis strings. Precision with no positive
    predictions, and F1 with precision+recall of zero, are reported as 0 and
    flagged ``degenerate``.
    """
    t = np.asarray(truth)
    p = np.asarray(predicted)
    if t.shape != p.shape or t.size == 0:
        raise ValueError("truth and predicted must be equal-length and nonempty")
    if positive_class == "AD" or positive_class == 1:
        pos = {1, "AD"}
    else:
        pos = {positive_class}
    tp_mask = np.array([x in pos for x in t.tolist()])
    pp_mask = np.array([x in pos for x in p.tolist()])
    tp = int(np.sum(tp_mask & pp_mask))
    fp = int(np.sum(~tp_mask & pp_mask))
    fn = int(np.sum(tp_mask & ~pp_mask))
    acc = float(np.mean(tp_mask == pp_mask))
    degenerate = False
    if tp + fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    if tp + fn == 0:
        degenerate = True
    if precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassificationScores(acc, float(precision), float(recall), float(f1), degenerate)


STAR_LEVELS = ("ns", "*", "**", "***")


def stars_for(p: float) -> str:
    if p > 0.05:
        return "ns"
    if p > 0.01:
        return "*"
    if p > 0.001:
        return "**"
    return "***"


@dataclass
class SignificanceAnnotation:
    p_value: float
    stars: str

    def as_dict(self) -> dict:
        return {"p_value": self.p_value, "stars": self.stars}


def welch_p_value(sample_a, sample_b) -> float:
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    t = float(welch_t(a, b))
    if t == 0:
        return 1.0
    if math.isinf(t):
        return 0.0
    with warnings.catch_warnings():
        # near-constant per-fold samples trigger a precision warning; the statistic is still valid
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def annotate_significance(sample_a, sample_b) -> SignificanceAnnotation:
    """Two-sided Welch t-test on per-fold metric values."""
    p = welch_p_value(sample_a, sample_b)
    return SignificanceAnnotation(p, stars_for(p))


def mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}


def fidelity_report(real_t1, fake_t1, real_fnc, fake_fnc, data_range: float = DATA_RANGE,
                    window: int = SSIM_WINDOW) -> dict:
    """Per-subject SSIM/PSNR on volumes and MSE/Pearson on connectivity vectors,
    summarized as mean and standard deviation across subjects."""
    out = {}
    if len(real_t1):
        w = min(window, min(np.asarray(real_t1[0]).shape) // 2 * 2 - 1)
        s = [ssim(a, b, data_range, w) for a, b in zip(real_t1, fake_t1)]
        p = [psnr(a, b, data_range) for a, b in zip(real_t1, fake_t1)]
        out["ssim"] = mean_std(s)
        out["psnr"] = mean_std(p) if all(math.isfinite(x) for x in p) else {"mean": PSNR_INF, "std": 0.0}
        out["n_volumes"] = len(s)
    if len(real_fnc):
        m = [mse(a, b) for a, b in zip(real_fnc, fake_fnc)]
        r = []
        for a, b in zip(real_fnc, fake_fnc):
            try:
                r.append(pearson(a, b))
            except UndefinedMetricError:
                r.append(0.0)
        out["mse"] = mean_std(m)
        out["pearson"] = mean_std(r)
        out["n_vectors"] = len(m)
    return out
