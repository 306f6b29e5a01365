"""Masked RMSE, replicate summaries and Welch's unequal-variance t-test."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError


def rmse_masked(pred, label, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValidationError(f"pred {pred.shape} and label {label.shape} differ")
    m = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != pred.shape:
        raise ValidationError(f"mask {m.shape} does not match {pred.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValidationError("no observed entries")
    diff = pred[m] - label[m]
    return float(np.sqrt(np.dot(diff, diff) / n))


def per_node_rmse(pred, label, mask) -> np.ndarray:
    """RMSE per column; NaN where a column has no observed entries."""
    pred, label = np.asarray(pred, float), np.asarray(label, float)
    m = np.asarray(mask, bool)
    sq = np.where(m, pred - np.where(m, label, 0.0), 0.0) ** 2
    cnt = m.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, np.sqrt(sq.sum(axis=0) / np.maximum(cnt, 1)), np.nan)


def replicate_summary(values: Sequence[float]) -> tuple[float, float | None]:
    """(mean, sample std); std is None for fewer than two values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("no values")
    mean = float(v.mean())
    if v.size < 2:
        return mean, None
    return mean, float(np.sqrt(((v - mean) ** 2).sum() / (v.size - 1)))


# -- Student t tail via the regularized incomplete beta function ----------------------


def _betacf(a, b, x, tol=1e-15, max_iter=500):
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float, xc: float | None = None) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1.

    ``xc`` optionally supplies 1 - x computed without cancellation.
    """
    if not (a > 0 and b > 0):
        raise ValidationError("betainc needs a, b > 0")
    if xc is None:
        xc = 1.0 - x
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    lnfront = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
               + a * math.log(x) + b * math.log(xc))
    front = math.exp(lnfront)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    t2 = t * t
    p = betainc_regularized(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2))
    return min(1.0, max(0.0, p))


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """(t, Welch-Satterthwaite df, two-sided p) for unequal variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValidationError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va = ((a - ma) ** 2).sum() / (a.size - 1)
    vb = ((b - mb) ** 2).sum() / (b.size - 1)
    qa, qb = va / a.size, vb / b.size
    se2 = qa + qb
    if se2 == 0.0:
        if ma == mb:
            return 0.0, float("nan"), 1.0
        return math.copysign(math.inf, ma - mb), float("nan"), 0.0
    t = float((ma - mb) / math.sqrt(se2))
    df = float(se2 * se2 / (qa * qa / (a.size - 1) + qb * qb / (b.size - 1)))
    return t, df, t_two_sided_p(t, df)


def bold_methods(results: Mapping[str, Sequence[float]], alpha: float = 0.05) -> set[str]:
    """Best mean (lowest) plus every method not significantly worse (Welch p > alpha)."""
    if not results:
        return set()
    means = {k: float(np.mean(v)) for k, v in results.items()}
    best = min(means, key=lambda k: (means[k], k))
    out = {best}
    for k, v in results.items():
        if k == best:
            continue
        if len(v) < 2 or len(results[best]) < 2:
            continue
        if welch_t_test(v, results[best])[2] > alpha:
            out.add(k)
    return out


@dataclass
class MetricReport:
    partition: str
    overall_rmse: float
    count: int
    per_node_rmse: dict = field(default_factory=dict)
    model_seed: int | None = None
    mask_seed: int | None = None
    method: str | None = None

    def __post_init__(self):
        if self.overall_rmse < 0 or self.count <= 0:
            raise ValidationError("invalid metric report")

    def to_dict(self):
        d = asdict(self)
        d["per_node_rmse"] = {k: (None if v is None or math.isnan(v) else float(v))
                              for k, v in self.per_node_rmse.items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metric_report(pred, label, mask, node_ids, partition="test", **ids) -> MetricReport:
    mask = np.asarray(mask, bool)
    per = per_node_rmse(pred, label, mask)
    return MetricReport(partition, rmse_masked(pred, label, mask), int(mask.sum()),
                        {k: float(v) for k, v, c in zip(node_ids, per, mask.sum(axis=0)) if c > 0},
                        **ids)
