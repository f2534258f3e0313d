"""Losses and evaluation metrics for scalar regression outputs.

Losses return ``(value, dloss/dy_hat)``. Covariances and variances inside the
concordance terms use the population (1/N) normalization.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CCC_DENOM_FLOOR = 1e-12
METRIC_COLUMNS = ("mae", "corr", "ccc", "acc2", "f1", "acc7")


class MetricError(ValueError):
    pass


def _batch(y_hat, y, min_n: int = 1):
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y_hat.shape != y.shape:
        raise MetricError(f"prediction/label length mismatch: {y_hat.size} vs {y.size}")
    if y.size < min_n:
        raise MetricError(f"need at least {min_n} sample(s), got {y.size}")
    if not (np.all(np.isfinite(y_hat)) and np.all(np.isfinite(y))):
        raise MetricError("non-finite predictions or labels")
    return y_hat, y


def mae_loss(y_hat, y):
    """Mean absolute error with subgradient sign(y_hat - y)/N, sign(0) = 0."""
    y_hat, y = _batch(y_hat, y)
    n = y.size
    diff = y_hat - y
    return float(np.abs(diff).mean()), np.sign(diff) / n


def mse_loss(y_hat, y):
    y_hat, y = _batch(y_hat, y)
    diff = y_hat - y
    return float((diff * diff).mean()), 2.0 * diff / y.size


def _ccc_terms(y_hat, y):
    n = y.size
    mp, my = y_hat.mean(), y.mean()
    dp, dy = y_hat - mp, y - my
    s_py = (dp * dy).sum() / n
    s_pp = (dp * dp).sum() / n
    s_yy = (dy * dy).sum() / n
    denom = s_pp + s_yy + (mp - my) ** 2
    return n, mp, my, dp, dy, s_py, denom


def ccc_loss(y_hat, y):
    """1 - CCC, with an analytic gradient. Degenerate denominators give (1, 0)."""
    y_hat, y = _batch(y_hat, y, min_n=2)
    n, mp, my, dp, dy, s_py, denom = _ccc_terms(y_hat, y)
    if denom < CCC_DENOM_FLOOR:
        return 1.0, np.zeros_like(y_hat)
    ccc = 2.0 * s_py / denom
    # d s_py / d yhat_i = dy_i / n ; d denom / d yhat_i = 2 dp_i / n + 2 (mp - my) / n
    d_num = 2.0 * dy / n
    d_den = 2.0 * dp / n + 2.0 * (mp - my) / n
    d_ccc = (d_num * denom - 2.0 * s_py * d_den) / (denom * denom)
    return float(1.0 - ccc), -d_ccc


def ccc_metric(y_hat, y) -> float:
    loss, _ = ccc_loss(y_hat, y)
    return 1.0 - loss


def pearson(y_hat, y) -> float:
    y_hat, y = _batch(y_hat, y, min_n=2)
    dp = y_hat - y_hat.mean()
    dy = y - y.mean()
    sp = math.sqrt((dp * dp).sum())
    sy = math.sqrt((dy * dy).sum())
    if sp == 0.0 or sy == 0.0:
        raise MetricError("Pearson r is undefined for a constant series")
    r = float((dp * dy).sum() / (sp * sy))
    return min(1.0, max(-1.0, r))


def acc2_f1(y_hat, y) -> tuple[float, float]:
    """Binary accuracy and positive-class F1, excluding samples whose label is 0."""
    y_hat, y = _batch(y_hat, y)
    keep = y != 0
    if not keep.any():
        raise MetricError("all labels are zero; binary accuracy is undefined")
    pred = y_hat[keep] > 0
    true = y[keep] > 0
    acc = float((pred == true).mean())
    tp = float(np.sum(pred & true))
    fp = float(np.sum(pred & ~true))
    fn = float(np.sum(~pred & true))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, f1


def sentiment_class(v) -> np.ndarray:
    """Round half away from zero, then clamp to the seven classes -3..3."""
    v = np.asarray(v, dtype=np.float64)
    rounded = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(rounded, -3, 3).astype(np.int64)


def acc7(y_hat, y) -> float:
    y_hat, y = _batch(y_hat, y)
    return float((sentiment_class(y_hat) == sentiment_class(y)).mean())


@dataclass
class MetricReport:
    mae: float
    pearson_r: float
    ccc: float
    acc2: float
    f1: float
    acc7: float
    # Names of metrics that were undefined for this batch; their value is the 0.0 sentinel.
    undefined: tuple[str, ...] = field(default_factory=tuple)

    def row(self) -> list[float]:
        return [self.mae, self.pearson_r, self.ccc, self.acc2, self.f1, self.acc7]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(METRIC_COLUMNS)
        w.writerow([repr(float(v)) for v in self.row()])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["undefined"] = tuple(d.get("undefined", ()))
        return cls(**d)


def evaluate(y_hat, y) -> MetricReport:
    """All metrics at once. Undefined ones are reported as 0.0 and listed in ``undefined``."""
    y_hat, y = _batch(y_hat, y)
    undefined = []

    def guarded(name, fn, default):
        try:
            return fn(y_hat, y)
        except MetricError:
            undefined.extend(name if isinstance(name, tuple) else (name,))
            return default

    mae, _ = mae_loss(y_hat, y)
    r = guarded("pearson_r", pearson, 0.0)
    c = guarded("ccc", ccc_metric, 0.0)
    a2, f1 = guarded(("acc2", "f1"), acc2_f1, (0.0, 0.0))
    return MetricReport(mae, r, c, a2, f1, acc7(y_hat, y), tuple(undefined))
