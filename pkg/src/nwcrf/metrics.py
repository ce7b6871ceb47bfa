"""Standard monocular-depth error metrics."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import DepthSample, upsample_nearest
from .errors import ContractError, ShapeError

CSV_HEADER = "abs_rel,sq_rel,rmse,rmse_log,log10,silog,irmse,d1,d2,d3"
# sq_rel follows the common mean((pred - gt)^2 / gt) definition.
CSV_COMMENT = "# sq_rel = mean((pred - gt)^2 / gt), standard definition"


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    silog: float
    irmse: float
    delta1: float
    delta2: float
    delta3: float

    def values(self) -> list[float]:
        return [getattr(self, f.name) for f in dataclasses.fields(self)]

    def to_csv(self) -> str:
        row = ",".join(f"{v:.9g}" for v in self.values())
        return f"{CSV_COMMENT}\n{CSV_HEADER}\n{row}\n"

    @classmethod
    def mean(cls, reports: Iterable["MetricsReport"]) -> "MetricsReport":
        reports = list(reports)
        if not reports:
            raise ContractError("cannot average zero reports")
        return cls(*np.mean([r.values() for r in reports], axis=0).tolist())


def evaluate(pred: np.ndarray, sample: DepthSample, cap: float = 80.0,
             min_depth: float = 1e-3) -> MetricsReport:
    """Metrics over the valid pixels of ``sample``.

    A prediction whose extents are an integer fraction of the ground truth is
    upsampled by nearest neighbour first.  Prediction and ground truth are
    both clamped to [min_depth, cap].
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt_full = sample.depth
    if pred.shape != gt_full.shape:
        factor = gt_full.shape[0] // pred.shape[0]
        if pred.ndim != 2 or factor < 1 or tuple(np.multiply(pred.shape, factor)) != gt_full.shape:
            raise ShapeError(f"prediction {pred.shape} cannot be upsampled to {gt_full.shape}")
        pred = upsample_nearest(pred, factor)
    m = sample.mask
    if not m.any():
        raise ContractError("no valid pixels to evaluate")
    p = pred[m]
    if np.any(p <= 0):
        raise ContractError("predictions must be positive")
    p = np.clip(p, min_depth, cap)
    g = np.clip(gt_full[m], min_depth, cap)

    # max(p/g, g/p) < t written without division, so a prediction scaled by
    # exactly t in floating point is never counted through rounding.
    def within(t: float) -> float:
        return float(np.mean((p < t * g) & (g < t * p)))

    diff = p - g
    dlog = np.log(p) - np.log(g)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean(dlog**2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        silog=float(100.0 * np.sqrt(max(np.mean(dlog**2) - np.mean(dlog) ** 2, 0.0))),
        irmse=float(np.sqrt(np.mean((1000.0 / p - 1000.0 / g) ** 2))),
        delta1=within(1.25),
        delta2=within(1.25**2),
        delta3=within(1.25**3),
    )


def read_metrics_csv(text: str) -> MetricsReport:
    rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if len(rows) < 2 or rows[0] != CSV_HEADER:
        raise ValueError("not a metrics CSV")
    return MetricsReport(*[float(v) for v in rows[1].split(",")])
