"""
Verification metrics for refined precipitation fields.

Grid metrics compare a prediction with the radar reference over the joint
validity mask; gauge metrics compare it with gauge values at gauge cells.
Metrics that are undefined for a sample (an empty collocation set, an empty
exceedance mask) are returned as ``None`` and excluded from aggregation.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.signal import correlate
from scipy.stats import pearsonr

from gridio import GaugeObservation, GridField, SampleFrame
from utils import logger
from utils.errors import ConfigError, EmptyReductionError, ShapeError

REPORT_SCHEMA = "nsp-report/1"
HEADLINE = ("rmse_r", "mae_r", "rmse_g", "mae_g", "r_coll", "fss_r")


@dataclass
class MetricConfig:
    collocation_threshold: float = 0.1
    fss_thresholds: tuple = (1.0, 2.5, 5.0, 10.0)
    fss_neighborhood: int = 20
    intensity_edges: tuple = (0.0, 1.0, 5.0, 10.0, 25.0)
    displacement_thresholds: tuple = (0.1, 1.0, 5.0, 10.0)
    conditional_thresholds: tuple = (0.1, 1.0, 5.0, 10.0)
    decomposition_threshold: float = 0.1
    aggregation: str = "per_sample"
    error_analysis: bool = True

    def __post_init__(self) -> None:
        for name in ("fss_thresholds", "intensity_edges", "displacement_thresholds", "conditional_thresholds"):
            values = tuple(float(v) for v in getattr(self, name))
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {values}")
            setattr(self, name, values)
        if self.fss_neighborhood < 1:
            raise ConfigError(f"fss_neighborhood must be at least 1, got {self.fss_neighborhood}")
        if self.aggregation not in ("per_sample", "pooled"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


def _field(x) -> tuple:
    """(values, valid) of a GridField or a plain array (all valid where finite)."""
    if isinstance(x, GridField):
        return x.filled(0.0).astype(np.float64), x.valid
    values = np.asarray(x, dtype=np.float64)
    return np.where(np.isfinite(values), values, 0.0), np.isfinite(values)


def _joint(pred, ref) -> tuple:
    p, pv = _field(pred)
    r, rv = _field(ref)
    if p.shape != r.shape:
        raise ShapeError(f"prediction {p.shape} and reference {r.shape} differ")
    return p, r, pv & rv


# ---------------------------------------------------------------------------
# point-wise errors


def rmse_mae(pred, ref) -> tuple:
    """
    RMSE and MAE over the joint validity mask.

    Raises:
        EmptyReductionError: No cell is valid in both fields
    """
    p, r, valid = _joint(pred, ref)
    if not valid.any():
        raise EmptyReductionError("rmse_mae over an empty joint mask")
    err = p[valid] - r[valid]
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def gauge_pairs(pred, gauges: Sequence[GaugeObservation]) -> tuple:
    """(predicted, observed) values at the non-missing gauges on valid prediction cells."""
    p, pv = _field(pred)
    chosen = [g for g in gauges if not g.is_missing and pv[g.row, g.col]]
    predicted = np.array([p[g.row, g.col] for g in chosen], dtype=np.float64)
    observed = np.array([g.value for g in chosen], dtype=np.float64)
    return predicted, observed


def rmse_mae_gauges(pred, gauges: Sequence[GaugeObservation]) -> tuple:
    predicted, observed = gauge_pairs(pred, gauges)
    if observed.size == 0:
        raise EmptyReductionError("rmse_mae_gauges without usable gauges")
    err = predicted - observed
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(np.abs(err)))


def collocated_pairs(pred, radar, gauges: Sequence[GaugeObservation], tau: float = 0.1) -> tuple:
    """(pred, radar) at gauge cells where both the gauge and the radar exceed tau; one entry per cell."""
    p, r, valid = _joint(pred, radar)
    cells = sorted({(g.row, g.col) for g in gauges if not g.is_missing and g.value > tau})
    cells = [c for c in cells if valid[c] and r[c] > tau]
    if not cells:
        return np.zeros(0), np.zeros(0)
    rows, cols = np.array(cells).T
    return p[rows, cols], r[rows, cols]


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(pearsonr(x, y)[0])


def pearson_collocated(pred, radar, gauges: Sequence[GaugeObservation], tau: float = 0.1) -> Optional[float]:
    """Pearson r of prediction vs radar over collocated wet cells; None when undefined."""
    return _pearson(*collocated_pairs(pred, radar, gauges, tau))


# ---------------------------------------------------------------------------
# fractions skill score


def _box_fraction(mask: np.ndarray, n: int) -> np.ndarray:
    """
    Fraction of true cells in the n x n window of every cell.

    Rows i - (n-1)//2 .. i + n//2 (likewise columns), truncated at the grid
    edge and divided by the in-grid window area.
    """
    h, w = mask.shape
    lo, hi = (n - 1) // 2, n // 2
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.float64), axis=0), axis=1)
    r0 = np.clip(np.arange(h) - lo, 0, h)
    r1 = np.clip(np.arange(h) + hi + 1, 0, h)
    c0 = np.clip(np.arange(w) - lo, 0, w)
    c1 = np.clip(np.arange(w) + hi + 1, 0, w)
    total = (
        integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0]
    )
    area = np.outer(r1 - r0, c1 - c0)
    return total / area


def fss_components(pred, ref, tau: float, n: int) -> tuple:
    """(sum (O - M)^2, sum O^2 + sum M^2) over valid cells."""
    p, r, valid = _joint(pred, ref)
    m = _box_fraction((p >= tau) & valid, n)
    o = _box_fraction((r >= tau) & valid, n)
    m, o = m[valid], o[valid]
    return float(np.sum((o - m) ** 2)), float(np.sum(o ** 2) + np.sum(m ** 2))


def fss(pred, ref, tau: float, n: int) -> float:
    """Fractions skill score at threshold tau and window n; 1.0 when both fields are dry."""
    num, den = fss_components(pred, ref, tau, n)
    if den == 0:
        return 1.0
    return 1.0 - num / den


def fss_avg(pred, ref, cfg: Optional[MetricConfig] = None) -> float:
    cfg = cfg or MetricConfig()
    return float(np.mean([fss(pred, ref, t, cfg.fss_neighborhood) for t in cfg.fss_thresholds]))


def min_useful_scale(pred, ref, tau: float, cell_size_km: float = 11.0) -> Optional[tuple]:
    """
    Smallest odd window with FSS >= 0.5.

    Returns:
        tuple: (cells, km), or None when no window up to the grid extent reaches 0.5
    """
    p, _, _ = _joint(pred, ref)
    limit = 2 * max(p.shape) - 1
    for n in range(1, limit + 1, 2):
        if fss(pred, ref, tau, n) >= 0.5:
            return n, n * cell_size_km
    return None


# ---------------------------------------------------------------------------
# error analysis


def conditional_rmse_bias(pred, ref, tau: float) -> Optional[tuple]:
    """(RMSE, mean(pred - ref)) where both exceed tau; None for an empty set."""
    p, r, valid = _joint(pred, ref)
    both = valid & (p > tau) & (r > tau)
    if not both.any():
        return None
    err = p[both] - r[both]
    return float(np.sqrt(np.mean(err ** 2))), float(np.mean(err))


def _categories(p: np.ndarray, r: np.ndarray, valid: np.ndarray, tau: float) -> dict:
    wet_p, wet_r = p > tau, r > tau
    return {
        "hit": valid & wet_p & wet_r,
        "miss": valid & ~wet_p & wet_r,
        "false_alarm": valid & wet_p & ~wet_r,
        "dry_dry": valid & ~wet_p & ~wet_r,
    }


def mse_decomposition(pred, ref, tau: float = 0.1) -> dict:
    """
    Share of the total squared error in each pixel category.

    Categories: hit (both > tau), miss (pred <= tau < ref), false_alarm
    (ref <= tau < pred) and the dry_dry residual. Shares sum to 1; with zero
    total error every share is 0 and ``zero_error`` is set.
    """
    p, r, valid = _joint(pred, ref)
    se = (p - r) ** 2
    sums = {name: float(np.sum(se[mask])) for name, mask in _categories(p, r, valid, tau).items()}
    total = sum(sums.values())
    if total == 0:
        return {**{k: 0.0 for k in sums}, "zero_error": True}
    return {**{k: v / total for k, v in sums.items()}, "zero_error": False}


def displacement(pred, ref, tau: float, cell_size_km: float = 11.0, max_shift: Optional[int] = None) -> Optional[float]:
    """
    Distance of the shift that best aligns the prediction's exceedance mask with the reference's.

    The cross-correlation sum_x pred[x + s] * ref[x] is maximized over
    |s_row|, |s_col| <= min(H, W) // 4; ties go to the smallest shift.

    Returns:
        float: |s| * cell_size_km, or None when either mask is empty
    """
    p, r, valid = _joint(pred, ref)
    mp = ((p >= tau) & valid).astype(np.float64)
    mr = ((r >= tau) & valid).astype(np.float64)
    if not mp.any() or not mr.any():
        return None
    h, w = p.shape
    limit = min(h, w) // 4 if max_shift is None else max_shift
    corr = correlate(mp, mr, mode="full", method="direct")
    best, best_key = None, None
    for dy in range(-limit, limit + 1):
        for dx in range(-limit, limit + 1):
            value = corr[dy + h - 1, dx + w - 1]
            key = (-value, dy * dy + dx * dx, dy, dx)
            if best_key is None or key < best_key:
                best, best_key = (dy, dx), key
    return math.hypot(*best) * cell_size_km


def intensity_bins(edges: Sequence[float]) -> list:
    """Bin labels and bounds: exactly the first edge, then (a, b] ranges, then above the last edge."""
    bins = [(f"{edges[0]:g}", None, edges[0])]
    bins += [(f"({a:g},{b:g}]", a, b) for a, b in zip(edges, edges[1:])]
    bins.append((f">{edges[-1]:g}", edges[-1], None))
    return bins


def _bin_masks(r: np.ndarray, valid: np.ndarray, edges: Sequence[float]) -> dict:
    masks = {}
    for label, low, high in intensity_bins(edges):
        if low is None:
            masks[label] = valid & (r <= high)
        elif high is None:
            masks[label] = valid & (r > low)
        else:
            masks[label] = valid & (r > low) & (r <= high)
    return masks


def intensity_binned_rmse(pred, ref, edges: Sequence[float] = (0.0, 1.0, 5.0, 10.0, 25.0)) -> dict:
    """RMSE per reference-intensity bin; empty bins are absent."""
    p, r, valid = _joint(pred, ref)
    out = {}
    for label, mask in _bin_masks(r, valid, edges).items():
        if mask.any():
            out[label] = float(np.sqrt(np.mean((p[mask] - r[mask]) ** 2)))
    return out


# ---------------------------------------------------------------------------
# per-sample evaluation and aggregation


def evaluate_sample(pred, frame: SampleFrame, cfg: MetricConfig, eval_gauges: Optional[Sequence[GaugeObservation]] = None) -> dict:
    """
    Flat metric dict for one frame.

    Grid metrics need the radar reference and are None without it. Gauge
    metrics use ``eval_gauges`` (all gauges by default).
    """
    gauges = list(frame.gauges if eval_gauges is None else eval_gauges)
    out = {k: None for k in HEADLINE}
    predicted, observed = gauge_pairs(pred, gauges)
    if observed.size:
        err = predicted - observed
        out["rmse_g"] = float(np.sqrt(np.mean(err ** 2)))
        out["mae_g"] = float(np.mean(np.abs(err)))
    radar = frame.radar
    if radar is None:
        return out

    p, r, valid = _joint(pred, radar)
    if valid.any():
        out["rmse_r"], out["mae_r"] = rmse_mae(pred, radar)
    out["r_coll"] = pearson_collocated(pred, radar, frame.gauges, cfg.collocation_threshold)
    per_threshold = [fss(pred, radar, t, cfg.fss_neighborhood) for t in cfg.fss_thresholds]
    out["fss_r"] = float(np.mean(per_threshold))
    for t, value in zip(cfg.fss_thresholds, per_threshold):
        out[f"fss@{t:g}"] = value
    if not cfg.error_analysis:
        return out

    cell_km = frame.spec.cell_size_km
    for t in cfg.conditional_thresholds:
        cond = conditional_rmse_bias(pred, radar, t)
        out[f"crmse@{t:g}"], out[f"bias@{t:g}"] = cond if cond is not None else (None, None)
    for t in cfg.displacement_thresholds:
        out[f"disp_km@{t:g}"] = displacement(pred, radar, t, cell_km)
    for t in cfg.fss_thresholds:
        scale = min_useful_scale(pred, radar, t, cell_km)
        out[f"min_scale_km@{t:g}"] = scale[1] if scale is not None else None
    dec = mse_decomposition(pred, radar, cfg.decomposition_threshold)
    for k in ("hit", "miss", "false_alarm", "dry_dry"):
        out[f"dec_{k}"] = None if dec["zero_error"] else dec[k]
    binned = intensity_binned_rmse(pred, radar, cfg.intensity_edges)
    for label, _, _ in intensity_bins(cfg.intensity_edges):
        out[f"rmse_bin{label}"] = binned.get(label)
    return out


@dataclass
class MetricReport:
    metrics: dict
    counts: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    horizon_rmse: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def headline(self) -> dict:
        return {k: self.metrics.get(k) for k in HEADLINE}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "header": self.header,
            "metrics": self.metrics,
            "counts": self.counts,
            "excluded": self.excluded,
            "horizon_rmse": {str(k): v for k, v in self.horizon_rmse.items()},
        }

    def to_row(self, name: str) -> dict:
        return {"run": name, **self.metrics, "n_samples": self.counts.get("samples", 0)}

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path: str, name: str) -> None:
        pd.DataFrame([self.to_row(name)]).to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


class MetricAccumulator:
    """
    Streaming aggregation of per-sample metrics over a fold.

    ``per_sample`` averages each metric over the samples where it is defined;
    ``pooled`` recomputes the point-wise errors, FSS and collocated
    correlation from sums over all samples. The result does not depend on
    the order of ``add`` calls.
    """

    def __init__(self, cfg: Optional[MetricConfig] = None) -> None:
        self.cfg = cfg or MetricConfig()
        self.samples = []
        self.horizons = {}
        self._sums = {"sse_r": 0.0, "sae_r": 0.0, "n_r": 0, "sse_g": 0.0, "sae_g": 0.0, "n_g": 0}
        self._fss = {t: [0.0, 0.0] for t in self.cfg.fss_thresholds}
        self._coll = ([], [])

    def add(self, pred, frame: SampleFrame, eval_gauges=None, horizon: Optional[int] = None) -> dict:
        values = evaluate_sample(pred, frame, self.cfg, eval_gauges)
        self.samples.append(values)

        predicted, observed = gauge_pairs(pred, list(frame.gauges if eval_gauges is None else eval_gauges))
        self._sums["sse_g"] += float(np.sum((predicted - observed) ** 2))
        self._sums["sae_g"] += float(np.sum(np.abs(predicted - observed)))
        self._sums["n_g"] += int(observed.size)
        if frame.radar is not None:
            p, r, valid = _joint(pred, frame.radar)
            err = p[valid] - r[valid]
            self._sums["sse_r"] += float(np.sum(err ** 2))
            self._sums["sae_r"] += float(np.sum(np.abs(err)))
            self._sums["n_r"] += int(valid.sum())
            for t in self.cfg.fss_thresholds:
                num, den = fss_components(pred, frame.radar, t, self.cfg.fss_neighborhood)
                self._fss[t][0] += num
                self._fss[t][1] += den
            x, y = collocated_pairs(pred, frame.radar, frame.gauges, self.cfg.collocation_threshold)
            self._coll[0].extend(x.tolist())
            self._coll[1].extend(y.tolist())
        if horizon is not None and values["rmse_r"] is not None:
            self.horizons.setdefault(int(horizon), []).append(values["rmse_r"])
        return values

    def _per_sample(self) -> tuple:
        keys = []
        for s in self.samples:
            keys.extend(k for k in s if k not in keys)
        metrics, excluded = {}, {}
        for k in keys:
            defined = [s[k] for s in self.samples if s.get(k) is not None]
            metrics[k] = float(np.mean(defined)) if defined else None
            missing = len(self.samples) - len(defined)
            if missing:
                excluded[k] = missing
        return metrics, excluded

    def _pooled(self, metrics: dict) -> dict:
        s = self._sums
        pooled = dict(metrics)
        if s["n_r"]:
            pooled["rmse_r"] = math.sqrt(s["sse_r"] / s["n_r"])
            pooled["mae_r"] = s["sae_r"] / s["n_r"]
            per_t = []
            for t, (num, den) in self._fss.items():
                value = 1.0 if den == 0 else 1.0 - num / den
                pooled[f"fss@{t:g}"] = value
                per_t.append(value)
            pooled["fss_r"] = float(np.mean(per_t))
        if s["n_g"]:
            pooled["rmse_g"] = math.sqrt(s["sse_g"] / s["n_g"])
            pooled["mae_g"] = s["sae_g"] / s["n_g"]
        pooled["r_coll"] = _pearson(np.asarray(self._coll[0]), np.asarray(self._coll[1]))
        return pooled

    def result(self, header: Optional[dict] = None) -> MetricReport:
        metrics, excluded = self._per_sample()
        if self.cfg.aggregation == "pooled":
            metrics = self._pooled(metrics)
        if excluded:
            logger.debug(f"undefined metric counts: {excluded}")
        counts = {"samples": len(self.samples), "n_r": self._sums["n_r"], "n_g": self._sums["n_g"]}
        horizon = {h: float(np.mean(v)) for h, v in sorted(self.horizons.items())}
        full_header = {
            "aggregation": self.cfg.aggregation,
            "fss_window": f"{self.cfg.fss_neighborhood} cells, rows/cols i-(n-1)//2 .. i+n//2, edge-truncated",
            "config": asdict(self.cfg),
            **(header or {}),
        }
        return MetricReport(metrics, counts, excluded, horizon, full_header)
