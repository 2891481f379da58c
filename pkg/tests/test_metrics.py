import json
import math

import numpy as np
import pandas as pd
import pytest

from gridio import NODATA, GaugeObservation, GridField, GridSpec, SampleFrame
from metrics import (
    HEADLINE,
    REPORT_SCHEMA,
    MetricAccumulator,
    MetricConfig,
    conditional_rmse_bias,
    displacement,
    evaluate_sample,
    fss,
    intensity_binned_rmse,
    intensity_bins,
    min_useful_scale,
    mse_decomposition,
    pearson_collocated,
    rmse_mae,
    rmse_mae_gauges,
)
from utils.errors import ConfigError, EmptyReductionError, ShapeError


def _spec(h=8, w=8):
    return GridSpec(h, w, origin=(40.0, -100.0), resolution_deg=0.1)


def _gauge(spec, row, col, value, sid="g"):
    lat, lon = spec.cell_center(row, col)
    return GaugeObservation(row, col, lat, lon, float(value), sid)


def _frame(spec, radar, gauges=()):
    return SampleFrame(
        0,
        GridField.from_array(spec, np.zeros(spec.shape)),
        GridField.from_array(spec, np.zeros(spec.shape)),
        tuple(gauges),
        None if radar is None else GridField.from_array(spec, np.asarray(radar, dtype=np.float64)),
        2021,
    )


def _brute_fss(p, r, valid, tau, n):
    h, w = p.shape
    lo, hi = (n - 1) // 2, n // 2
    mp, mr = (p >= tau) & valid, (r >= tau) & valid
    num = den = 0.0
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            rows = slice(max(i - lo, 0), min(i + hi + 1, h))
            cols = slice(max(j - lo, 0), min(j + hi + 1, w))
            m, o = mp[rows, cols].mean(), mr[rows, cols].mean()
            num += (o - m) ** 2
            den += o ** 2 + m ** 2
    return 1.0 if den == 0 else 1.0 - num / den


def _brute_min_scale(p, r, valid, tau):
    for n in range(1, 2 * max(p.shape), 2):
        if _brute_fss(p, r, valid, tau, n) >= 0.5:
            return n
    return None


def _brute_displacement(p, r, valid, tau, cell_km=11.0):
    h, w = p.shape
    mp, mr = (p >= tau) & valid, (r >= tau) & valid
    if not mp.any() or not mr.any():
        return None
    limit = min(h, w) // 4
    best = None
    for dy in range(-limit, limit + 1):
        for dx in range(-limit, limit + 1):
            overlap = 0
            for i in range(h):
                for j in range(w):
                    if 0 <= i + dy < h and 0 <= j + dx < w and mp[i + dy, j + dx] and mr[i, j]:
                        overlap += 1
            key = (-overlap, dy * dy + dx * dx, dy, dx)
            if best is None or key < best:
                best = key
    return math.hypot(best[2], best[3]) * cell_km


def _brute_decomposition(p, r, valid, tau):
    sums = {"hit": 0.0, "miss": 0.0, "false_alarm": 0.0, "dry_dry": 0.0}
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if not valid[i, j]:
                continue
            wet_p, wet_r = p[i, j] > tau, r[i, j] > tau
            if wet_p and wet_r:
                name = "hit"
            elif wet_r:
                name = "miss"
            elif wet_p:
                name = "false_alarm"
            else:
                name = "dry_dry"
            sums[name] += (p[i, j] - r[i, j]) ** 2
    total = sum(sums.values())
    return {k: v / total for k, v in sums.items()}


def _brute_binned_rmse(p, r, valid, edges):
    errors = {}
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if not valid[i, j]:
                continue
            ref = r[i, j]
            if ref <= edges[0]:
                label = f"{edges[0]:g}"
            elif ref > edges[-1]:
                label = f">{edges[-1]:g}"
            else:
                k = next(k for k in range(1, len(edges)) if ref <= edges[k])
                label = f"({edges[k - 1]:g},{edges[k]:g}]"
            errors.setdefault(label, []).append((p[i, j] - ref) ** 2)
    return {label: math.sqrt(sum(v) / len(v)) for label, v in errors.items()}


def _random_pair(seed, size=16):
    """Zero-inflated prediction and reference with a few invalid reference cells."""
    rng = np.random.default_rng(seed)
    p = rng.gamma(0.6, 5.0, size=(size, size)) * (rng.random((size, size)) < 0.5)
    r = rng.gamma(0.6, 5.0, size=(size, size)) * (rng.random((size, size)) < 0.5)
    r[rng.random((size, size)) < 0.05] = np.nan
    return p, r, np.nan_to_num(r), np.isfinite(r)


@pytest.mark.fast
class TestPointErrors:
    """RMSE, MAE and collocated correlation."""

    def test_rmse_mae(self) -> None:
        rmse, mae = rmse_mae(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0, 0.0], [3.0, 6.0]]))
        assert rmse == pytest.approx(math.sqrt(2.0))
        assert mae == pytest.approx(1.0)

    def test_joint_mask_excludes_invalid(self) -> None:
        spec = _spec(1, 3)
        ref = GridField.from_array(spec, np.array([[1.0, NODATA, 1.0]]))
        assert rmse_mae(np.array([[1.0, 50.0, 2.0]]), ref) == pytest.approx((math.sqrt(0.5), 0.5))

    def test_empty_joint_mask(self) -> None:
        with pytest.raises(EmptyReductionError):
            rmse_mae(np.full((2, 2), np.nan), np.zeros((2, 2)))

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            rmse_mae(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_gauge_errors_skip_missing(self) -> None:
        spec = _spec(2, 2)
        gauges = [_gauge(spec, 0, 0, 3.0), _gauge(spec, 1, 1, NODATA)]
        assert rmse_mae_gauges(np.ones((2, 2)), gauges) == (2.0, 2.0)
        with pytest.raises(EmptyReductionError):
            rmse_mae_gauges(np.ones((2, 2)), gauges[1:])

    def test_pearson_collocated(self) -> None:
        spec = _spec(3, 3)
        radar = np.array([[1.0, 2.0, 0.0], [3.0, 0.0, 0.0], [0.0, 0.0, 4.0]])
        pred = 2.0 * radar + 1.0
        gauges = [_gauge(spec, 0, 0, 1.0), _gauge(spec, 0, 1, 2.0), _gauge(spec, 1, 0, 3.0), _gauge(spec, 1, 1, 5.0)]
        assert pearson_collocated(pred, radar, gauges) == pytest.approx(1.0)

    def test_pearson_undefined_when_dry(self) -> None:
        spec = _spec(2, 2)
        assert pearson_collocated(np.ones((2, 2)), np.zeros((2, 2)), [_gauge(spec, 0, 0, 1.0)]) is None


@pytest.mark.fast
class TestFSS:
    """Fractions skill score and the window convention."""

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_matches_brute_force(self, n) -> None:
        rng = np.random.default_rng(n)
        p = rng.gamma(0.5, 4.0, size=(9, 7))
        r = rng.gamma(0.5, 4.0, size=(9, 7))
        r[0, 3] = np.nan
        assert fss(p, r, 1.0, n) == pytest.approx(_brute_fss(p, np.nan_to_num(r), np.isfinite(r), 1.0, n))

    def test_identical_fields(self) -> None:
        field = np.random.default_rng(0).gamma(0.5, 4.0, size=(6, 6))
        assert fss(field, field, 2.5, 3) == 1.0

    def test_both_dry(self) -> None:
        assert fss(np.zeros((4, 4)), np.zeros((4, 4)), 1.0, 3) == 1.0

    def test_disjoint_at_single_cell(self) -> None:
        p = np.zeros((4, 4))
        r = np.zeros((4, 4))
        p[0, 0] = r[3, 3] = 5.0
        assert fss(p, r, 1.0, 1) == 0.0

    def test_threshold_is_inclusive(self) -> None:
        p = np.full((2, 2), 1.0)
        assert fss(p, p.copy(), 1.0, 1) == 1.0
        assert fss(p, np.zeros((2, 2)), 1.0, 1) == 0.0

    def test_min_useful_scale(self) -> None:
        field = np.random.default_rng(1).gamma(0.5, 4.0, size=(6, 6))
        assert min_useful_scale(field, field, 1.0) == (1, 11.0)

    def test_min_useful_scale_missing(self) -> None:
        p = np.zeros((4, 4))
        assert min_useful_scale(p, np.full((4, 4), 5.0), 1.0) is None


@pytest.mark.fast
class TestErrorAnalysis:
    """Conditional errors, displacement, decomposition and binning."""

    def test_displacement_of_shifted_blob(self) -> None:
        ref = np.zeros((16, 16))
        pred = np.zeros((16, 16))
        ref[5:8, 5:8] = 3.0
        pred[7:10, 6:9] = 3.0
        assert displacement(pred, ref, 1.0) == pytest.approx(math.sqrt(5.0) * 11.0)

    def test_displacement_zero_when_aligned(self) -> None:
        ref = np.zeros((8, 8))
        ref[2:4, 2:4] = 2.0
        assert displacement(ref, ref.copy(), 1.0, cell_size_km=4.0) == 0.0

    def test_displacement_undefined(self) -> None:
        assert displacement(np.zeros((8, 8)), np.ones((8, 8)), 1.0) is None

    def test_conditional_rmse_bias(self) -> None:
        p = np.array([[2.0, 0.0, 5.0]])
        r = np.array([[1.0, 3.0, 5.0]])
        rmse, bias = conditional_rmse_bias(p, r, 0.5)
        assert rmse == pytest.approx(math.sqrt(0.5))
        assert bias == pytest.approx(0.5)
        assert conditional_rmse_bias(p, r, 10.0) is None

    def test_decomposition_shares(self) -> None:
        rng = np.random.default_rng(2)
        p = rng.gamma(0.3, 3.0, size=(10, 10))
        r = rng.gamma(0.3, 3.0, size=(10, 10))
        dec = mse_decomposition(p, r)
        assert sum(dec[k] for k in ("hit", "miss", "false_alarm", "dry_dry")) == pytest.approx(1.0)
        assert not dec["zero_error"]

    def test_decomposition_categories(self) -> None:
        p = np.array([[0.0, 2.0, 1.0]])
        r = np.array([[1.0, 0.0, 1.0]])
        dec = mse_decomposition(p, r)
        assert dec["miss"] == pytest.approx(0.2)
        assert dec["false_alarm"] == pytest.approx(0.8)
        assert dec["hit"] == 0.0

    def test_decomposition_zero_error(self) -> None:
        dec = mse_decomposition(np.ones((2, 2)), np.ones((2, 2)))
        assert dec["zero_error"]
        assert dec["hit"] == 0.0

    def test_intensity_bins(self) -> None:
        labels = [label for label, _, _ in intensity_bins((0.0, 1.0, 5.0, 10.0, 25.0))]
        assert labels == ["0", "(0,1]", "(1,5]", "(5,10]", "(10,25]", ">25"]

    def test_binned_rmse_skips_empty_bins(self) -> None:
        out = intensity_binned_rmse(np.array([[1.0, 4.0]]), np.array([[0.0, 2.0]]))
        assert out == {"0": 1.0, "(1,5]": 2.0}


@pytest.mark.fast
class TestAggregation:
    """Per-sample evaluation and the fold accumulator."""

    def test_config_validation(self) -> None:
        with pytest.raises(ConfigError):
            MetricConfig(fss_thresholds=(5.0, 1.0))
        with pytest.raises(ConfigError):
            MetricConfig(aggregation="median")

    def test_no_radar_leaves_grid_metrics_undefined(self) -> None:
        spec = _spec(3, 3)
        frame = _frame(spec, None, [_gauge(spec, 1, 1, 2.0)])
        out = evaluate_sample(np.zeros((3, 3)), frame, MetricConfig())
        assert out["rmse_g"] == 2.0
        assert out["rmse_r"] is None and out["fss_r"] is None

    def test_evaluate_sample_headline(self) -> None:
        spec = _spec()
        radar = np.random.default_rng(3).gamma(0.5, 4.0, size=spec.shape)
        frame = _frame(spec, radar, [_gauge(spec, 2, 2, radar[2, 2])])
        out = evaluate_sample(radar, frame, MetricConfig(fss_neighborhood=3))
        assert out["rmse_r"] == 0.0 and out["rmse_g"] == 0.0
        assert out["fss_r"] == 1.0
        assert set(HEADLINE) <= set(out)
        assert out["disp_km@1"] in (0.0, None)

    def test_per_sample_versus_pooled(self) -> None:
        spec = _spec(2, 2)
        radar_a = np.zeros((2, 2))
        radar_b = np.array([[0.0, NODATA], [NODATA, NODATA]])
        frames = [_frame(spec, radar_a), _frame(spec, radar_b)]
        preds = [np.ones((2, 2)), np.full((2, 2), 3.0)]

        per_sample = MetricAccumulator(MetricConfig(error_analysis=False))
        pooled = MetricAccumulator(MetricConfig(error_analysis=False, aggregation="pooled"))
        for pred, frame in zip(preds, frames):
            per_sample.add(pred, frame)
            pooled.add(pred, frame)
        assert per_sample.result().metrics["rmse_r"] == pytest.approx(2.0)
        assert pooled.result().metrics["rmse_r"] == pytest.approx(math.sqrt(13.0 / 5.0))

    def test_order_independent(self) -> None:
        spec = _spec()
        rng = np.random.default_rng(4)
        pairs = [(rng.gamma(0.5, 4.0, size=spec.shape), _frame(spec, rng.gamma(0.5, 4.0, size=spec.shape))) for _ in range(3)]
        forward, backward = MetricAccumulator(), MetricAccumulator()
        for pred, frame in pairs:
            forward.add(pred, frame)
        for pred, frame in reversed(pairs):
            backward.add(pred, frame)
        a, b = forward.result().metrics, backward.result().metrics
        for key in HEADLINE:
            assert a[key] == pytest.approx(b[key]) if a[key] is not None else b[key] is None

    def test_undefined_metrics_are_counted(self) -> None:
        spec = _spec(2, 2)
        acc = MetricAccumulator(MetricConfig(error_analysis=False))
        acc.add(np.zeros((2, 2)), _frame(spec, np.zeros((2, 2))))
        report = acc.result()
        assert report.metrics["r_coll"] is None
        assert report.excluded["r_coll"] == 1

    def test_horizon_rmse(self) -> None:
        spec = _spec(2, 2)
        acc = MetricAccumulator(MetricConfig(error_analysis=False))
        acc.add(np.ones((2, 2)), _frame(spec, np.zeros((2, 2))), horizon=0)
        acc.add(np.full((2, 2), 2.0), _frame(spec, np.zeros((2, 2))), horizon=3)
        assert acc.result().horizon_rmse == {0: 1.0, 3: 2.0}

    def test_report_files(self, tmp_path) -> None:
        spec = _spec(2, 2)
        acc = MetricAccumulator(MetricConfig(error_analysis=False))
        acc.add(np.ones((2, 2)), _frame(spec, np.zeros((2, 2)), [_gauge(spec, 0, 0, 1.0)]))
        report = acc.result({"model": "satellite"})
        report.write_json(str(tmp_path / "report.json"))
        report.write_csv(str(tmp_path / "report.csv"), "sat")

        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["schema"] == REPORT_SCHEMA
        assert doc["header"]["model"] == "satellite"
        assert doc["counts"]["samples"] == 1
        row = pd.read_csv(tmp_path / "report.csv").iloc[0]
        assert row["run"] == "sat"
        assert row["rmse_r"] == pytest.approx(1.0)
        assert row["n_samples"] == 1


@pytest.mark.unit
class TestBruteForceOracles:
    """Grid metrics against cell-by-cell reference loops on random fields."""

    @pytest.mark.parametrize("seed", range(50))
    def test_fss(self, seed) -> None:
        p, r, r0, valid = _random_pair(seed)
        for n in (1, 4, 7):
            assert fss(p, r, 1.0, n) == pytest.approx(_brute_fss(p, r0, valid, 1.0, n), abs=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_min_useful_scale(self, seed) -> None:
        p, r, r0, valid = _random_pair(seed)
        expected = _brute_min_scale(p, r0, valid, 5.0)
        got = min_useful_scale(p, r, 5.0)
        assert (None if got is None else got[0]) == expected

    @pytest.mark.parametrize("seed", range(50))
    def test_displacement(self, seed) -> None:
        p, r, r0, valid = _random_pair(seed)
        assert displacement(p, r, 2.5) == pytest.approx(_brute_displacement(p, r0, valid, 2.5), abs=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_mse_decomposition(self, seed) -> None:
        p, r, r0, valid = _random_pair(seed)
        got = mse_decomposition(p, r, 0.1)
        expected = _brute_decomposition(p, r0, valid, 0.1)
        assert not got["zero_error"]
        for name, share in expected.items():
            assert got[name] == pytest.approx(share, abs=1e-9)
        assert sum(got[k] for k in expected) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(50))
    def test_intensity_binned_rmse(self, seed) -> None:
        p, r, r0, valid = _random_pair(seed)
        edges = (0.0, 1.0, 5.0, 10.0, 25.0)
        got = intensity_binned_rmse(p, r, edges)
        expected = _brute_binned_rmse(p, r0, valid, edges)
        assert set(got) == set(expected)
        for label, value in expected.items():
            assert got[label] == pytest.approx(value, abs=1e-9)
