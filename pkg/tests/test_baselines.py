import numpy as np
import pytest
from scipy.spatial.distance import cdist

from baselines import (
    BASELINES,
    BaselineConfig,
    ConvRegressor,
    QuantileMap,
    VariogramModel,
    crps_gaussian,
    fit_emos,
    fit_linear,
    fit_variogram,
    gwr,
    idw,
    kriging,
    kriging_weights,
    make_baseline,
    set_convolution,
)
from gridio import NODATA, GaugeObservation, GridField, GridSpec, SampleFrame
from sampler import SplitConfig
from utils.errors import ConfigError, InsufficientDataError


def _spec(h=8, w=8):
    return GridSpec(h, w, origin=(40.0, -100.0), resolution_deg=0.1)


def _gauge(spec, row, col, value, sid="g", t=0):
    lat, lon = spec.cell_center(row, col)
    return GaugeObservation(row, col, lat, lon, float(value), sid, t)


def _scattered(spec, n, values, seed=0):
    rng = np.random.default_rng(seed)
    cells = rng.choice(spec.height * spec.width, size=n, replace=False)
    return [_gauge(spec, int(c // spec.width), int(c % spec.width), v, f"g{i}") for i, (c, v) in enumerate(zip(cells, values))]


def _frame(spec, seed=0, n_gauges=40, timestamp=0):
    rng = np.random.default_rng(seed)
    sat = rng.gamma(0.6, 2.0, size=spec.shape)
    gauges = []
    for i, c in enumerate(rng.choice(spec.height * spec.width, size=n_gauges, replace=False)):
        row, col = int(c // spec.width), int(c % spec.width)
        gauges.append(_gauge(spec, row, col, 1.5 * sat[row, col] + 0.2, f"g{i}", timestamp))
    return SampleFrame(
        timestamp,
        GridField.from_array(spec, sat),
        GridField.from_array(spec, rng.uniform(0, 2000, size=spec.shape)),
        tuple(gauges),
        None,
        2021,
    )


@pytest.mark.fast
class TestIDW:
    """Inverse distance weighting."""

    def test_gauge_cells_are_exact(self) -> None:
        spec = _spec()
        gauges = _scattered(spec, 6, [1.0, 4.0, 0.0, 2.5, 7.0, 3.0])
        field = idw(gauges, spec)
        for g in gauges:
            assert field.values[g.row, g.col] == g.value

    def test_single_gauge_fills_grid(self) -> None:
        spec = _spec(4, 5)
        field = idw([_gauge(spec, 1, 1, 3.0)], spec)
        assert np.allclose(field.values, 3.0)

    def test_estimates_are_convex(self) -> None:
        spec = _spec()
        gauges = _scattered(spec, 10, np.linspace(1.0, 5.0, 10), seed=2)
        field = idw(gauges, spec, k_neighbors=4)
        assert field.values.min() >= 1.0 and field.values.max() <= 5.0

    def test_missing_gauges_ignored(self) -> None:
        spec = _spec(3, 3)
        field = idw([_gauge(spec, 0, 0, 2.0), _gauge(spec, 2, 2, NODATA)], spec)
        assert np.allclose(field.values, 2.0)

    def test_no_gauges(self) -> None:
        with pytest.raises(InsufficientDataError):
            idw([], _spec())


@pytest.mark.fast
class TestVariogram:
    """Variogram models and fitting."""

    def test_spherical_shape(self) -> None:
        vg = VariogramModel("spherical", nugget=0.2, sill=1.0, range_cells=4.0)
        assert vg(0.0) == 0.0
        assert vg(4.0) == pytest.approx(1.0)
        assert vg(10.0) == pytest.approx(1.0)
        assert vg(2.0) == pytest.approx(0.2 + 0.8 * (0.75 - 0.0625))

    def test_exponential_practical_range(self) -> None:
        vg = VariogramModel("exponential", nugget=0.0, sill=2.0, range_cells=5.0)
        assert vg(5.0) == pytest.approx(2.0 * (1 - np.exp(-3.0)))

    def test_rejects_bad_parameters(self) -> None:
        with pytest.raises(ConfigError):
            VariogramModel("spherical", nugget=2.0, sill=1.0, range_cells=3.0)
        with pytest.raises(ConfigError):
            VariogramModel("gaussian", nugget=0.0, sill=1.0, range_cells=3.0)
        with pytest.raises(ConfigError):
            VariogramModel("spherical", nugget=0.0, sill=1.0, range_cells=0.0)

    def test_fit_needs_ten_gauges(self) -> None:
        spec = _spec()
        with pytest.raises(InsufficientDataError):
            fit_variogram(_scattered(spec, 9, np.arange(9.0)))

    def test_fit_constant_field(self) -> None:
        spec = _spec()
        vg = fit_variogram(_scattered(spec, 12, [3.0] * 12))
        assert vg.sill == 0.0

    def test_fit_returns_valid_model(self) -> None:
        spec = _spec(16, 16)
        rng = np.random.default_rng(3)
        gauges = _scattered(spec, 60, rng.gamma(1.0, 2.0, size=60), seed=3)
        vg = fit_variogram(gauges)
        assert vg.sill >= vg.nugget >= 0
        assert vg.range_cells > 0


@pytest.mark.fast
class TestKriging:
    """Ordinary kriging."""

    def test_weights_sum_to_one(self) -> None:
        coords = np.array([[0.0, 0.0], [0.0, 3.0], [4.0, 1.0], [2.0, 2.0]])
        vg = VariogramModel("spherical", 0.1, 1.0, 5.0)
        weights = kriging_weights(coords, vg, np.array([[1.0, 1.0], [3.0, 0.0], [7.0, 7.0]]))
        assert np.allclose(weights.sum(axis=1), 1.0)

    def test_matches_dense_solve(self) -> None:
        spec = _spec(6, 6)
        gauges = _scattered(spec, 8, np.linspace(0.5, 4.0, 8), seed=4)
        vg = VariogramModel("exponential", 0.05, 1.5, 4.0)
        field = kriging(gauges, vg, spec)

        coords = np.array([(g.row, g.col) for g in gauges], dtype=float)
        values = np.array([g.value for g in gauges])
        n = len(gauges)
        a = np.ones((n + 1, n + 1))
        a[:n, :n] = vg(cdist(coords, coords))
        a[n, n] = 0.0
        for cell in [(0, 0), (3, 4), (5, 1)]:
            b = np.ones(n + 1)
            b[:n] = vg(cdist(coords, np.array([cell], dtype=float)))[:, 0]
            expected = values @ np.linalg.solve(a, b)[:n]
            assert field.values[cell] == pytest.approx(expected, rel=1e-8)

    def test_exact_at_gauges_without_nugget(self) -> None:
        spec = _spec(6, 6)
        gauges = _scattered(spec, 7, [0.0, 1.0, 3.0, 2.0, 5.0, 0.5, 1.5], seed=5)
        field = kriging(gauges, VariogramModel("spherical", 0.0, 2.0, 6.0), spec)
        for g in gauges:
            assert field.values[g.row, g.col] == pytest.approx(g.value, abs=1e-6)

    def test_subsamples_above_cap(self) -> None:
        spec = _spec(6, 6)
        gauges = _scattered(spec, 20, np.linspace(1.0, 2.0, 20), seed=6)
        field = kriging(gauges, VariogramModel("spherical", 0.1, 1.0, 4.0), spec, cap=5, rng=np.random.default_rng(0))
        assert np.all(np.isfinite(field.values))

    def test_no_gauges(self) -> None:
        with pytest.raises(InsufficientDataError):
            kriging([], VariogramModel("spherical", 0.0, 1.0, 1.0), _spec())


@pytest.mark.fast
class TestGWR:
    """Geographically weighted regression."""

    def test_recovers_exact_linear_relation(self) -> None:
        spec = _spec(10, 10)
        rng = np.random.default_rng(7)
        sat = rng.uniform(0.0, 5.0, size=spec.shape)
        elev = rng.uniform(0.0, 2000.0, size=spec.shape)
        truth = 1.0 + 2.0 * sat + 0.5 * elev / 2000.0
        cells = rng.choice(100, size=40, replace=False)
        gauges = [_gauge(spec, int(c // 10), int(c % 10), truth[c // 10, c % 10]) for c in cells]
        field = gwr(gauges, sat, elev, spec, bandwidth_cells=3.0)
        assert np.allclose(field.values, truth, atol=1e-6)

    def test_clamped_at_zero(self) -> None:
        spec = _spec(6, 6)
        sat = np.tile(np.linspace(0.0, 5.0, 6), (6, 1))
        gauges = [_gauge(spec, r, c, max(0.0, 3.0 - sat[r, c])) for r in range(0, 6, 2) for c in range(6)]
        field = gwr(gauges, sat, np.zeros(spec.shape), spec)
        assert field.values.min() >= 0.0

    def test_no_gauges(self) -> None:
        spec = _spec()
        with pytest.raises(InsufficientDataError):
            gwr([], np.zeros(spec.shape), np.zeros(spec.shape), spec)


@pytest.mark.fast
class TestDistributionCorrection:
    """Quantile mapping, EMOS and linear regression."""

    def test_quantile_map_doubles(self) -> None:
        sat = np.random.default_rng(8).gamma(1.0, 3.0, size=2000) + 0.2
        qm = QuantileMap.fit(sat, 2.0 * sat)
        assert qm(np.median(sat)) == pytest.approx(2.0 * np.median(sat), rel=0.02)
        assert qm(0.0) == 0.0

    def test_quantile_map_halves_in_both_tails(self) -> None:
        gauge = np.random.default_rng(10).gamma(1.0, 3.0, size=2000) + 0.2
        qm = QuantileMap.fit(2.0 * gauge, gauge)
        top, bottom = 2.0 * gauge.max(), 0.5 * gauge.min()
        assert top > qm.sat_quantiles[-1] and bottom < qm.sat_quantiles[0]
        assert qm(top) == pytest.approx(gauge.max(), rel=1e-9)
        assert qm(bottom) == pytest.approx(0.25 * gauge.min(), rel=1e-9)

    def test_quantile_map_is_monotone(self) -> None:
        rng = np.random.default_rng(9)
        qm = QuantileMap.fit(rng.gamma(1.0, 3.0, size=500), rng.gamma(1.0, 4.0, size=500))
        out = qm(np.linspace(0.0, 60.0, 200))
        assert np.all(np.diff(out) >= -1e-12)

    def test_quantile_map_needs_pairs(self) -> None:
        with pytest.raises(InsufficientDataError):
            QuantileMap.fit(np.ones(50), np.ones(50))

    def test_quantile_map_identity_without_wet_pairs(self) -> None:
        qm = QuantileMap.fit(np.zeros(200), np.zeros(200))
        assert qm.is_identity
        assert qm(3.5) == 3.5

    def test_linear_fit_exact(self) -> None:
        sat = np.linspace(0.0, 10.0, 30)
        coeffs = fit_linear(sat, 0.5 + 1.5 * sat)
        assert coeffs.a == pytest.approx(0.5)
        assert coeffs.b == pytest.approx(1.5)
        assert coeffs.d == 0.0

    def test_crps_standard_normal_at_mean(self) -> None:
        expected = 2.0 / np.sqrt(2.0 * np.pi) - 1.0 / np.sqrt(np.pi)
        assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(expected)

    def test_emos_does_not_worsen_crps(self) -> None:
        rng = np.random.default_rng(10)
        sat = rng.gamma(1.0, 2.0, size=300)
        obs = 0.3 + 1.2 * sat + rng.normal(0.0, 0.2 + 0.3 * sat)
        start, fitted = fit_linear(sat, obs), fit_emos(sat, obs)

        def score(c):
            return np.mean(crps_gaussian(c.mean(sat), np.sqrt(c.variance(sat)), obs))

        assert score(fitted) <= score(start) + 1e-9


@pytest.mark.fast
class TestSetConvolution:
    """Density-normalized set convolution."""

    def test_empty_context(self) -> None:
        value, density = set_convolution([], _spec(3, 3))
        assert not value.any() and not density.any()

    def test_single_gauge(self) -> None:
        spec = _spec(5, 5)
        value, density = set_convolution([_gauge(spec, 2, 2, 4.0)], spec)
        assert np.allclose(value, 4.0)
        assert density[2, 2] == pytest.approx(1.0)
        assert density[0, 0] < density[1, 1]


@pytest.mark.fast
class TestRegistry:
    """Uniform baseline wrappers."""

    def test_names(self) -> None:
        assert set(BASELINES) == {
            "satellite", "idw", "kriging", "gwr", "quantile_map", "emos", "linear_regression", "conv_regressor",
        }

    def test_unknown_name(self) -> None:
        with pytest.raises(ConfigError):
            make_baseline("persistence")

    def test_config_validation(self) -> None:
        with pytest.raises(ConfigError):
            BaselineConfig(variogram_kind="linear")

    def test_satellite_is_identity(self) -> None:
        frame = _frame(_spec())
        assert make_baseline("satellite").predict(frame) is frame.satellite

    def test_idw_respects_context(self) -> None:
        frame = _frame(_spec())
        field = make_baseline("idw").predict(frame, context=[3])
        assert np.allclose(field.values, frame.gauges[3].value)

    def test_kriging_falls_back_to_idw_with_few_gauges(self) -> None:
        frame = _frame(_spec())
        kriged = make_baseline("kriging").predict(frame, context=[0, 1, 2])
        expected = idw([frame.gauges[i] for i in (0, 1, 2)], frame.spec)
        assert np.array_equal(kriged.values, expected.values)

    def test_kriging_wrapper_clamps_overshoot(self, monkeypatch) -> None:
        """Raw kriging may dip below zero; the wrapper returns dry cells instead."""
        frame = _frame(_spec())
        raw = np.linspace(-2.0, 2.0, 64).reshape(8, 8)
        monkeypatch.setattr("baselines.kriging", lambda *args, **kwargs: GridField.from_array(frame.spec, raw))
        field = make_baseline("kriging").predict(frame)
        assert field.values.min() == 0.0
        assert np.array_equal(field.values, np.maximum(raw, 0.0))

    @pytest.mark.parametrize("name", ["idw", "kriging", "gwr", "quantile_map", "emos", "linear_regression"])
    def test_outputs_are_non_negative(self, name) -> None:
        """Every wrapper returns rates at or above zero."""
        frames = [_frame(_spec(), seed=s, timestamp=s) for s in range(3)]
        baseline = make_baseline(name).fit(frames)
        field = baseline.predict(frames[0], context=list(range(0, 40, 2)))
        assert np.all(field.values[field.valid] >= 0.0)

    def test_linear_regression_fits_training_pairs(self) -> None:
        frames = [_frame(_spec(), seed=s, timestamp=s) for s in range(3)]
        baseline = make_baseline("linear_regression").fit(frames)
        assert baseline.coeffs.b == pytest.approx(1.5)
        field = baseline.predict(frames[0])
        assert np.allclose(field.values, 0.2 + 1.5 * frames[0].satellite.values)


@pytest.mark.unit
class TestConvRegressor:
    """Set-convolution network baseline."""

    def test_output_shape_and_sign(self) -> None:
        frame = _frame(_spec(7, 9))
        out = ConvRegressor(hidden=4, seed=0).predict(frame)
        assert out.shape == (7, 9)
        assert np.all(out >= 0)

    def test_short_fit_stays_finite(self) -> None:
        frames = [_frame(_spec(), seed=s, timestamp=s) for s in range(3)]
        split_cfg = SplitConfig(min_context=1, max_context=100, min_rainy_targets=1)
        history = ConvRegressor(hidden=4, seed=0).fit(frames, steps=5, lr=1e-2, split_cfg=split_cfg)
        assert 0 < len(history) <= 5
        assert np.all(np.isfinite(history))
