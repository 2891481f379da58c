"""
Classical refinement baselines.

Interpolators (IDW, ordinary kriging, GWR) work from the context gauges of a
single frame; distribution corrections (quantile mapping, EMOS, linear
regression) are fitted on satellite/gauge pairs from training frames; the
conv regressor is a small network over set-convolution channels. Every
baseline is wrapped in a ``Baseline`` with the same ``fit`` / ``predict``
signature so the evaluator can treat them uniformly, and every wrapper
returns non-negative rates. GWR, EMOS and quantile mapping clamp at zero
themselves, the conv regressor has a softplus mean head and the kriging
wrapper clamps the raw kriging estimate.

Distances are measured in grid cells.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve
from scipy.optimize import curve_fit, minimize_scalar
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist
from scipy.stats import norm

import tensor as T
from gridio import ELEVATION_SCALE_M, GaugeObservation, GridField, GridSpec, SampleFrame, rasterize_gauges
from nsp import Conv2d
from objective import gaussian_nll, weighted_gauge_mse
from sampler import SplitConfig, frame_rng, split_context_target
from tensor import Tensor
from train import AdamWState, TrainConfig, clip_grad_norm, optimizer_step
from utils import logger
from utils.errors import (
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    SampleRejected,
    SingularSystemError,
)
from utils.seeding import make_rng

MIN_VARIOGRAM_GAUGES = 10
MIN_QUANTILE_PAIRS = 100
KRIGING_JITTER = 1e-8
SETCONV_EPS = 1e-6


@dataclass
class BaselineConfig:
    idw_power: float = 2.0
    idw_neighbors: int = 12
    variogram_kind: str = "spherical"
    variogram_lags: int = 12
    kriging_cap: int = 2000
    gwr_bandwidth: float = 8.0
    gwr_min_local: int = 5
    wet_threshold: float = 0.1
    setconv_length_scale: float = 2.0
    conv_hidden: int = 16
    conv_steps: int = 200
    conv_lr: float = 3e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variogram_kind not in ("spherical", "exponential"):
            raise ConfigError(f"unknown variogram kind {self.variogram_kind!r}")
        if self.idw_neighbors < 1 or self.kriging_cap < 1:
            raise ConfigError("idw_neighbors and kriging_cap must be positive")


def _valid_gauges(gauges: Sequence[GaugeObservation]) -> list:
    return [g for g in gauges if not g.is_missing]


def _points(gauges: Sequence[GaugeObservation]) -> tuple:
    """(coords (n, 2) in cells, values (n,)) of the non-missing gauges."""
    valid = _valid_gauges(gauges)
    coords = np.array([(g.row, g.col) for g in valid], dtype=np.float64).reshape(-1, 2)
    values = np.array([g.value for g in valid], dtype=np.float64)
    return coords, values


def _cell_coords(spec: GridSpec) -> np.ndarray:
    rows, cols = np.indices(spec.shape)
    return np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64)


# ---------------------------------------------------------------------------
# inverse distance weighting


def idw(gauges: Sequence[GaugeObservation], spec: GridSpec, power: float = 2.0, k_neighbors: int = 12) -> GridField:
    """
    Inverse-distance weighted interpolation over the k nearest gauges.

    Cells holding a gauge take that gauge's value (averaged if several).

    Raises:
        InsufficientDataError: No usable gauge
    """
    coords, values = _points(gauges)
    if len(values) == 0:
        raise InsufficientDataError("idw needs at least one gauge")
    k = min(k_neighbors, len(values))
    tree = cKDTree(coords)
    dist, idx = tree.query(_cell_coords(spec), k=list(range(1, k + 1)))

    with np.errstate(divide="ignore"):
        weights = np.where(dist > 0, dist ** (-power), 0.0)
    total = weights.sum(axis=1)
    estimate = np.divide((weights * values[idx]).sum(axis=1), total, out=np.zeros_like(total), where=total > 0)
    field = estimate.reshape(spec.shape)

    exact, mask = rasterize_gauges(_valid_gauges(gauges), spec)
    return GridField.from_array(spec, np.where(mask, exact, field))


# ---------------------------------------------------------------------------
# variogram and ordinary kriging


@dataclass(frozen=True)
class VariogramModel:
    """
    Semivariogram with a nugget, a total sill and a practical range in cells.

    gamma(0) = 0; for h > 0 the nugget jumps in and the structured part
    ``sill - nugget`` rises to the sill at the practical range.
    """

    kind: str
    nugget: float
    sill: float
    range_cells: float

    def __post_init__(self) -> None:
        if self.kind not in ("spherical", "exponential"):
            raise ConfigError(f"unknown variogram kind {self.kind!r}")
        if not (self.sill >= self.nugget >= 0):
            raise ConfigError(f"variogram needs sill >= nugget >= 0, got {self.sill}, {self.nugget}")
        if self.range_cells <= 0:
            raise ConfigError(f"variogram range must be positive, got {self.range_cells}")

    @property
    def partial_sill(self) -> float:
        return self.sill - self.nugget

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        structured = _variogram_shape(self.kind, h, self.partial_sill, self.range_cells)
        return np.where(h > 0, structured + self.nugget, 0.0)


def _variogram_shape(kind: str, h, psill, range_cells):
    if kind == "exponential":
        return psill * (1.0 - np.exp(-3.0 * h / range_cells))
    ratio = np.minimum(h / range_cells, 1.0)
    return psill * (1.5 * ratio - 0.5 * ratio ** 3)


def empirical_variogram(coords: np.ndarray, values: np.ndarray, n_lags: int = 12) -> tuple:
    """Binned semivariance over log-spaced lags; empty bins are dropped."""
    dist = pdist(coords)
    semi = 0.5 * pdist(values[:, None], metric="sqeuclidean")
    positive = dist > 0
    dist, semi = dist[positive], semi[positive]
    if dist.size == 0:
        return np.zeros(0), np.zeros(0)
    edges = np.geomspace(dist.min(), dist.max() * (1 + 1e-9), n_lags + 1)
    which = np.clip(np.searchsorted(edges, dist, side="right") - 1, 0, n_lags - 1)
    counts = np.bincount(which, minlength=n_lags)
    sums = np.bincount(which, weights=semi, minlength=n_lags)
    lag_sums = np.bincount(which, weights=dist, minlength=n_lags)
    used = counts > 0
    return lag_sums[used] / counts[used], sums[used] / counts[used]


def fit_variogram(gauges: Sequence[GaugeObservation], kind: str = "spherical", n_lags: int = 12) -> VariogramModel:
    """
    Least-squares variogram fit on the empirical semivariogram.

    Falls back to an exponential model with zero nugget when the fit fails.

    Raises:
        InsufficientDataError: Fewer than 10 gauges
    """
    coords, values = _points(gauges)
    if len(values) < MIN_VARIOGRAM_GAUGES:
        raise InsufficientDataError(f"variogram fit needs {MIN_VARIOGRAM_GAUGES} gauges, got {len(values)}")
    lags, semi = empirical_variogram(coords, values, n_lags)
    max_lag = float(lags.max()) if lags.size else 1.0
    variance = float(np.var(values))
    if variance == 0.0 or lags.size < 3:
        return VariogramModel(kind, 0.0, variance, max(max_lag / 2.0, 1.0))

    def model(h, psill, range_cells, nugget):
        return _variogram_shape(kind, h, psill, range_cells) + nugget

    p0 = [max(variance - semi.min(), variance * 0.1), max_lag / 2.0, max(semi.min(), 0.0)]
    bounds = ([0.0, 1e-3, 0.0], [10.0 * variance + 1e-12, 10.0 * max_lag, 10.0 * variance + 1e-12])
    p0 = list(np.clip(p0, bounds[0], bounds[1]))
    try:
        params, _ = curve_fit(model, lags, semi, p0=p0, bounds=bounds, maxfev=5000)
        if not np.all(np.isfinite(params)):
            raise RuntimeError("non-finite variogram parameters")
        psill, range_cells, nugget = (float(v) for v in params)
        return VariogramModel(kind, nugget, nugget + psill, range_cells)
    except (RuntimeError, ValueError) as e:
        logger.debug(f"variogram fit failed ({e}); using exponential fallback")

    try:
        params, _ = curve_fit(
            lambda h, psill, range_cells: _variogram_shape("exponential", h, psill, range_cells),
            lags, semi, p0=p0[:2], bounds=(bounds[0][:2], bounds[1][:2]), maxfev=5000,
        )
        psill, range_cells = float(params[0]), float(params[1])
    except (RuntimeError, ValueError):
        psill, range_cells = variance, max(max_lag / 3.0, 1.0)
    return VariogramModel("exponential", 0.0, psill, range_cells)


def _kriging_matrix(coords: np.ndarray, vg: VariogramModel, jitter: float = 0.0) -> np.ndarray:
    n = len(coords)
    a = np.ones((n + 1, n + 1))
    a[:n, :n] = vg(cdist(coords, coords))
    # nugget-like jitter on the covariance side
    a[np.arange(n), np.arange(n)] -= jitter
    a[n, n] = 0.0
    return a


def _factorize(coords: np.ndarray, vg: VariogramModel) -> tuple:
    """LU factors of the ordinary-kriging system, retried once with jitter."""
    for jitter in (0.0, KRIGING_JITTER):
        a = _kriging_matrix(coords, vg, jitter)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            lu, piv = lu_factor(a, check_finite=False)
        pivots = np.abs(np.diag(lu))
        if np.all(np.isfinite(lu)) and pivots.min() > 1e-12 * max(pivots.max(), 1.0):
            return lu, piv
        logger.debug(f"kriging system singular with jitter {jitter}")
    raise SingularSystemError("ordinary kriging system is singular even after jitter")


def kriging_weights(coords: np.ndarray, vg: VariogramModel, targets: np.ndarray) -> np.ndarray:
    """Ordinary-kriging weights, shape (n_targets, n_gauges); rows sum to 1."""
    lu, piv = _factorize(coords, vg)
    rhs = np.ones((len(coords) + 1, len(targets)))
    rhs[:-1] = vg(cdist(coords, targets))
    return lu_solve((lu, piv), rhs).T[:, :-1]


def kriging(
    gauges: Sequence[GaugeObservation],
    vg: VariogramModel,
    spec: GridSpec,
    cap: int = 2000,
    rng: Optional[np.random.Generator] = None,
    chunk: int = 4096,
) -> GridField:
    """
    Ordinary kriging of the context gauges onto every cell.

    One factorization is shared by all cells. More than ``cap`` gauges are
    randomly subsampled. The estimate is not clamped; negative weights can
    take it below zero.

    Raises:
        InsufficientDataError: No usable gauge
        SingularSystemError: The system stays singular after jitter
    """
    coords, values = _points(gauges)
    if len(values) == 0:
        raise InsufficientDataError("kriging needs at least one gauge")
    if len(values) > cap:
        rng = rng or make_rng(0, "kriging")
        keep = np.sort(rng.choice(len(values), size=cap, replace=False))
        coords, values = coords[keep], values[keep]
        logger.debug(f"kriging subsampled to {cap} gauges")

    lu, piv = _factorize(coords, vg)
    cells = _cell_coords(spec)
    out = np.empty(len(cells))
    for start in range(0, len(cells), chunk):
        block = cells[start:start + chunk]
        rhs = np.ones((len(coords) + 1, len(block)))
        rhs[:-1] = vg(cdist(coords, block))
        weights = lu_solve((lu, piv), rhs, check_finite=False)[:-1]
        out[start:start + chunk] = values @ weights
    return GridField.from_array(spec, out.reshape(spec.shape))


# ---------------------------------------------------------------------------
# geographically weighted regression


def _design(gauges, satellite: np.ndarray, elevation: np.ndarray) -> tuple:
    valid = _valid_gauges(gauges)
    rows = np.array([g.row for g in valid], dtype=np.int64)
    cols = np.array([g.col for g in valid], dtype=np.int64)
    x = np.column_stack([satellite[rows, cols], elevation[rows, cols] / ELEVATION_SCALE_M])
    y = np.array([g.value for g in valid], dtype=np.float64)
    return np.column_stack([rows, cols]).astype(np.float64), x, y


def _global_fit(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    design = np.column_stack([np.ones(len(y)), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


def gwr(
    gauges: Sequence[GaugeObservation],
    satellite: np.ndarray,
    elevation: np.ndarray,
    spec: GridSpec,
    bandwidth_cells: float = 8.0,
    min_local: int = 5,
    ridge: float = 1e-6,
    chunk: int = 2048,
) -> GridField:
    """
    Per-cell weighted least squares of gauge value on [1, satellite, elevation].

    Gaussian kernel weights exp(-d^2 / 2b^2). Covariates are centered on
    their local weighted mean, so the intercept is the weighted gauge mean
    and a ridge is added to the slope system only where it is rank-deficient.
    Cells with fewer than ``min_local`` gauges inside the bandwidth use the
    global regression. Predictions are clamped at zero, so a local fit that
    extrapolates below zero yields dry cells rather than negative rain.
    """
    coords, x, y = _design(gauges, satellite, elevation)
    if len(y) == 0:
        raise InsufficientDataError("gwr needs at least one gauge")
    coef = _global_fit(x, y)
    cells = _cell_coords(spec)
    sat = np.asarray(satellite, dtype=np.float64).ravel()
    elev = np.asarray(elevation, dtype=np.float64).ravel() / ELEVATION_SCALE_M
    x_cells = np.column_stack([sat, elev])
    out = coef[0] + x_cells @ coef[1:]

    for start in range(0, len(cells), chunk):
        stop = start + len(cells[start:start + chunk])
        d2 = cdist(cells[start:stop], coords, metric="sqeuclidean")
        w = np.exp(-d2 / (2.0 * bandwidth_cells ** 2))
        local = (d2 <= bandwidth_cells ** 2).sum(axis=1) >= min_local
        if not local.any():
            continue
        w = w[local]
        wsum = w.sum(axis=1, keepdims=True)
        x_bar = (w @ x) / wsum
        y_bar = (w @ y) / wsum[:, 0]
        xc = x[None, :, :] - x_bar[:, None, :]
        yc = y[None, :] - y_bar[:, None]
        s = np.einsum("cn,cni,cnj->cij", w, xc, xc)
        r = np.einsum("cn,cni,cn->ci", w, xc, yc)
        det = s[:, 0, 0] * s[:, 1, 1] - s[:, 0, 1] * s[:, 1, 0]
        scale = np.maximum(s[:, 0, 0] + s[:, 1, 1], 1e-300)
        deficient = np.abs(det) <= 1e-10 * scale ** 2
        s[deficient] += ridge * np.eye(2)
        slopes = np.linalg.solve(s, r[:, :, None])[:, :, 0]
        target = x_cells[start:stop][local]
        out[start:stop][local] = y_bar + np.einsum("ci,ci->c", slopes, target - x_bar)

    return GridField.from_array(spec, np.maximum(out, 0.0).reshape(spec.shape))


# ---------------------------------------------------------------------------
# distribution corrections


def training_pairs(frames: Sequence[SampleFrame]) -> tuple:
    """(satellite at gauge cell, gauge value) pairs over frames; invalid cells skipped."""
    sats, obs = [], []
    for frame in frames:
        for g in _valid_gauges(frame.gauges):
            if frame.satellite.valid[g.row, g.col]:
                sats.append(frame.satellite.values[g.row, g.col])
                obs.append(g.value)
    return np.asarray(sats, dtype=np.float64), np.asarray(obs, dtype=np.float64)


@dataclass
class QuantileMap:
    """Empirical quantile mapping from satellite to gauge distributions on wet pairs."""

    sat_quantiles: Optional[np.ndarray] = None
    gauge_quantiles: Optional[np.ndarray] = None

    @property
    def is_identity(self) -> bool:
        return self.sat_quantiles is None

    @classmethod
    def fit(cls, sat, obs, wet_threshold: float = 0.1, n_quantiles: int = 99, min_pairs: int = MIN_QUANTILE_PAIRS) -> "QuantileMap":
        sat = np.asarray(sat, dtype=np.float64)
        obs = np.asarray(obs, dtype=np.float64)
        if sat.size < min_pairs:
            raise InsufficientDataError(f"quantile mapping needs {min_pairs} pairs, got {sat.size}")
        wet = (sat > wet_threshold) & (obs > wet_threshold)
        if not wet.any():
            logger.warning("quantile mapping: no wet pairs, using the identity map")
            return cls()
        levels = np.linspace(1, 99, n_quantiles)
        q_sat = np.percentile(sat[wet], levels)
        q_obs = np.maximum.accumulate(np.percentile(obs[wet], levels))
        return cls(q_sat, q_obs)

    def __call__(self, values) -> np.ndarray:
        shape = np.shape(values)
        x = np.array(values, dtype=np.float64, ndmin=1).ravel()
        if self.is_identity:
            return np.maximum(x, 0.0).reshape(shape)
        xp, yp = self.sat_quantiles, self.gauge_quantiles
        y = np.interp(x, xp, yp)
        low = x < xp[0]
        y[low] = x[low] * (yp[0] / xp[0])
        high = x > xp[-1]
        y[high] = x[high] * (yp[-1] / xp[-1])
        return np.where(x <= 0, 0.0, np.maximum(y, 0.0)).reshape(shape)


def quantile_map(satellite: GridField, qm: QuantileMap) -> GridField:
    return GridField(satellite.spec, np.where(satellite.valid, qm(satellite.filled(0.0)), satellite.values), satellite.valid)


@dataclass(frozen=True)
class EmosCoefficients:
    """Predictive N(a + b s, c + d s^2)."""

    a: float
    b: float
    c: float
    d: float

    def mean(self, s) -> np.ndarray:
        return self.a + self.b * np.asarray(s, dtype=np.float64)

    def variance(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return self.c + self.d * s * s


EMOS_VARIANCE_FLOOR = 1e-6


def crps_gaussian(mu, sigma, y) -> np.ndarray:
    """Closed-form CRPS of N(mu, sigma^2) at y."""
    mu, sigma, y = (np.asarray(v, dtype=np.float64) for v in (mu, sigma, y))
    z = (y - mu) / sigma
    return sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi))


def fit_linear(sat, obs) -> EmosCoefficients:
    """Least-squares mean model; residual variance as a constant spread."""
    sat = np.asarray(sat, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if sat.size < 2:
        raise InsufficientDataError("linear fit needs at least two pairs")
    a, b = _global_fit(sat[:, None], obs)
    resid = obs - (a + b * sat)
    return EmosCoefficients(float(a), float(b), max(float(np.var(resid)), EMOS_VARIANCE_FLOOR), 0.0)


def fit_emos(sat, obs, max_iter: int = 500, tol: float = 1e-7) -> EmosCoefficients:
    """
    Minimum-CRPS fit by coordinate descent from the least-squares solution.

    The variance coefficients are searched as c = gamma^2 (floored) and
    d = delta^2. Without convergence in ``max_iter`` sweeps the least-squares
    coefficients are returned.
    """
    sat = np.asarray(sat, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    start = fit_linear(sat, obs)
    theta = np.array([start.a, start.b, math.sqrt(start.c), 0.0])

    def unpack(t):
        return EmosCoefficients(t[0], t[1], max(t[2] ** 2, EMOS_VARIANCE_FLOOR), t[3] ** 2)

    def objective(t):
        coeffs = unpack(t)
        return float(np.mean(crps_gaussian(coeffs.mean(sat), np.sqrt(coeffs.variance(sat)), obs)))

    current = objective(theta)
    for sweep in range(max_iter):
        previous = current
        for k in range(len(theta)):
            def along(v, k=k):
                t = theta.copy()
                t[k] = v
                return objective(t)

            step = max(abs(theta[k]), 1.0)
            result = minimize_scalar(along, bracket=(theta[k] - 0.1 * step, theta[k] + 0.1 * step))
            if np.isfinite(result.fun) and result.fun < current:
                theta[k] = result.x
                current = result.fun
        if previous - current <= tol * max(abs(previous), 1.0):
            logger.debug(f"emos converged after {sweep + 1} sweeps (crps {current:.5f})")
            return unpack(theta)
    logger.warning("emos did not converge; falling back to least squares")
    return start


def apply_emos(satellite: GridField, coeffs: EmosCoefficients) -> GridField:
    mean = np.maximum(coeffs.mean(satellite.filled(0.0)), 0.0)
    return GridField(satellite.spec, np.where(satellite.valid, mean, satellite.values), satellite.valid)


# ---------------------------------------------------------------------------
# set convolution and the conv regressor


def set_convolution(
    gauges: Sequence[GaugeObservation], spec: GridSpec, length_scale_cells: float = 2.0, chunk: int = 4096
) -> tuple:
    """
    Density-normalized Gaussian set convolution onto the grid.

    Returns:
        tuple: (value, density) arrays of shape (H, W); zeros for an empty context
    """
    coords, values = _points(gauges)
    value = np.zeros(spec.height * spec.width)
    density = np.zeros_like(value)
    if len(values) == 0:
        return value.reshape(spec.shape), density.reshape(spec.shape)
    cells = _cell_coords(spec)
    for start in range(0, len(cells), chunk):
        k = np.exp(-cdist(cells[start:start + chunk], coords, metric="sqeuclidean") / (2.0 * length_scale_cells ** 2))
        density[start:start + chunk] = k.sum(axis=1)
        value[start:start + chunk] = (k @ values) / np.maximum(density[start:start + chunk], SETCONV_EPS)
    return value.reshape(spec.shape), density.reshape(spec.shape)


def setconv_inputs(frame: SampleFrame, context, length_scale_cells: float = 2.0) -> np.ndarray:
    """(4, H, W): log1p(set-conv value), density, log1p(satellite), elevation / 2000."""
    chosen = [frame.gauges[i] for i in context] if context is not None else list(frame.gauges)
    value, density = set_convolution(chosen, frame.spec, length_scale_cells)
    return np.stack([
        np.log1p(np.maximum(value, 0.0)),
        density,
        np.log1p(frame.satellite.filled(0.0)),
        frame.elevation.filled(0.0) / ELEVATION_SCALE_M,
    ])


class ConvRegressor:
    """
    Two-stage encoder-decoder conv net over set-convolution channels.

    The mean head is zero-initialized; its output passes through softplus to
    give a non-negative field in mm/h.
    """

    def __init__(self, hidden: int = 16, seed: int = 0) -> None:
        rng = make_rng(seed, "conv_regressor")
        self.stem = Conv2d("convreg.stem", 4, hidden, rng)
        self.down1 = Conv2d("convreg.down1", hidden, hidden, rng, stride=2)
        self.down2 = Conv2d("convreg.down2", hidden, hidden, rng, stride=2)
        self.up1 = Conv2d("convreg.up1", hidden, hidden, rng)
        self.up2 = Conv2d("convreg.up2", 2 * hidden, hidden, rng)
        self.mean_head = Conv2d("convreg.mean", hidden, 1, rng, zero=True)
        self.log_var_head = Conv2d("convreg.log_var", hidden, 1, rng)

    def parameters(self) -> dict:
        layers = (self.stem, self.down1, self.down2, self.up1, self.up2, self.mean_head, self.log_var_head)
        return {p.name: p for layer in layers for p in layer.parameters()}

    def forward(self, inputs: np.ndarray) -> tuple:
        height, width = inputs.shape[1:]
        x = Tensor(inputs[None])
        x = T.pad2d(x, (-height) % 4, (-width) % 4)
        h0 = T.relu(self.stem(x))
        h = T.relu(self.down2(T.relu(self.down1(h0))))
        h = T.relu(self.up1(T.upsample_nearest(h, 4)))
        h = T.relu(self.up2(T.concat([h, h0], axis=1)))
        mean = T.crop2d(T.softplus(self.mean_head(h)), height, width)
        log_var = T.crop2d(T.clamp(self.log_var_head(h), -6.0, 6.0), height, width)
        return mean, log_var

    def predict(self, frame: SampleFrame, context=None, length_scale_cells: float = 2.0) -> np.ndarray:
        with T.no_grad():
            mean, _ = self.forward(setconv_inputs(frame, context, length_scale_cells))
        return mean.data[0, 0]

    def fit(self, frames: Sequence[SampleFrame], steps: int, lr: float, split_cfg: SplitConfig,
            seed: int = 0, length_scale_cells: float = 2.0) -> list:
        """
        Train on random frames with the weighted held-out MSE on target gauges.

        The variance head is trained by Gaussian NLL against the detached mean.

        Returns:
            list: Loss value per step taken

        Raises:
            DivergenceError: The loss becomes non-finite
        """
        params = self.parameters()
        cfg = TrainConfig(peak_lr=lr, weight_decay=0.0)
        state = AdamWState.create(params)
        rng = make_rng(seed, "conv_regressor", "frames")
        history = []
        if not frames:
            return history
        for step in range(steps):
            frame = frames[int(rng.integers(len(frames)))]
            try:
                split = split_context_target(frame.gauges, split_cfg, frame_rng(seed, frame.timestamp + step))
            except SampleRejected:
                continue
            mean, log_var = self.forward(setconv_inputs(frame, split.context, length_scale_cells))
            targets = [frame.gauges[i] for i in split.target]
            rows = np.array([g.row for g in targets])
            cols = np.array([g.col for g in targets])
            vals = np.array([g.value for g in targets])
            loss = weighted_gauge_mse(mean, rows, cols, vals, split_cfg.rain_threshold)
            nll = gaussian_nll(T.take_cells(mean, rows, cols).detach(), T.take_cells(log_var, rows, cols), vals)
            total = loss + nll
            if not np.isfinite(total.item()):
                raise DivergenceError(step, {"mse": loss.item(), "nll": nll.item()})
            for p in params.values():
                p.grad = None
            T.backward(total)
            clip_grad_norm(params.values(), cfg.clip_norm)
            optimizer_step(params, state, cfg.lr_at(step, steps), cfg)
            history.append(loss.item())
        return history


# ---------------------------------------------------------------------------
# uniform wrappers


class Baseline:
    name = "baseline"

    def __init__(self, cfg: Optional[BaselineConfig] = None) -> None:
        self.cfg = cfg or BaselineConfig()

    def fit(self, frames: Sequence[SampleFrame], split_cfg: Optional[SplitConfig] = None) -> "Baseline":
        return self

    def predict(self, frame: SampleFrame, context=None) -> GridField:
        raise NotImplementedError

    @staticmethod
    def _context(frame: SampleFrame, context) -> list:
        if context is None:
            return _valid_gauges(frame.gauges)
        return _valid_gauges([frame.gauges[i] for i in context])


class SatelliteBaseline(Baseline):
    """The uncorrected satellite field."""

    name = "satellite"

    def predict(self, frame, context=None):
        return frame.satellite


class IDWBaseline(Baseline):
    name = "idw"

    def predict(self, frame, context=None):
        return idw(self._context(frame, context), frame.spec, self.cfg.idw_power, self.cfg.idw_neighbors)


class KrigingBaseline(Baseline):
    name = "kriging"

    def predict(self, frame, context=None):
        gauges = self._context(frame, context)
        try:
            vg = fit_variogram(gauges, self.cfg.variogram_kind, self.cfg.variogram_lags)
        except InsufficientDataError:
            return idw(gauges, frame.spec, self.cfg.idw_power, self.cfg.idw_neighbors)
        field = kriging(gauges, vg, frame.spec, self.cfg.kriging_cap, make_rng(self.cfg.seed, "kriging", frame.timestamp))
        return GridField.from_array(frame.spec, np.maximum(field.values, 0.0))


class GWRBaseline(Baseline):
    name = "gwr"

    def predict(self, frame, context=None):
        return gwr(
            self._context(frame, context),
            frame.satellite.filled(0.0),
            frame.elevation.filled(0.0),
            frame.spec,
            self.cfg.gwr_bandwidth,
            self.cfg.gwr_min_local,
        )


class QuantileMapBaseline(Baseline):
    name = "quantile_map"

    def fit(self, frames, split_cfg=None):
        sat, obs = training_pairs(frames)
        self.qm = QuantileMap.fit(sat, obs, self.cfg.wet_threshold)
        return self

    def predict(self, frame, context=None):
        return quantile_map(frame.satellite, self.qm)


class EMOSBaseline(Baseline):
    name = "emos"

    def fit(self, frames, split_cfg=None):
        self.coeffs = fit_emos(*training_pairs(frames))
        logger.debug(f"emos coefficients {self.coeffs}")
        return self

    def predict(self, frame, context=None):
        return apply_emos(frame.satellite, self.coeffs)


class LinearRegressionBaseline(EMOSBaseline):
    name = "linear_regression"

    def fit(self, frames, split_cfg=None):
        self.coeffs = fit_linear(*training_pairs(frames))
        return self


class ConvRegressorBaseline(Baseline):
    name = "conv_regressor"

    def fit(self, frames, split_cfg=None):
        self.model = ConvRegressor(self.cfg.conv_hidden, self.cfg.seed)
        history = self.model.fit(
            frames, self.cfg.conv_steps, self.cfg.conv_lr, split_cfg or SplitConfig(), self.cfg.seed,
            self.cfg.setconv_length_scale,
        )
        if history:
            logger.info(f"conv regressor: weighted mse {history[0]:.3f} -> {history[-1]:.3f}")
        return self

    def predict(self, frame, context=None):
        return GridField.from_array(frame.spec, self.model.predict(frame, context, self.cfg.setconv_length_scale))


BASELINES = {
    cls.name: cls
    for cls in (
        SatelliteBaseline,
        IDWBaseline,
        KrigingBaseline,
        GWRBaseline,
        QuantileMapBaseline,
        EMOSBaseline,
        LinearRegressionBaseline,
        ConvRegressorBaseline,
    )
}


def make_baseline(name: str, cfg: Optional[BaselineConfig] = None) -> Baseline:
    try:
        return BASELINES[name](cfg)
    except KeyError:
        raise ConfigError(f"unknown baseline {name!r}; expected one of {sorted(BASELINES)}") from None
