"""
Seeded synthetic precipitation data.

Truth fields are advected anisotropic Gaussian storms; the satellite field
is a shifted, blurred, biased and noisy copy with whole storms occasionally
missed; gauges sample the truth at station cells with heteroscedastic noise,
silent stations and injected spikes. The truth doubles as the radar
reference. Every sub-generator draws from its own stream of the master seed.
"""

import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from gridio import (
    NODATA,
    Dataset,
    GaugeObservation,
    GridField,
    GridSpec,
    SampleFrame,
    save_gauges,
    save_grid,
    write_manifest,
)
from utils import logger
from utils.errors import ConfigError
from utils.seeding import make_rng

SYNTH_EPOCH = "2021-01-01T00:00:00Z"


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    cell_size_km: float = 11.0
    origin: tuple = (40.0, -100.0)
    resolution_deg: float = 0.1
    hours: int = 200
    years: int = 5
    start_year: int = 2021
    seed: int = 42
    # storms
    n_storms: float = 2.5
    storm_life: tuple = (6, 18)
    sigma_major: tuple = (2.0, 4.0)
    minor_ratio: tuple = (0.5, 0.9)
    peak_log_mean: float = math.log(4.0)
    peak_log_sd: float = 0.8
    wet_cutoff: float = 0.2
    advection: tuple = (0.6, 0.8)
    jitter_sd: float = 0.3
    jitter_reversion: float = 0.2
    # satellite degradation
    sat_bias: float = 1.3
    bias_field_sd: float = 0.2
    sat_shift: tuple = (1, 1)
    blur_sigma: float = 1.5
    detect_dropout: float = 0.1
    sat_noise: float = 0.2
    # gauges
    n_stations: int = 300
    clustered: bool = False
    gauge_noise_sd: float = 0.1
    gauge_noise_floor: float = 0.05
    spike_rate: float = 0.01
    silent_rate: float = 0.1
    missing_rate: float = 0.01
    # terrain
    elevation_max_m: float = 2500.0
    elevation_smooth: float = 6.0

    def __post_init__(self) -> None:
        self.origin = tuple(self.origin)
        self.storm_life = tuple(self.storm_life)
        self.sigma_major = tuple(self.sigma_major)
        self.minor_ratio = tuple(self.minor_ratio)
        self.advection = tuple(self.advection)
        self.sat_shift = tuple(int(v) for v in self.sat_shift)
        if self.hours < 2:
            raise ConfigError(f"hours must be at least 2 to form pairs, got {self.hours}")
        if self.years < 1 or self.years > self.hours:
            raise ConfigError(f"years must lie in [1, hours], got {self.years}")
        rates = ("n_storms", "jitter_sd", "bias_field_sd", "blur_sigma", "detect_dropout", "sat_noise",
                 "gauge_noise_sd", "gauge_noise_floor", "spike_rate", "silent_rate", "missing_rate", "sat_bias")
        for name in rates:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("detect_dropout", "spike_rate", "silent_rate", "missing_rate"):
            if getattr(self, name) > 1:
                raise ConfigError(f"{name} is a probability, got {getattr(self, name)}")

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.height, self.width, self.cell_size_km, self.origin, self.resolution_deg)

    def year_of(self, hour: int) -> int:
        return self.start_year + hour * self.years // self.hours


@dataclass
class Storm:
    row: float
    col: float
    sigma_major: float
    sigma_minor: float
    angle: float
    peak: float
    life: int
    age: int = 0
    jitter: np.ndarray = field(default_factory=lambda: np.zeros(2))
    storm_id: int = 0

    def envelope(self) -> float:
        return math.sin(math.pi * (self.age + 0.5) / self.life)


def _spawn(cfg: SynthConfig, rng: np.random.Generator, storm_id: int, age: int = 0) -> Storm:
    margin = 2.0 * cfg.sigma_major[1]
    major = rng.uniform(*cfg.sigma_major)
    life = int(rng.integers(cfg.storm_life[0], cfg.storm_life[1] + 1))
    return Storm(
        row=rng.uniform(-margin, cfg.height + margin),
        col=rng.uniform(-margin, cfg.width + margin),
        sigma_major=major,
        sigma_minor=major * rng.uniform(*cfg.minor_ratio),
        angle=rng.uniform(0.0, math.pi),
        peak=float(rng.lognormal(cfg.peak_log_mean, cfg.peak_log_sd)),
        life=life,
        age=min(age, life - 1),
        storm_id=storm_id,
    )


@dataclass(frozen=True)
class StormLayer:
    """One storm's rendered contribution to one hour, before the wet cutoff."""

    storm_id: int
    values: np.ndarray


def _render(storm: Storm, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    dr, dc = rows - storm.row, cols - storm.col
    cos, sin = math.cos(storm.angle), math.sin(storm.angle)
    u = dr * cos + dc * sin
    v = -dr * sin + dc * cos
    return storm.peak * storm.envelope() * np.exp(-0.5 * (u * u / storm.sigma_major ** 2 + v * v / storm.sigma_minor ** 2))


def compose(layers: Sequence[StormLayer], spec: GridSpec, wet_cutoff: float) -> np.ndarray:
    """Sum of storm layers with values below ``wet_cutoff`` set to zero."""
    out = np.zeros(spec.shape)
    for layer in layers:
        out += layer.values
    out[out < wet_cutoff] = 0.0
    return out


def gen_storm_layers(cfg: SynthConfig, seed: Optional[int] = None) -> list:
    """
    Per-hour lists of ``StormLayer``, one per live storm.

    Storm count is stationary around ``n_storms``: births are Poisson with
    rate n_storms / mean_life. Storm ids are unique over the sequence.
    """
    seed = cfg.seed if seed is None else seed
    rng = make_rng(seed, "storms")
    rows, cols = np.indices(cfg.spec.shape, dtype=np.float64)
    mean_life = 0.5 * (cfg.storm_life[0] + cfg.storm_life[1])
    birth_rate = cfg.n_storms / mean_life

    next_id = 0
    storms = []
    for _ in range(rng.poisson(cfg.n_storms)):
        storms.append(_spawn(cfg, rng, next_id, age=int(rng.integers(0, cfg.storm_life[1]))))
        next_id += 1
    hours = []
    for _ in range(cfg.hours):
        hours.append([StormLayer(s.storm_id, _render(s, rows, cols)) for s in storms])

        survivors = []
        for s in storms:
            s.jitter = s.jitter - cfg.jitter_reversion * s.jitter + cfg.jitter_sd * rng.standard_normal(2)
            s.row += cfg.advection[0] + s.jitter[0]
            s.col += cfg.advection[1] + s.jitter[1]
            s.age += 1
            if s.age < s.life:
                survivors.append(s)
        for _ in range(rng.poisson(birth_rate)):
            survivors.append(_spawn(cfg, rng, next_id))
            next_id += 1
        storms = survivors
    return hours


def gen_truth_sequence(cfg: SynthConfig, seed: Optional[int] = None, layers: Optional[list] = None) -> list:
    """
    Hourly truth fields in mm/h.

    Values below ``wet_cutoff`` are set to zero. ``layers`` reuses the output
    of ``gen_storm_layers`` instead of regenerating it.
    """
    layers = gen_storm_layers(cfg, seed) if layers is None else layers
    fields = [GridField.from_array(cfg.spec, compose(hour, cfg.spec, cfg.wet_cutoff)) for hour in layers]
    logger.debug(f"generated {len(fields)} truth frames")
    return fields


def _bias_field(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.bias_field_sd == 0:
        return np.full(cfg.spec.shape, cfg.sat_bias)
    noise = ndimage.gaussian_filter(rng.standard_normal(cfg.spec.shape), sigma=8.0, mode="wrap")
    noise *= cfg.bias_field_sd / max(noise.std(), 1e-12)
    return cfg.sat_bias * np.exp(noise)


def degrade_to_satellite(truth: Sequence[GridField], cfg: SynthConfig, seed: Optional[int] = None,
                         layers: Optional[list] = None) -> list:
    """
    Satellite estimates from truth: per-storm detection dropout, shift, blur,
    multiplicative log-normal noise and a fixed smooth bias field.

    Dropout removes whole storms before any smoothing: each storm in each
    hour is missed with probability ``detect_dropout``, drawn from a stream
    keyed by hour and storm id, and the hour is recomposed from the storms
    that remain.

    Args:
        truth: Hourly truth fields
        cfg: Generator settings
        seed: Master seed; ``cfg.seed`` when None
        layers: Output of ``gen_storm_layers`` for ``truth``; required when
            ``detect_dropout`` is positive

    Raises:
        ConfigError: Dropout is requested without matching storm layers
    """
    seed = cfg.seed if seed is None else seed
    if cfg.detect_dropout > 0 and (layers is None or len(layers) != len(truth)):
        raise ConfigError("detection dropout needs the storm layers of every truth frame")
    rng = make_rng(seed, "satellite")
    bias = _bias_field(cfg, make_rng(seed, "bias_field"))
    out = []
    for t, frame in enumerate(truth):
        x = frame.filled(0.0).astype(np.float64)
        if cfg.detect_dropout > 0:
            kept = [s for s in layers[t] if make_rng(seed, "dropout", t, s.storm_id).random() >= cfg.detect_dropout]
            if len(kept) < len(layers[t]):
                x = compose(kept, frame.spec, cfg.wet_cutoff)
        if any(cfg.sat_shift):
            x = ndimage.shift(x, cfg.sat_shift, order=0, mode="constant", cval=0.0)
        if cfg.blur_sigma > 0:
            x = ndimage.gaussian_filter(x, cfg.blur_sigma, mode="constant")
        if cfg.sat_noise > 0:
            x = x * np.exp(cfg.sat_noise * rng.standard_normal(x.shape) - 0.5 * cfg.sat_noise ** 2)
        out.append(GridField.from_array(frame.spec, x * bias))
    return out


@dataclass(frozen=True)
class Station:
    station_id: str
    row: int
    col: int
    lat: float
    lon: float


def sample_stations(cfg: SynthConfig, seed: Optional[int] = None) -> list:
    """Station cells, uniform without replacement or in Gaussian clusters."""
    seed = cfg.seed if seed is None else seed
    rng = make_rng(seed, "stations")
    spec = cfg.spec
    n_cells = spec.height * spec.width
    n = min(cfg.n_stations, n_cells)
    if cfg.clustered:
        centers = rng.uniform((0, 0), (spec.height, spec.width), size=(max(1, n // 25), 2))
        picks = centers[rng.integers(len(centers), size=n)] + rng.normal(0.0, 3.0, size=(n, 2))
        rows = np.clip(np.round(picks[:, 0]), 0, spec.height - 1).astype(int)
        cols = np.clip(np.round(picks[:, 1]), 0, spec.width - 1).astype(int)
    else:
        flat = rng.choice(n_cells, size=n, replace=False)
        rows, cols = np.divmod(flat, spec.width)
    stations = []
    for k, (r, c) in enumerate(zip(rows, cols)):
        lat, lon = spec.cell_center(int(r), int(c))
        stations.append(Station(f"S{k:05d}", int(r), int(c), lat, lon))
    return stations


def observe_gauges(truth: Sequence[GridField], satellite: Sequence[GridField], stations: Sequence[Station],
                   cfg: SynthConfig, seed: Optional[int] = None) -> tuple:
    """
    Gauge readings per hour.

    Reading = truth + N(0, (sd * sqrt(truth) + floor)^2) on wet cells, 0 on
    dry cells. Each hour a station is silent with ``silent_rate``, reports
    the missing sentinel with ``missing_rate``, or (on cells dry in both
    truth and satellite) reports a spike U(21, 60) with ``spike_rate``.

    Returns:
        tuple: (list of per-hour gauge lists, set of (timestamp, station_id) spikes)
    """
    seed = cfg.seed if seed is None else seed
    rng = make_rng(seed, "gauges")
    rows = np.array([s.row for s in stations], dtype=np.int64)
    cols = np.array([s.col for s in stations], dtype=np.int64)
    hourly, spikes = [], set()
    for t, (tf, sf) in enumerate(zip(truth, satellite)):
        y = tf.filled(0.0)[rows, cols]
        s = sf.filled(0.0)[rows, cols]
        sd = cfg.gauge_noise_sd * np.sqrt(y) + cfg.gauge_noise_floor
        noisy = np.where(y > 0, np.maximum(y + sd * rng.standard_normal(len(y)), 0.0), 0.0)
        silent = rng.random(len(y)) < cfg.silent_rate
        missing = rng.random(len(y)) < cfg.missing_rate
        spike = (rng.random(len(y)) < cfg.spike_rate) & (y < 1.0) & (s < 1.0)
        spike_values = rng.uniform(21.0, 60.0, size=len(y))
        gauges = []
        for k, st in enumerate(stations):
            if silent[k]:
                continue
            if missing[k]:
                value = NODATA
            elif spike[k]:
                value = float(spike_values[k])
                spikes.add((t, st.station_id))
            else:
                value = float(noisy[k])
            gauges.append(GaugeObservation(st.row, st.col, st.lat, st.lon, value, st.station_id, t))
        hourly.append(gauges)
    return hourly, spikes


def gen_elevation(cfg: SynthConfig, seed: Optional[int] = None) -> GridField:
    """Smoothed random terrain scaled to [0, elevation_max_m]."""
    seed = cfg.seed if seed is None else seed
    noise = ndimage.gaussian_filter(make_rng(seed, "elevation").standard_normal(cfg.spec.shape), cfg.elevation_smooth)
    span = noise.max() - noise.min()
    scaled = (noise - noise.min()) / span if span > 0 else np.zeros_like(noise)
    return GridField.from_array(cfg.spec, scaled * cfg.elevation_max_m)


def generate_dataset(cfg: SynthConfig) -> Dataset:
    """Full synthetic dataset; ``meta['spikes']`` lists the injected spikes."""
    layers = gen_storm_layers(cfg)
    truth = gen_truth_sequence(cfg, layers=layers)
    satellite = degrade_to_satellite(truth, cfg, layers=layers)
    stations = sample_stations(cfg)
    hourly, spikes = observe_gauges(truth, satellite, stations, cfg)
    elevation = gen_elevation(cfg)
    frames = [
        SampleFrame(t, satellite[t], elevation, tuple(hourly[t]), truth[t], cfg.year_of(t))
        for t in range(cfg.hours)
    ]
    meta = {"seed": cfg.seed, "n_stations": len(stations), "spikes": sorted([t, sid] for t, sid in spikes)}
    logger.info(f"synthesized {len(frames)} frames, {len(stations)} stations, {len(spikes)} spikes")
    return Dataset(cfg.spec, frames, SYNTH_EPOCH, "", meta)


def write_dataset(dataset: Dataset, out_dir: str) -> str:
    """
    Write rasters, the gauge CSV and the manifest.

    Returns:
        str: Path of the manifest
    """
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    elevation = dataset.frames[0].elevation
    save_grid(os.path.join(out_dir, "elevation.qgrid"), elevation)
    entries = []
    gauges = []
    for frame in dataset.frames:
        sat_name = os.path.join("frames", f"sat_{frame.timestamp:05d}.qgrid")
        save_grid(os.path.join(out_dir, sat_name), frame.satellite)
        entry = {"timestamp": frame.timestamp, "year": frame.year, "satellite": sat_name}
        if frame.radar is not None:
            radar_name = os.path.join("frames", f"radar_{frame.timestamp:05d}.qgrid")
            save_grid(os.path.join(out_dir, radar_name), frame.radar)
            entry["radar"] = radar_name
        entries.append(entry)
        gauges.extend(frame.gauges)
    save_gauges(os.path.join(out_dir, "gauges.csv"), gauges)
    manifest = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, dataset.spec, entries, dataset.epoch, "elevation.qgrid", "gauges.csv", dataset.meta)
    return manifest


def dataset_statistics(frames: Sequence[SampleFrame], wet_threshold: float = 0.1) -> dict:
    """Wet fraction, gauge availability and wet-value percentiles of the reference fields."""
    wet_fraction, sat_wet, counts, wet_values = [], [], [], []
    for f in frames:
        counts.append(sum(1 for g in f.gauges if not g.is_missing))
        sat_wet.append(float(np.mean(f.satellite.filled(0.0) > wet_threshold)))
        if f.radar is not None:
            r = f.radar.filled(0.0)
            wet_fraction.append(float(np.mean(r > wet_threshold)))
            wet_values.append(r[r > wet_threshold])
    wet = np.concatenate(wet_values) if wet_values else np.zeros(0)
    pct = np.percentile(wet, [50, 90, 99]) if wet.size else [None] * 3
    return {
        "frames": len(frames),
        "wet_fraction_mean": float(np.mean(wet_fraction)) if wet_fraction else None,
        "wet_fraction_std": float(np.std(wet_fraction)) if wet_fraction else None,
        "satellite_wet_fraction": float(np.mean(sat_wet)) if sat_wet else None,
        "gauges_per_hour_mean": float(np.mean(counts)) if counts else None,
        "gauges_per_hour_min": int(np.min(counts)) if counts else None,
        "gauges_per_hour_max": int(np.max(counts)) if counts else None,
        "wet_p50": None if pct[0] is None else float(pct[0]),
        "wet_p90": None if pct[1] is None else float(pct[1]),
        "wet_p99": None if pct[2] is None else float(pct[2]),
    }
