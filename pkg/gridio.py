"""
Grid and gauge data model, raster/CSV/manifest I/O, quality filtering,
input normalization, cross-validation folds and temporal pairing.

Rasters are stored as a 16-byte magic, a length-prefixed JSON header and a
row-major little-endian float32 payload, rows running north to south.
"""

import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from utils import logger
from utils.errors import (
    ConfigError,
    DataError,
    DimensionError,
    DomainError,
    FormatError,
    RowParseError,
)

GRID_MAGIC = b"QPEGRID1".ljust(16, b"\x00")
NODATA = -999.0
MISSING_CUTOFF = -900.0
MANIFEST_SCHEMA = "qpe-manifest/1"

GAUGE_COLUMNS = ["timestamp", "station_id", "lat", "lon", "value_mmph"]

# Appendix B.3 thresholds
SPIKE_GAUGE_MMPH = 20.0
SPIKE_QUIET_MMPH = 1.0
RADAR_MAX_MMPH = 500.0
ELEVATION_SCALE_M = 2000.0
PGM_RAMP_MAX_MMPH = 100.0


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    cell_size_km: float = 11.0
    origin: tuple = (0.0, 0.0)
    resolution_deg: float = 0.1

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise DimensionError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if self.cell_size_km <= 0:
            raise ConfigError(f"cell_size_km must be positive, got {self.cell_size_km}")
        if self.resolution_deg <= 0:
            raise ConfigError(f"resolution_deg must be positive, got {self.resolution_deg}")

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def cell_center(self, row: int, col: int) -> tuple:
        """(lat, lon) of a cell center; rows run north to south."""
        lat0, lon0 = self.origin
        return (lat0 - row * self.resolution_deg, lon0 + col * self.resolution_deg)

    def nearest_cell(self, lat: float, lon: float) -> Optional[tuple]:
        """
        Map a coordinate to the nearest cell center.

        Ties between two centers go to the lower index. Coordinates whose
        nearest center lies outside the grid return ``None``.
        """
        lat0, lon0 = self.origin
        frow = (lat0 - lat) / self.resolution_deg
        fcol = (lon - lon0) / self.resolution_deg
        # ceil(x - 0.5) rounds to nearest with halves going down
        row = math.ceil(round(frow - 0.5, 9))
        col = math.ceil(round(fcol - 0.5, 9))
        if 0 <= row < self.height and 0 <= col < self.width:
            return (row, col)
        return None

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "cell_size_km": self.cell_size_km,
            "origin_lat": self.origin[0],
            "origin_lon": self.origin[1],
            "resolution_deg": self.resolution_deg,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(
            height=int(data["height"]),
            width=int(data["width"]),
            cell_size_km=float(data.get("cell_size_km", 11.0)),
            origin=(float(data.get("origin_lat", 0.0)), float(data.get("origin_lon", 0.0))),
            resolution_deg=float(data.get("resolution_deg", 0.1)),
        )


@dataclass(frozen=True, eq=False)
class GridField:
    spec: GridSpec
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != self.spec.shape or self.valid.shape != self.spec.shape:
            raise DimensionError(
                f"field shape {self.values.shape} does not match grid {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.values[self.valid])):
            raise DomainError("grid values must be finite wherever valid")

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridField):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    @classmethod
    def from_array(cls, spec: GridSpec, values: np.ndarray) -> "GridField":
        """Build a field from raw values, treating sentinel or non-finite cells as invalid."""
        values = np.asarray(values)
        valid = np.isfinite(values) & (values > MISSING_CUTOFF)
        return cls(spec, values, valid)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with invalid cells replaced by ``fill``."""
        return np.where(self.valid, self.values, fill)


@dataclass(frozen=True)
class GaugeObservation:
    row: int
    col: int
    lat: float
    lon: float
    value: float
    station_id: str
    timestamp: int = 0

    @property
    def is_missing(self) -> bool:
        return self.value <= MISSING_CUTOFF


@dataclass(frozen=True, eq=False)
class SampleFrame:
    timestamp: int
    satellite: GridField
    elevation: GridField
    gauges: tuple = ()
    radar: Optional[GridField] = None
    year: Optional[int] = None

    def __post_init__(self) -> None:
        spec = self.satellite.spec
        if self.elevation.spec != spec or (self.radar is not None and self.radar.spec != spec):
            raise DimensionError("all grids of a frame must share one GridSpec")
        object.__setattr__(self, "gauges", tuple(self.gauges))

    @property
    def spec(self) -> GridSpec:
        return self.satellite.spec

    def __eq__(self, other) -> bool:
        if not isinstance(other, SampleFrame):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.satellite == other.satellite
            and self.elevation == other.elevation
            and self.gauges == other.gauges
            and self.radar == other.radar
        )

    __hash__ = None


@dataclass(frozen=True)
class FoldSpec:
    train_years: tuple
    validation_years: tuple
    test_years: tuple

    def __post_init__(self) -> None:
        sets = [set(self.train_years), set(self.validation_years), set(self.test_years)]
        if not all(sets):
            raise ConfigError("every fold needs train, validation and test years")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError(f"fold year lists overlap: {self}")
        if not max(self.train_years) < min(self.validation_years) < min(self.test_years):
            raise ConfigError(f"fold years are not chronological: {self}")


@dataclass(frozen=True)
class FilterReport:
    spike_gauges: int = 0
    radar_extremes: int = 0
    missing_gauges: int = 0
    discardable: bool = False


class GaugeLoad(NamedTuple):
    gauges: list
    dropped: int


@dataclass
class Dataset:
    spec: GridSpec
    frames: list
    epoch: str = ""
    root: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def years(self) -> list:
        return sorted({f.year for f in self.frames if f.year is not None})


# ---------------------------------------------------------------------------
# raster I/O


def save_grid(path: str, grid: GridField) -> None:
    """
    Write a field in the QPEGRID1 raster format.

    Invalid cells are written as the nodata sentinel whatever value they
    held, so only the validity mask round-trips for them; ``load_grid``
    returns the sentinel in their place. Valid values are stored as f32.
    """
    spec = grid.spec
    header = {
        "height": spec.height,
        "width": spec.width,
        "resolution_deg": spec.resolution_deg,
        "origin_lat": spec.origin[0],
        "origin_lon": spec.origin[1],
        "dtype": "f32",
        "nodata": NODATA,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.where(grid.valid, grid.values, NODATA).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes(order="C"))


def load_grid(path: str, spec: GridSpec) -> GridField:
    """
    Read a QPEGRID1 raster.

    Args:
        path: Raster file path
        spec: Expected grid; height and width must match the file header

    Returns:
        GridField: float32 values as stored; cells at or below -900 are invalid

    Raises:
        FormatError: Bad magic, header or payload length
        DimensionError: Header dimensions differ from ``spec``
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read raster {path}: {e}") from e

    if len(raw) < 20 or raw[:16] != GRID_MAGIC:
        raise FormatError(f"{path}: not a QPEGRID1 raster")
    (size,) = struct.unpack("<I", raw[16:20])
    try:
        header = json.loads(raw[20:20 + size].decode("utf-8"))
        height, width = int(header["height"]), int(header["width"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')}")

    if (height, width) != spec.shape:
        raise DimensionError(f"{path}: file is {height}x{width}, expected {spec.height}x{spec.width}")

    payload = raw[20 + size:]
    if len(payload) != height * width * 4:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {height * width * 4}")

    values = np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float32)
    valid = np.isfinite(values) & (values > MISSING_CUTOFF)
    return GridField(spec, values, valid)


def intensity_to_gray(values, ramp_max: float = PGM_RAMP_MAX_MMPH) -> np.ndarray:
    """Fixed log-intensity ramp: 0 mm/h maps to 0, ``ramp_max`` and above to 255."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=0.0, posinf=ramp_max, neginf=0.0)
    scaled = np.log1p(np.clip(v, 0.0, None)) / math.log1p(ramp_max)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str, values, ramp_max: float = PGM_RAMP_MAX_MMPH) -> None:
    """Write an (H, W) field as a binary portable graymap."""
    gray = intensity_to_gray(values, ramp_max)
    if gray.ndim != 2:
        raise DimensionError(f"graymap needs a 2-D field, got shape {gray.shape}")
    height, width = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(gray.tobytes(order="C"))


# ---------------------------------------------------------------------------
# gauges


def _parse_float(text: str, line: int, name: str) -> float:
    try:
        return float(text)
    except ValueError as e:
        raise RowParseError(line, f"bad {name} {text!r}") from e


def load_gauges(path: str, spec: GridSpec) -> GaugeLoad:
    """
    Read a gauge CSV and map every row to its nearest grid cell.

    Rows whose nearest cell lies outside the grid are dropped and counted.
    An empty value field means missing and becomes the nodata sentinel.

    Raises:
        RowParseError: A row cannot be parsed; carries the 1-based file line
    """
    try:
        table = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read gauge file {path}: {e}") from e

    if list(table.columns) != GAUGE_COLUMNS:
        raise FormatError(f"{path}: expected header {','.join(GAUGE_COLUMNS)}")

    gauges = []
    dropped = 0
    for index, row in enumerate(table.itertuples(index=False)):
        line = index + 2
        try:
            timestamp = int(row.timestamp)
        except ValueError as e:
            raise RowParseError(line, f"bad timestamp {row.timestamp!r}") from e
        lat = _parse_float(row.lat, line, "lat")
        lon = _parse_float(row.lon, line, "lon")
        value = NODATA if row.value_mmph.strip() == "" else _parse_float(row.value_mmph, line, "value")

        cell = spec.nearest_cell(lat, lon)
        if cell is None:
            dropped += 1
            continue
        gauges.append(GaugeObservation(cell[0], cell[1], lat, lon, value, row.station_id, timestamp))

    if dropped:
        logger.info(f"<<yellow>> {path}: dropped {dropped} gauges outside the grid")
    return GaugeLoad(gauges, dropped)


def save_gauges(path: str, gauges: Sequence[GaugeObservation]) -> None:
    rows = [
        {
            "timestamp": g.timestamp,
            "station_id": g.station_id,
            "lat": repr(float(g.lat)),
            "lon": repr(float(g.lon)),
            "value_mmph": "" if g.is_missing else repr(float(g.value)),
        }
        for g in gauges
    ]
    pd.DataFrame(rows, columns=GAUGE_COLUMNS).to_csv(path, index=False, lineterminator="\n")


def group_by_hour(gauges: Sequence[GaugeObservation]) -> dict:
    grouped = {}
    for g in gauges:
        grouped.setdefault(g.timestamp, []).append(g)
    return grouped


def gauge_arrays(gauges: Sequence[GaugeObservation]) -> tuple:
    """(rows, cols, values) arrays of a gauge list."""
    rows = np.array([g.row for g in gauges], dtype=np.int64)
    cols = np.array([g.col for g in gauges], dtype=np.int64)
    values = np.array([g.value for g in gauges], dtype=np.float64)
    return rows, cols, values


def rasterize_gauges(gauges: Sequence[GaugeObservation], spec: GridSpec, indices=None) -> tuple:
    """
    Rasterize gauges onto the grid, averaging co-located observations.

    Args:
        gauges: Observations
        spec: Target grid
        indices: Optional subset of observation indices (e.g. the context set)

    Returns:
        tuple: (values, mask) arrays of shape (H, W); values are 0 where unobserved
    """
    sums = np.zeros(spec.shape)
    counts = np.zeros(spec.shape)
    chosen = range(len(gauges)) if indices is None else indices
    for i in chosen:
        g = gauges[i]
        if g.is_missing:
            continue
        sums[g.row, g.col] += g.value
        counts[g.row, g.col] += 1
    mask = counts > 0
    values = np.divide(sums, counts, out=np.zeros_like(sums), where=mask)
    return values, mask


# ---------------------------------------------------------------------------
# quality control and normalization


def apply_quality_filters(frame: SampleFrame) -> tuple:
    """
    Apply the gauge and radar quality-control rules.

    Rules, in order:
        (ii) radar cells above 500 mm/h become invalid;
        (i) gauges above 20 mm/h whose cell holds valid satellite and radar
            readings both below 1 mm/h become missing; the radar is read as
            delivered, before rule (ii), and frames without radar never fire;
        (iii) missing gauges (at or below -900) are excluded;
        (iv) frames with an entirely invalid satellite or radar field are
            flagged discardable.

    Returns:
        tuple: (filtered frame, FilterReport)
    """
    radar = frame.radar
    radar_extremes = 0
    if radar is not None:
        extreme = radar.valid & (radar.values > RADAR_MAX_MMPH)
        radar_extremes = int(extreme.sum())
        if radar_extremes:
            radar = GridField(
                radar.spec,
                np.where(extreme, np.asarray(NODATA, dtype=radar.values.dtype), radar.values),
                radar.valid & ~extreme,
            )

    sat = frame.satellite
    raw = frame.radar
    kept = []
    spikes = 0
    missing = 0
    for g in frame.gauges:
        if g.is_missing:
            missing += 1
            continue
        if g.value > SPIKE_GAUGE_MMPH:
            r, c = g.row, g.col
            sat_quiet = bool(sat.valid[r, c]) and sat.values[r, c] < SPIKE_QUIET_MMPH
            radar_quiet = raw is not None and bool(raw.valid[r, c]) and raw.values[r, c] < SPIKE_QUIET_MMPH
            if sat_quiet and radar_quiet:
                spikes += 1
                logger.debug(f"spike gauge {g.station_id} at t={frame.timestamp}: {g.value:.1f} mm/h")
                continue
        kept.append(g)

    discardable = (not sat.valid.any()) or (radar is not None and not radar.valid.any())
    filtered = replace(frame, gauges=tuple(kept), radar=radar)
    report = FilterReport(spikes, radar_extremes, missing, discardable)
    return filtered, report


def normalize_inputs(frame: SampleFrame, context=None) -> np.ndarray:
    """
    Build the four-channel model input.

    Channels: log1p(satellite), elevation / 2000, log1p(rasterized context
    gauges), context mask. Invalid and unobserved cells are zero. The radar
    field never enters.

    Args:
        frame: A quality-filtered frame
        context: Optional gauge indices forming the context set; all gauges when None

    Returns:
        np.ndarray: Array of shape (4, H, W)

    Raises:
        DomainError: Negative precipitation in the satellite field or a gauge
    """
    sat = frame.satellite.filled(0.0).astype(np.float64)
    if np.any(sat < 0):
        raise DomainError(f"negative satellite precipitation at t={frame.timestamp}")

    gauge_values, gauge_mask = rasterize_gauges(frame.gauges, frame.spec, context)
    if np.any(gauge_values < 0):
        raise DomainError(f"negative gauge precipitation at t={frame.timestamp}")

    elevation = frame.elevation.filled(0.0).astype(np.float64)
    return np.stack([
        np.log1p(sat),
        elevation / ELEVATION_SCALE_M,
        np.log1p(gauge_values),
        gauge_mask.astype(np.float64),
    ])


def denormalize_precip(channel: np.ndarray) -> np.ndarray:
    return np.expm1(channel)


# ---------------------------------------------------------------------------
# folds and pairing


def make_folds(available_years: Sequence, n_folds: int) -> list:
    """
    Expanding-window folds: fold k trains on years[0..k], validates on the
    next year and tests on the one after.

    Raises:
        ConfigError: Fewer than n_folds + 2 years
    """
    years = list(available_years)
    if n_folds < 1:
        raise ConfigError(f"n_folds must be at least 1, got {n_folds}")
    if len(years) < n_folds + 2:
        raise ConfigError(f"{n_folds} folds need at least {n_folds + 2} years, got {len(years)}")
    if years != sorted(years):
        raise ConfigError("available years must be sorted")
    return [
        FoldSpec(tuple(years[: k + 1]), (years[k + 1],), (years[k + 2],))
        for k in range(n_folds)
    ]


def split_frames_by_years(frames: Sequence[SampleFrame], fold: FoldSpec) -> tuple:
    """(train, validation, test) frame lists for a fold."""
    train = [f for f in frames if f.year in fold.train_years]
    val = [f for f in frames if f.year in fold.validation_years]
    test = [f for f in frames if f.year in fold.test_years]
    return train, val, test


def pair_consecutive(frames: Sequence[SampleFrame]) -> list:
    """Index pairs (i, i+1) of frames exactly one hour apart."""
    return [
        (i, i + 1)
        for i in range(len(frames) - 1)
        if frames[i + 1].timestamp - frames[i].timestamp == 1
    ]


# ---------------------------------------------------------------------------
# dataset manifest


def write_manifest(path: str, spec: GridSpec, entries: list, epoch: str, elevation: str, gauges: str, meta=None) -> None:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "epoch": epoch,
        "grid": spec.to_dict(),
        "elevation": elevation,
        "gauges": gauges,
        "frames": entries,
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_frame(root: str, spec: GridSpec, entry: dict, elevation: GridField, hourly: dict) -> SampleFrame:
    timestamp = int(entry["timestamp"])
    satellite = load_grid(os.path.join(root, entry["satellite"]), spec)
    radar = load_grid(os.path.join(root, entry["radar"]), spec) if entry.get("radar") else None
    elev = load_grid(os.path.join(root, entry["elevation"]), spec) if entry.get("elevation") else elevation
    return SampleFrame(
        timestamp=timestamp,
        satellite=satellite,
        elevation=elev,
        gauges=tuple(hourly.get(timestamp, ())),
        radar=radar,
        year=entry.get("year"),
    )


def load_dataset(manifest_path: str, threads: int = 1) -> Dataset:
    """
    Load every frame listed in a dataset manifest.

    Raster files of distinct frames are read in parallel when ``threads`` > 1;
    the frame order always follows the manifest, sorted by timestamp.
    """
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from e

    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise FormatError(f"{manifest_path}: unknown manifest schema {manifest.get('schema')!r}")

    root = os.path.dirname(os.path.abspath(manifest_path))
    spec = GridSpec.from_dict(manifest["grid"])
    elevation = load_grid(os.path.join(root, manifest["elevation"]), spec)
    loaded = load_gauges(os.path.join(root, manifest["gauges"]), spec)
    hourly = group_by_hour(loaded.gauges)

    entries = sorted(manifest["frames"], key=lambda e: int(e["timestamp"]))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(lambda e: _load_frame(root, spec, e, elevation, hourly), entries))
    else:
        frames = [_load_frame(root, spec, e, elevation, hourly) for e in entries]

    logger.info(f"Loaded {len(frames)} frames from {manifest_path}")
    return Dataset(spec, frames, manifest.get("epoch", ""), root, manifest.get("meta", {}))
