"""Load-series ingestion, alignment, windowing, owner partitioning and a
synthetic rectangular-wave load generator."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DegenerateStatsError, InsufficientDataError, ParseError

log = logging.getLogger(__name__)

DATASET_MAGIC = b"FNLMDS01"

# Power-on thresholds in watts; "on" means strictly greater than the value.
APPLIANCE_THRESHOLDS = {
    "microwave": 200.0,
    "washing machine": 5.0,
    "kettle": 1400.0,
    "dishwasher": 10.0,
    "tumble dryer": 130.0,
    "television": 10.0,
    "pelletizer": 500.0,
    "double-pole contactor": 100.0,
    "exhaust fan": 1000.0,
    "milling machine": 5000.0,
}


def _norm_name(name: str) -> str:
    return " ".join(name.lower().replace("_", " ").split())


@dataclass(frozen=True)
class ApplianceThreshold:
    appliance: str
    watts: float

    def __post_init__(self):
        if not self.watts > 0:
            raise DataError(f"threshold for {self.appliance!r} must be positive, got {self.watts}")

    @classmethod
    def lookup(cls, appliance: str) -> "ApplianceThreshold":
        key = _norm_name(appliance)
        if key not in APPLIANCE_THRESHOLDS:
            raise DataError(f"no tabulated threshold for appliance {appliance!r}")
        return cls(appliance, APPLIANCE_THRESHOLDS[key])


@dataclass
class LoadSeries:
    """A power time series in watts.

    ``timestamps`` is None for series on a uniform grid (``start_epoch_s +
    i * period_s``); raw ingested series keep their parsed timestamps until
    :func:`align_and_resample` puts them on a grid.
    """

    meter_id: str
    values: np.ndarray
    period_s: float
    start_epoch_s: int = 0
    appliance: Optional[str] = None
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise DataError(f"{self.meter_id}: series must be a nonempty 1-D array")
        if not self.period_s > 0:
            raise DataError(f"{self.meter_id}: period_s must be positive")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{self.meter_id}: non-finite values")
        if np.any(self.values < 0):
            i = int(np.argmax(self.values < 0))
            raise DataError(f"{self.meter_id}: negative power {self.values[i]} at sample {i}")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
            if self.timestamps.shape != self.values.shape:
                raise DataError(f"{self.meter_id}: timestamps and values differ in length")

    @property
    def kind(self) -> str:
        return "total" if self.appliance is None else f"appliance({self.appliance})"

    def __len__(self) -> int:
        return self.values.shape[0]

    def times(self) -> np.ndarray:
        if self.timestamps is not None:
            return self.timestamps
        return self.start_epoch_s + self.period_s * np.arange(len(self))

    def slice(self, start: int, stop: int) -> "LoadSeries":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return LoadSeries(
            self.meter_id,
            self.values[start:stop],
            self.period_s,
            int(round(self.start_epoch_s + start * self.period_s)),
            self.appliance,
            ts,
        )


@dataclass(frozen=True)
class CsvSchema:
    timestamp: str
    aggregate: str
    appliances: dict = field(default_factory=dict)  # column name -> appliance name
    period_s: Optional[float] = None  # inferred from the median timestamp step when None


def ingest_csv(path, schema: CsvSchema) -> list[LoadSeries]:
    """Read one aggregate column and any number of appliance columns.

    Returns the aggregate series first, then appliances in schema order.  Line
    numbers in errors count the header as line 1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    cols = [schema.aggregate, *schema.appliances]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        missing = [c for c in [schema.timestamp, *cols] if c not in header]
        if missing:
            raise DataError(f"{path}: columns missing from header: {missing}")
        t_idx = header.index(schema.timestamp)
        idx = [header.index(c) for c in cols]
        times: list[float] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                t = float(row[t_idx])
                vals = [float(row[i]) for i in idx]
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", lineno) from None
            if not np.isfinite(t) or not all(np.isfinite(vals)):
                raise ParseError("non-finite value", lineno)
            for c, v in zip(cols, vals):
                if v < 0:
                    raise ParseError(f"negative power {v} in column {c!r}", lineno)
            if times and t <= times[-1]:
                raise ParseError(f"timestamp {t} not after previous {times[-1]}", lineno)
            times.append(t)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")

    ts = np.asarray(times)
    data = np.asarray(rows, dtype=np.float64)
    period = schema.period_s
    if period is None:
        period = float(np.median(np.diff(ts))) if len(ts) > 1 else 1.0
    meter = path.stem
    out = [LoadSeries(f"{meter}:{schema.aggregate}", data[:, 0], period, int(ts[0]), None, ts)]
    for j, (col, name) in enumerate(schema.appliances.items(), start=1):
        out.append(LoadSeries(f"{meter}:{col}", data[:, j], period, int(ts[0]), name, ts))
    return out


class Aligned(NamedTuple):
    total: LoadSeries
    appliance: LoadSeries
    truncated_at_s: Optional[float]  # timestamp of the last kept sample before a long gap
    dropped_s: float  # seconds of overlap discarded by truncation


def align_and_resample(
    total: LoadSeries, appliance: LoadSeries, period_s: float, max_gap_s: float = 30.0
) -> Aligned:
    """Put both series on one uniform grid over their common time range.

    Gaps up to ``max_gap_s`` are forward-filled.  The pair is cut at the first
    longer gap in either series; only the contiguous prefix is kept.
    """
    if not period_s > 0:
        raise DataError("period_s must be positive")
    ta, tb = total.times(), appliance.times()
    start = max(ta[0], tb[0])
    end = min(ta[-1], tb[-1])
    if end < start:
        raise DataError("series do not overlap in time")

    gaps = sorted(
        (float(ts[g]), float(ts[g + 1])) for ts in (ta, tb) for g in np.flatnonzero(np.diff(ts) > max_gap_s)
    )
    cut = end
    for a, b in gaps:
        if b <= start:
            continue
        if a < start:
            # a gap straddling the overlap start: begin after it
            start = b
            continue
        if a < cut:
            cut = a
        break
    if cut < start:
        raise DataError("no contiguous overlap before the first long gap")

    n = int(np.floor((cut - start) / period_s + 1e-9)) + 1
    grid = start + period_s * np.arange(n)

    def sample(series: LoadSeries, ts: np.ndarray) -> np.ndarray:
        i = np.searchsorted(ts, grid + 1e-9, side="right") - 1
        if np.any(i < 0):
            raise DataError(f"{series.meter_id}: grid starts before first sample")
        return series.values[i]

    truncated = cut < end
    dropped = float(end - cut) if truncated else 0.0
    if truncated:
        log.warning(
            "alignment truncated at t=%.1f s: %.1f s of overlap dropped after a gap > %.1f s",
            cut,
            dropped,
            max_gap_s,
        )
    t0 = int(round(start))
    out_a = LoadSeries(total.meter_id, sample(total, ta), period_s, t0, total.appliance)
    out_b = LoadSeries(appliance.meter_id, sample(appliance, tb), period_s, t0, appliance.appliance)
    return Aligned(out_a, out_b, float(cut) if truncated else None, dropped)


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateStatsError(f"std must be positive, got {self.std}")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


IDENTITY_STATS = NormalizationStats(0.0, 1.0)


def normalize_fit(values) -> NormalizationStats:
    """Mean and population standard deviation."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot fit normalization on an empty array")
    std = float(np.std(x))
    if std == 0.0 or not np.isfinite(std):
        raise DegenerateStatsError("constant series has zero variance")
    return NormalizationStats(float(np.mean(x)), std)


@dataclass(frozen=True)
class WindowedDataset:
    W: int
    inputs: np.ndarray  # (N, W) float32, z-scored totals
    target_power: np.ndarray  # (N,) watts
    target_power_norm: np.ndarray  # (N,) z-scored with target_stats
    target_on: np.ndarray  # (N,) uint8
    stats: NormalizationStats
    target_stats: NormalizationStats = IDENTITY_STATS

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2 or self.inputs.shape[1] != self.W:
            raise DataError(f"inputs must be (N, {self.W}), got {self.inputs.shape}")
        for name in ("target_power", "target_power_norm", "target_on"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"{name} must have shape ({n},)")

    @property
    def N(self) -> int:
        return int(self.inputs.shape[0])

    def __len__(self) -> int:
        return self.N

    def subset(self, start: int, stop: int) -> "WindowedDataset":
        return WindowedDataset(
            self.W,
            self.inputs[start:stop],
            self.target_power[start:stop],
            self.target_power_norm[start:stop],
            self.target_on[start:stop],
            self.stats,
            self.target_stats,
        )

    def targets(self, mode: str) -> np.ndarray:
        from .model import CLASSIFICATION

        if mode == CLASSIFICATION:
            return self.target_on.astype(np.float32)
        return self.target_power_norm


def concat_datasets(parts: Sequence[WindowedDataset]) -> WindowedDataset:
    if not parts:
        raise DataError("nothing to concatenate")
    first = parts[0]
    for p in parts[1:]:
        if p.W != first.W or p.stats != first.stats or p.target_stats != first.target_stats:
            raise DataError("datasets disagree on window width or normalization")
    return WindowedDataset(
        first.W,
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.target_power for p in parts]),
        np.concatenate([p.target_power_norm for p in parts]),
        np.concatenate([p.target_on for p in parts]),
        first.stats,
        first.target_stats,
    )


def make_windows(
    total: LoadSeries,
    appliance: LoadSeries,
    W: int,
    threshold: ApplianceThreshold,
    stats: NormalizationStats,
    target_stats: NormalizationStats = IDENTITY_STATS,
) -> WindowedDataset:
    """Slide a width-``W`` window one sample at a time.

    Window ``s`` covers ``[s, s + W - 1]`` and its target is the appliance value
    at ``s + W // 2``.
    """
    if W < 1 or W % 2 == 0:
        raise DataError(f"window width must be a positive odd integer, got {W}")
    T = len(total)
    if len(appliance) != T:
        raise DataError(f"series lengths differ: {T} vs {len(appliance)}")
    if T < W:
        raise InsufficientDataError(f"series of length {T} is shorter than the window {W}")
    z = stats.apply(total.values).astype(np.float32)
    inputs = np.ascontiguousarray(sliding_window_view(z, W))
    half = W // 2
    target = appliance.values[half : T - half].astype(np.float32)
    return WindowedDataset(
        W,
        inputs,
        target,
        target_stats.apply(target).astype(np.float32),
        (target > threshold.watts).astype(np.uint8),
        stats,
        target_stats,
    )


def partition_owners(ds: WindowedDataset, K: int, samples_per_owner: int) -> list[WindowedDataset]:
    """K contiguous, disjoint, time-ordered blocks of ``samples_per_owner`` windows."""
    if K < 1 or samples_per_owner < 1:
        raise DataError("K and samples_per_owner must be positive")
    need = K * samples_per_owner
    if need > ds.N:
        raise InsufficientDataError(f"{K} owners x {samples_per_owner} windows = {need} > {ds.N} available")
    if need < ds.N:
        log.info("partition leaves %d windows unused", ds.N - need)
    return [ds.subset(k * samples_per_owner, (k + 1) * samples_per_owner) for k in range(K)]


# --- synthetic loads --------------------------------------------------------------


@dataclass(frozen=True)
class SynthAppliance:
    name: str
    on_power: float
    duty_cycle: float
    cycle_len: int


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    appliances: tuple
    period_s: float = 8.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self,
            "appliances",
            tuple(a if isinstance(a, SynthAppliance) else SynthAppliance(**a) for a in self.appliances),
        )


def rect_wave(n: int, on_power: float, duty_cycle: float, cycle_len: int, phase: int) -> np.ndarray:
    on_len = int(round(duty_cycle * cycle_len))
    pos = (np.arange(n) + phase) % cycle_len
    return np.where(pos < on_len, float(on_power), 0.0)


def synth_generate(cfg: SynthConfig) -> tuple[LoadSeries, list[LoadSeries]]:
    if cfg.n_samples < 1:
        raise DataError("n_samples must be positive")
    rng = np.random.default_rng(cfg.seed)
    apps = []
    for a in cfg.appliances:
        if not 0 < a.duty_cycle < 1:
            raise DataError(f"{a.name}: duty_cycle must lie in (0, 1)")
        if a.cycle_len < 1:
            raise DataError(f"{a.name}: cycle_len must be positive")
        phase = int(rng.integers(0, a.cycle_len))
        wave = rect_wave(cfg.n_samples, a.on_power, a.duty_cycle, a.cycle_len, phase)
        apps.append(LoadSeries(f"synth:{a.name}", wave, cfg.period_s, 0, a.name))
    total = np.zeros(cfg.n_samples)
    for s in apps:
        total += s.values
    if cfg.noise_std > 0:
        total += np.abs(rng.normal(0.0, cfg.noise_std, cfg.n_samples))
    return LoadSeries("synth:aggregate", total, cfg.period_s, 0, None), apps


# --- on-disk cache ----------------------------------------------------------------


def save_dataset(path, ds: WindowedDataset) -> Path:
    """``FNLMDS01 | W | N | inputs f32 | target_power f32 | target_power_norm f32 |
    target_on u8 | mean std target_mean target_std (f64)``, all little-endian."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<QQ", ds.W, ds.N))
        fh.write(np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes())
        fh.write(np.asarray(ds.target_power, dtype="<f4").tobytes())
        fh.write(np.asarray(ds.target_power_norm, dtype="<f4").tobytes())
        fh.write(np.asarray(ds.target_on, dtype="u1").tobytes())
        fh.write(struct.pack("<dddd", ds.stats.mean, ds.stats.std, ds.target_stats.mean, ds.target_stats.std))
    return path


def load_dataset(path) -> WindowedDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise DataError(f"{path}: not a windowed dataset file")
    W, N = struct.unpack_from("<QQ", raw, 8)
    off = 24
    expect = off + 4 * N * W + 8 * N + N + 32
    if len(raw) != expect:
        raise DataError(f"{path}: size {len(raw)} does not match header (expected {expect})")

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    inputs = take("<f4", N * W).reshape(N, W).astype(np.float32)
    tp = take("<f4", N).astype(np.float32)
    tpn = take("<f4", N).astype(np.float32)
    on = take("u1", N)
    mean, std, tmean, tstd = struct.unpack_from("<dddd", raw, off)
    return WindowedDataset(int(W), inputs, tp, tpn, on, NormalizationStats(mean, std), NormalizationStats(tmean, tstd))
