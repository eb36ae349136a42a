"""Hourly generation / demand / price series: CSV ingestion, synthetic generator, splits."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CSV_HEADER = ("timestamp", "generation_kw", "demand_kw", "price")
MAX_FILLED_GAP_HOURS = 3
HOUR = timedelta(hours=1)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Aligned hourly series. ``train_end`` is the first test hour (None if unsplit)."""

    timestamps: tuple[datetime, ...]
    generation: np.ndarray
    demand: np.ndarray
    price: np.ndarray
    train_end: int | None = None
    filled_hours: int = 0

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("generation", "demand", "price"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DataError(f"{name} has shape {arr.shape}, expected ({n},)")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        for a, b in zip(self.timestamps[:-1], self.timestamps[1:]):
            if b - a != HOUR:
                raise DataError(f"timestamps not contiguous hourly at {b.isoformat()}")

    def __len__(self) -> int:
        return len(self.timestamps)

    def series(self, quantity: str) -> np.ndarray:
        return {"generation": self.generation, "demand": self.demand, "price": self.price}[quantity]

    def with_split(self, train_end: int) -> TimeSeriesDataset:
        return TimeSeriesDataset(self.timestamps, self.generation, self.demand, self.price,
                                 train_end, self.filled_hours)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(self.timestamps[0].isoformat().encode() if self.timestamps else b"")
        for arr in (self.generation, self.demand, self.price):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


QUANTITIES = ("generation", "demand", "price")


@dataclass(frozen=True)
class DatasetView:
    """Half-open hour range [start, stop) of a dataset.

    History before ``start`` stays readable (for warm-up); episodes and scored
    targets are restricted to the range.
    """

    dataset: TimeSeriesDataset
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def hours(self) -> range:
        return range(self.start, self.stop)


# -- CSV ---------------------------------------------------------------------


def _parse_time(text: str, line: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"line {line}: bad timestamp {text!r}") from exc
    if ts.minute or ts.second or ts.microsecond:
        raise DataError(f"line {line}: timestamp {text!r} is not on the hour")
    return ts.replace(tzinfo=None)


def load_csv(path) -> TimeSeriesDataset:
    """Read ``timestamp,generation_kw,demand_kw,price``; fill gaps of up to 3 hours linearly."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    times, rows = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: header must be {','.join(CSV_HEADER)}, got {header}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}: line {line}: expected 4 fields, got {len(row)}")
            ts = _parse_time(row[0], line)
            try:
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}: line {line}: non-numeric value in {row[1:]}") from exc
            if not all(np.isfinite(values)):
                raise DataError(f"{path}: line {line}: non-finite value")
            if times:
                if ts == times[-1]:
                    raise DataError(f"{path}: line {line}: duplicate timestamp {ts.isoformat()}")
                if ts < times[-1]:
                    raise DataError(f"{path}: line {line}: timestamp {ts.isoformat()} goes backwards")
            times.append(ts)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")

    out_times, out_rows, filled = [times[0]], [rows[0]], 0
    for ts, values in zip(times[1:], rows[1:]):
        gap = int((ts - out_times[-1]) / HOUR) - 1
        if gap > MAX_FILLED_GAP_HOURS:
            raise DataError(f"{path}: gap of {gap} hours before {ts.isoformat()} exceeds {MAX_FILLED_GAP_HOURS}")
        prev = np.array(out_rows[-1])
        nxt = np.array(values)
        for j in range(1, gap + 1):
            w = j / (gap + 1)
            out_times.append(out_times[-1] + HOUR)
            out_rows.append(list((1 - w) * prev + w * nxt))
        filled += gap
        out_times.append(ts)
        out_rows.append(values)
    if filled:
        log.info("%s: %d hours filled", path, filled)
    arr = np.array(out_rows, dtype=np.float64)
    return TimeSeriesDataset(tuple(out_times), arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(),
                             filled_hours=filled)


def write_csv(dataset: TimeSeriesDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, ts in enumerate(dataset.timestamps):
            w.writerow([ts.isoformat(), repr(float(dataset.generation[i])),
                        repr(float(dataset.demand[i])), repr(float(dataset.price[i]))])


# -- synthetic benchmark -------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    days: int = 120
    start: str = "2020-01-01T00:00"
    base_demand: float = 300.0
    # (amplitude kW, peak hour) per harmonic of the daily cycle
    demand_harmonics: tuple[tuple[float, float], ...] = ((60.0, 18.0), (25.0, 9.0))
    demand_noise_std: float = 15.0
    peak_generation: float = 250.0
    sunrise: float = 6.0
    sunset: float = 18.0
    generation_noise_std: float = 0.25
    offpeak_price: float = 0.03
    peak_price: float = 0.09
    peak_hours: tuple[int, int] = (8, 21)
    price_noise_std: float = 0.005
    price_floor: float = 0.001
    seed: int = 0

    def noiseless(self) -> SynthConfig:
        from dataclasses import replace
        return replace(self, demand_noise_std=0.0, generation_noise_std=0.0, price_noise_std=0.0)


def solar_shape(hour: np.ndarray, sunrise: float, sunset: float) -> np.ndarray:
    x = (hour - sunrise) / (sunset - sunrise)
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)), 0.0)


def synth_generate(config: SynthConfig = SynthConfig()) -> TimeSeriesDataset:
    """Daily-periodic demand, solar-bell generation and two-tier price, plus noise.

    Generation noise is a per-day multiplicative weather factor with relative std
    ``generation_noise_std``; demand and price noise is additive and hourly.
    """
    if config.days < 2:
        raise DataError(f"synthetic data needs at least 2 days, got {config.days}")
    rng = np.random.default_rng(config.seed)
    n = 24 * config.days
    hour = np.arange(n) % 24

    demand = np.full(n, config.base_demand, dtype=np.float64)
    for k, (amp, peak_hour) in enumerate(config.demand_harmonics, start=1):
        demand += amp * np.cos(2 * np.pi * k * (hour - peak_hour) / 24.0)
    if config.demand_noise_std:
        demand += rng.normal(0.0, config.demand_noise_std, n)
    demand = np.maximum(demand, 0.0)

    weather = np.ones(config.days)
    if config.generation_noise_std:
        weather = np.clip(1.0 + rng.normal(0.0, config.generation_noise_std, config.days), 0.0, None)
    generation = config.peak_generation * solar_shape(hour.astype(float), config.sunrise, config.sunset)
    generation = np.maximum(generation * np.repeat(weather, 24), 0.0)

    lo, hi = config.peak_hours
    price = np.where((hour >= lo) & (hour < hi), config.peak_price, config.offpeak_price).astype(np.float64)
    if config.price_noise_std:
        price += rng.normal(0.0, config.price_noise_std, n)
    price = np.maximum(price, config.price_floor)

    t0 = datetime.fromisoformat(config.start)
    if t0.hour or t0.minute:
        raise DataError("synthetic start must be midnight")
    times = tuple(t0 + i * HOUR for i in range(n))
    return TimeSeriesDataset(times, generation, demand, price)


def arbitrage_instance(days: int = 30, demand: float = 300.0, generation: float = 0.0,
                       offpeak_price: float = 0.03, peak_price: float = 0.09,
                       peak_hours: tuple[int, int] = (8, 21)) -> TimeSeriesDataset:
    """Deterministic flat demand/generation with a two-tier price, identical every day."""
    n = 24 * days
    hour = np.arange(n) % 24
    lo, hi = peak_hours
    price = np.where((hour >= lo) & (hour < hi), peak_price, offpeak_price).astype(np.float64)
    t0 = datetime(2020, 1, 1)
    return TimeSeriesDataset(tuple(t0 + i * HOUR for i in range(n)),
                             np.full(n, float(generation)), np.full(n, float(demand)), price)


# -- splitting --------------------------------------------------------------------


def _midnight_offset(dataset: TimeSeriesDataset) -> int:
    first = dataset.timestamps[0]
    return (24 - first.hour) % 24


def split(dataset: TimeSeriesDataset, train_fraction: float, min_hours: int = 49
          ) -> tuple[DatasetView, DatasetView]:
    """Chronological split with the boundary on a midnight.

    ``min_hours`` defaults to one episode plus its terminal hour plus a day of warm-up.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    off = _midnight_offset(dataset)
    days = (n - off) // 24
    cut = off + 24 * int(round(days * train_fraction))
    if cut < min_hours or n - cut < min_hours:
        raise DataError(f"split at hour {cut} of {n} leaves a side shorter than {min_hours} hours")
    ds = dataset.with_split(cut)
    return DatasetView(ds, 0, cut), DatasetView(ds, cut, n)


def full_view(dataset: TimeSeriesDataset) -> DatasetView:
    return DatasetView(dataset, 0, len(dataset))
