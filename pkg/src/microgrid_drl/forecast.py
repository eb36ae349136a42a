"""k-step-ahead GRU forecasters for generation, demand and price, and MAPE/RMSE scoring.

One scalar-input GRU per (quantity, horizon). Training threads the hidden state
over the whole training series, accumulates the squared-error gradient of every
step and applies a single Adam update per epoch.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .data import QUANTITIES, DatasetView
from .nn import (GruSpec, ParameterStore, clip_grad_norm, gru_readout, gru_step, init_gru,
                 load_checkpoint, optimizer_step, save_checkpoint)

log = logging.getLogger(__name__)

WARMUP_HOURS = 24
_CELL_PARAMS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


class ForecastDivergence(FloatingPointError):
    pass


# -- metrics -------------------------------------------------------------------


def mape(predictions, actuals, return_dropped: bool = False):
    """Mean absolute percentage error in percent; points with a zero actual are skipped."""
    pred = np.asarray(predictions, dtype=np.float64)
    act = np.asarray(actuals, dtype=np.float64)
    if pred.shape != act.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {act.shape}")
    keep = act != 0
    if not np.any(keep):
        raise ValueError("all actuals are zero; MAPE undefined")
    value = float(100.0 * np.mean(np.abs(pred[keep] - act[keep]) / np.abs(act[keep])))
    dropped = int(act.size - keep.sum())
    if return_dropped:
        return value, dropped
    return value


def rmse(predictions, actuals) -> float:
    pred = np.asarray(predictions, dtype=np.float64)
    act = np.asarray(actuals, dtype=np.float64)
    if pred.shape != act.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {act.shape}")
    if pred.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((pred - act) ** 2)))


# -- single forecaster -----------------------------------------------------------


@dataclass
class Forecaster:
    horizon: int
    spec: GruSpec
    store: ParameterStore
    mean: float
    std: float
    losses: list[float] = field(default_factory=list)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def run(self, series) -> np.ndarray:
        """Predictions made after consuming each element, hidden state starting at zero."""
        z = self.normalize(series).reshape(-1, 1)
        g = Graph(record=False)
        params = self.store.bind(g)
        states = g.gru_sequence(z, np.zeros(self.spec.hidden_size),
                                *(params[f"gru.{n}"] for n in _CELL_PARAMS))
        return self.denormalize(gru_readout(g, params, states).value[:, 0])

    def run_stepwise(self, series) -> np.ndarray:
        """Same as :meth:`run` but one :func:`gru_step` per element."""
        z = self.normalize(series)
        g = Graph(record=False)
        params = self.store.bind(g)
        h = g.input(np.zeros(self.spec.hidden_size))
        out = np.empty(z.size)
        for i, x in enumerate(z):
            y, h = gru_step(g, params, self.spec, g.input(x[None]), h)
            out[i] = y.value[0]
        return self.denormalize(out)


def normalization_stats(series) -> tuple[float, float]:
    series = np.asarray(series, dtype=np.float64)
    std = float(series.std())
    return float(series.mean()), std if std > 1e-12 else 1.0


def train_forecaster(series, k: int, epochs: int, rng: np.random.Generator, hidden: int = 32,
                     learning_rate: float = 3e-2, max_grad_norm: float = 1.0,
                     stats: tuple[float, float] | None = None) -> Forecaster:
    """Fit a k-step-ahead forecaster on one training series.

    Every epoch: thread the hidden state from zero over the full series, score
    each step's prediction of ``x[t + k]``, then one Adam update.
    """
    series = np.asarray(series, dtype=np.float64)
    if k < 1:
        raise ValueError("horizon k must be >= 1")
    if series.size <= k:
        raise ValueError(f"series of length {series.size} too short for horizon {k}")
    mean, std = stats if stats is not None else normalization_stats(series)
    spec = GruSpec(1, hidden, 1)
    store = ParameterStore()
    init_gru(store, spec, rng)
    fc = Forecaster(k, spec, store, mean, std)
    z = fc.normalize(series)
    inputs = z[:-k].reshape(-1, 1)
    targets = z[k:].reshape(-1, 1)

    for epoch in range(epochs):
        g = Graph()
        params = store.bind(g)
        cell = [params[f"gru.{n}"] for n in _CELL_PARAMS]
        states = g.gru_sequence(inputs, np.zeros(hidden), *cell)
        pred = gru_readout(g, params, states)
        loss = g.mean(g.square(g.sub(pred, targets)))
        value = float(loss.value)
        if not np.isfinite(value):
            raise ForecastDivergence(f"horizon {k}: non-finite loss at epoch {epoch}")
        store.accumulate(g.backward(loss))
        clip_grad_norm(store, max_grad_norm)
        optimizer_step(store, learning_rate)
        fc.losses.append(value)
    return fc


# -- bundle ------------------------------------------------------------------------


@dataclass
class ForecasterBundle:
    models: dict[tuple[str, int], Forecaster]
    warmup: int = WARMUP_HOURS
    _episode_cache: dict = field(default_factory=dict, repr=False)

    @property
    def horizons(self) -> list[int]:
        return sorted({k for _, k in self.models})

    def get(self, quantity: str, k: int) -> Forecaster:
        try:
            return self.models[(quantity, k)]
        except KeyError:
            raise KeyError(f"bundle has no {quantity} forecaster for horizon {k}") from None

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for key in sorted(self.models):
            h.update(repr(key).encode())
            h.update(self.models[key].store.checksum().encode())
        return h.hexdigest()

    def predict_k_step(self, quantity: str, history, k: int) -> float:
        """Forecast ``k`` hours past the end of ``history`` (which must cover the warm-up)."""
        history = np.asarray(history, dtype=np.float64)
        if history.size < self.warmup:
            raise ValueError(f"history of {history.size} hours shorter than warm-up {self.warmup}")
        return float(self.get(quantity, k).run(history)[-1])

    def episode_forecasts(self, dataset, start: int, horizon: int, obs_k: int) -> np.ndarray:
        """Forecast block of the observation for each step of one episode (and its terminal state).

        Row t holds ``[g(h), d(h), p(h+1), g(h+1), d(h+1), ..., p(h+k), g(h+k), d(h+k)]``
        with h = start + t. Generation and demand models have read up to hour h-1,
        price models up to hour h. Streams start from a zero hidden state
        ``warmup`` hours before the first scored prediction. Cached per start hour.
        """
        key = (id(dataset), start, horizon, obs_k)
        if key in self._episode_cache:
            return self._episode_cache[key]
        W = self.warmup
        lo = start - W - 1
        if lo < 0:
            raise ValueError(f"episode at hour {start} lacks {W + 1} hours of history")
        steps = horizon + 1
        cols = []
        # g/d models fed through hour h-1 -> j-step forecast is hour h-1+j
        g_pred = {j: self.get("generation", j).run(dataset.generation[lo:start + horizon])
                  for j in range(1, obs_k + 2)}
        d_pred = {j: self.get("demand", j).run(dataset.demand[lo:start + horizon])
                  for j in range(1, obs_k + 2)}
        p_pred = {j: self.get("price", j).run(dataset.price[lo:start + horizon + 1])
                  for j in range(1, obs_k + 1)}
        idx_gd = np.arange(steps) + (start - 1 - lo)
        idx_p = np.arange(steps) + (start - lo)
        cols.append(g_pred[1][idx_gd])
        cols.append(d_pred[1][idx_gd])
        for j in range(1, obs_k + 1):
            cols.append(p_pred[j][idx_p])
            cols.append(g_pred[j + 1][idx_gd])
            cols.append(d_pred[j + 1][idx_gd])
        table = np.stack(cols, axis=1)
        self._episode_cache[key] = table
        return table

    # -- persistence --

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for (q, k), fc in sorted(self.models.items()):
            for name, value in fc.store.params.items():
                arrays[f"forecast/{q}/k{k}/{name}"] = value
            arrays[f"forecast/{q}/k{k}/norm"] = np.array([fc.mean, fc.std])
        return arrays

    def save(self, path, config_hash: str = "") -> None:
        hidden = {fc.spec.hidden_size for fc in self.models.values()}
        save_checkpoint(path, self.to_arrays(), config_hash,
                        {"kind": "forecaster_bundle", "warmup": self.warmup,
                         "hidden": hidden.pop() if len(hidden) == 1 else None})

    @classmethod
    def load(cls, path) -> ForecasterBundle:
        arrays, _, meta = load_checkpoint(path)
        if meta.get("kind") != "forecaster_bundle":
            raise ValueError(f"{path} is not a forecaster bundle checkpoint")
        grouped: dict[tuple[str, int], dict[str, np.ndarray]] = {}
        for name, value in arrays.items():
            _, q, kk, pname = name.split("/", 3)
            grouped.setdefault((q, int(kk[1:])), {})[pname] = value
        models = {}
        for (q, k), arrs in grouped.items():
            mean, std = arrs.pop("norm")
            hidden = arrs["gru.Uz"].shape[0]
            store = ParameterStore()
            store.load(arrs)
            models[(q, k)] = Forecaster(k, GruSpec(1, hidden, 1), store, float(mean), float(std))
        return cls(models, warmup=int(meta.get("warmup", WARMUP_HOURS)))


def build_observation(state, forecasts: dict[tuple[str, int], float], k: int) -> np.ndarray:
    """State followed by ``g(t), d(t)`` and one ``p, g, d`` triple per horizon 1..k.

    ``forecasts[(quantity, j)]`` is the j-hour-ahead value (generation/demand
    counted from the hour the state last observed, price from the current hour).
    """
    needed = [("generation", 1), ("demand", 1)]
    for j in range(1, k + 1):
        needed += [("price", j), ("generation", j + 1), ("demand", j + 1)]
    missing = [key for key in needed if key not in forecasts]
    if missing:
        raise KeyError(f"forecasts missing horizons {missing}")
    return np.concatenate([np.asarray(state, dtype=np.float64),
                           np.array([forecasts[key] for key in needed], dtype=np.float64)])


def observation_width(k: int) -> int:
    return 4 + 2 + 3 * k


def train_bundle(train: DatasetView, horizons=(1, 2), epochs: int = 200, seed: int = 0,
                 hidden: int = 32, learning_rate: float = 3e-2,
                 quantities=QUANTITIES) -> ForecasterBundle:
    """Train every (quantity, horizon) forecaster on the training hours only."""
    ds = train.dataset
    seeds = np.random.SeedSequence(seed).spawn(len(quantities) * len(horizons))
    models = {}
    i = 0
    for q in quantities:
        series = ds.series(q)[train.start:train.stop]
        for k in horizons:
            rng = np.random.default_rng(seeds[i])
            i += 1
            log.info("training %s forecaster, horizon %d", q, k)
            models[(q, k)] = train_forecaster(series, k, epochs, rng, hidden, learning_rate)
    return ForecasterBundle(models)


@dataclass
class ForecastScore:
    quantity: str
    horizon: int
    mape: float
    rmse: float
    n: int
    dropped_zero: int


def evaluate_forecaster(fc: Forecaster, series, start: int, stop: int,
                        warmup: int = WARMUP_HOURS) -> tuple[np.ndarray, np.ndarray]:
    """Predictions for targets ``series[t + k]`` with t in [start, stop - k).

    The stream begins ``warmup`` hours before ``start``; those hours are never scored.
    """
    series = np.asarray(series, dtype=np.float64)
    lo = max(0, start - warmup)
    if start - lo < warmup:
        raise ValueError(f"need {warmup} hours before hour {start}")
    k = fc.horizon
    preds = fc.run(series[lo:stop - k])
    made_at = np.arange(lo, stop - k)
    keep = made_at >= start
    return preds[keep], series[made_at[keep] + k]


def evaluate_bundle(bundle: ForecasterBundle, test: DatasetView) -> list[ForecastScore]:
    ds = test.dataset
    scores = []
    for (q, k), fc in sorted(bundle.models.items(), key=lambda kv: (QUANTITIES.index(kv[0][0]), kv[0][1])):
        pred, act = evaluate_forecaster(fc, ds.series(q), test.start, test.stop, bundle.warmup)
        m, dropped = mape(pred, act, return_dropped=True)
        scores.append(ForecastScore(q, k, m, rmse(pred, act), int(act.size), dropped))
    return scores


REPORT_HEADER = ("quantity", "horizon", "mape_pct", "rmse", "n", "dropped_zero")


def write_report(scores: list[ForecastScore], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for s in scores:
            w.writerow((s.quantity, s.horizon, f"{s.mape:.6g}", f"{s.rmse:.6g}", s.n, s.dropped_zero))


def format_table(scores: list[ForecastScore]) -> str:
    """Quantity rows, MAPE/RMSE column pairs per horizon."""
    horizons = sorted({s.horizon for s in scores})
    by = {(s.quantity, s.horizon): s for s in scores}
    head = f"{'':<12}" + "".join(f"{f'{k}-step MAPE':>14}{'RMSE':>12}" for k in horizons)
    lines = [head]
    for q in QUANTITIES:
        if not any((q, k) in by for k in horizons):
            continue
        row = f"{q:<12}"
        for k in horizons:
            s = by.get((q, k))
            row += f"{s.mape:>13.2f}%{s.rmse:>12.4g}" if s else " " * 26
        lines.append(row)
    return "\n".join(lines)
