"""Hourly battery-microgrid MDP.

State is ``[soc, generation of the last hour, demand of the last hour, current price]``.
The action is battery power in kW (charging positive). Unmet demand is bought
from the grid; surplus renewable output is curtailed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import DatasetView


@dataclass(frozen=True)
class EnvParams:
    d_max: float = 400.0
    c_max: float = 400.0
    capacity: float = 2000.0
    eta_c: float = 0.95
    eta_d: float = 0.95
    lambda_low: float = 0.013
    lambda_high: float = 0.005
    horizon: int = 24
    b0: float = 0.5
    b0_train_low: float = 0.2
    b0_train_high: float = 0.8

    def __post_init__(self):
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")
        if not self.lambda_low >= self.lambda_high >= 0:
            raise ValueError("need lambda_low >= lambda_high >= 0")
        if not 0 <= self.b0 <= 1 or not 0 <= self.b0_train_low <= self.b0_train_high <= 1:
            raise ValueError("initial SOC settings must lie in [0, 1]")
        if self.d_max <= 0 or self.c_max <= 0 or self.capacity <= 0 or self.horizon < 1:
            raise ValueError("power limits, capacity and horizon must be positive")

    @property
    def action_low(self) -> float:
        return -self.d_max

    @property
    def action_high(self) -> float:
        return self.c_max


class EnvState(NamedTuple):
    soc: float
    generation_prev: float
    demand_prev: float
    price: float


STATE_SIZE = 4


def soc_transition(b: float, a: float, params: EnvParams) -> float:
    if a >= 0:
        nxt = b + params.eta_c / params.capacity * a
    else:
        nxt = b + a / (params.capacity * params.eta_d)
    return min(1.0, max(0.0, nxt))


def degradation_cost(b: float, a: float, params: EnvParams) -> float:
    rate = params.lambda_low if b < 0.5 else params.lambda_high
    return rate * abs(a)


def grid_purchase(demand: float, generation: float, action: float) -> float:
    return max(0.0, demand - generation + action)


def reward(price: float, purchase: float, b: float, a: float, params: EnvParams) -> float:
    return -price * purchase - degradation_cost(b, a, params)


def feasible_action(b: float, a: float, params: EnvParams) -> float:
    """Clamp to the power limits, then to what the SOC range can absorb or supply."""
    a = min(params.c_max, max(-params.d_max, float(a)))
    if a >= 0:
        return min(a, (1.0 - b) * params.capacity / params.eta_c)
    return max(a, -b * params.capacity * params.eta_d)


class EnvError(RuntimeError):
    pass


class MicrogridEnv:
    """One episode at a time over midnight-aligned days of a dataset view.

    ``warmup`` hours of history must precede an episode start so that the
    forecasters (and the last-hour state entries) have data to read.
    """

    def __init__(self, view: DatasetView, params: EnvParams = EnvParams(), warmup: int = 24):
        self.view = view
        self.params = params
        self.warmup = max(1, warmup)
        ds = view.dataset
        # python floats: scalar indexing is much cheaper than on numpy arrays
        self._gen, self._dem, self._price = ds.generation.tolist(), ds.demand.tolist(), ds.price.tolist()
        first_midnight = (24 - ds.timestamps[0].hour) % 24
        T = params.horizon
        self.starts = [
            s for s in range(first_midnight, view.stop, 24)
            if s >= view.start and s - self.warmup >= 0 and s + T + 1 <= view.stop
        ]
        self.t = 0
        self.start = None
        self.soc = params.b0
        self.done = True

    @property
    def n_episodes(self) -> int:
        return len(self.starts)

    def reset(self, episode_index: int, rng: np.random.Generator | None = None,
              evaluate: bool = False) -> EnvState:
        if not 0 <= episode_index < len(self.starts):
            raise EnvError(f"episode index {episode_index} out of range (have {len(self.starts)} episodes)")
        p = self.params
        if evaluate:
            self.soc = p.b0
        else:
            if rng is None:
                raise EnvError("training resets need an rng")
            self.soc = float(rng.uniform(p.b0_train_low, p.b0_train_high))
        self.start = self.starts[episode_index]
        self.t = 0
        self.done = False
        return self.state()

    def state(self) -> EnvState:
        h = self.start + self.t
        return EnvState(self.soc, self._gen[h - 1], self._dem[h - 1], self._price[h])

    @property
    def hour(self) -> int:
        return self.start + self.t

    def step(self, action: float) -> tuple[EnvState, float, bool, dict]:
        if self.done:
            raise EnvError("step called on a finished episode; reset first")
        p = self.params
        h = self.start + self.t
        b = self.soc
        requested = float(action)
        a = feasible_action(b, requested, p)
        e = grid_purchase(self._dem[h], self._gen[h], a)
        r = reward(self._price[h], e, b, a, p)
        nxt = soc_transition(b, a, p)
        if a >= 0 and a == (1.0 - b) * p.capacity / p.eta_c:
            nxt = 1.0
        elif a < 0 and a == -b * p.capacity * p.eta_d:
            nxt = 0.0
        info = {
            "t": self.t, "hour": h, "soc": b, "generation": self._gen[h],
            "demand": self._dem[h], "price": self._price[h],
            "action_requested": requested, "action_executed": a, "purchase": e, "reward": r,
        }
        self.soc = nxt
        self.t += 1
        self.done = self.t == p.horizon
        return self.state(), r, self.done, info


TRAJECTORY_HEADER = ("t", "soc", "generation_prev", "demand_prev", "price",
                     "action_requested", "action_executed", "purchase", "reward")


def trajectory_rows(states: list[EnvState], infos: list[dict]) -> list[tuple]:
    return [
        (info["t"], s.soc, s.generation_prev, s.demand_prev, s.price,
         info["action_requested"], info["action_executed"], info["purchase"], info["reward"])
        for s, info in zip(states, infos)
    ]


def write_trajectory_log(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        w.writerows(rows)
