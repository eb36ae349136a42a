"""Reference controllers for a day whose generation, demand and prices are known in advance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvParams, MicrogridEnv, degradation_cost, feasible_action, grid_purchase, soc_transition


@dataclass
class DpSolution:
    soc_grid: np.ndarray
    action_grid: np.ndarray
    values: np.ndarray          # (T + 1, n_soc), undiscounted reward-to-go
    value_at_b0: float
    simulated_reward: float
    actions: np.ndarray         # executed actions of the simulated greedy rollout


def _step_tables(b: np.ndarray, acts: np.ndarray, g: float, d: float, p: float, params: EnvParams):
    """Reward and next SOC for every (soc, requested action) pair, matching the environment."""
    r = np.empty((b.size, acts.size))
    nxt = np.empty_like(r)
    for i, bi in enumerate(b):
        for j, aj in enumerate(acts):
            a = feasible_action(bi, aj, params)
            r[i, j] = -p * grid_purchase(d, g, a) - degradation_cost(bi, a, params)
            nb = soc_transition(bi, a, params)
            if a >= 0 and a == (1.0 - bi) * params.capacity / params.eta_c:
                nb = 1.0
            elif a < 0 and a == -bi * params.capacity * params.eta_d:
                nb = 0.0
            nxt[i, j] = nb
    return r, nxt


def solve_day(env: MicrogridEnv, episode_index: int, n_soc: int = 201, n_actions: int = 81) -> DpSolution:
    """Backward induction on an SOC grid with linear interpolation of the value function.

    The greedy policy w.r.t. the tabulated values is then replayed in the real
    environment from the evaluation initial SOC; that replay is the achievable
    reference reward.
    """
    params = env.params
    T = params.horizon
    start = env.starts[episode_index]
    ds = env.view.dataset
    gen, dem, price = (ds.generation[start:start + T], ds.demand[start:start + T], ds.price[start:start + T])
    soc = np.linspace(0.0, 1.0, n_soc)
    acts = np.linspace(params.action_low, params.action_high, n_actions)
    V = np.zeros((T + 1, n_soc))
    for t in range(T - 1, -1, -1):
        r, nxt = _step_tables(soc, acts, gen[t], dem[t], price[t], params)
        V[t] = np.max(r + np.interp(nxt, soc, V[t + 1]), axis=1)

    state = env.reset(episode_index, evaluate=True)
    total = 0.0
    executed = []
    done = False
    t = 0
    while not done:
        b = state.soc
        r, nxt = _step_tables(np.array([b]), acts, gen[t], dem[t], price[t], params)
        j = int(np.argmax(r[0] + np.interp(nxt[0], soc, V[t + 1])))
        state, rew, done, info = env.step(acts[j])
        executed.append(info["action_executed"])
        total += rew
        t += 1
    return DpSolution(soc, acts, V, float(np.interp(params.b0, soc, V[0])), total, np.array(executed))


def constant_action_reward(env: MicrogridEnv, episode_index: int, action: float = 0.0) -> float:
    state = env.reset(episode_index, evaluate=True)
    total, done = 0.0, False
    while not done:
        state, r, done, _ = env.step(action)
        total += r
    return total
