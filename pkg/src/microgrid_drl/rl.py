"""PPO with GAE for the two energy-management schemes.

``with-prediction``: frozen forecasters extend the state with a forecast block;
feedforward actor and critic.
``without-prediction``: raw state into separate GRU+MLP actor and critic whose
hidden states start at zero every episode and are re-threaded from zero in
every update pass.

Rollout workers are independent environment instances stepped in lockstep,
each with its own random stream, so one batched network call serves all of them.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Graph
from .data import DatasetView
from .env import STATE_SIZE, EnvParams, MicrogridEnv
from .forecast import ForecasterBundle, observation_width
from .nn import (GruSpec, MlpSpec, ParameterStore, clip_grad_norm, deterministic_action,
                 gaussian_sample, init_gru, init_mlp, latent_log_prob, load_checkpoint,
                 mlp_forward, optimizer_step, prefixed, save_checkpoint, unprefixed)

log = logging.getLogger(__name__)

WITH_PREDICTION = "with-prediction"
WITHOUT_PREDICTION = "without-prediction"
SCHEMES = (WITH_PREDICTION, WITHOUT_PREDICTION)


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 3
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    workers: int = 10
    iterations: int = 500
    normalize_advantages: bool = True
    max_grad_norm: float = 0.5
    reward_scale: float = 0.01
    mlp_hidden: tuple[int, ...] = (64, 64)
    gru_hidden: int = 32
    eval_every: int = 25

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0 or self.epochs < 1 or self.workers < 1 or self.iterations < 0:
            raise ValueError("need clip_eps > 0, epochs >= 1, workers >= 1, iterations >= 0")


# -- advantage estimation and surrogate --------------------------------------------


def compute_gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward recursion over the last axis with terminal value and advantage zero.

    ``R[t] = gamma*lam*A[t+1] + r[t] + gamma*v[t+1]`` and ``A[t] = R[t] - v[t]``.
    Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ")
    if r.size == 0 or r.shape[-1] == 0:
        raise ValueError("empty reward sequence")
    T = r.shape[-1]
    adv = np.empty_like(r)
    ret = np.empty_like(r)
    next_adv = np.zeros(r.shape[:-1])
    next_v = np.zeros(r.shape[:-1])
    for t in range(T - 1, -1, -1):
        ret[..., t] = gamma * lam * next_adv + r[..., t] + gamma * next_v
        adv[..., t] = ret[..., t] - v[..., t]
        next_adv = adv[..., t]
        next_v = v[..., t]
    return adv, ret


def clipped_surrogate(ratio, advantage, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any(ratio <= 0):
        raise ValueError("probability ratio must be positive")
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - eps, 1 + eps) * advantage)


def clipped_surrogate_node(g: Graph, ratio, advantage, eps: float):
    return g.minimum(g.mul(ratio, advantage), g.mul(g.clip(ratio, 1 - eps, 1 + eps), advantage))


# -- observation normalisation ----------------------------------------------------


class RunningNorm:
    """Per-feature running mean/variance (parallel Welford merge)."""

    def __init__(self, size: int, clip: float = 10.0):
        self.mean = np.zeros(size)
        self.var = np.ones(size)
        self.count = 0.0
        self.clip = clip

    def update(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.size)
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(0)
        b_var = batch.var(0)
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta * delta * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean.copy(), "var": self.var.copy(), "count": np.array([self.count])}

    @classmethod
    def from_arrays(cls, arrays) -> RunningNorm:
        norm = cls(arrays["mean"].size)
        norm.mean = arrays["mean"].copy()
        norm.var = arrays["var"].copy()
        norm.count = float(arrays["count"][0])
        return norm


# -- agents -------------------------------------------------------------------------


class FeedForwardAgent:
    """MLP actor (mean of the pre-squash Gaussian) and MLP critic."""

    recurrent = False

    def __init__(self, obs_dim: int, rng: np.random.Generator, mlp_hidden=(64, 64)):
        self.obs_dim = obs_dim
        self.actor_spec = MlpSpec((obs_dim, *mlp_hidden, 1))
        self.critic_spec = MlpSpec((obs_dim, *mlp_hidden, 1))
        self.actor = ParameterStore()
        self.critic = ParameterStore()
        init_mlp(self.actor, self.actor_spec, rng, "pi", out_scale=0.01)
        self.actor.add("pi.log_std", np.zeros(1))
        init_mlp(self.critic, self.critic_spec, rng, "v")

    def initial_hidden(self, batch: int):
        return None

    def act(self, obs: np.ndarray, hidden=None):
        g = Graph(record=False)
        pa, pc = self.actor.bind(g), self.critic.bind(g)
        x = g.input(obs)
        mean = mlp_forward(g, pa, self.actor_spec, x, "pi").value[:, 0]
        value = mlp_forward(g, pc, self.critic_spec, x, "v").value[:, 0]
        return mean, value, None

    def forward_sequence(self, g: Graph, pa, pc, obs_seq: np.ndarray):
        """``obs_seq`` is (T, B, D); returns mean (T*B, 1) and value (T*B,) nodes, time-major."""
        x = g.input(obs_seq.reshape(-1, self.obs_dim))
        mean = mlp_forward(g, pa, self.actor_spec, x, "pi")
        value = g.reshape(mlp_forward(g, pc, self.critic_spec, x, "v"), (x.shape[0],))
        return mean, value


class RecurrentAgent:
    """Separate GRU+MLP actor and critic; the MLP reads the new hidden state and the raw input."""

    recurrent = True

    def __init__(self, obs_dim: int, rng: np.random.Generator, mlp_hidden=(64, 64), gru_hidden: int = 32):
        self.obs_dim = obs_dim
        self.gru_spec = GruSpec(obs_dim, gru_hidden, 0)
        self.actor_spec = MlpSpec((gru_hidden + obs_dim, *mlp_hidden, 1))
        self.critic_spec = MlpSpec((gru_hidden + obs_dim, *mlp_hidden, 1))
        self.actor = ParameterStore()
        self.critic = ParameterStore()
        init_gru(self.actor, self.gru_spec, rng, "pi.gru")
        init_mlp(self.actor, self.actor_spec, rng, "pi", out_scale=0.01)
        self.actor.add("pi.log_std", np.zeros(1))
        init_gru(self.critic, self.gru_spec, rng, "v.gru")
        init_mlp(self.critic, self.critic_spec, rng, "v")

    def initial_hidden(self, batch: int):
        n = self.gru_spec.hidden_size
        return np.zeros((batch, n)), np.zeros((batch, n))

    @staticmethod
    def _cell(params, prefix):
        return [params[f"{prefix}.{n}"] for n in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")]

    def act(self, obs: np.ndarray, hidden):
        h_pi, h_v = hidden
        g = Graph(record=False)
        pa, pc = self.actor.bind(g), self.critic.bind(g)
        x = g.input(obs)
        hp = g.gru_cell(x, g.input(h_pi), *self._cell(pa, "pi.gru"))
        hv = g.gru_cell(x, g.input(h_v), *self._cell(pc, "v.gru"))
        mean = mlp_forward(g, pa, self.actor_spec, g.concat([hp, x]), "pi").value[:, 0]
        value = mlp_forward(g, pc, self.critic_spec, g.concat([hv, x]), "v").value[:, 0]
        return mean, value, (hp.value, hv.value)

    def forward_sequence(self, g: Graph, pa, pc, obs_seq: np.ndarray):
        T, B, D = obs_seq.shape
        h0 = np.zeros((B, self.gru_spec.hidden_size))
        xs = g.input(obs_seq)
        x_flat = g.input(obs_seq.reshape(T * B, D))
        hp = g.reshape(g.gru_sequence(xs, h0, *self._cell(pa, "pi.gru")), (T * B, -1))
        hv = g.reshape(g.gru_sequence(xs, h0, *self._cell(pc, "v.gru")), (T * B, -1))
        mean = mlp_forward(g, pa, self.actor_spec, g.concat([hp, x_flat]), "pi")
        value = g.reshape(mlp_forward(g, pc, self.critic_spec, g.concat([hv, x_flat]), "v"), (T * B,))
        return mean, value


def make_agent(scheme: str, obs_dim: int, rng: np.random.Generator, config: PpoConfig):
    if scheme == WITH_PREDICTION:
        return FeedForwardAgent(obs_dim, rng, config.mlp_hidden)
    if scheme == WITHOUT_PREDICTION:
        return RecurrentAgent(obs_dim, rng, config.mlp_hidden, config.gru_hidden)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


# -- observations ---------------------------------------------------------------------


class ObservationBuilder:
    """Maps an environment's current state to the scheme's raw observation."""

    def __init__(self, scheme: str, bundle: ForecasterBundle | None = None):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        if scheme == WITH_PREDICTION:
            if bundle is None:
                raise ValueError("the with-prediction scheme needs a trained forecaster bundle")
            if max(bundle.horizons, default=0) < 2:
                raise ValueError("forecaster bundle needs horizons 1 and 2")
        self.scheme = scheme
        self.bundle = bundle
        self.obs_k = max(bundle.horizons) - 1 if bundle is not None and scheme == WITH_PREDICTION else 0

    @property
    def width(self) -> int:
        return observation_width(self.obs_k) if self.scheme == WITH_PREDICTION else STATE_SIZE

    @property
    def warmup(self) -> int:
        return (self.bundle.warmup if self.bundle is not None else 24) + 1

    def __call__(self, env: MicrogridEnv, state) -> np.ndarray:
        s = np.asarray(state, dtype=np.float64)
        if self.scheme == WITHOUT_PREDICTION:
            return s
        table = self.bundle.episode_forecasts(env.view.dataset, env.start, env.params.horizon, self.obs_k)
        return np.concatenate([s, table[env.t]])


# -- rollouts ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Time-major (T, B) rollout record of one episode per worker."""

    obs: np.ndarray          # normalised, (T, B, D)
    raw_obs: np.ndarray      # (T, B, D)
    latent: np.ndarray       # pre-squash samples u
    log_prob: np.ndarray
    rewards: np.ndarray      # unscaled
    values: np.ndarray
    requested: np.ndarray
    executed: np.ndarray
    price: np.ndarray
    soc: np.ndarray
    episodes: list[int]
    hidden_pi: np.ndarray | None = None   # (T, B, H) state fed into step t
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def episode_rewards(self) -> np.ndarray:
        return self.rewards.sum(axis=0)


def make_envs(view: DatasetView, params: EnvParams, n: int, warmup: int) -> list[MicrogridEnv]:
    envs = [MicrogridEnv(view, params, warmup) for _ in range(n)]
    if envs[0].n_episodes == 0:
        raise ValueError("dataset view holds no complete episodes")
    return envs


def rollout(agent, envs: list[MicrogridEnv], rngs: list[np.random.Generator], build_obs: ObservationBuilder,
            normalizer: RunningNorm, episodes: list[int] | None = None, evaluate: bool = False,
            deterministic: bool = False) -> Batch:
    """One episode per environment, all stepped together."""
    B = len(envs)
    params = envs[0].params
    T = params.horizon
    low, high = params.action_low, params.action_high
    if episodes is None:
        episodes = [int(rng.integers(env.n_episodes)) for env, rng in zip(envs, rngs)]
    states = []
    for i, (env, ep) in enumerate(zip(envs, episodes)):
        try:
            states.append(env.reset(ep, rngs[i], evaluate=evaluate))
        except Exception as exc:
            raise RuntimeError(f"worker {i}: {exc}") from exc
    D = build_obs.width
    rec = {k: np.zeros((T, B)) for k in ("latent", "log_prob", "rewards", "values", "requested",
                                         "executed", "price", "soc")}
    obs_n = np.zeros((T, B, D))
    obs_r = np.zeros((T, B, D))
    hidden = agent.initial_hidden(B)
    hid_log = np.zeros((T, B, hidden[0].shape[1])) if hidden is not None else None
    for t in range(T):
        raw = np.stack([build_obs(env, s) for env, s in zip(envs, states)])
        x = normalizer(raw)
        if hid_log is not None:
            hid_log[t] = hidden[0]
        mean, value, hidden = agent.act(x, hidden)
        log_std = agent.actor["pi.log_std"]
        if deterministic:
            actions = deterministic_action(mean, low, high)
            u = mean.copy()
            lp = np.zeros(B)
        else:
            actions = np.empty(B)
            u = np.empty(B)
            lp = np.empty(B)
            for i in range(B):
                a_i, u_i, lp_i = gaussian_sample(mean[i:i + 1], log_std, low, high, rngs[i])
                actions[i], u[i], lp[i] = a_i[0], u_i[0], lp_i[0]
        for i, env in enumerate(envs):
            rec["soc"][t, i] = env.soc
            rec["price"][t, i] = states[i].price
            try:
                states[i], r, _, info = env.step(actions[i])
            except Exception as exc:
                raise RuntimeError(f"worker {i}: {exc}") from exc
            rec["rewards"][t, i] = r
            rec["executed"][t, i] = info["action_executed"]
        rec["requested"][t] = actions
        rec["latent"][t] = u
        rec["log_prob"][t] = lp
        rec["values"][t] = value
        obs_n[t] = x
        obs_r[t] = raw
    return Batch(obs=obs_n, raw_obs=obs_r, episodes=list(episodes), hidden_pi=hid_log, **rec)


# -- update -----------------------------------------------------------------------------


@dataclass
class UpdateStats:
    actor_loss: float
    critic_loss: float
    mean_abs_ratio_dev: float
    first_pass_objective: float
    first_pass_mean_advantage: float
    critic_losses: tuple[float, ...] = ()


def ppo_update(batch: Batch, agent, config: PpoConfig, low: float, high: float) -> UpdateStats:
    """K full-batch passes: ascend the clipped surrogate, descend the critic's squared error."""
    rewards = batch.rewards * config.reward_scale
    adv, ret = compute_gae(rewards.T, batch.values.T, config.gamma, config.gae_lambda)
    adv, ret = adv.T, ret.T
    batch.advantages, batch.returns = adv, ret
    a_used = adv.reshape(-1)
    if config.normalize_advantages and a_used.size > 1:
        a_used = (a_used - a_used.mean()) / (a_used.std() + 1e-8)
    targets = ret.reshape(-1)
    lp_old = batch.log_prob.reshape(-1)
    u = batch.latent.reshape(-1, 1)

    stats = []
    for k in range(config.epochs):
        g = Graph()
        pa, pc = agent.actor.bind(g), agent.critic.bind(g)
        mean, value = agent.forward_sequence(g, pa, pc, batch.obs)
        lp = latent_log_prob(g, mean, pa["pi.log_std"], u, low, high)
        ratio = g.exp(g.sub(lp, lp_old))
        objective = g.mean(clipped_surrogate_node(g, ratio, a_used, config.clip_eps))
        actor_loss = g.neg(objective)
        critic_loss = g.mean(g.square(g.sub(value, targets)))
        total = g.add(actor_loss, critic_loss)
        la, lc = float(actor_loss.value), float(critic_loss.value)
        if not (math.isfinite(la) and math.isfinite(lc)):
            raise TrainingDivergence(
                f"non-finite loss in pass {k}: actor={la}, critic={lc}, "
                f"max|adv|={np.abs(a_used).max():.3g}, log_std={agent.actor['pi.log_std']}"
            )
        grads = g.backward(total)
        agent.actor.accumulate(grads)
        agent.critic.accumulate(grads)
        clip_grad_norm(agent.actor, config.max_grad_norm)
        clip_grad_norm(agent.critic, config.max_grad_norm)
        optimizer_step(agent.actor, config.actor_lr)
        optimizer_step(agent.critic, config.critic_lr)
        stats.append((la, lc, float(np.mean(np.abs(ratio.value - 1.0))), float(objective.value)))
    return UpdateStats(
        actor_loss=stats[-1][0], critic_loss=stats[-1][1], mean_abs_ratio_dev=stats[-1][2],
        first_pass_objective=stats[0][3], first_pass_mean_advantage=float(np.mean(a_used)),
        critic_losses=tuple(s[1] for s in stats),
    )


def recompute_log_probs(batch: Batch, agent, low: float, high: float) -> np.ndarray:
    """Log-probabilities of the logged samples under the agent's current parameters, (T, B)."""
    g = Graph(record=False)
    pa, pc = agent.actor.bind(g), agent.critic.bind(g)
    mean, _ = agent.forward_sequence(g, pa, pc, batch.obs)
    lp = latent_log_prob(g, mean, pa["pi.log_std"], batch.latent.reshape(-1, 1), low, high)
    return lp.value.reshape(batch.latent.shape)


# -- training driver ---------------------------------------------------------------------


LOG_HEADER = ("iteration", "episodes", "mean_reward", "min_reward", "max_reward",
              "actor_loss", "critic_loss", "mean_abs_ratio_dev", "eval_reward")


@dataclass
class Policy:
    """Everything needed to act: agent parameters, observation builder, frozen normaliser."""

    scheme: str
    agent: object
    normalizer: RunningNorm
    build_obs: ObservationBuilder
    env_params: EnvParams

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        arrays.update(prefixed(self.agent.actor.params, "actor"))
        arrays.update(prefixed(self.agent.critic.params, "critic"))
        arrays.update(prefixed(self.normalizer.to_arrays(), "obs_norm"))
        return arrays

    def save(self, path, config_hash: str = "", meta: dict | None = None) -> None:
        info = {"kind": "policy", "scheme": self.scheme, "obs_dim": self.agent.obs_dim,
                "obs_k": self.build_obs.obs_k, "horizon": self.env_params.horizon,
                "mlp_hidden": list(self.agent.actor_spec.widths[1:-1])}
        if self.agent.recurrent:
            info["gru_hidden"] = self.agent.gru_spec.hidden_size
        info.update(meta or {})
        save_checkpoint(path, self.to_arrays(), config_hash, info)

    @classmethod
    def load(cls, path, env_params: EnvParams, bundle: ForecasterBundle | None = None) -> Policy:
        arrays, _, meta = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        if int(meta["horizon"]) != env_params.horizon:
            raise ValueError(f"checkpoint horizon {meta['horizon']} != environment horizon {env_params.horizon}")
        scheme = meta["scheme"]
        build_obs = ObservationBuilder(scheme, bundle)
        if build_obs.width != int(meta["obs_dim"]):
            raise ValueError(f"observation width {build_obs.width} != checkpoint {meta['obs_dim']}")
        cfg = PpoConfig(mlp_hidden=tuple(meta["mlp_hidden"]), gru_hidden=int(meta.get("gru_hidden", 32)))
        agent = make_agent(scheme, build_obs.width, np.random.default_rng(0), cfg)
        agent.actor.load(unprefixed(arrays, "actor"))
        agent.critic.load(unprefixed(arrays, "critic"))
        normalizer = RunningNorm.from_arrays(unprefixed(arrays, "obs_norm"))
        return cls(scheme, agent, normalizer, build_obs, env_params)


@dataclass
class TrainResult:
    policy: Policy
    log: list[tuple] = field(default_factory=list)
    diverged: str | None = None
    last_good: dict[str, np.ndarray] | None = None


def train(scheme: str, train_view: DatasetView, config: PpoConfig, env_params: EnvParams = EnvParams(),
          seed: int = 0, bundle: ForecasterBundle | None = None, eval_view: DatasetView | None = None,
          eval_episodes: int = 4, on_iteration=None) -> TrainResult:
    """Run ``config.iterations`` rounds of rollout (one episode per worker) then PPO update.

    Divergence stops training; the result keeps the last good parameters.
    """
    build_obs = ObservationBuilder(scheme, bundle)
    bundle_sum = bundle.checksum() if bundle is not None else None
    seq = np.random.SeedSequence(seed)
    init_seq, worker_seq, eval_seq = seq.spawn(3)
    agent = make_agent(scheme, build_obs.width, np.random.default_rng(init_seq), config)
    rngs = [np.random.default_rng(s) for s in worker_seq.spawn(config.workers)]
    envs = make_envs(train_view, env_params, config.workers, build_obs.warmup)
    low, high = env_params.action_low, env_params.action_high
    normalizer = RunningNorm(build_obs.width)
    policy = Policy(scheme, agent, normalizer, build_obs, env_params)
    result = TrainResult(policy)

    # seed the normaliser with one batch of uniformly random actions
    warm = _random_rollout(envs, rngs, build_obs)
    normalizer.update(warm)

    eval_envs = None
    if eval_view is not None and config.eval_every:
        eval_envs = make_envs(eval_view, env_params, min(eval_episodes, MicrogridEnv(
            eval_view, env_params, build_obs.warmup).n_episodes), build_obs.warmup)

    for it in range(config.iterations):
        snapshot = (agent.actor.snapshot(), agent.critic.snapshot())
        batch = rollout(agent, envs, rngs, build_obs, normalizer)
        try:
            stats = ppo_update(batch, agent, config, low, high)
        except TrainingDivergence as exc:
            agent.actor.load(snapshot[0])
            agent.critic.load(snapshot[1])
            result.diverged = f"iteration {it}: {exc}"
            log.error("training diverged at %s", result.diverged)
            break
        normalizer.update(batch.raw_obs)
        ep = batch.episode_rewards
        eval_reward = ""
        if eval_envs is not None and (it + 1) % config.eval_every == 0:
            eval_reward = float(np.mean(evaluate_policy(policy, eval_envs).episode_rewards))
        row = (it, len(ep), float(ep.mean()), float(ep.min()), float(ep.max()),
               stats.actor_loss, stats.critic_loss, stats.mean_abs_ratio_dev, eval_reward)
        result.log.append(row)
        if on_iteration is not None:
            on_iteration(row)
    if bundle is not None and bundle.checksum() != bundle_sum:
        raise AssertionError("forecaster parameters changed during policy training")
    return result


def _random_rollout(envs, rngs, build_obs) -> np.ndarray:
    rows = []
    for env, rng in zip(envs, rngs):
        state = env.reset(int(rng.integers(env.n_episodes)), rng)
        done = False
        while not done:
            rows.append(build_obs(env, state))
            a = rng.uniform(env.params.action_low, env.params.action_high)
            state, _, done, _ = env.step(a)
    return np.array(rows)


def evaluate_policy(policy: Policy, envs: list[MicrogridEnv], episodes: list[int] | None = None) -> Batch:
    """Deterministic (squashed-mean) actions, fixed initial SOC, one episode per env."""
    if episodes is None:
        episodes = list(range(len(envs)))
    envs = envs[: len(episodes)]
    return rollout(policy.agent, envs, [None] * len(envs), policy.build_obs, policy.normalizer,
                   episodes=episodes, evaluate=True, deterministic=True)


def evaluate_episodes(policy: Policy, view: DatasetView, episodes: list[int] | None = None,
                      chunk: int = 32) -> Batch:
    """Evaluate over many episodes of a view, batching ``chunk`` at a time."""
    probe = MicrogridEnv(view, policy.env_params, policy.build_obs.warmup)
    if episodes is None:
        episodes = list(range(probe.n_episodes))
    if not episodes:
        raise ValueError("no evaluation episodes available")
    parts = []
    for i in range(0, len(episodes), chunk):
        eps = episodes[i:i + chunk]
        envs = [MicrogridEnv(view, policy.env_params, policy.build_obs.warmup) for _ in eps]
        parts.append(evaluate_policy(policy, envs, eps))
    if len(parts) == 1:
        return parts[0]
    merged = {}
    for name in ("obs", "raw_obs", "latent", "log_prob", "rewards", "values", "requested",
                 "executed", "price", "soc"):
        merged[name] = np.concatenate([getattr(p, name) for p in parts], axis=1)
    return Batch(episodes=[e for p in parts for e in p.episodes], **merged)


def random_policy(scheme: str, view_params: EnvParams, config: PpoConfig, seed: int,
                  bundle: ForecasterBundle | None = None, train_view: DatasetView | None = None) -> Policy:
    """An untrained policy with the normaliser fitted to random-action rollouts."""
    cfg = replace(config, iterations=0)
    if train_view is None:
        build_obs = ObservationBuilder(scheme, bundle)
        agent = make_agent(scheme, build_obs.width, np.random.default_rng(seed), cfg)
        return Policy(scheme, agent, RunningNorm(build_obs.width), build_obs, view_params)
    return train(scheme, train_view, cfg, view_params, seed, bundle).policy
