"""Network building blocks on top of :mod:`microgrid_drl.autodiff`.

Parameters live in a :class:`ParameterStore` (plain numpy arrays plus Adam
state). A forward pass binds the store to a fresh graph, then the functional
builders (:func:`mlp_forward`, :func:`gru_step`, ...) operate on the bound nodes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph, Node, ShapeError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
CHECKPOINT_FORMAT_VERSION = 1
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, input first. Hidden layers use tanh, the output is linear."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"MlpSpec needs >=2 positive widths, got {self.widths}")


@dataclass(frozen=True)
class GruSpec:
    """A GRU cell with an affine readout. ``output_size=0`` disables the readout."""

    input_size: int
    hidden_size: int
    output_size: int = 1

    def __post_init__(self):
        if self.input_size < 1 or self.hidden_size < 1 or self.output_size < 0:
            raise ValueError(f"invalid GruSpec {self}")


@dataclass
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    value: np.ndarray | None = None
    hidden: np.ndarray | None = None


class ParameterStore:
    """Named float64 arrays with gradient buffers and Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def bind(self, graph: Graph) -> dict[str, Node]:
        """Register every parameter on ``graph``; non-recording graphs get plain inputs."""
        if graph.record:
            return {k: graph.param(k, v) for k, v in self.params.items()}
        return {k: graph.input(v, name=k) for k, v in self.params.items()}

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name in self.grads:
                self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                self.add(name, value)
            elif self.params[name].shape != np.shape(value):
                raise ShapeError(f"{name}: checkpoint shape {np.shape(value)} != {self.params[name].shape}")
            else:
                self.params[name][...] = value

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# -- MLP ------------------------------------------------------------------------


def init_mlp(store: ParameterStore, spec: MlpSpec, rng: np.random.Generator,
             prefix: str = "mlp", out_scale: float = 1.0) -> None:
    widths = spec.widths
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        w = glorot_uniform(rng, a, b)
        if i == len(widths) - 2:
            w *= out_scale
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(b))


def mlp_forward(g: Graph, params: dict[str, Node], spec: MlpSpec, x: Node,
                prefix: str = "mlp") -> Node:
    if x.shape[-1] != spec.widths[0]:
        raise ShapeError(f"mlp_forward: input width {x.shape[-1]} != {spec.widths[0]}")
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        x = g.add(g.matmul(x, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = g.tanh(x)
    return x


# -- GRU ------------------------------------------------------------------------

_GATES = ("z", "r", "h")


def init_gru(store: ParameterStore, spec: GruSpec, rng: np.random.Generator,
             prefix: str = "gru") -> None:
    n_in, n_h = spec.input_size, spec.hidden_size
    for gate in _GATES:
        store.add(f"{prefix}.W{gate}", glorot_uniform(rng, n_in, n_h))
        store.add(f"{prefix}.U{gate}", glorot_uniform(rng, n_h, n_h))
        store.add(f"{prefix}.b{gate}", np.zeros(n_h))
    if spec.output_size:
        store.add(f"{prefix}.Wy", glorot_uniform(rng, n_h, spec.output_size))
        store.add(f"{prefix}.by", np.zeros(spec.output_size))


def _check_gru_widths(spec: GruSpec, x: Node, h: Node):
    if x.shape[-1] != spec.input_size or h.shape[-1] != spec.hidden_size:
        raise ShapeError(
            f"gru_step: input {x.shape} / hidden {h.shape} do not match "
            f"spec ({spec.input_size}, {spec.hidden_size})"
        )


def gru_readout(g: Graph, params: dict[str, Node], h: Node, prefix: str = "gru") -> Node:
    return g.add(g.matmul(h, params[f"{prefix}.Wy"]), params[f"{prefix}.by"])


def gru_step(g: Graph, params: dict[str, Node], spec: GruSpec, x: Node, h: Node,
             prefix: str = "gru") -> tuple[Node | None, Node]:
    """One cell step; returns ``(readout or None, next hidden)``."""
    _check_gru_widths(spec, x, h)
    p = params
    h_next = g.gru_cell(
        x, h,
        p[f"{prefix}.Wz"], p[f"{prefix}.Uz"], p[f"{prefix}.bz"],
        p[f"{prefix}.Wr"], p[f"{prefix}.Ur"], p[f"{prefix}.br"],
        p[f"{prefix}.Wh"], p[f"{prefix}.Uh"], p[f"{prefix}.bh"],
    )
    y = gru_readout(g, params, h_next, prefix) if spec.output_size else None
    return y, h_next


def gru_step_composite(g: Graph, params: dict[str, Node], spec: GruSpec, x: Node, h: Node,
                       prefix: str = "gru") -> tuple[Node | None, Node]:
    """Same cell as :func:`gru_step`, spelled out in primitive ops.

    Kept as an independent route for checking the fused cell.
    """
    _check_gru_widths(spec, x, h)
    p = params

    def gate(name, hh):
        return g.add(g.add(g.matmul(x, p[f"{prefix}.W{name}"]), g.matmul(hh, p[f"{prefix}.U{name}"])),
                     p[f"{prefix}.b{name}"])

    z = g.sigmoid(gate("z", h))
    r = g.sigmoid(gate("r", h))
    cand = g.tanh(gate("h", g.mul(r, h)))
    h_next = g.add(g.mul(g.sub(1.0, z), h), g.mul(z, cand))
    y = gru_readout(g, params, h_next, prefix) if spec.output_size else None
    return y, h_next


# -- squashed Gaussian policy head -----------------------------------------------


def squash_affine(low: float, high: float) -> tuple[float, float]:
    """Centre and half-width mapping tanh's (-1, 1) onto (low, high)."""
    return 0.5 * (high + low), 0.5 * (high - low)


def log_tanh_jacobian(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), stable for large |u|."""
    au = np.abs(u)
    return 2.0 * (math.log(2.0) - au - np.log1p(np.exp(-2.0 * au)))


def latent_log_prob(g: Graph, mean: Node, log_std: Node, u: np.ndarray,
                    low: float, high: float) -> Node:
    """Differentiable log-density of the squashed action whose pre-tanh sample is ``u``.

    ``mean`` is (B, 1) or (B,), ``log_std`` broadcasts against it. Returns (B,).
    """
    _, half = squash_affine(low, high)
    u = np.asarray(u, dtype=np.float64).reshape(mean.shape)
    inv_std = g.exp(g.neg(log_std))
    zscore = g.mul(g.sub(u, mean), inv_std)
    correction = _HALF_LOG_2PI + math.log(half) + log_tanh_jacobian(u)
    lp = g.sub(g.sub(g.mul(g.square(zscore), -0.5), log_std), correction)
    if len(lp.shape) == 2:
        lp = g.reshape(lp, (lp.shape[0] * lp.shape[1],))
    return lp


def gaussian_sample(mean, log_std, low: float, high: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw squashed-Gaussian actions; returns ``(action, latent u, log_prob)``."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.exp(np.broadcast_to(log_std, mean.shape))
    u = mean + std * rng.standard_normal(mean.shape)
    centre, half = squash_affine(low, high)
    action = np.clip(centre + half * np.tanh(u), low, high)
    return action, u, _latent_log_prob_np(mean, log_std, u, half)


def _latent_log_prob_np(mean, log_std, u, half):
    log_std = np.broadcast_to(log_std, np.shape(mean))
    z = (u - mean) * np.exp(-log_std)
    # same operation order as latent_log_prob, so rollout and update agree bit for bit
    return (np.square(z) * -0.5 - log_std) - (_HALF_LOG_2PI + math.log(half) + log_tanh_jacobian(u))


def action_to_latent(action, low: float, high: float) -> np.ndarray:
    """Invert the squash; actions are first pulled 1e-6 half-widths inside the bounds."""
    action = np.asarray(action, dtype=np.float64)
    if np.any(action < low) or np.any(action > high):
        raise ValueError(f"action outside [{low}, {high}]: {action}")
    centre, half = squash_affine(low, high)
    eps = 1e-6 * half
    a = np.clip(action, low + eps, high - eps)
    return np.arctanh((a - centre) / half)


def gaussian_log_prob(mean, log_std, action, low: float, high: float) -> np.ndarray:
    """Log-density of an executed action under the squashed Gaussian."""
    u = action_to_latent(action, low, high)
    _, half = squash_affine(low, high)
    return _latent_log_prob_np(np.asarray(mean, dtype=np.float64), log_std, u, half)


def deterministic_action(mean, low: float, high: float) -> np.ndarray:
    centre, half = squash_affine(low, high)
    return centre + half * np.tanh(np.asarray(mean, dtype=np.float64))


# -- optimizer --------------------------------------------------------------------


def clip_grad_norm(store: ParameterStore, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    norm = store.grad_norm()
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in store.grads.values():
            g *= scale
    return norm


def optimizer_step(store: ParameterStore, learning_rate: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One Adam update from the accumulated gradients, then zero them."""
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if name.endswith("log_std"):
            np.clip(p, LOG_STD_MIN, LOG_STD_MAX, out=p)
    store.zero_grad()
    return store


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_hash: str = "",
                    meta: dict | None = None) -> None:
    """Write arrays as JSON; float repr round-trips exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "meta": meta or {},
        "arrays": {
            name: {"shape": list(np.shape(a)), "values": [float(x) for x in np.ravel(a)]}
            for name, a in sorted(arrays.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, dict]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version!r}")
    arrays = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["arrays"].items()
    }
    return arrays, doc.get("config_hash", ""), doc.get("meta", {})


def prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in arrays.items()}


def unprefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    head = prefix + "/"
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}
