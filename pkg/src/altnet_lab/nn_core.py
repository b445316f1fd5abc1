"""Small dense-network engine with hand-written reverse mode and Adam.

Weights are stored as ``(out, in)`` matrices and inputs are batched row-wise,
so a layer computes ``x @ W.T + b``. Hidden layers use ReLU, the output layer
is linear; heads apply their own squashing.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    """Generator for any (possibly negative) 64-bit seed."""
    return np.random.default_rng(int(seed) & _SEED_MASK)


def _pack(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Copy ``arrays`` into one flat float64 buffer; return it and views onto it."""
    flat = np.empty(sum(int(np.size(a)) for a in arrays))
    views, offset = [], 0
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        v = flat[offset: offset + a.size].reshape(a.shape)
        v[...] = a
        views.append(v)
        offset += a.size
    return flat, views


class DenseNetwork:
    """Feedforward ReLU network.

    ``weights[i]`` has shape ``(layer_sizes[i+1], layer_sizes[i])``. All
    parameters live in the single buffer ``flat`` (weights first, then
    biases); ``weights`` and ``biases`` are views onto it, so in-place edits
    through either are shared.
    """

    def __init__(self, layer_sizes: Sequence[int], weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        sizes = [int(s) for s in layer_sizes]
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise ShapeError(f"{len(weights)} weight / {len(biases)} bias arrays for sizes {sizes}")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if np.shape(w) != (sizes[i + 1], sizes[i]) or np.shape(b) != (sizes[i + 1],):
                raise ShapeError(f"layer {i}: weight {np.shape(w)}, bias {np.shape(b)} inconsistent with {sizes}")
        self.layer_sizes = sizes
        self.flat, views = _pack([*weights, *biases])
        n = len(weights)
        self.weights = views[:n]
        self.biases = views[n:]

    def __repr__(self) -> str:
        return f"DenseNetwork({self.layer_sizes})"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def param_count(self) -> int:
        return self.flat.size

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(self.layer_sizes, self.weights, self.biases)

    def same_architecture(self, other: "DenseNetwork") -> bool:
        return list(self.layer_sizes) == list(other.layer_sizes)


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = None
    flat: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


@dataclass
class ForwardTrace:
    input: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    batched: bool = True

    @property
    def output(self) -> np.ndarray:
        out = self.post[-1]
        return out if self.batched else out[0]

    def hidden(self) -> list[np.ndarray]:
        """Post-activations of the hidden layers, each ``(batch, width)``."""
        return self.post[:-1]


@dataclass
class OptimizerState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    moment_decays: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def zero(self) -> None:
        for m in self.first_moment:
            m.fill(0.0)
        for v in self.second_moment:
            v.fill(0.0)
        self.step_count = 0


def network_param_count(layer_sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _check_sizes(layer_sizes: Sequence[int]) -> list[int]:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError(f"layer_sizes needs at least 2 entries, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"layer_sizes must be positive, got {sizes}")
    return sizes


def init_network(layer_sizes: Sequence[int], seed: int) -> DenseNetwork:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    sizes = _check_sizes(layer_sizes)
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNetwork(sizes, weights, biases)


def forward(net: DenseNetwork, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if not batched:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected input width {net.input_dim}, got shape {x.shape}")
    pre, post = [], []
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T
        z += b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        post.append(h)
    return ForwardTrace(x, pre, post, batched)


def predict(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping a trace."""
    h = np.asarray(x, dtype=np.float64)
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i != last:
            np.maximum(h, 0.0, out=h)
    return h


def backward(
    net: DenseNetwork,
    trace: ForwardTrace,
    output_grad: np.ndarray,
    param_grads: bool = True,
    input_grad: bool = False,
) -> ParamGrads:
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    With ``param_grads=False`` only the input gradient is produced (and
    ``input_grad`` is implied); used when backpropagating through a frozen
    critic into the actor.
    """
    if (
        len(trace.pre) != net.n_layers
        or trace.input.shape[1] != net.input_dim
        or any(z.shape[1] != w.shape[0] for z, w in zip(trace.pre, net.weights))
    ):
        raise ShapeError("trace does not belong to this network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :] if not trace.batched else g[:, None]
    if g.shape != trace.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {trace.post[-1].shape}")
    if not param_grads:
        input_grad = True

    n = net.n_layers
    if param_grads:
        flat = np.empty(net.flat.size)
        grad_views = _views_like(flat, net)
        dw, db = grad_views[:n], grad_views[n:]
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * (trace.pre[i] > 0.0)
        if param_grads:
            below = trace.post[i - 1] if i > 0 else trace.input
            np.matmul(g.T, below, out=dw[i])
            np.sum(g, axis=0, out=db[i])
        if i > 0 or input_grad:
            g = g @ net.weights[i]
    dx = None
    if input_grad:
        dx = g if trace.batched else g[0]
    if not param_grads:
        return ParamGrads([], [], dx)
    return ParamGrads(dw, db, dx, flat)


class EnsembleNetwork:
    """``k`` same-shaped ReLU networks evaluated together.

    Layer ``i`` stores weights ``(k, out, in)`` and biases ``(k, out)``; one
    batched matmul serves every member. Member ``j`` is the network that
    ``DenseNetwork(layer_sizes, [w[j] for w in weights], [b[j] ...])``
    describes. Parameters share one flat buffer like ``DenseNetwork``.
    """

    def __init__(self, members: Sequence[DenseNetwork]):
        members = list(members)
        if not members:
            raise ShapeError("an ensemble needs at least one member")
        sizes = members[0].layer_sizes
        if any(m.layer_sizes != sizes for m in members):
            raise ShapeError("ensemble members must share one architecture")
        self.layer_sizes = list(sizes)
        self.size = len(members)
        n = members[0].n_layers
        stacked = [np.stack([m.weights[i] for m in members]) for i in range(n)]
        stacked += [np.stack([m.biases[i] for m in members]) for i in range(n)]
        self.flat, views = _pack(stacked)
        self.weights = views[:n]
        self.biases = views[n:]

    def __repr__(self) -> str:
        return f"EnsembleNetwork({self.size} x {self.layer_sizes})"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def param_count(self) -> int:
        return self.flat.size

    def member(self, j: int) -> DenseNetwork:
        """Independent copy of member ``j``."""
        return DenseNetwork(self.layer_sizes, [w[j] for w in self.weights], [b[j] for b in self.biases])

    def copy(self) -> "EnsembleNetwork":
        return EnsembleNetwork([self.member(j) for j in range(self.size)])

    def same_architecture(self, other) -> bool:
        return (isinstance(other, EnsembleNetwork) and other.size == self.size
                and list(self.layer_sizes) == list(other.layer_sizes))


def ensemble_forward(net: EnsembleNetwork, x: np.ndarray) -> ForwardTrace:
    """``x`` is ``(n, in)`` (shared by all members) or ``(k, n, in)``; outputs are ``(k, n, out)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] != net.input_dim or (x.ndim == 3 and x.shape[0] != net.size):
        raise ShapeError(f"expected (n, {net.input_dim}) or ({net.size}, n, {net.input_dim}), got {x.shape}")
    pre, post = [], []
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.transpose(0, 2, 1)
        z += b[:, None, :]
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        post.append(h)
    return ForwardTrace(x, pre, post, True)


def ensemble_predict(net: EnsembleNetwork, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.transpose(0, 2, 1) + b[:, None, :]
        if i != last:
            np.maximum(h, 0.0, out=h)
    return h


def ensemble_backward(net: EnsembleNetwork, trace: ForwardTrace, output_grad: np.ndarray,
                      param_grads: bool = True, input_grad: bool = False) -> ParamGrads:
    """Gradients of ``sum(output * output_grad)`` summed over members.

    Since members do not share parameters, the flat gradient holds each
    member's own gradient. The input gradient is per member, ``(k, n, in)``.
    """
    if len(trace.pre) != net.n_layers or any(z.shape[-1] != w.shape[1] for z, w in zip(trace.pre, net.weights)):
        raise ShapeError("trace does not belong to this ensemble")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {trace.post[-1].shape}")
    if not param_grads:
        input_grad = True
    n = net.n_layers
    if param_grads:
        flat = np.empty(net.flat.size)
        grad_views = _views_like(flat, net)
        dw, db = grad_views[:n], grad_views[n:]
    for i in range(n - 1, -1, -1):
        if i != n - 1:
            g = g * (trace.pre[i] > 0.0)
        if param_grads:
            below = trace.post[i - 1] if i > 0 else trace.input
            np.matmul(g.transpose(0, 2, 1), below, out=dw[i])
            np.sum(g, axis=1, out=db[i])
        if i > 0 or input_grad:
            g = g @ net.weights[i]
    if not param_grads:
        return ParamGrads([], [], g)
    return ParamGrads(dw, db, g if input_grad else None, flat)


def _views_like(flat: np.ndarray, net) -> list[np.ndarray]:
    views, offset = [], 0
    for p in net.params():
        views.append(flat[offset: offset + p.size].reshape(p.shape))
        offset += p.size
    return views


def init_optimizer(
    net_or_params: DenseNetwork | Sequence[np.ndarray],
    learning_rate: float = 3e-4,
    moment_decays: tuple[float, float] = (0.9, 0.999),
    epsilon: float = 1e-8,
) -> OptimizerState:
    """Zeroed Adam state; for a network the moments mirror its flat buffer."""
    if isinstance(net_or_params, (DenseNetwork, EnsembleNetwork)):
        params = [net_or_params.flat]
    else:
        params = net_or_params
    return OptimizerState(
        [np.zeros_like(p) for p in params],
        [np.zeros_like(p) for p in params],
        0,
        float(learning_rate),
        (float(moment_decays[0]), float(moment_decays[1])),
        float(epsilon),
    )


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """Bias-corrected Adam applied in place to a flat list of arrays."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        # any inf/nan entry makes the sum non-finite
        if not math.isfinite(float(np.sum(g))) and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient entries (shape {p.shape}, step {state.step_count})")
    b1, b2 = state.moment_decays
    state.step_count += 1
    t = state.step_count
    step_size = state.learning_rate / (1.0 - b1**t)
    root_bc2 = np.sqrt(1.0 - b2**t)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= step_size * m / (np.sqrt(v) / root_bc2 + state.epsilon)


def adam_step(net, grads: ParamGrads, state: OptimizerState):
    flat = grads.flat
    if flat is None:
        if len(grads.weights) != net.n_layers:
            raise ShapeError("gradients do not match the network's layers")
        for p, g in zip(net.params(), grads.arrays()):
            if p.shape != np.shape(g):
                raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        flat = np.concatenate([np.ravel(g) for g in grads.arrays()])
    adam_update([net.flat], [flat], state)
    return net, state


def polyak_update(target, online, tau: float):
    """``target <- (1 - tau) * target + tau * online`` elementwise, in place."""
    if not target.same_architecture(online):
        raise ShapeError(f"architectures differ: {target.layer_sizes} vs {online.layer_sizes}")
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    target.flat *= 1.0 - tau
    target.flat += tau * online.flat
    return target


def copy_into(dst, src) -> None:
    if not dst.same_architecture(src):
        raise ShapeError(f"architectures differ: {dst.layer_sizes} vs {src.layer_sizes}")
    dst.flat[...] = src.flat


def reset_parameters(
    net: DenseNetwork, state: OptimizerState | None, seed: int
) -> tuple[DenseNetwork, OptimizerState | None]:
    """Redraw ``net`` in place exactly as ``init_network`` would, and zero ``state``."""
    copy_into(net, init_network(net.layer_sizes, seed))
    if state is not None:
        state.zero()
    return net, state


def global_grad_norm(arrays: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(a, a)) for a in arrays)))


# Checkpoints: one JSON header line, then the arrays as flat little-endian float64.

def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    header = {
        "format": "f8-le",
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        out = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ShapeError(f"checkpoint truncated while reading {entry['name']!r}")
            out[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def network_arrays(net: DenseNetwork, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out
