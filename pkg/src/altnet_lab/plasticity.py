"""Plasticity diagnostics and learning-curve summaries."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PreconditionError
from .nn_core import DenseNetwork, forward

DORMANT_TAU = 0.025
PROBE_SIZE = 512
METRIC_DEFINITIONS = {
    "avg_weight_norm": "root-mean-square of all weight entries, biases excluded: sqrt(sum w^2 / #weights)",
    "dormant_fraction": "share of hidden units whose mean |activation| over the probe batch, divided by the "
                        "layer average of that quantity, is <= tau; a layer with zero average is all dormant",
    "stable_rank": "||A||_F^2 / sigma_max(A)^2 of the probe-batch post-activations of the last hidden layer; "
                   "0 for a zero matrix",
    "dormant_tau": DORMANT_TAU,
    "probe_size": PROBE_SIZE,
    "probed_network": "policy network of the tagged agent (critic values in the detail file)",
}


@dataclass
class MetricsSample:
    env_step: int
    avg_weight_norm: float
    dormant_fraction: float
    stable_rank_per_layer: list[float]
    agent_tag: str

    @property
    def stable_rank(self) -> float:
        return self.stable_rank_per_layer[-1]


@dataclass
class ReturnCurve:
    steps: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        self.returns = np.asarray(self.returns, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.steps)


def avg_weight_norm(net: DenseNetwork) -> float:
    total = sum(float(np.vdot(w, w)) for w in net.weights)
    count = sum(w.size for w in net.weights)
    return float(np.sqrt(total / count))


def _layer_scores(h: np.ndarray) -> np.ndarray | None:
    unit = np.mean(np.abs(h), axis=0)
    layer_mean = unit.mean()
    if layer_mean == 0.0:
        return None
    return unit / layer_mean


def dormant_counts(hidden: Sequence[np.ndarray], tau: float = DORMANT_TAU) -> tuple[int, int]:
    dormant = total = 0
    for h in hidden:
        scores = _layer_scores(h)
        width = h.shape[1]
        dormant += width if scores is None else int(np.count_nonzero(scores <= tau))
        total += width
    return dormant, total


def dormant_fraction_from_activations(hidden: Sequence[np.ndarray], tau: float = DORMANT_TAU) -> float:
    if not hidden or hidden[0].shape[0] == 0:
        raise PreconditionError("empty probe batch")
    dormant, total = dormant_counts(hidden, tau)
    return dormant / total


def dormant_fraction(net: DenseNetwork, probe_batch: np.ndarray, tau: float = DORMANT_TAU) -> float:
    probe = np.atleast_2d(np.asarray(probe_batch, dtype=np.float64))
    if probe.shape[0] == 0 or probe.size == 0:
        raise PreconditionError("empty probe batch")
    if tau < 0:
        raise PreconditionError(f"tau must be >= 0, got {tau}")
    return dormant_fraction_from_activations(forward(net, probe).hidden(), tau)


def stable_rank(activation_matrix: np.ndarray) -> float:
    """Squared Frobenius norm over squared spectral norm."""
    a = np.asarray(activation_matrix, dtype=np.float64)
    fro2 = float(np.vdot(a, a))
    if fro2 == 0.0:
        return 0.0
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    top = float(np.linalg.eigvalsh(gram)[-1])
    return fro2 / top


def probe_metrics(net: DenseNetwork, probe_batch: np.ndarray, env_step: int, agent_tag: str,
                  tau: float = DORMANT_TAU) -> MetricsSample:
    hidden = forward(net, probe_batch).hidden()
    return MetricsSample(
        int(env_step),
        avg_weight_norm(net),
        dormant_fraction_from_activations(hidden, tau),
        [stable_rank(h) for h in hidden],
        agent_tag,
    )


def _check_curve(curve: ReturnCurve) -> None:
    if len(curve) < 2:
        raise PreconditionError("a return curve needs at least two points")
    if np.any(np.diff(curve.steps) <= 0):
        raise PreconditionError("curve steps must be strictly increasing")


def normalized_auc(curve: ReturnCurve) -> float:
    """Trapezoidal area under the curve divided by the span ``t_T - t_0``."""
    _check_curve(curve)
    t, r = curve.steps, curve.returns
    area = float(np.sum(0.5 * (r[1:] + r[:-1]) * np.diff(t)))
    return area / float(t[-1] - t[0])


def fixed_budget_return(curve: ReturnCurve, budgets: Sequence[float]) -> list[float]:
    """Linearly interpolated return at each budget."""
    _check_curve(curve)
    lo, hi = curve.steps[0], curve.steps[-1]
    out = []
    for b in budgets:
        if not lo <= b <= hi:
            raise PreconditionError(f"budget {b} outside the curve span [{lo}, {hi}]")
        out.append(float(np.interp(b, curve.steps, curve.returns)))
    return out


def rolling_mean(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(0, i - window + 1): i + 1].mean()
    return out


def worst_post_event_dip(curve: ReturnCurve, event_steps: Sequence[int], period: float,
                         smoothing_window: int = 5) -> float | None:
    """Largest normalised drop in evaluation return following a reset or swap.

    For each event at step ``e``: ``pre`` is the mean of the last
    ``smoothing_window`` evaluations strictly before ``e``; ``post`` is the
    minimum evaluation in ``[e, e + 0.1 * period]`` (falling back to the first
    evaluation at or after ``e`` when that window holds none). The dip is
    ``(pre - post) / max(pre, 1)``. Events with no prior or later evaluation
    are skipped; ``None`` when nothing is measurable.
    """
    steps, rets = curve.steps, curve.returns
    dips = []
    for e in event_steps:
        before = rets[steps < e]
        after_mask = steps >= e
        if before.size == 0 or not after_mask.any():
            continue
        pre = before[-smoothing_window:].mean()
        window = rets[after_mask & (steps <= e + 0.1 * period)]
        if window.size == 0:
            window = rets[after_mask][:1]
        dips.append((pre - window.min()) / max(pre, 1.0))
    return max(dips) if dips else None
