"""Conformalized joint prediction losses and interval metrics.

Loss functions accept arrays (returning floats) or diffcore nodes (returning
nodes). Indicators are piecewise constants: gradient flows only through the
linear terms they gate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import graph_or_value


@dataclass(frozen=True)
class ConformalConfig:
    p: float = 0.9
    alpha_l: float = 0.05
    alpha_h: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.alpha_l < self.alpha_h < 1.0:
            raise ValueError(f"need 0 < alpha_l < alpha_h < 1, got {self.alpha_l}, {self.alpha_h}")
        if abs((self.alpha_h - self.alpha_l) - self.p) > 1e-9:
            raise ValueError(f"alpha_h - alpha_l must equal p={self.p}")

    @property
    def alpha(self) -> float:
        """Miscoverage used by the interval score."""
        return 1.0 - self.p

    @classmethod
    def from_coverage(cls, p: float) -> "ConformalConfig":
        if not 0.0 < p < 1.0:
            raise ValueError(f"coverage must lie in (0, 1), got {p}")
        half = (1.0 - p) / 2.0
        return cls(p=p, alpha_l=half, alpha_h=1.0 - half)


@dataclass
class PredictionSet:
    y_hat: np.ndarray
    q_l: np.ndarray
    q_h: np.ndarray


@dataclass(frozen=True)
class CalibrationState:
    p_cov_avg: float
    batches_seen: int = 0
    u_last: float = 0.0
    nmi_last: float = 0.0

    @classmethod
    def fresh(cls, prior: float) -> "CalibrationState":
        """Start-of-epoch state; ``prior`` stands in until a batch has been seen."""
        return cls(p_cov_avg=float(prior))


@graph_or_value
def interval_score(y, q_l, q_h, alpha: float):
    """Mean of width + (2/alpha)(q_l - y)1{y<q_l} + (2/alpha)(y - q_h)1{y>q_h}."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    y, q_l, q_h = dc.as_node(y), dc.as_node(q_l), dc.as_node(q_h)
    width = dc.sub(q_h, q_l)
    below = dc.relu_gate(dc.sub(q_l, y))
    above = dc.relu_gate(dc.sub(y, q_h))
    penalty = dc.scale(dc.add(below, above), 2.0 / alpha)
    return dc.mean(dc.add(width, penalty))


@graph_or_value
def cal_objective(y, q_l, q_h, p_cov_avg: float, p: float):
    """Calibration sub-objective, summed over the lower and upper bound.

    Under-coverage (``p_cov_avg < p``) penalizes labels above each bound;
    over-coverage penalizes labels below. Equality contributes zero.
    """
    y, q_l, q_h = dc.as_node(y), dc.as_node(q_l), dc.as_node(q_h)
    if p_cov_avg < p:
        terms = [dc.relu_gate(dc.sub(y, q)) for q in (q_l, q_h)]
    elif p_cov_avg > p:
        terms = [dc.relu_gate(dc.sub(q, y)) for q in (q_l, q_h)]
    else:
        return dc.const(0.0)
    return dc.add(dc.mean(terms[0]), dc.mean(terms[1]))


@graph_or_value
def sharp_objective(q_l, q_h, p: float):
    q_l, q_h = dc.as_node(q_l), dc.as_node(q_h)
    if p > 0.5:
        return dc.mean(dc.sub(q_h, q_l))
    return dc.mean(dc.sub(q_l, q_h))


@graph_or_value
def comcal(nmi, cal, sharp):
    """``(1 - nmi) cal + nmi sharp``; ``nmi`` may be a float or a scalar node."""
    cal, sharp = dc.as_node(cal), dc.as_node(sharp)
    if isinstance(nmi, dc.Node):
        return dc.add(dc.mul(dc.shift(dc.neg(nmi), 1.0), cal), dc.mul(nmi, sharp))
    nmi = float(nmi)
    if not 0.0 <= nmi <= 1.0:
        raise ValueError(f"nmi must lie in [0, 1], got {nmi}")
    return dc.add(dc.scale(cal, 1.0 - nmi), dc.scale(sharp, nmi))


def batch_coverage(y, q_l, q_h) -> float:
    """Fraction of entries with ``q_l <= y <= q_h``."""
    y, q_l, q_h = (np.asarray(a, dtype=np.float64) for a in (y, q_l, q_h))
    return float(np.mean((q_l <= y) & (y <= q_h)))


def update_coverage(state: CalibrationState, y, q_l, q_h) -> CalibrationState:
    """Fold one batch's per-entry coverage into the running mean over batches."""
    cov = batch_coverage(y, q_l, q_h)
    n = state.batches_seen + 1
    prev = state.p_cov_avg if state.batches_seen else 0.0
    avg = prev + (cov - prev) / n
    return replace(state, p_cov_avg=avg, batches_seen=n)


@graph_or_value
def uncertainty_metric(q_l, q_h):
    """Mean interval width over samples and dimensions."""
    return dc.mean(dc.sub(dc.as_node(q_h), dc.as_node(q_l)))


def mau(per_object_widths) -> float:
    """Mean over objects of each object's mean width."""
    widths = [np.asarray(w, dtype=np.float64) for w in per_object_widths]
    if not widths:
        raise ValueError("MAU is undefined for zero objects")
    return float(np.mean([w.mean() for w in widths]))
