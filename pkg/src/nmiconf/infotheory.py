"""Gaussian information measures from covariance determinants (in bits)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import graph_or_value

log = logging.getLogger(__name__)

LOG2_2PIE = math.log2(2.0 * math.pi * math.e)


class InformationError(ValueError):
    pass


@dataclass
class InfoReport:
    mi_bits: np.ndarray | float
    h_a_bits: np.ndarray | float
    h_b_bits: np.ndarray | float
    nmi: np.ndarray | float
    clamped: np.ndarray | bool
    diagnostics: dict = field(default_factory=dict)


def _logdet2(v: dc.Node, what: str) -> dc.Node:
    sign, _ = np.linalg.slogdet(v.value)
    if np.any(sign <= 0):
        raise InformationError(f"non-positive determinant of {what}; PD repair upstream failed")
    return dc.scale(dc.logdet(v), 1.0 / math.log(2.0))


@graph_or_value
def mutual_information(v_a, v_b, v_joint):
    """``0.5 * log2(|V_a| |V_b| / |V_joint|)``."""
    v_a, v_b, v_joint = dc.as_node(v_a), dc.as_node(v_b), dc.as_node(v_joint)
    total = dc.sub(dc.add(_logdet2(v_a, "v_a"), _logdet2(v_b, "v_b")), _logdet2(v_joint, "v_joint"))
    return dc.scale(total, 0.5)


@graph_or_value
def entropy(v):
    """Differential entropy of a Gaussian with covariance ``v``: ``0.5 * log2((2 pi e)^d |v|)``."""
    v = dc.as_node(v)
    d = v.shape[-1]
    return dc.scale(dc.shift(_logdet2(v, "covariance"), d * LOG2_2PIE), 0.5)


def nmi(mi, h_a, h_b):
    """``2 MI / (H_a + H_b)`` clamped to [0, 1].

    Returns ``(value, clamped)``. Works elementwise on arrays.
    """
    mi, h_a, h_b = (np.asarray(x, dtype=np.float64) for x in (mi, h_a, h_b))
    denom = h_a + h_b
    if np.any(denom == 0):
        raise InformationError("H_a + H_b is zero; NMI undefined")
    raw = 2.0 * mi / denom
    value = np.clip(raw, 0.0, 1.0)
    clamped = (raw < 0.0) | (raw > 1.0)
    if value.ndim == 0:
        return float(value), bool(clamped)
    return value, clamped


def nmi_node(mi: dc.Node, h_a: dc.Node, h_b: dc.Node) -> dc.Node:
    """Differentiable NMI; the clamp acts as a constant gate (zero slope where saturated)."""
    raw_value = 2.0 * mi.value / (h_a.value + h_b.value)
    inside = (raw_value >= 0.0) & (raw_value <= 1.0)
    inv_denom = dc.const(1.0 / (h_a.value + h_b.value))
    # quotient rule: d(2 mi / s) = 2 dmi / s - 2 mi ds / s^2
    s = dc.add(h_a, h_b)
    lin = dc.sub(dc.mul(dc.scale(mi, 2.0), inv_denom), dc.mul(dc.mul(dc.const(raw_value), s), inv_denom))
    lin = dc.shift(lin, raw_value)  # value equals raw, slope equals d(raw)
    gated = dc.gate(lin, dc.const(np.where(inside, 1.0, -1.0)))
    return dc.shift(gated, np.where(inside, 0.0, np.clip(raw_value, 0.0, 1.0)))


def info_report(v_a, v_b, v_joint) -> InfoReport:
    """All information quantities for (stacks of) covariance triples, as arrays."""
    mi = mutual_information(v_a, v_b, v_joint)
    h_a = entropy(v_a)
    h_b = entropy(v_b)
    value, clamped = nmi(mi, h_a, h_b)
    report = InfoReport(mi, h_a, h_b, value, clamped)
    if np.any(clamped):
        raw = 2.0 * np.asarray(mi) / (np.asarray(h_a) + np.asarray(h_b))
        report.diagnostics["raw_nmi"] = raw
        log.debug("NMI clamped for %d sample(s)", int(np.sum(clamped)))
    return report
