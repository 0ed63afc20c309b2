"""Gaussian latent fusion: covariances from Cholesky factors, precision-weighted
products of Gaussians, eigenvalue repair and reparameterized sampling.

Functions accept single matrices ``(4, 4)`` or stacks ``(B, 4, 4)``. Passing
:class:`~nmiconf.diffcore.Node` inputs builds a differentiable graph; plain
arrays return arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from . import diffcore as dc
from .diffcore import Node, graph_or_value

REG_LAMBDA = 1e-4
EIG_FLOOR = 1e-6


class FusionError(np.linalg.LinAlgError):
    """Inversion failed even after eigenvalue repair."""

    def __init__(self, message: str, condition: float):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


@dataclass
class LatentGaussian:
    mu: Node  # (..., 4), components in (0, 2)
    chol: Node  # (..., 4, 4) lower triangular, diagonal >= 1e-3


@dataclass
class PDRepairResult:
    matrix: np.ndarray
    clamped_count: np.ndarray | int
    eigenvalues_before: np.ndarray


@dataclass
class FusedPosterior:
    mu_joint: Node
    v_joint: Node
    h_a: np.ndarray
    h_b: np.ndarray
    mi: np.ndarray
    nmi: np.ndarray
    repaired: np.ndarray
    nmi_node: Node | None = None


@graph_or_value
def cov_from_chol(chol):
    """``L L^T`` for a lower-triangular factor with positive diagonal."""
    chol = dc.as_node(chol)
    diag = np.diagonal(chol.value, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise ValueError("Cholesky factor has a non-positive diagonal entry")
    return dc.matmul(chol, dc.transpose(chol))


def repair_pd(v, floor: float = EIG_FLOOR, max_iter: int = 3) -> PDRepairResult:
    """Clamp eigenvalues below ``floor`` and rebuild ``Q diag(lam) Q^T``.

    Rebuilt matrices are nudged along the diagonal if roundoff leaves their
    smallest eigenvalue under the floor.
    Matrices whose smallest eigenvalue already meets the floor are returned
    untouched.
    """
    v = np.asarray(v, dtype=np.float64)
    sym = 0.5 * (v + np.swapaxes(v, -1, -2))
    for attempt in range(max_iter):
        try:
            lam, q = np.linalg.eigh(sym)
            break
        except np.linalg.LinAlgError:
            # tiny symmetric jitter, then retry
            sym = sym + (10.0 ** (attempt - 12)) * np.eye(sym.shape[-1])
    else:
        raise np.linalg.LinAlgError("eigen decomposition did not converge")
    low = lam < floor
    clamped = low.sum(axis=-1)
    fixed = np.where(low, floor, lam)
    rebuilt = (q * fixed[..., None, :]) @ np.swapaxes(q, -1, -2)
    rebuilt = 0.5 * (rebuilt + np.swapaxes(rebuilt, -1, -2))
    # the rebuild can land a few ulps under the floor; lift the diagonal by the shortfall
    n = rebuilt.shape[-1]
    margin = 64 * np.finfo(np.float64).eps * np.max(np.abs(fixed), axis=-1)
    for _ in range(max_iter):
        short = floor - np.linalg.eigvalsh(rebuilt)[..., 0]
        if not np.any(short > 0):
            break
        rebuilt = rebuilt + (np.where(short > 0, short + margin, 0.0)[..., None, None] * np.eye(n))
    untouched = clamped == 0
    out = np.where(untouched[..., None, None], v, rebuilt)
    if out.ndim == 2:
        clamped = int(clamped)
    return PDRepairResult(matrix=out, clamped_count=clamped, eigenvalues_before=lam)


def _needs_repair(values: np.ndarray) -> np.ndarray:
    """True for each matrix that is not PD with min eigenvalue >= floor."""
    _, ok = _kernels.cholesky(values)
    ok = np.asarray(ok)
    if np.any(ok):
        lam_min = np.linalg.eigvalsh(0.5 * (values + np.swapaxes(values, -1, -2)))[..., 0]
        ok = ok & (lam_min >= EIG_FLOOR)
    return ~ok


def ensure_pd(v: Node) -> tuple[Node, np.ndarray]:
    """Route non-PD matrices through :func:`repair_pd` as a stop-gradient event."""
    bad = _needs_repair(v.value)
    if not np.any(bad):
        return v, bad
    fixed = repair_pd(v.value[bad] if v.value.ndim > 2 else v.value).matrix
    if v.value.ndim == 2:
        return dc.const(fixed), bad
    return dc.stop_rows(v, bad, fixed), bad


def _condition(values: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        return float(np.max(np.linalg.cond(values)))


def _spd_inverse(v: Node) -> Node:
    v, _ = ensure_pd(v)
    out = dc.inv(v)
    if not np.all(np.isfinite(out.value)):
        raise FusionError("covariance inversion failed", _condition(v.value))
    return out


@graph_or_value
def gaussian_product(posteriors: Sequence[tuple]):
    """Fuse Gaussians ``(mu_i, V_i)`` by their normalized product.

    Precisions add, ``V_joint^-1 = sum V_i^-1``, and the joint mean is the
    precision-weighted combination ``V_joint sum V_i^-1 mu_i``.
    """
    if len(posteriors) < 2:
        raise ValueError("gaussian_product needs at least two posteriors")
    precision = None
    info = None
    for mu, v in posteriors:
        mu, v = dc.as_node(mu), dc.as_node(v)
        p = _spd_inverse(v)
        pm = dc.matvec(p, mu)
        precision = p if precision is None else dc.add(precision, p)
        info = pm if info is None else dc.add(info, pm)
    v_joint = dc.symmetrize(_spd_inverse(precision))
    mu_joint = dc.matvec(v_joint, info)
    return mu_joint, v_joint


@graph_or_value
def reparam_sample(mu_joint, v_joint, eps):
    """``z = mu + chol(V) eps``. Non-PD ``V`` is repaired first (no gradient through it)."""
    mu_joint, v_joint, eps = dc.as_node(mu_joint), dc.as_node(v_joint), dc.as_node(eps)
    v_safe, _ = ensure_pd(v_joint)
    chol = dc.cholesky(v_safe)
    if not np.all(np.isfinite(chol.value)):
        raise FusionError("Cholesky factorization failed after repair", _condition(v_safe.value))
    return dc.add(mu_joint, dc.matvec(chol, eps))


def regularize(v: Node, lam: float = REG_LAMBDA) -> Node:
    """``V + lam I``."""
    n = v.shape[-1]
    return dc.shift(v, np.broadcast_to(lam * np.eye(n), v.shape).copy())
