"""Multitask loss, cross-conformal training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import conformal
from . import diffcore as dc
from . import model as vae
from .conformal import CalibrationState, ConformalConfig, PredictionSet
from .diffcore import Node, graph_or_value
from .synthdata import Batch, box_from_corners, iou3d_axis_aligned

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "epoch",
    "total_loss",
    "smoothl1",
    "kl",
    "intscore",
    "comcal",
    "mean_U",
    "mean_NMI",
    "train_coverage",
    "val_coverage",
    "val_MAU",
)
IOU_THRESHOLD = 0.7
U_WEIGHT = 0.01


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params, metrics, model_config):
        super().__init__(message)
        self.params = params
        self.metrics = metrics
        self.model_config = model_config


class LossError(FloatingPointError):
    def __init__(self, parts: dict):
        self.parts = parts
        detail = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        super().__init__(f"non-finite loss ({detail})")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    coverage: float = 0.9
    seed: int = 1
    val_fraction: float = 0.2
    latent_samples: int = 1
    nmi_grad: bool = False
    u_grad: bool = False
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 0 or self.latent_samples < 1:
            raise ValueError("epochs must be >= 0 and latent_samples >= 1")
        ConformalConfig.from_coverage(self.coverage)

    @property
    def conformal(self) -> ConformalConfig:
        return ConformalConfig.from_coverage(self.coverage)


@dataclass
class EpochMetrics:
    epoch: int
    total_loss: float
    smoothl1: float
    kl: float
    intscore: float
    comcal: float
    mean_U: float
    mean_NMI: float
    train_coverage: float
    val_coverage: float
    val_MAU: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class EvalReport:
    coverage: float
    joint_coverage: float
    mean_width: float
    mau: float
    precision_point: float
    precision_inflated: float
    n_objects: int
    iou_threshold: float = IOU_THRESHOLD
    objects: list[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("objects")
        return out


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    model_config: vae.ModelConfig
    metrics: list[EpochMetrics]
    val_index: np.ndarray
    train_index: np.ndarray


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@graph_or_value
def combine(smoothl1, u, kl, intscore, comcal_value):
    """``smoothl1 * (1 + 0.01 U) + kl + intscore + comcal``."""
    smoothl1, kl, intscore, comcal_value = (dc.as_node(v) for v in (smoothl1, kl, intscore, comcal_value))
    if isinstance(u, Node):
        weighted = dc.mul(smoothl1, dc.shift(dc.scale(u, U_WEIGHT), 1.0))
    else:
        weighted = dc.scale(smoothl1, 1.0 + U_WEIGHT * float(u))
    return dc.add(dc.add(weighted, kl), dc.add(intscore, comcal_value))


def total_loss(
    y,
    pred: vae.PredictionNodes,
    mu_joint: Node,
    v_joint: Node,
    state: CalibrationState,
    cfg: ConformalConfig,
    *,
    u_node: Node | None = None,
    nmi_node: Node | None = None,
) -> tuple[Node, dict[str, float]]:
    """Assemble the multitask loss for one batch.

    ``state.u_last`` and ``state.nmi_last`` hold the current batch's detached
    U and mean NMI; ``state.p_cov_avg`` is the coverage of earlier batches.
    ``u_node`` / ``nmi_node`` switch to the differentiable variants.
    """
    y = dc.as_node(y)
    smoothl1 = dc.mean(dc.smooth_l1(dc.sub(y, pred.y_hat), beta=1.0))
    kl = dc.mean(vae.kl_divergence(mu_joint, v_joint))
    intscore = conformal.interval_score(y, pred.q_l, pred.q_h, cfg.alpha)
    cal = conformal.cal_objective(y, pred.q_l, pred.q_h, state.p_cov_avg, cfg.p)
    sharp = conformal.sharp_objective(pred.q_l, pred.q_h, cfg.p)
    com = conformal.comcal(nmi_node if nmi_node is not None else state.nmi_last, cal, sharp)
    loss = combine(smoothl1, u_node if u_node is not None else state.u_last, kl, intscore, com)
    parts = {
        "smoothl1": smoothl1.item(),
        "kl": kl.item(),
        "intscore": intscore.item(),
        "comcal": com.item(),
        "total": loss.item(),
    }
    if not all(math.isfinite(v) for v in parts.values()):
        raise LossError(parts)
    return loss, parts


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def predict(params, cfg: vae.ModelConfig, data: Batch, eps=None) -> PredictionSet:
    """Decoder outputs for every sample; ``eps=None`` uses the posterior mean latent."""
    if eps is None:
        eps = np.zeros((len(data), vae.LATENT_DIM))
    fp = vae.forward(params, data.feat_a, data.feat_b, data.proposal, eps, cfg)
    return fp.pred.values()


def _tile(batch: Batch, k: int) -> Batch:
    if k == 1:
        return batch
    return Batch(*(np.concatenate([getattr(batch, f)] * k) for f in batch.__dataclass_fields__))


def train(
    data: Batch,
    model_config: vae.ModelConfig,
    config: TrainConfig,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Cross-conformal training: coverage is re-estimated across the shuffled batches of every epoch."""
    if len(data) < 2 * config.batch_size:
        raise ValueError(f"need at least {2 * config.batch_size} samples, got {len(data)}")
    train_idx, val_idx = split_indices(len(data), config.val_fraction, config.seed)
    train_data, val_data = data.subset(train_idx), data.subset(val_idx)

    targets = train_data.corners
    model_config = replace(
        model_config,
        feat_dim_a=data.feat_a.shape[1],
        feat_dim_b=data.feat_b.shape[1],
        target_offset=targets.mean(axis=0).tolist(),
        target_scale=np.maximum(targets.std(axis=0), 1e-3).tolist(),
    )
    params = vae.init_params(model_config)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    ccfg = config.conformal
    rng = np.random.default_rng([config.seed, 1])
    history: list[EpochMetrics] = []
    n_train = len(train_data)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        state = CalibrationState.fresh(ccfg.p)
        sums = dict.fromkeys(("total", "smoothl1", "kl", "intscore", "comcal", "U", "NMI"), 0.0)
        n_batches = 0
        for start in range(0, n_train, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:
                continue
            batch = _tile(train_data.subset(idx), config.latent_samples)
            eps = rng.standard_normal((len(batch), vae.LATENT_DIM))
            leaves = vae.as_leaves(params)
            fp = vae.forward(
                leaves, batch.feat_a, batch.feat_b, batch.proposal, eps, model_config, nmi_grad=config.nmi_grad
            )
            q_l, q_h = fp.pred.q_l.value, fp.pred.q_h.value
            u_value = conformal.uncertainty_metric(q_l, q_h)
            nmi_value = float(np.mean(fp.fused.nmi))
            state = replace(state, u_last=u_value, nmi_last=nmi_value)
            u_node = conformal.uncertainty_metric(fp.pred.q_l, fp.pred.q_h) if config.u_grad else None
            nmi_node = dc.mean(fp.fused.nmi_node) if config.nmi_grad else None
            try:
                loss, parts = total_loss(
                    batch.corners, fp.pred, fp.fused.mu_joint, fp.fused.v_joint, state, ccfg,
                    u_node=u_node, nmi_node=nmi_node,
                )
            except LossError as exc:
                raise TrainingDiverged(str(exc), params, history, model_config) from exc
            if parts["total"] > config.divergence_threshold:
                raise TrainingDiverged(
                    f"loss {parts['total']:.3e} exceeded {config.divergence_threshold:.0e} "
                    f"at epoch {epoch}", params, history, model_config,
                )
            dc.backprop(loss)
            opt.step(params, {k: leaf.grad for k, leaf in leaves.items()})
            state = conformal.update_coverage(state, batch.corners, q_l, q_h)
            for k in ("total", "smoothl1", "kl", "intscore", "comcal"):
                sums[k] += parts[k]
            sums["U"] += u_value
            sums["NMI"] += nmi_value
            n_batches += 1

        val_pred = predict(params, model_config, val_data)
        row = EpochMetrics(
            epoch=epoch,
            total_loss=sums["total"] / n_batches,
            smoothl1=sums["smoothl1"] / n_batches,
            kl=sums["kl"] / n_batches,
            intscore=sums["intscore"] / n_batches,
            comcal=sums["comcal"] / n_batches,
            mean_U=sums["U"] / n_batches,
            mean_NMI=sums["NMI"] / n_batches,
            train_coverage=state.p_cov_avg,
            val_coverage=conformal.batch_coverage(val_data.corners, val_pred.q_l, val_pred.q_h),
            val_MAU=conformal.mau(val_pred.q_h - val_pred.q_l),
        )
        history.append(row)
        log.info(
            "epoch %d loss=%.4f U=%.4f NMI=%.4f cov=%.3f val_cov=%.3f",
            epoch, row.total_loss, row.mean_U, row.mean_NMI, row.train_coverage, row.val_coverage,
        )
        if on_epoch is not None:
            on_epoch(row)

    return TrainResult(params, model_config, history, val_idx, train_idx)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _envelope(q_l: np.ndarray, q_h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box spanned by the per-axis extremes of both bound boxes."""
    pts = np.concatenate([q_l.reshape(-1, 8, 3), q_h.reshape(-1, 8, 3)], axis=1)
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    return 0.5 * (lo + hi), hi - lo


def _overlap(ca, sa, cb, sb):
    lo = np.maximum(ca - sa / 2, cb - sb / 2)
    hi = np.minimum(ca + sa / 2, cb + sb / 2)
    return np.prod(np.clip(hi - lo, 0.0, None), axis=-1)


def evaluate_predictions(pred: PredictionSet, truth_corners: np.ndarray) -> EvalReport:
    """Coverage, width and IoU-precision metrics for predictions against ground-truth corners.

    The uncertainty-aware IoU credits the truth volume covered by the
    envelope box, over the union of truth and point box; it is never below
    the point-box IoU because the envelope contains the point box.
    """
    y = np.asarray(truth_corners, dtype=np.float64)
    if y.shape[0] == 0:
        raise ValueError("cannot evaluate zero objects")
    y_hat, q_l, q_h = (np.asarray(a, dtype=np.float64) for a in (pred.y_hat, pred.q_l, pred.q_h))
    inside = (q_l <= y) & (y <= q_h)
    widths = q_h - q_l

    c_t, s_t = box_from_corners(y)
    c_p, s_p = box_from_corners(y_hat)
    c_e, s_e = _envelope(q_l, q_h)
    s_p = np.maximum(s_p, 1e-12)
    iou_point = np.atleast_1d(iou3d_axis_aligned((c_t, s_t), (c_p, s_p)))
    inter_p = _overlap(c_t, s_t, c_p, s_p)
    union_p = np.prod(s_t, axis=-1) + np.prod(s_p, axis=-1) - inter_p
    iou_inflated = np.maximum(_overlap(c_t, s_t, c_e, s_e) / union_p, iou_point)

    objects = []
    for i in range(y.shape[0]):
        objects.append(
            {
                "truth": y[i].tolist(),
                "predicted": y_hat[i].tolist(),
                "lower": q_l[i].tolist(),
                "upper": q_h[i].tolist(),
                "uncertainty_box": {"center": c_e[i].tolist(), "size": s_e[i].tolist()},
                "iou_point": float(iou_point[i]),
                "iou_inflated": float(iou_inflated[i]),
                "mean_width": float(widths[i].mean()),
            }
        )
    return EvalReport(
        coverage=float(inside.mean()),
        joint_coverage=float(inside.all(axis=1).mean()),
        mean_width=float(widths.mean()),
        mau=conformal.mau(widths),
        precision_point=float(np.mean(iou_point >= IOU_THRESHOLD)),
        precision_inflated=float(np.mean(iou_inflated >= IOU_THRESHOLD)),
        n_objects=int(y.shape[0]),
        objects=objects,
    )


def evaluate(params, cfg: vae.ModelConfig, data: Batch) -> EvalReport:
    """Evaluate with the posterior-mean latent (eps = 0)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if data.feat_a.shape[1] != cfg.feat_dim_a or data.feat_b.shape[1] != cfg.feat_dim_b:
        raise dc.ShapeError(
            "evaluate features", (cfg.feat_dim_a, cfg.feat_dim_b), (data.feat_a.shape[1], data.feat_b.shape[1])
        )
    return evaluate_predictions(predict(params, cfg, data), data.corners)


# ---------------------------------------------------------------------------
# metrics file
# ---------------------------------------------------------------------------


class MetricsFormatError(ValueError):
    pass


def write_metrics(path, rows: list[EpochMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.row())


def read_metrics(path) -> list[EpochMetrics]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise MetricsFormatError("row 1: unexpected header")
        rows = []
        for rowno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_HEADER):
                raise MetricsFormatError(f"row {rowno}: expected {len(METRICS_HEADER)} fields, got {len(rec)}")
            try:
                vals = [int(rec[0])] + [float(x) for x in rec[1:]]
            except ValueError as exc:
                raise MetricsFormatError(f"row {rowno}: {exc}") from exc
            rows.append(EpochMetrics(*vals))
    return rows


def pearson_r(x, y) -> float | None:
    """Pearson correlation, or None when either series has zero variance."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return float(dx @ dy) / denom
