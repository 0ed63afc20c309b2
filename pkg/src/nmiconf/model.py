"""Dual-encoder VAE with Gaussian-product fusion and a bounded-interval decoder."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import gaussfuse, infotheory
from .conformal import PredictionSet
from .diffcore import Node, graph_or_value
from .gaussfuse import FusedPosterior, LatentGaussian

CHECKPOINT_VERSION = 1
LATENT_DIM = 4
PROPOSAL_DIM = 4
OUT_DIM = 24
CHOL_FLOOR = 1e-3


class ModelError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    feat_dim_a: int = 32
    feat_dim_b: int = 32
    hidden: int = 64
    latent_dim: int = LATENT_DIM
    proposal_dim: int = PROPOSAL_DIM
    out_dim: int = OUT_DIM
    leaky_slope: float = 0.01
    seed: int = 0
    # fixed output affine: y = offset + scale * head (meters); set from training targets
    target_offset: list[float] | None = field(default=None, repr=False)
    target_scale: list[float] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.latent_dim != LATENT_DIM:
            raise ValueError("latent_dim is fixed at 4")
        if self.proposal_dim != PROPOSAL_DIM or self.out_dim != OUT_DIM:
            raise ValueError("proposal_dim is fixed at 4 and out_dim at 24")

    def offset(self) -> np.ndarray:
        return np.zeros(OUT_DIM) if self.target_offset is None else np.asarray(self.target_offset, float)

    def scale(self) -> np.ndarray:
        return np.ones(OUT_DIM) if self.target_scale is None else np.asarray(self.target_scale, float)


def layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden
    n_chol = LATENT_DIM * (LATENT_DIM + 1) // 2
    shapes: dict[str, tuple[int, ...]] = {}

    def dense(name, fan_in, fan_out):
        shapes[f"{name}.w"] = (fan_in, fan_out)
        shapes[f"{name}.b"] = (fan_out,)

    for tag, d in (("enc_a", cfg.feat_dim_a), ("enc_b", cfg.feat_dim_b)):
        dense(f"{tag}.h1", d, h)
        dense(f"{tag}.h2", h, h)
        dense(f"{tag}.mu", h, LATENT_DIM)
        dense(f"{tag}.chol", h, n_chol)
    dense("dec.h1", LATENT_DIM + PROPOSAL_DIM, h)
    dense("dec.h2", h, h)
    for head in ("y", "lo", "hi"):
        dense(f"dec.{head}", h, OUT_DIM)
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the seeded generator; biases zero."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in layer_shapes(cfg).items():
        if name.endswith(".w"):
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def as_leaves(params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {k: dc.leaf(v, name=k) for k, v in params.items()}


def _as_graph_params(params) -> dict[str, Node]:
    return {k: dc.as_node(v) for k, v in params.items()}


def _dense(x: Node, params, name: str) -> Node:
    out = dc.affine(x, params[f"{name}.w"], params[f"{name}.b"])
    if not np.all(np.isfinite(out.value)):
        raise ModelError(f"non-finite activations in layer '{name}'")
    return out


def encode(features, which: str, params, cfg: ModelConfig | None = None) -> LatentGaussian:
    """Encoder for modality ``which`` ('a' or 'b'); rows of ``features`` are samples."""
    if which not in ("a", "b"):
        raise ValueError("which must be 'a' or 'b'")
    p = _as_graph_params(params)
    x = dc.as_node(np.atleast_2d(features) if not isinstance(features, Node) else features)
    tag = f"enc_{which}"
    want = p[f"{tag}.h1.w"].shape[0]
    if x.shape[-1] != want:
        raise dc.ShapeError(f"encode[{which}] features", x.shape, (want,))
    slope = cfg.leaky_slope if cfg else 0.01
    h = dc.leaky_relu(_dense(x, p, f"{tag}.h1"), slope)
    h = dc.leaky_relu(_dense(h, p, f"{tag}.h2"), slope)
    mu = dc.shift(dc.softsign(_dense(h, p, f"{tag}.mu")), 1.0)
    raw = _dense(h, p, f"{tag}.chol")
    diag = dc.shift(dc.softplus(dc.take(raw, slice(0, LATENT_DIM), axis=-1)), CHOL_FLOOR)
    off = dc.take(raw, slice(LATENT_DIM, None), axis=-1)
    return LatentGaussian(mu=mu, chol=dc.tril_assemble(diag, off))


def fuse_and_sample(
    lat_a: LatentGaussian, lat_b: LatentGaussian, eps, *, nmi_grad: bool = False
) -> tuple[Node, FusedPosterior]:
    """Fuse two latent posteriors and draw ``z = mu_joint + chol(V_joint) eps``."""
    v_a = gaussfuse.regularize(gaussfuse.cov_from_chol(lat_a.chol))
    v_b = gaussfuse.regularize(gaussfuse.cov_from_chol(lat_b.chol))
    mu_joint, v_joint = gaussfuse.gaussian_product([(lat_a.mu, v_a), (lat_b.mu, v_b)])
    v_joint, repaired = gaussfuse.ensure_pd(v_joint)
    mi = infotheory.mutual_information(v_a, v_b, v_joint)
    h_a = infotheory.entropy(v_a)
    h_b = infotheory.entropy(v_b)
    nmi_value, _ = infotheory.nmi(mi.value, h_a.value, h_b.value)
    fused = FusedPosterior(
        mu_joint=mu_joint,
        v_joint=v_joint,
        h_a=h_a.value,
        h_b=h_b.value,
        mi=mi.value,
        nmi=np.asarray(nmi_value),
        repaired=np.asarray(repaired),
        nmi_node=infotheory.nmi_node(mi, h_a, h_b) if nmi_grad else None,
    )
    eps = dc.as_node(np.broadcast_to(eps, mu_joint.shape).copy() if not isinstance(eps, Node) else eps)
    z = gaussfuse.reparam_sample(mu_joint, v_joint, eps)
    return z, fused


@dataclass
class PredictionNodes:
    y_hat: Node
    q_l: Node
    q_h: Node

    def values(self) -> PredictionSet:
        return PredictionSet(self.y_hat.value, self.q_l.value, self.q_h.value)


def decode(z, proposal, params, cfg: ModelConfig | None = None) -> PredictionNodes:
    """Decoder over ``[z, proposal]``; bounds are ``y_hat -/+ softplus(offset heads)``."""
    cfg = cfg or ModelConfig()
    p = _as_graph_params(params)
    z = dc.as_node(np.atleast_2d(z) if not isinstance(z, Node) else z)
    proposal = dc.as_node(np.atleast_2d(proposal) if not isinstance(proposal, Node) else proposal)
    x = dc.concat([z, proposal], axis=-1)
    h = dc.leaky_relu(_dense(x, p, "dec.h1"), cfg.leaky_slope)
    h = dc.leaky_relu(_dense(h, p, "dec.h2"), cfg.leaky_slope)
    y_n = _dense(h, p, "dec.y")
    d_lo = dc.softplus(_dense(h, p, "dec.lo"))
    d_hi = dc.softplus(_dense(h, p, "dec.hi"))
    n = y_n.shape[0]
    offset = np.broadcast_to(cfg.offset(), (n, OUT_DIM)).copy()
    scale = dc.const(np.broadcast_to(cfg.scale(), (n, OUT_DIM)).copy())
    y_hat = dc.shift(dc.mul(y_n, scale), offset)
    q_l = dc.shift(dc.mul(dc.sub(y_n, d_lo), scale), offset)
    q_h = dc.shift(dc.mul(dc.add(y_n, d_hi), scale), offset)
    for name, node in (("y_hat", y_hat), ("q_l", q_l), ("q_h", q_h)):
        if not np.all(np.isfinite(node.value)):
            raise ModelError(f"non-finite decoder output '{name}'")
    return PredictionNodes(y_hat, q_l, q_h)


@graph_or_value
def kl_divergence(mu_joint, v_joint):
    """``0.5 (tr V + mu.mu - 4 - ln|V|)`` against a standard normal, in nats (per sample)."""
    mu, v = dc.as_node(mu_joint), dc.as_node(v_joint)
    sign, _ = np.linalg.slogdet(v.value)
    if np.any(sign <= 0):
        raise ValueError("KL needs a covariance with positive determinant")
    d = v.shape[-1]
    quad = dc.sum(dc.square(mu), axis=-1)
    inner = dc.sub(dc.add(dc.trace(v), quad), dc.logdet(v))
    return dc.scale(dc.shift(inner, -float(d)), 0.5)


@dataclass
class ForwardPass:
    lat_a: LatentGaussian
    lat_b: LatentGaussian
    z: Node
    fused: FusedPosterior
    pred: PredictionNodes


def forward(params, feat_a, feat_b, proposal, eps, cfg: ModelConfig, *, nmi_grad: bool = False) -> ForwardPass:
    """Full pass for a batch; pure in ``(params, inputs, eps)``."""
    lat_a = encode(feat_a, "a", params, cfg)
    lat_b = encode(feat_b, "b", params, cfg)
    z, fused = fuse_and_sample(lat_a, lat_b, eps, nmi_grad=nmi_grad)
    pred = decode(z, proposal, params, cfg)
    return ForwardPass(lat_a, lat_b, z, fused, pred)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "weights": {k: np.asarray(v, dtype=np.float64).ravel().tolist() for k, v in params.items()},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version') if isinstance(doc, dict) else None!r}")
    known = {f.name for f in fields(ModelConfig)}
    raw_cfg = doc.get("config", {})
    unknown = set(raw_cfg) - known
    if unknown:
        raise CheckpointError(f"{path}: unknown config keys {sorted(unknown)}")
    try:
        cfg = ModelConfig(**raw_cfg)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid config ({exc})") from exc
    weights = doc.get("weights", {})
    shapes = layer_shapes(cfg)
    if set(weights) != set(shapes):
        missing = sorted(set(shapes) - set(weights))
        extra = sorted(set(weights) - set(shapes))
        raise CheckpointError(f"{path}: layer mismatch (missing {missing}, unexpected {extra})")
    params = {}
    for name, shape in shapes.items():
        flat = np.asarray(weights[name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: layer '{name}' has {flat.size} values, expected shape {shape}")
        params[name] = flat.reshape(shape)
    return cfg, params
