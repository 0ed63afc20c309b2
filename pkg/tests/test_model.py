import json
import math

import numpy as np
import pytest

from nmiconf import conformal as cf
from nmiconf import diffcore as dc
from nmiconf import model as vae
from nmiconf import trainer

from conftest import random_chol

SMALL = vae.ModelConfig(feat_dim_a=5, feat_dim_b=6, hidden=8, seed=3)


def zero_params(cfg=SMALL):
    return {k: np.zeros(s) for k, s in vae.layer_shapes(cfg).items()}


def test_zero_weight_encoder():
    lat = vae.encode(np.ones((2, 5)), "a", zero_params())
    np.testing.assert_array_equal(lat.mu.value, np.ones((2, 4)))
    diag = np.diagonal(lat.chol.value, axis1=-2, axis2=-1)
    np.testing.assert_allclose(diag, math.log(2) + 1e-3, atol=1e-15)
    assert abs(math.log(2) + 1e-3 - 0.6941) < 1e-4
    np.testing.assert_array_equal(np.tril(lat.chol.value[0], -1), 0.0)


def test_encoder_mean_inside_open_interval(rng):
    params = vae.init_params(SMALL)
    for k in params:
        params[k] = params[k] * 40.0
    mu = vae.encode(rng.normal(scale=50, size=(100, 5)), "a", params).mu.value
    assert np.all(mu > 0) and np.all(mu < 2)


def test_encoder_rejects_wrong_width():
    with pytest.raises(dc.ShapeError):
        vae.encode(np.ones((1, 7)), "a", vae.init_params(SMALL))


def test_encoder_nonfinite_names_layer():
    params = vae.init_params(SMALL)
    params["enc_b.h2.w"][0, 0] = np.inf
    with pytest.raises(vae.ModelError, match="enc_b.h2"):
        vae.encode(np.ones((1, 6)), "b", params)


def test_zero_weight_decoder_closed_form(rng):
    params = zero_params()
    params["dec.y.b"] = rng.normal(size=24)
    params["dec.lo.b"] = np.full(24, 0.3)
    params["dec.hi.b"] = np.full(24, 0.3)
    out = vae.decode(rng.normal(size=(3, 4)), rng.uniform(size=(3, 4)), params, SMALL).values()
    np.testing.assert_array_equal(out.y_hat, np.broadcast_to(params["dec.y.b"], (3, 24)))
    np.testing.assert_allclose(out.q_h - out.q_l, 2 * np.log1p(np.exp(0.3)), atol=1e-14)


def test_decoder_interval_validity(rng):
    params = vae.init_params(SMALL)
    for k in params:
        params[k] = params[k] + rng.normal(scale=2.0, size=params[k].shape)
    out = vae.decode(rng.normal(size=(200, 4)), rng.uniform(size=(200, 4)), params, SMALL).values()
    assert np.all(out.q_l <= out.y_hat) and np.all(out.y_hat <= out.q_h)


def test_proposal_pathway_is_live(rng):
    params = vae.init_params(SMALL)
    z = np.zeros((1, 4))
    a = vae.decode(z, rng.uniform(size=(1, 4)), params, SMALL).values().y_hat
    b = vae.decode(z, rng.uniform(size=(1, 4)), params, SMALL).values().y_hat
    assert np.max(np.abs(a - b)) > 0


def test_forward_is_bit_identical(rng):
    params = vae.init_params(SMALL)
    fa, fb, prop, eps = rng.normal(size=(4, 5)), rng.normal(size=(4, 6)), rng.uniform(size=(4, 4)), rng.normal(size=(4, 4))
    one = vae.forward(params, fa, fb, prop, eps, SMALL).pred.values()
    two = vae.forward(vae.init_params(SMALL), fa.copy(), fb.copy(), prop.copy(), eps.copy(), SMALL).pred.values()
    for x, y in zip((one.y_hat, one.q_l, one.q_h), (two.y_hat, two.q_l, two.q_h)):
        assert x.tobytes() == y.tobytes()


def _latent(mu, chol):
    return vae.LatentGaussian(dc.const(mu), dc.const(chol))


def test_fuse_identical_unit_posteriors():
    lat = _latent(np.full((1, 4), 0.7), np.eye(4)[None])
    z, fused = vae.fuse_and_sample(lat, lat, np.zeros((1, 4)))
    assert np.max(np.abs(fused.v_joint.value[0] - 0.5 * np.eye(4))) <= 1e-3
    np.testing.assert_array_equal(z.value, fused.mu_joint.value)


def test_fuse_is_symmetric_in_modalities(rng):
    a = _latent(rng.uniform(0, 2, (3, 4)), random_chol(rng, batch=3))
    b = _latent(rng.uniform(0, 2, (3, 4)), random_chol(rng, batch=3))
    eps = rng.normal(size=(3, 4))
    z1, f1 = vae.fuse_and_sample(a, b, eps)
    z2, f2 = vae.fuse_and_sample(b, a, eps)
    assert np.max(np.abs(z1.value - z2.value)) <= 1e-12
    assert np.max(np.abs(f1.nmi - f2.nmi)) <= 1e-12


def test_kl_examples():
    assert vae.kl_divergence(np.zeros(4), np.eye(4)) == 0.0
    assert vae.kl_divergence(np.array([1.0, 0, 0, 0]), np.eye(4)) == 0.5
    for c in (0.25, 0.5, 2.0, 3.0):
        expect = 0.5 * (4 * c - 4 - 4 * math.log(c))
        assert abs(vae.kl_divergence(np.zeros(4), c * np.eye(4)) - expect) <= 1e-12
        assert expect > 0


def test_kl_rejects_nonpositive_determinant():
    with pytest.raises(ValueError):
        vae.kl_divergence(np.zeros(4), np.diag([1.0, 1.0, -1.0, 1.0]))


def test_kl_nonnegative_over_random_pd(rng):
    n = 1000
    q, _ = np.linalg.qr(rng.normal(size=(n, 4, 4)))
    lam = rng.uniform(0.1, 10.0, (n, 4))
    v = q @ (lam[..., None] * np.swapaxes(q, -1, -2))
    mu = rng.normal(size=(n, 4))
    kl = vae.kl_divergence(mu, v)
    assert kl.shape == (n,) and np.all(kl >= 0)


def _loss_fn(y, fa, fb, prop, eps, p_cov_avg):
    state = cf.CalibrationState(p_cov_avg=p_cov_avg, batches_seen=3, u_last=0.8, nmi_last=0.4)
    ccfg = cf.ConformalConfig()

    def f(leaves):
        fp = vae.forward(leaves, fa, fb, prop, eps, SMALL)
        return trainer.total_loss(y, fp.pred, fp.fused.mu_joint, fp.fused.v_joint, state, ccfg)[0]

    return f


@pytest.mark.parametrize("p_cov_avg", [0.7, 0.95])
def test_full_loss_gradient_matches_finite_differences(rng, p_cov_avg):
    params = vae.init_params(SMALL)
    fa, fb, prop = rng.normal(size=(4, 5)), rng.normal(size=(4, 6)), rng.uniform(size=(4, 4))
    eps = rng.normal(size=(4, 4))
    y = vae.forward(params, fa, fb, prop, eps, SMALL).pred.y_hat.value + rng.normal(scale=0.6, size=(4, 24))
    rep = dc.grad_check(_loss_fn(y, fa, fb, prop, eps, p_cov_avg), params, max_entries=40)
    assert rep.worst <= 1e-4, rep.max_rel_error


def test_checkpoint_round_trip(tmp_path):
    cfg = vae.ModelConfig(seed=11, target_offset=[0.5] * 24, target_scale=[2.0] * 24)
    params = vae.init_params(cfg)
    path = tmp_path / "m.json"
    vae.save_checkpoint(path, cfg, params)
    cfg2, params2 = vae.load_checkpoint(path)
    assert cfg2 == cfg
    for k in params:
        assert params[k].tobytes() == params2[k].tobytes()


def test_checkpoint_errors(tmp_path):
    cfg = vae.ModelConfig()
    path = tmp_path / "m.json"
    vae.save_checkpoint(path, cfg, vae.init_params(cfg))
    text = path.read_text()

    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(vae.CheckpointError, match="parse"):
        vae.load_checkpoint(tmp_path / "trunc.json")

    doc = json.loads(text)
    doc["version"] = 2
    (tmp_path / "v2.json").write_text(json.dumps(doc))
    with pytest.raises(vae.CheckpointError, match="version"):
        vae.load_checkpoint(tmp_path / "v2.json")

    doc = json.loads(text)
    doc["weights"]["dec.y.b"] = doc["weights"]["dec.y.b"][:-1]
    (tmp_path / "shape.json").write_text(json.dumps(doc))
    with pytest.raises(vae.CheckpointError, match="dec.y.b"):
        vae.load_checkpoint(tmp_path / "shape.json")

    doc = json.loads(text)
    del doc["weights"]["enc_a.h1.w"]
    (tmp_path / "missing.json").write_text(json.dumps(doc))
    with pytest.raises(vae.CheckpointError, match="enc_a.h1.w"):
        vae.load_checkpoint(tmp_path / "missing.json")


def test_model_config_fixed_dims():
    with pytest.raises(ValueError):
        vae.ModelConfig(latent_dim=3)
