import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invabc import tensor_nn as nn
from invabc import vae
from invabc.forming_sim import run_forward, synthetic_space
from invabc.imaging import ssim
from gradcheck import sampled_fd_error

finite = st.floats(-5, 5)


def small_cfg(**kw):
    base = dict(image_size=16, latent_dim=2, base_channels=4, seed=3)
    base.update(kw)
    return vae.VaeConfig(**base)


# --- closed forms --------------------------------------------------------


def test_reparameterize_examples():
    s = vae.LatentStats(np.array([0.7, -1.2]), np.array([0.3, -0.4]))
    assert np.array_equal(vae.reparameterize(s, np.zeros(2)), s.u)
    assert vae.reparameterize(vae.LatentStats(np.zeros(1), np.zeros(1)), np.array([1.5]))[0] == 1.5
    z = vae.reparameterize(vae.LatentStats(np.array([2.0]), np.array([math.log(4.0)])), np.array([-1.0]))
    assert abs(z[0]) < 1e-15


def test_kl_term_examples():
    assert vae.kl_term(vae.LatentStats(np.zeros(3), np.zeros(3))) == 0.0
    assert vae.kl_term(vae.LatentStats(np.array([1.0]), np.zeros(1))) == pytest.approx(0.5, abs=1e-12)
    got = vae.kl_term(vae.LatentStats(np.zeros(2), np.full(2, 2.0)))
    # two dims of (e^2 - 2 + 0 - 1) / 2
    assert abs(got - (math.e**2 - 3.0)) < 1e-12
    assert abs(got - 4.389056) < 1e-6


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=6))
def test_kl_nonnegative_zero_only_at_prior(pairs):
    u = np.array([p[0] for p in pairs])
    lv = np.array([p[1] for p in pairs])
    kl = vae.kl_term(vae.LatentStats(u, lv))
    assert kl >= 0
    if np.max(np.abs(u)) > 1e-3 or np.max(np.abs(lv)) > 1e-3:
        assert kl > 0


def test_recon_loss_examples():
    d = np.ones((1, 1, 3))
    assert vae.recon_loss(d, d) == 0.0
    assert vae.recon_loss(d, np.full((1, 1, 3), 0.5)) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(nn.ShapeError):
        vae.recon_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


@given(st.floats(-10, 10), st.integers(0, 2**16))
def test_recon_loss_homogeneous(a, seed):
    rng = np.random.default_rng(seed)
    d, y = rng.random((2, 4, 4, 3))
    assert math.isclose(vae.recon_loss(a * d, a * y), a * a * vae.recon_loss(d, y), rel_tol=1e-12, abs_tol=1e-12)


def test_vae_loss_examples():
    d = np.random.default_rng(0).random((4, 4, 3))
    assert vae.vae_loss(d, vae.LatentStats(np.zeros(2), np.zeros(2)), d) == 0.0
    stats = vae.LatentStats(np.array([1.0]), np.zeros(1))
    y = np.full((1, 1, 3), 0.5)
    assert vae.vae_loss(np.ones((1, 1, 3)), stats, y) == pytest.approx(1.25, abs=1e-12)


@given(st.lists(finite, min_size=2, max_size=2), st.integers(0, 2**16))
def test_vae_loss_not_below_kl(u, seed):
    rng = np.random.default_rng(seed)
    stats = vae.LatentStats(np.array(u), rng.standard_normal(2))
    d, y = rng.random((2, 3, 3, 3))
    assert vae.vae_loss(d, stats, y) >= vae.kl_term(stats)


# --- architecture --------------------------------------------------------


@pytest.mark.parametrize("size", [8, 16, 32, 64, 256])
def test_round_trip_shape(size):
    cfg = vae.VaeConfig(image_size=size, latent_dim=3, base_channels=4)
    model = vae.VaeModel(cfg)
    x = np.random.default_rng(0).random((size, size, 3))
    stats = model.encode(x)
    assert stats.u.shape == (3,) and stats.log_var.shape == (3,)
    assert model.decode(stats.u).shape == (size, size, 3)


def test_scaled_architecture_drops_conv_pairs():
    cfg = vae.VaeConfig(image_size=64, latent_dim=8, base_channels=16)
    assert cfg.n_conv == 4
    assert cfg.encoder_channels == [16, 32, 64, 128]
    model = vae.VaeModel(cfg)
    shapes = model.encoder.output_shapes((1, 64, 64, 3))
    convs = [s for s, layer in zip(shapes, model.encoder.layers) if isinstance(layer, nn.Conv2D)]
    assert convs == [(1, 32, 32, 16), (1, 16, 16, 32), (1, 8, 8, 64), (1, 4, 4, 128)]
    assert shapes[-1] == (1, 16)


def test_bad_image_size_rejected():
    for size in (4, 48, 0):
        with pytest.raises(ValueError):
            vae.VaeConfig(image_size=size)


# --- encode / decode contracts ------------------------------------------


def test_untrained_encode_decode_contract():
    model = vae.VaeModel(small_cfg())
    x = np.random.default_rng(1).random((16, 16, 3))
    a, b = model.encode(x), model.encode(x)
    assert np.all(np.isfinite(a.u)) and np.all(np.isfinite(a.log_var))
    assert np.array_equal(a.u, b.u) and np.array_equal(a.log_var, b.log_var)
    assert np.all(a.sigma > 0)
    y1, y2 = model.decode(a.u), model.decode(a.u)
    assert np.array_equal(y1, y2)
    assert y1.shape == (16, 16, 3) and y1.min() >= 0 and y1.max() <= 1


def test_encode_shape_mismatch():
    model = vae.VaeModel(small_cfg())
    with pytest.raises(nn.ShapeError):
        model.encode(np.zeros((8, 8, 3)))
    with pytest.raises(nn.ShapeError):
        model.decode(np.zeros(3))


def test_uint8_input_is_scaled():
    model = vae.VaeModel(small_cfg())
    img = np.random.default_rng(2).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    assert np.array_equal(model.encode(img).u, model.encode(img / 255.0).u)


# --- gradients and training ---------------------------------------------


def test_full_model_gradients_match_finite_differences():
    model = vae.VaeModel(small_cfg())
    rng = np.random.default_rng(1)
    x = rng.random((3, 16, 16, 3))
    e = rng.standard_normal((3, 2))
    model.loss_and_grads(x, e)
    grads = {k: v.copy() for k, v in model.grads().items()}
    worst = sampled_fd_error(lambda: model.loss_and_grads(x, e), model.params(), grads, rng)
    assert max(worst.values()) < 1e-4


def test_loss_and_grads_matches_closed_form_loss():
    model = vae.VaeModel(small_cfg())
    rng = np.random.default_rng(4)
    x = rng.random((2, 16, 16, 3))
    e = np.zeros((2, 2))
    loss = model.loss_and_grads(x, e, train=False)
    stats = model.encode(x)
    want = np.mean([vae.vae_loss(x[i], vae.LatentStats(stats.u[i], stats.log_var[i]), model.decode(stats.u[i])) for i in range(2)])
    assert loss == pytest.approx(want, rel=1e-12)


def test_overfit_single_image():
    cfg = vae.VaeConfig(image_size=16, latent_dim=2, base_channels=16, epochs=200, batch_size=1, lr=1e-2, seed=0)
    img = np.random.default_rng(1).random((1, 16, 16, 3))
    _, log, _, _ = vae.train(img, None, cfg)
    assert log.epochs == 200
    assert log.epoch_loss[-1] < 0.1 * log.epoch_loss[0]


def _fld_corpus(n, size, seed):
    space = synthetic_space()
    from invabc.forming_sim import SimConfig

    sim = SimConfig(grid=size // 2, image_size=size)
    rng = np.random.default_rng(seed)
    thetas = rng.random((n, 6))
    return np.stack([run_forward(t, space, sim)[2] for t in thetas]), thetas, sim


def test_training_is_seeded_and_trends_down(tmp_path):
    imgs, _, _ = _fld_corpus(12, 16, 0)
    cfg = small_cfg(epochs=6, batch_size=4)
    m1, log1, zs1, zo1 = vae.train(imgs[1:], imgs[0], cfg)
    m2, log2, zs2, zo2 = vae.train(imgs[1:], imgs[0], cfg)
    assert log1.epoch_loss == log2.epoch_loss
    assert np.array_equal(zs1, zs2) and np.array_equal(zo1, zo2)
    assert log1.epoch_loss[-1] < log1.epoch_loss[0]
    assert zs1.shape == (11, 2) and zo1.shape == (2,)
    assert np.array_equal(zo1, m1.encode(imgs[0]).u)
    log1.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,mean_loss"


def test_same_theta_renders_encode_identically():
    imgs, thetas, sim = _fld_corpus(6, 16, 1)
    model, *_ = vae.train(imgs, None, small_cfg(epochs=2, batch_size=3))
    again = run_forward(thetas[2], synthetic_space(), sim)[2]
    assert np.array_equal(model.encode(imgs[2]).u, model.encode(again).u)


def test_reconstruction_quality_on_training_images():
    imgs, _, _ = _fld_corpus(24, 16, 2)
    cfg = vae.VaeConfig(image_size=16, latent_dim=4, base_channels=8, epochs=150, batch_size=8, lr=3e-3, seed=0)
    model, _, zs, _ = vae.train(imgs, None, cfg)
    recon = vae.to_uint8(model.decode(zs))
    scores = [ssim(r, x) for r, x in zip(recon, imgs)]
    assert np.mean(scores) >= 0.8


def test_divergence_is_reported():
    cfg = small_cfg(epochs=1, batch_size=2)
    imgs = np.full((2, 16, 16, 3), np.nan)
    with pytest.raises(vae.TrainingDivergence) as err:
        vae.train(imgs, None, cfg)
    assert err.value.epoch == 1 and err.value.batch == 1


def test_checkpoint_round_trip(tmp_path):
    model = vae.VaeModel(small_cfg())
    x = np.random.default_rng(0).random((4, 16, 16, 3))
    model.loss_and_grads(x, np.zeros((4, 2)))  # moves running stats
    model.save(tmp_path / "m.ckpt")
    again = vae.VaeModel.load(tmp_path / "m.ckpt")
    assert np.array_equal(model.encode(x).u, again.encode(x).u)


def test_write_latents(tmp_path):
    vae.write_latents(tmp_path / "z.csv", np.array([[1.0, 2.0]]), ["objective"])
    assert (tmp_path / "z.csv").read_text() == "image_id,z_1,z_2\nobjective,1.0,2.0\n"


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_decode_in_unit_range(z):
    model = vae.VaeModel(small_cfg())
    y = model.decode(np.array(z))
    assert y.min() >= 0 and y.max() <= 1
