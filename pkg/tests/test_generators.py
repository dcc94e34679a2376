import numpy as np
import pytest

from goldood.errors import ContractError
from goldood.generators import (
    LdmModel,
    VaeModel,
    forward_noise,
    ldm_training_loss,
    linear_betas,
    make_generator,
    sample_pseudo_ood,
    vae_kl,
    vae_loss,
)
from goldood.numerics import Tape, adam_step, backward


def test_linear_betas_endpoints():
    b = linear_betas(600)
    assert b[0] == pytest.approx(1e-4) and b[-1] == pytest.approx(0.02)
    assert np.all(np.diff(b) > 0)


def test_abar_is_cumulative_product():
    ldm = LdmModel(4, T=20)
    np.testing.assert_allclose(ldm.abar(np.arange(21)), np.r_[1.0, np.cumprod(1 - ldm.betas)])


def test_forward_noise_closed_form_and_range():
    ldm = LdmModel(2, T=10)
    h0, eps = np.array([[1.0, -2.0]]), np.array([[0.5, 0.5]])
    ab = ldm.abar(7)
    np.testing.assert_allclose(forward_noise(h0, 7, eps, ldm), np.sqrt(ab) * h0 + np.sqrt(1 - ab) * eps)
    with pytest.raises(ContractError):
        forward_noise(h0, 0, eps, ldm)
    with pytest.raises(ContractError):
        forward_noise(h0, 11, eps, ldm)


def test_vae_kl_matches_closed_form():
    rng = np.random.default_rng(0)
    mu, logvar = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    ref = 0.5 * np.sum(mu**2 + np.exp(logvar) - logvar - 1, axis=1)
    tape = Tape()
    np.testing.assert_allclose(tape.value(vae_kl(tape, tape.const(mu), tape.const(logvar))).ravel(), ref)


def test_vae_kl_is_zero_at_the_prior():
    tape = Tape()
    assert tape.value(vae_kl(tape, tape.const(np.zeros((2, 3))), tape.const(np.zeros((2, 3))))).max() == 0.0


@pytest.mark.parametrize("kind", ["vae", "ldm"])
def test_generators_fit_a_gaussian_cloud(kind):
    rng = np.random.default_rng(0)
    H = rng.normal(3.0, 0.5, size=(200, 4))
    kw = {"enc_hidden": 32, "dec_hidden": 32} if kind == "vae" else {"T": 100, "hidden": 64, "time_embedding": "sinusoidal"}
    gen = make_generator(kind, 4, rng, **kw)
    loss_fn = vae_loss if kind == "vae" else ldm_training_loss
    first = None
    for _ in range(400):
        tape = Tape()
        loss = loss_fn(H, gen, tape, rng)
        first = first if first is not None else tape.item(loss)
        adam_step(gen.store, backward(tape, loss, gen.store), 1e-2)
    assert tape.item(loss) < 0.5 * first
    x = sample_pseudo_ood(gen, 500, np.random.default_rng(1))
    assert x.shape == (500, 4) and np.isfinite(x).all()
    # samples land near the data rather than at the noise origin
    assert np.abs(x.mean(axis=0) - 3.0).max() < 1.0


def test_sample_zero_rows():
    gen = VaeModel.init(3, rng=0)
    assert sample_pseudo_ood(gen, 0, np.random.default_rng(0)).shape == (0, 3)


def test_unknown_kinds_rejected():
    with pytest.raises(ContractError):
        make_generator("gan", 3)
    with pytest.raises(ContractError):
        LdmModel(3, time_embedding="learned")
    with pytest.raises(ContractError):
        vae_loss(np.zeros((0, 3)), VaeModel.init(3, rng=0), Tape(), np.random.default_rng(0))
