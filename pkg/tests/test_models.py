import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy import stats

from anomaly_bench.data import Modality, generate_healthy
from anomaly_bench.errors import ConfigError, ContractError, DivergenceError, IntegrityError, ValidationError
from anomaly_bench.models import (
    Architecture,
    AutoEncoder,
    CriticState,
    DetectorKind,
    LatentLayout,
    TrainConfig,
    TrainedModel,
    aae_losses,
    alpha_gan_losses,
    anomaly_map,
    corrupt,
    elbo_loss,
    encode,
    gradient_penalty,
    kl_diag_gaussian,
    load_checkpoint,
    reconstruct,
    recon_loss,
    save_checkpoint,
    train,
    wgan_gp_critic_loss,
)
from anomaly_bench.models.architecture import LatentCritic
from anomaly_bench.models.losses import reparameterize
from anomaly_bench.models.training import _Trainer, slices_to_tensors
from anomaly_bench.preprocess import PreprocessConfig, preprocess_dataset

from .conftest import make_slice


@pytest.mark.parametrize(
    "size, shape",
    [(128, (2, 2, 64)), (256, (4, 4, 64)), (32, (2, 2, 64)), (64, (4, 4, 64))],
)
def test_spatial_latent_shapes(size, shape):
    arch = Architecture.for_input(size)
    assert arch.latent_shape == shape
    network = AutoEncoder(DetectorKind.VAE, arch)
    mean, log_variance = network.encode_distribution(torch.zeros(1, 1, size, size))
    assert tuple(mean.shape) == (1, shape[2], shape[0], shape[1])
    assert log_variance.shape == mean.shape
    assert tuple(network(torch.zeros(2, 1, size, size)).shape) == (2, 1, size, size)


def test_flat_latent_shape():
    arch = Architecture.for_input(64, LatentLayout.FLAT, latent_dim=64)
    assert arch.latent_shape == (64,)
    network = AutoEncoder(DetectorKind.AE, arch)
    assert tuple(network.encode(torch.zeros(3, 1, 64, 64)).shape) == (3, 64)


def test_input_size_must_fit_stages():
    with pytest.raises(ConfigError):
        Architecture(input_size=40, channel_schedule=(8, 8, 8, 8))
    with pytest.raises(ConfigError):
        CriticState(DetectorKind.VAE, Architecture.for_input(32))


def test_kl_of_shifted_unit_gaussian():
    assert kl_diag_gaussian(torch.tensor([1.0]), torch.tensor([0.0])).item() == pytest.approx(0.5)
    assert kl_diag_gaussian(torch.zeros(5), torch.zeros(5)).item() == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mean = rng.normal(scale=0.5, size=3)
        variance = rng.uniform(0.3, 2.0, size=3)
        z = rng.normal(mean, np.sqrt(variance), size=(1_000_000, 3))
        log_ratio = stats.norm.logpdf(z, mean, np.sqrt(variance)) - stats.norm.logpdf(z)
        estimate = log_ratio.sum(axis=1).mean()
        closed = kl_diag_gaussian(torch.from_numpy(mean), torch.from_numpy(np.log(variance)))
        assert abs(closed.item() - estimate) < 1e-2


def test_recon_loss_of_single_image():
    assert recon_loss(torch.tensor([[3.0, 4.0]]), torch.zeros(1, 2)).item() == pytest.approx(5.0)
    x = torch.ones(2, 1, 2, 2)
    mask = torch.zeros_like(x)
    mask[:, :, 0, 0] = 1
    assert recon_loss(x, torch.zeros_like(x), mask).item() == pytest.approx(1.0)


def test_corrupt_touches_mask_only():
    x = torch.zeros(1, 1, 4, 4)
    mask = torch.zeros_like(x)
    mask[..., :2, :] = 1
    noisy = corrupt(x, mask, 0.5, torch.Generator().manual_seed(0))
    assert (noisy[..., 2:, :] == 0).all()
    assert (noisy[..., :2, :] != 0).any()
    assert corrupt(x, mask, 0.0) is x
    with pytest.raises(ContractError):
        corrupt(x, mask, -0.1)


def test_gradient_penalty_of_constant_critic():
    z = torch.randn(8, 3)
    assert gradient_penalty(lambda v: torch.zeros(v.shape[0], 1), z, z + 1).item() == pytest.approx(1.0)


def test_gradient_penalty_of_unit_slope_critic():
    critic = nn.Linear(2, 1)
    with torch.no_grad():
        critic.weight.copy_(torch.tensor([[0.6, 0.8]]))
    assert gradient_penalty(critic, torch.randn(6, 2), torch.randn(6, 2)).item() == pytest.approx(0.0, abs=1e-10)


def test_gradient_penalty_of_linear_critic(float64_torch):
    torch.manual_seed(7)
    critic = nn.Linear(5, 1)
    expected = (critic.weight.norm().item() - 1.0) ** 2
    assert gradient_penalty(critic, torch.randn(9, 5), torch.randn(9, 5)).item() == pytest.approx(expected, rel=1e-12)


def test_reparameterized_samples_have_analytic_moments(float64_torch):
    mean = torch.tensor([1.0, -2.0, 3.0])
    variance = torch.tensor([0.5, 1.0, 2.0])
    n = 100_000
    z, _ = reparameterize(
        mean.expand(n, 3), variance.log().expand(n, 3), torch.Generator().manual_seed(0)
    )
    assert torch.allclose(z.mean(dim=0), mean, rtol=0.02)
    assert torch.allclose(z.var(dim=0), variance, rtol=0.02)


def test_corruption_noise_level():
    x = torch.zeros(1, 1, 400, 250)
    noisy = corrupt(x, torch.ones_like(x), 0.5, torch.Generator().manual_seed(1))
    assert noisy.std().item() == pytest.approx(0.5, rel=0.05)


def test_elbo_needs_variational_model():
    network = AutoEncoder(DetectorKind.AE, Architecture.for_input(32))
    with pytest.raises(ContractError):
        elbo_loss(network, torch.zeros(1, 1, 32, 32))


# finite differences on a toy model: 2x2 images, one flat latent unit
TOY = Architecture(input_size=2, channel_schedule=(), latent_layout=LatentLayout.FLAT, latent_dim=1)


def _toy_batch():
    x = torch.tensor(np.random.default_rng(3).normal(size=(3, 1, 2, 2)))
    mask = torch.ones_like(x)
    mask[0, 0, 1, 1] = 0
    return x, mask


def _assert_gradients_match(loss_fn, params, eps=1e-6, entries=6):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for param, grad in zip(params, grads):
        grad = torch.zeros_like(param) if grad is None else grad
        flat = param.data.view(-1)
        for i in range(min(flat.numel(), entries)):
            original = flat[i].item()
            flat[i] = original + eps
            up = loss_fn().item()
            flat[i] = original - eps
            down = loss_fn().item()
            flat[i] = original
            numeric = (up - down) / (2 * eps)
            assert grad.view(-1)[i].item() == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_elbo_gradients(float64_torch):
    torch.manual_seed(0)
    network = AutoEncoder(DetectorKind.VAE, TOY)
    x, mask = _toy_batch()

    def loss():
        return elbo_loss(network, x, mask, generator=torch.Generator().manual_seed(11)).total

    _assert_gradients_match(loss, list(network.parameters()))


def test_bayesian_elbo_gradients(float64_torch):
    torch.manual_seed(0)
    network = AutoEncoder(DetectorKind.VAE_BBB, TOY)
    x, mask = _toy_batch()

    def loss():
        torch.manual_seed(5)
        return elbo_loss(network, x, mask, num_training_slices=10, generator=torch.Generator().manual_seed(11)).total

    _assert_gradients_match(loss, list(network.parameters()))


def test_weight_kl_gradients(float64_torch):
    torch.manual_seed(1)
    network = AutoEncoder(DetectorKind.VAE_BBB, TOY, prior_std=0.7)
    _assert_gradients_match(network.weight_kl, list(network.parameters()))


def test_wgan_gp_critic_gradients(float64_torch):
    torch.manual_seed(2)
    critic = LatentCritic(2, hidden=4)
    real, fake = torch.randn(5, 2), torch.randn(5, 2)

    def loss():
        return wgan_gp_critic_loss(critic, real, fake, generator=torch.Generator().manual_seed(4))

    _assert_gradients_match(loss, list(critic.parameters()))


def test_alpha_gan_gradients(float64_torch):
    torch.manual_seed(3)
    network = AutoEncoder(DetectorKind.ALPHA_GAN, TOY)
    critics = CriticState(DetectorKind.ALPHA_GAN, TOY, hidden=4)
    x, mask = _toy_batch()

    def losses():
        return alpha_gan_losses(network, critics, x, mask, generator=torch.Generator().manual_seed(8))

    _assert_gradients_match(lambda: losses().encoder, list(network.encoder.parameters()))
    _assert_gradients_match(lambda: losses().generator, list(network.decoder.parameters()))
    _assert_gradients_match(
        lambda: losses().latent_critic + losses().recon_critic, list(critics.parameters())
    )


def test_aae_gradients(float64_torch):
    torch.manual_seed(4)
    network = AutoEncoder(DetectorKind.AAE, TOY)
    critics = CriticState(DetectorKind.AAE, TOY, hidden=4)
    x, mask = _toy_batch()

    def losses():
        return aae_losses(network, critics, x, mask, generator=torch.Generator().manual_seed(6))

    _assert_gradients_match(lambda: losses().autoencoder, list(network.parameters()))
    _assert_gradients_match(lambda: losses().latent_critic, list(critics.parameters()))
    with pytest.raises(ContractError):
        aae_losses(AutoEncoder(DetectorKind.AE, TOY), critics, x, mask)


def test_generator_step_against_frozen_critic(float64_torch):
    torch.manual_seed(5)
    network = AutoEncoder(DetectorKind.ALPHA_GAN, TOY)
    critics = CriticState(DetectorKind.ALPHA_GAN, TOY, hidden=4)
    x, mask = _toy_batch()

    def generator_loss():
        return alpha_gan_losses(network, critics, x, mask, generator=torch.Generator().manual_seed(2)).generator

    params = list(network.decoder.parameters())
    before = generator_loss()
    grads = torch.autograd.grad(before, params, allow_unused=True)
    with torch.no_grad():
        for param, grad in zip(params, grads):
            if grad is not None:
                param -= 1e-4 * grad
    assert generator_loss().item() < before.item()


def _untrained(kind, size=32) -> TrainedModel:
    torch.manual_seed(0)
    arch = Architecture.for_input(size)
    return TrainedModel(kind, arch, AutoEncoder(kind, arch).eval(), TrainConfig(inference_samples=4))


def test_bayesian_reconstruction_averages_seeded_passes(healthy32):
    model = _untrained(DetectorKind.VAE_BBB)
    target = healthy32[0]
    averaged = reconstruct(model, target, samples=3, seed=5).pixels
    x = torch.from_numpy(target.pixels)[None, None]
    passes = []
    with torch.no_grad():
        for m in range(3):
            torch.manual_seed(5 + m)
            passes.append(model.network.reconstruct(x)[0, 0].numpy())
    assert np.allclose(averaged, np.mean(passes, axis=0), atol=1e-6)
    assert np.array_equal(averaged, reconstruct(model, target, samples=3, seed=5).pixels)


def test_anomaly_map_is_masked_absolute_residual(healthy32):
    model = _untrained(DetectorKind.AE)
    target = healthy32[1]
    scores = anomaly_map(model, target).scores
    rec = reconstruct(model, target).pixels.astype(np.float64)
    expected = np.abs(target.pixels.astype(np.float64) - rec)
    assert np.allclose(scores[target.mask], expected[target.mask])
    assert (scores[~target.mask] == 0).all()
    with pytest.raises(ValidationError):
        anomaly_map(model, make_slice(np.zeros((16, 16))))


def test_encode_layout(healthy32):
    code = encode(_untrained(DetectorKind.VAE), healthy32[0], torch.Generator().manual_seed(0))
    assert code.shape == (2, 2, 64)
    assert code.log_variance.shape == (2, 2, 64)
    assert np.allclose(code.sample, code.mean + np.exp(0.5 * code.log_variance) * code.epsilon, atol=1e-5)
    plain = encode(_untrained(DetectorKind.AE), healthy32[0])
    assert plain.log_variance is None and np.array_equal(plain.sample, plain.mean)


def _small_config(**overrides) -> TrainConfig:
    options = dict(seed=3, epochs=2, batch_size=4, learning_rate=1e-3, n_critic=1)
    options.update(overrides)
    return TrainConfig(**options)


@pytest.mark.parametrize("kind", list(DetectorKind))
def test_training_is_deterministic(kind, healthy32):
    arch = Architecture.for_input(32)
    first = train(kind, arch, healthy32[:8], _small_config())
    second = train(kind, arch, healthy32[:8], _small_config())
    assert first.loss_history == second.loss_history
    for name, value in first.parameters().items():
        assert np.array_equal(value, second.parameters()[name]), name
    assert len(first.loss_history) == 2
    assert first.deterministic


def test_training_stops_without_validation_progress(healthy32):
    model = train(
        DetectorKind.AE, Architecture.for_input(32), healthy32[:8],
        _small_config(epochs=20, learning_rate=0.0, patience=1), val_slices=healthy32[8:10],
    )
    assert len(model.loss_history) == 2
    assert "val_recon" in model.loss_history[0]


def test_divergence_is_reported(monkeypatch, tmp_path, healthy32):
    monkeypatch.setattr(_Trainer, "step", lambda self, x, mask: {"total": float("nan")})
    with pytest.raises(DivergenceError) as info:
        train(DetectorKind.AE, Architecture.for_input(32), healthy32[:4], _small_config(), diagnostic_dir=tmp_path)
    assert info.value.checkpoint == tmp_path / "checkpoint.json"
    assert info.value.checkpoint.exists()


def test_checkpoint_round_trip(tmp_path, healthy32):
    model = train(DetectorKind.ALPHA_GAN, Architecture.for_input(32), healthy32[:4], _small_config(epochs=1))
    save_checkpoint(model, tmp_path)
    back = load_checkpoint(tmp_path)
    assert back.kind is DetectorKind.ALPHA_GAN
    assert back.architecture == model.architecture
    assert back.training_config == model.training_config
    assert back.loss_history == model.loss_history
    assert back.critics is not None and back.critics.reconstruction is not None
    for name, value in model.parameters().items():
        assert np.array_equal(value, back.parameters()[name]), name
    target = healthy32[10]
    assert np.array_equal(anomaly_map(model, target).scores, anomaly_map(back, target).scores)


def test_checkpoint_with_wrong_shapes(tmp_path, healthy32):
    model = train(DetectorKind.AE, Architecture.for_input(32), healthy32[:4], _small_config(epochs=1))
    path = save_checkpoint(model, tmp_path)
    manifest = path.read_text().replace('"latent_channels": 64', '"latent_channels": 32')
    path.write_text(manifest)
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path)


@pytest.mark.parametrize("kind", [DetectorKind.AE, DetectorKind.VAE_BBB])
def test_zero_initialized_output_is_constant(kind, rng):
    torch.manual_seed(0)
    network = AutoEncoder(kind, Architecture.for_input(32))
    network.zero_init_output()
    with torch.no_grad():
        out = network(torch.from_numpy(rng.normal(size=(3, 1, 32, 32)).astype(np.float32)))
    # Bayesian output weights keep a spread of exp(-30)
    assert torch.allclose(out, torch.full_like(out, out.flatten()[0].item()), rtol=0, atol=1e-6)


def test_zero_init_training_option(healthy32):
    model = train(
        DetectorKind.AE, Architecture.for_input(32), healthy32[:4],
        _small_config(epochs=1, learning_rate=0.0, zero_init_output=True),
    )
    rec = reconstruct(model, healthy32[5]).pixels
    assert (rec == rec.flat[0]).all()


def test_bayesian_averaging_shrinks_map_variance(healthy32):
    model = _untrained(DetectorKind.VAE_BBB)
    target = healthy32[2]

    def spread(samples):
        maps = [anomaly_map(model, target, samples=samples, seed=16 * run).scores for run in range(8)]
        return np.var(maps, axis=0)[target.mask].mean()

    assert spread(1) > spread(16)


@pytest.fixture(scope="module")
def normalized_train():
    slices = generate_healthy(31, 200, 32, Modality.T2LIKE)
    return preprocess_dataset(slices, PreprocessConfig(target_size=32))[0]


def _training_recon(network, slices, arch):
    x, mask = slices_to_tensors(slices, arch.input_size)
    with torch.no_grad():
        return recon_loss(x, network.reconstruct(x), mask).item()


@pytest.mark.slow
def test_autoencoder_training_halves_reconstruction_error(normalized_train):
    arch = Architecture.for_input(32, LatentLayout.FLAT, latent_dim=256)
    config = _small_config(epochs=20, batch_size=8, learning_rate=1e-3)
    torch.manual_seed(config.seed)
    initial = _training_recon(AutoEncoder(DetectorKind.AE, arch), normalized_train, arch)
    model = train(DetectorKind.AE, arch, normalized_train, config)
    trained = _training_recon(model.network, normalized_train, arch)
    assert trained < 0.5 * initial

    permuted = AutoEncoder(DetectorKind.AE, arch)
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for source, target in zip(model.network.parameters(), permuted.parameters()):
            flat = source.flatten()
            target.copy_(flat[torch.randperm(flat.numel(), generator=generator)].view_as(source))
    target_slice = normalized_train[0]
    error = anomaly_map(model, target_slice).scores.sum()
    shuffled = TrainedModel(DetectorKind.AE, arch, permuted.eval(), config)
    assert error < anomaly_map(shuffled, target_slice).scores.sum()


@pytest.mark.slow
def test_adversarial_latents_center_on_prior(normalized_train):
    arch = Architecture.for_input(32, LatentLayout.FLAT, latent_dim=8)
    model = train(DetectorKind.AAE, arch, normalized_train, _small_config(epochs=30, batch_size=16, n_critic=5))
    latents = np.stack([encode(model, s).mean for s in normalized_train])
    standard_error = 1.0 / np.sqrt(len(latents))
    assert np.abs(latents.mean(axis=0)).max() < 3 * standard_error
