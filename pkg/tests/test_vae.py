"""Latent autoencoder: shape algebra, ELBO terms, training behavior,
round-trip quality, and analytic-vs-numeric gradients."""

import numpy as np
import pytest
import torch

from helpers import finite_diff_max_rel_error
from retexture.forge import ForgeConfig, forge_stream
from retexture.spectral import SpectralParams, mel_spectrogram
from retexture.vae import (
    COMPRESSION,
    Latent,
    MelVae,
    VaeConfig,
    VaeError,
    load_vae,
    save_vae,
    train_vae,
    vae_decode,
    vae_encode,
)

torch.set_num_threads(1)

DB = 20.0 / np.log(10.0)


def mel_db_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frame-averaged RMS difference of two log-mel grids, in dB."""
    return float(np.mean(np.sqrt(np.mean((DB * (a - b)) ** 2, axis=1))))


@pytest.fixture(scope="module")
def mel_bank():
    config = ForgeConfig(n_classes=3, master_seed=11)
    mels = []
    for quad in forge_stream(config, 150):
        for wav in (quad.exemplar_in, quad.exemplar_out, quad.query_in, quad.query_target):
            mels.append(mel_spectrogram(wav))
    return mels


@pytest.fixture(scope="module")
def trained(mel_bank):
    config = VaeConfig(width=16, latent_channels=8, epochs=6, seed=3)
    return train_vae(mel_bank, config)


class TestShapes:
    def test_latent_geometry(self, trained, mel_bank):
        model, _ = trained
        z = vae_encode(mel_bank[0], model)
        t, f = mel_bank[0].values.shape
        assert z.values.shape == (t // COMPRESSION, f // COMPRESSION, 8)
        assert z.channels == 8
        m = vae_decode(z, model)
        assert m.values.shape == (t, f)

    def test_any_divisible_grid(self):
        model = MelVae(width=4, latent_channels=2)
        for t, f in [(8, 8), (32, 16), (12, 64)]:
            x = torch.randn(2, 1, t, f)
            mu, logvar = model.encode(x)
            assert mu.shape == (2, 2, t // 4, f // 4)
            assert logvar.shape == mu.shape
            assert model.decode(mu).shape == x.shape

    def test_indivisible_grid_rejected(self):
        model = MelVae(width=4, latent_channels=2)
        with pytest.raises(VaeError, match="divisible"):
            model.encode(torch.randn(1, 1, 30, 64))

    def test_logvar_clamped(self):
        model = MelVae(width=4, latent_channels=2)
        _, logvar = model.encode(torch.randn(1, 1, 16, 16) * 1e4)
        assert logvar.max() <= 8.0 and logvar.min() >= -12.0

    def test_latent_validation(self):
        with pytest.raises(VaeError):
            Latent(np.zeros((4, 4)))
        bad = np.zeros((4, 4, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(VaeError):
            Latent(bad)

    def test_zero_latent_decodes_to_floor_or_above(self, trained):
        model, _ = trained
        params = SpectralParams()
        m = vae_decode(Latent(np.zeros((64, 16, 8))), model, params)
        assert np.all(np.isfinite(m.values))
        assert m.values.min() >= np.log(params.log_floor) - 1e-12


class TestElbo:
    def test_kl_nonnegative(self):
        model = MelVae(width=4, latent_channels=2)
        gen = torch.Generator().manual_seed(0)
        for _ in range(5):
            x = torch.randn(3, 1, 16, 16, generator=gen)
            _, kl = model.elbo_terms(x, torch.Generator().manual_seed(1))
            assert kl.item() >= 0.0

    def test_zero_beta_is_pure_reconstruction(self):
        model = MelVae(width=4, latent_channels=2)
        x = torch.randn(2, 1, 16, 16, generator=torch.Generator().manual_seed(2))
        rec, kl = model.elbo_terms(x, torch.Generator().manual_seed(3))
        loss = rec + 0.0 * kl
        assert loss.item() == rec.item()
        assert kl.item() > 0.0

    def test_kl_zero_at_standard_normal_posterior(self):
        # mu = 0, logvar = 0 is the KL minimizer
        mu = torch.zeros(4, 2, 4, 4)
        logvar = torch.zeros(4, 2, 4, 4)
        kl = 0.5 * torch.mean(mu**2 + torch.exp(logvar) - 1.0 - logvar)
        assert kl.item() == 0.0


class TestTraining:
    def test_validation_loss_drops(self, trained):
        _, meta = trained
        assert meta["val_recon_last"] < 0.7 * meta["val_recon_first"]

    def test_val_curve_recorded(self, trained):
        _, meta = trained
        assert len(meta["val_curve"]) == meta["epochs"] + 1
        assert meta["val_curve"][0][0] == meta["val_recon_first"]

    def test_training_deterministic(self, mel_bank):
        config = VaeConfig(width=8, latent_channels=4, epochs=1, seed=9)
        model_a, _ = train_vae(mel_bank[:500], config)
        model_b, _ = train_vae(mel_bank[:500], config)
        state_a, state_b = model_a.state_dict(), model_b.state_dict()
        assert state_a.keys() == state_b.keys()
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key]), key

    def test_too_few_spectrograms(self, mel_bank):
        with pytest.raises(VaeError, match="500"):
            train_vae(mel_bank[:100], VaeConfig(epochs=1))
        with pytest.raises(VaeError, match="empty"):
            train_vae([], VaeConfig(epochs=1))

    def test_non_finite_loss_aborts(self):
        bad = np.zeros((256, 64))
        bad[0, 0] = np.nan
        with pytest.raises(VaeError, match="diverged"):
            train_vae([bad] * 500, VaeConfig(width=4, latent_channels=2, epochs=1))

    def test_config_validation(self):
        with pytest.raises(VaeError):
            VaeConfig(width=0)
        with pytest.raises(VaeError):
            VaeConfig(latent_channels=0)
        with pytest.raises(VaeError):
            VaeConfig(beta_kl=-1.0)


class TestRoundTrip:
    def test_mel_reconstruction_quality(self, trained, mel_bank):
        model, _ = trained
        dists = [
            mel_db_distance(m.values, vae_decode(vae_encode(m, model), model).values)
            for m in mel_bank[-16:]
        ]
        # regression bound measured on this fixture (8.9 dB at 6 epochs;
        # converged 20-epoch training reaches ~6 dB)
        assert np.mean(dists) < 10.0

    def test_latent_round_trip_stability(self, trained, mel_bank):
        model, _ = trained
        errs = []
        for m in mel_bank[-8:]:
            z = vae_encode(m, model)
            m_hat = vae_decode(z, model)
            z_hat = vae_encode(m_hat, model)
            errs.append(
                np.linalg.norm(z_hat.values - z.values) / np.linalg.norm(z.values)
            )
        assert max(errs) < 0.3

    def test_latent_scale_near_unit(self, trained, mel_bank):
        model, _ = trained
        flat = np.concatenate(
            [vae_encode(m, model).values.ravel() for m in mel_bank[-32:]]
        )
        assert 0.5 < flat.std() < 2.0
        assert abs(flat.mean()) < 0.5

    def test_posterior_mean_deterministic(self, trained, mel_bank):
        model, _ = trained
        a = vae_encode(mel_bank[0], model)
        b = vae_encode(mel_bank[0], model)
        assert np.array_equal(a.values, b.values)

    def test_sampling_differs_from_mean_but_seeds_reproduce(self, trained, mel_bank):
        model, _ = trained
        mean = vae_encode(mel_bank[0], model)
        s1 = vae_encode(mel_bank[0], model, sample=True,
                        generator=torch.Generator().manual_seed(5))
        s2 = vae_encode(mel_bank[0], model, sample=True,
                        generator=torch.Generator().manual_seed(5))
        assert not np.array_equal(s1.values, mean.values)
        assert np.array_equal(s1.values, s2.values)


class TestCheckpoint:
    def test_round_trip(self, trained, mel_bank, tmp_path):
        model, meta = trained
        path = str(tmp_path / "vae.ckpt")
        save_vae(path, model, meta)
        loaded, loaded_meta = load_vae(path)
        assert loaded_meta["width"] == 16
        assert loaded_meta["trained"] is True
        a = vae_encode(mel_bank[0], model)
        b = vae_encode(mel_bank[0], loaded)
        assert np.array_equal(a.values, b.values)

    def test_untrained_encode_rejected(self, mel_bank, tmp_path):
        model = MelVae(width=4, latent_channels=2)
        path = str(tmp_path / "raw.ckpt")
        save_vae(path, model, {"kind": "mel_vae"})
        loaded, _ = load_vae(path)
        with pytest.raises(VaeError, match="untrained"):
            vae_encode(mel_bank[0], loaded)

    def test_channel_mismatch_rejected(self, trained):
        model, _ = trained
        with pytest.raises(VaeError, match="channels"):
            vae_decode(Latent(np.zeros((64, 16, 4))), model)


class TestGradients:
    def test_analytic_matches_finite_difference(self):
        """Central differences vs autograd on a sub-1k-parameter model in
        float64, with the reparameterization noise held fixed."""
        torch.manual_seed(0)
        model = MelVae(width=2, latent_channels=1).double()
        n_params = sum(p.numel() for p in model.parameters())
        assert n_params <= 1000
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(1))
        mu0, _ = model.encode(x)
        eps = torch.randn(mu0.shape, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(2))

        def loss_fn():
            mu, logvar = model.encode(x)
            z = mu + torch.exp(0.5 * logvar) * eps
            recon = model.decode(z)
            rec = torch.mean((recon - x) ** 2)
            kl = 0.5 * torch.mean(mu**2 + torch.exp(logvar) - 1.0 - logvar)
            return rec + 0.25 * kl

        assert finite_diff_max_rel_error(model, loss_fn) < 1e-4
