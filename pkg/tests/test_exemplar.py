"""Exemplar encoder: embedding contract, pretraining behavior, conditioning
assembly, dropout statistics, and gradient flow through the positions."""

import numpy as np
import pytest
import torch

from retexture.audio import Waveform
from retexture.exemplar import (
    CONDITION_DROPOUT_P,
    ConditioningBundle,
    Embedding,
    ExemplarConfig,
    ExemplarEncoder,
    ExemplarError,
    build_conditioning,
    conditioning_dropout_mask,
    embed_audio,
    load_encoder,
    pretrain_encoder,
    save_encoder,
)
from retexture.synth import synth_texture

torch.set_num_threads(1)

N_CLASSES = 3
N_CLIPS = 300


@pytest.fixture(scope="module")
def texture_clips():
    rng = np.random.default_rng(7)
    clips = []
    for i in range(N_CLIPS):
        class_id = i % N_CLASSES
        clips.append((synth_texture(class_id, int(rng.integers(1 << 62))).waveform, class_id))
    return clips


@pytest.fixture(scope="module")
def pretrained(texture_clips):
    return pretrain_encoder(texture_clips, ExemplarConfig(epochs=4, seed=0))


class TestEmbedding:
    def test_unit_norm(self, pretrained, texture_clips):
        model, _ = pretrained
        for wav, _ in texture_clips[:10]:
            emb = embed_audio(wav, model)
            assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-6
            assert emb.dim == model.embed_dim

    def test_deterministic(self, pretrained, texture_clips):
        model, _ = pretrained
        wav = texture_clips[0][0]
        a = embed_audio(wav, model)
        b = embed_audio(wav, model)
        assert np.array_equal(a.vector, b.vector)

    def test_wrong_duration_rejected(self, pretrained):
        model, _ = pretrained
        short = Waveform(np.zeros(16_000), 16_000)
        with pytest.raises(ExemplarError, match="frames"):
            embed_audio(short, model)

    def test_same_source_crops_closer_than_other_class(self, pretrained):
        """Two crops of one texture source should embed nearer each other
        than a clip of a different class, most of the time."""
        model, _ = pretrained
        rng = np.random.default_rng(13)
        wins = 0
        for trial in range(100):
            class_a = int(rng.integers(N_CLASSES))
            class_b = int((class_a + 1 + rng.integers(N_CLASSES - 1)) % N_CLASSES)
            seed = int(rng.integers(1 << 62))
            crop1 = synth_texture(class_a, seed, crop_offset=8_000).waveform
            crop2 = synth_texture(class_a, seed, crop_offset=80_000).waveform
            other = synth_texture(class_b, int(rng.integers(1 << 62))).waveform
            e1 = embed_audio(crop1, model).vector
            e2 = embed_audio(crop2, model).vector
            eo = embed_audio(other, model).vector
            if np.dot(e1, e2) > np.dot(e1, eo):
                wins += 1
        assert wins >= 80

    def test_validation(self):
        with pytest.raises(ExemplarError):
            Embedding(np.zeros((4, 4)))
        with pytest.raises(ExemplarError):
            Embedding(np.array([1.0, np.nan]))


class TestPretraining:
    def test_validation_accuracy(self, pretrained):
        _, meta = pretrained
        assert meta["val_accuracy"] >= 0.8

    def test_shuffled_labels_near_chance(self, texture_clips):
        rng = np.random.default_rng(5)
        labels = rng.permutation([c for _, c in texture_clips])
        shuffled = [(w, int(c)) for (w, _), c in zip(texture_clips, labels)]
        _, meta = pretrain_encoder(shuffled, ExemplarConfig(epochs=4, seed=0))
        assert abs(meta["val_accuracy"] - 1.0 / N_CLASSES) <= 0.1

    def test_same_seed_identical(self, texture_clips):
        config = ExemplarConfig(epochs=1, seed=21)
        model_a, _ = pretrain_encoder(texture_clips[:120], config)
        model_b, _ = pretrain_encoder(texture_clips[:120], config)
        state_a, state_b = model_a.state_dict(), model_b.state_dict()
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key]), key

    def test_degenerate_labels_rejected(self, texture_clips):
        single = [(w, 0) for w, _ in texture_clips[:40]]
        with pytest.raises(ExemplarError, match="2 classes"):
            pretrain_encoder(single, ExemplarConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ExemplarError):
            ExemplarConfig(n_classes=1)
        with pytest.raises(ExemplarError):
            ExemplarConfig(embed_dim=0)
        with pytest.raises(ExemplarError):
            ExemplarConfig(val_fraction=1.5)


def random_embeddings(encoder, seed):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(2, encoder.embed_dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return Embedding(vecs[0]), Embedding(vecs[1])


class TestConditioning:
    def test_sequence_shape_and_order(self, pretrained):
        model, _ = pretrained
        e1, e2 = random_embeddings(model, 0)
        bundle = build_conditioning(e1, e2, model)
        assert bundle.sequence.shape == (2, model.context_dim)
        assert not bundle.null_flag

    def test_zero_positions_match_disabled(self, pretrained):
        # positions start at zero, so enabling them is the identity
        model = ExemplarEncoder()
        e1, e2 = random_embeddings(model, 1)
        on = build_conditioning(e1, e2, model, pe_enabled=True)
        off = build_conditioning(e1, e2, model, pe_enabled=False)
        assert torch.equal(on.sequence, off.sequence)

    def test_swap_changes_bundle(self, pretrained):
        model, _ = pretrained
        e1, e2 = random_embeddings(model, 2)
        fwd = build_conditioning(e1, e2, model)
        rev = build_conditioning(e2, e1, model)
        assert bool((fwd.sequence != rev.sequence).all())

    def test_trained_positions_make_every_position_differ(self):
        # simulate trained position vectors, then order must matter everywhere
        torch.manual_seed(3)
        model = ExemplarEncoder()
        with torch.no_grad():
            model.p_before.copy_(torch.randn(model.context_dim))
            model.p_after.copy_(torch.randn(model.context_dim))
        for seed in range(5):
            e1, e2 = random_embeddings(model, 100 + seed)
            fwd = build_conditioning(e1, e2, model, pe_enabled=True)
            rev = build_conditioning(e2, e1, model, pe_enabled=True)
            assert bool((fwd.sequence != rev.sequence).all())

    def test_null_flag_ignores_embeddings(self, pretrained):
        model, _ = pretrained
        e1, e2 = random_embeddings(model, 4)
        f1, f2 = random_embeddings(model, 5)
        a = build_conditioning(e1, e2, model, null_flag=True)
        b = build_conditioning(f1, f2, model, null_flag=True)
        assert a.null_flag and b.null_flag
        assert torch.equal(a.sequence, b.sequence)
        assert torch.equal(a.sequence, model.null_pair.detach())

    def test_dimension_mismatch(self, pretrained):
        model, _ = pretrained
        bad = Embedding(np.zeros(model.embed_dim + 1))
        good = Embedding(np.ones(model.embed_dim) / np.sqrt(model.embed_dim))
        with pytest.raises(ExemplarError, match="dims"):
            build_conditioning(bad, good, model)

    def test_guidance_scale_bound(self, pretrained):
        model, _ = pretrained
        e1, e2 = random_embeddings(model, 6)
        with pytest.raises(ExemplarError, match="guidance"):
            build_conditioning(e1, e2, model, guidance_scale=0.5)
        bundle = build_conditioning(e1, e2, model, guidance_scale=4.5)
        assert bundle.guidance_scale == 4.5

    def test_batched_null_substitution(self):
        model = ExemplarEncoder()
        seqs = torch.randn(4, 2, model.context_dim)
        mask = torch.tensor([True, False, True, False])
        out = model.apply_null(seqs, mask)
        assert torch.equal(out[0], model.null_pair.detach())
        assert torch.equal(out[1], seqs[1])
        assert torch.equal(out[2], model.null_pair.detach())
        assert torch.equal(out[3], seqs[3])


class TestDropout:
    def test_rate_within_binomial_bound(self):
        rng = np.random.default_rng(0)
        mask = conditioning_dropout_mask(10_000, rng)
        rate = float(mask.float().mean())
        assert abs(rate - CONDITION_DROPOUT_P) <= 0.01

    def test_rate_parameter(self):
        rng = np.random.default_rng(1)
        assert not conditioning_dropout_mask(1000, rng, p=0.0).any()
        assert conditioning_dropout_mask(1000, rng, p=1.0).all()


class TestGradientFlow:
    def test_positions_receive_gradients(self):
        """Analytic gradient w.r.t. p_before is nonzero on a conditioned
        batch and matches a central finite difference."""
        torch.manual_seed(11)
        model = ExemplarEncoder(width=4, embed_dim=16, context_dim=8).double()
        e1 = torch.randn(3, 16, dtype=torch.float64)
        e2 = torch.randn(3, 16, dtype=torch.float64)
        weights = torch.randn(3, 2, 8, dtype=torch.float64)

        def loss_fn():
            return (model.project_pair(e1, e2, pe_enabled=True) * weights).sum()

        loss = loss_fn()
        loss.backward()
        grad = model.p_before.grad
        assert grad is not None and float(grad.abs().max()) > 0.0

        eps = 1e-6
        with torch.no_grad():
            model.p_before[0] += eps
            hi = loss_fn().item()
            model.p_before[0] -= 2 * eps
            lo = loss_fn().item()
            model.p_before[0] += eps
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - float(grad[0])) < 1e-6 * max(1.0, abs(fd))

    def test_encoder_body_receives_gradients(self, texture_clips):
        model = ExemplarEncoder(width=4, embed_dim=16, context_dim=8)
        mel = torch.randn(2, 256, 64)
        emb = model.embed_mels(mel)
        seq = model.project_pair(emb[:1], emb[1:], pe_enabled=True)
        seq.sum().backward()
        conv_grad = model.stem[0].weight.grad
        assert conv_grad is not None and float(conv_grad.abs().max()) > 0.0


class TestCheckpoint:
    def test_round_trip(self, pretrained, texture_clips, tmp_path):
        model, meta = pretrained
        path = str(tmp_path / "encoder.ckpt")
        save_encoder(path, model, meta)
        loaded, loaded_meta = load_encoder(path)
        assert loaded_meta["embed_dim"] == model.embed_dim
        assert loaded_meta["trained"] is True
        wav = texture_clips[0][0]
        assert np.array_equal(embed_audio(wav, model).vector,
                              embed_audio(wav, loaded).vector)
        e1, e2 = random_embeddings(model, 8)
        assert torch.equal(build_conditioning(e1, e2, model).sequence,
                           build_conditioning(e1, e2, loaded).sequence)
