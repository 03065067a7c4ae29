import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retexture.audio import Waveform, pure_tone, read_wav, write_wav
from retexture.forge import (ForgeConfig, ForgeError, TASK_GRID, forge_dataset,
                             forge_stream, load_corpus, load_manifest,
                             make_banks, make_quadruplet, mix_at_snr,
                             read_quadruplet, snr_gain)
from retexture.synth import synth_speech_proxy, synth_texture


def stream(count, seed=0, **kw):
    return list(forge_stream(ForgeConfig(master_seed=seed, **kw), count))


class TestSpeechProxy:
    def test_deterministic(self):
        a = synth_speech_proxy(7)
        b = synth_speech_proxy(7)
        assert np.array_equal(a.samples, b.samples)
        assert len(a) == 40960

    def test_rms_normalized(self):
        assert synth_speech_proxy(7).rms() == pytest.approx(0.1, abs=1e-6)

    def test_seeds_decorrelate(self):
        a = synth_speech_proxy(7).samples
        b = synth_speech_proxy(8).samples
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.5

    def test_bad_args(self):
        with pytest.raises(ValueError):
            synth_speech_proxy(1, duration=0.0)
        with pytest.raises(ValueError):
            synth_speech_proxy(1, sample_rate=-1)


class TestTextures:
    def test_deterministic(self):
        a = synth_texture(0, 3)
        b = synth_texture(0, 3)
        assert np.array_equal(a.waveform.samples, b.waveform.samples)
        assert a.crop_offset == b.crop_offset
        assert a.source_id == b.source_id

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            synth_texture(99, 0)

    def test_crop_fits_source(self):
        clip = synth_texture(1, 5)
        assert len(clip.waveform) == 40960
        assert clip.crop_offset >= 0

    def test_classes_spectrally_distinct(self):
        # Class-average log spectra must differ by > 1 dB on average.
        def avg_log_spec(class_id):
            specs = []
            for seed in range(4):
                x = synth_texture(class_id, seed).waveform.samples
                specs.append(np.log10(np.abs(np.fft.rfft(x)) + 1e-8))
            return 20.0 * np.mean(specs, axis=0)

        spec = {c: avg_log_spec(c) for c in range(3)}
        for a in range(3):
            for b in range(a + 1, 3):
                assert np.mean(np.abs(spec[a] - spec[b])) > 1.0


class TestMixAtSnr:
    def setup_method(self):
        self.clean = synth_speech_proxy(1)
        self.texture = synth_texture(0, 1).waveform

    def test_zero_snr_gain(self):
        _, gain = mix_at_snr(self.clean, self.texture, 0.0)
        expected = np.sqrt(self.clean.power() / self.texture.power())
        assert gain == pytest.approx(expected, rel=1e-12)

    def test_inverse_exact(self):
        mixed, gain = mix_at_snr(self.clean, self.texture, 7.3)
        residual = mixed.samples - gain * self.texture.samples
        assert np.max(np.abs(residual - self.clean.samples)) < 1e-6

    def test_60db(self):
        _, gain = mix_at_snr(self.clean, self.texture, 60.0)
        ratio = gain**2 * self.texture.power() / self.clean.power()
        assert ratio == pytest.approx(1e-6, abs=1e-9)

    def test_zero_power_texture(self):
        silent = Waveform(np.zeros(len(self.clean)), self.clean.sample_rate)
        with pytest.raises(ForgeError):
            mix_at_snr(self.clean, silent, 0.0)

    def test_length_mismatch(self):
        short = Waveform(self.texture.samples[:100], self.texture.sample_rate)
        with pytest.raises(ForgeError):
            mix_at_snr(self.clean, short, 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(min_value=-20.0, max_value=60.0))
    def test_snr_realized(self, snr_db):
        gain = snr_gain(self.clean, self.texture, snr_db)
        realized = 10.0 * np.log10(self.clean.power() / (gain**2 * self.texture.power()))
        assert realized == pytest.approx(snr_db, abs=1e-9)


class TestMakeQuadruplet:
    def test_invalid_combinations(self):
        cfg = ForgeConfig()
        banks = make_banks(cfg)
        rng = np.random.default_rng(0)
        with pytest.raises(ForgeError):
            make_quadruplet("add", 3, rng, cfg, banks)
        with pytest.raises(ForgeError):
            make_quadruplet("remove", 0, rng, cfg, banks)
        with pytest.raises(ForgeError):
            make_quadruplet("grow", 1, rng, cfg, banks)

    def test_count_arithmetic(self):
        for quad in stream(30):
            delta = {"add": 1, "remove": -1, "replace": 0}[quad.task]
            assert quad.count_after - quad.count_before == delta
            assert quad.count_before >= 0 and quad.count_after >= 0

    def test_speech_differs_between_sides(self):
        for quad in stream(10):
            assert quad.parts.exemplar_speech_id != quad.parts.query_speech_id

    def test_transformed_source_shared_across_sides(self):
        for quad in stream(40):
            by_side = {"exemplar": {}, "query": {}}
            for p in quad.parts.textures:
                if p.role != "background":
                    by_side[p.side][p.role] = p.clip
            assert by_side["exemplar"].keys() == by_side["query"].keys()
            for role, ex_clip in by_side["exemplar"].items():
                q_clip = by_side["query"][role]
                assert ex_clip.source_id == q_clip.source_id
                assert ex_clip.class_id == q_clip.class_id

    def test_class_only_pairing_mode(self):
        for quad in stream(20, pair_by_class_only=True):
            tr = {(p.side, p.role): p.clip for p in quad.parts.textures if p.role != "background"}
            for (side, role), clip in tr.items():
                if side == "exemplar":
                    assert tr[("query", role)].class_id == clip.class_id

    def test_remove_to_zero_recovers_speech(self):
        cfg = ForgeConfig(master_seed=3)
        banks = make_banks(cfg)
        rng = np.random.default_rng(11)
        quad = make_quadruplet("remove", 1, rng, cfg, banks)
        factor = quad.parts.query_clip_factor
        assert np.array_equal(quad.query_target.samples,
                              factor * quad.parts.query_speech.samples
                              if factor != 1.0 else quad.parts.query_speech.samples)

    def test_add_delta_is_scaled_texture(self):
        cfg = ForgeConfig(master_seed=5)
        banks = make_banks(cfg)
        rng = np.random.default_rng(2)
        quad = make_quadruplet("add", 1, rng, cfg, banks)
        added = next(p for p in quad.parts.textures if p.side == "query" and p.role == "added")
        delta = quad.query_target.samples - quad.query_in.samples
        expect = quad.parts.query_clip_factor * added.gain * added.clip.waveform.samples
        assert np.max(np.abs(delta - expect)) < 1e-12

    def test_replace_swaps_classes(self):
        cfg = ForgeConfig(master_seed=9)
        banks = make_banks(cfg)
        rng = np.random.default_rng(4)
        quad = make_quadruplet("replace", 1, rng, cfg, banks)
        roles = {p.role for p in quad.parts.textures}
        assert {"removed", "added"} <= roles
        rem = next(p for p in quad.parts.textures if p.side == "query" and p.role == "removed")
        add = next(p for p in quad.parts.textures if p.side == "query" and p.role == "added")
        assert rem.clip.class_id != add.clip.class_id

    def test_clipping_rescale(self):
        # Loud textures (negative SNR) force the peak rule.
        clipped = 0
        for quad in stream(10, snr_lo=-25.0, snr_hi=-20.0):
            for w in (quad.exemplar_in, quad.exemplar_out, quad.query_in, quad.query_target):
                assert w.peak() <= 1.0
            if quad.parts.query_clip_factor < 1.0:
                clipped += 1
                # additive relation survives the joint rescale
                tr = [p for p in quad.parts.textures if p.side == "query" and p.role != "background"]
                c = quad.parts.query_clip_factor
                if quad.task == "add":
                    err = np.max(np.abs(quad.query_target.samples
                                        - c * tr[0].gain * tr[0].clip.waveform.samples
                                        - quad.query_in.samples))
                    assert err < 1e-9
        assert clipped > 0


class TestForgeStream:
    def test_deterministic(self):
        a = stream(6, seed=42)
        b = stream(6, seed=42)
        for qa, qb in zip(a, b):
            assert qa.task == qb.task and qa.seed == qb.seed
            assert np.array_equal(qa.query_target.samples, qb.query_target.samples)

    def test_different_seeds_differ(self):
        a = stream(3, seed=1)
        b = stream(3, seed=2)
        assert any(not np.array_equal(x.query_in.samples, y.query_in.samples)
                   for x, y in zip(a, b))

    def test_task_balance(self):
        counts = {}
        for quad in stream(300):
            counts[quad.task] = counts.get(quad.task, 0) + 1
        for task in TASK_GRID:
            assert 60 <= counts.get(task, 0) <= 140

    def test_pinned_task(self):
        for quad in forge_stream(ForgeConfig(), 5, task="add", count_before=0):
            assert quad.task == "add" and quad.count_before == 0

    def test_bad_count(self):
        with pytest.raises(ForgeError):
            list(forge_stream(ForgeConfig(), 0))


class TestForgeDataset:
    def test_manifest_regeneration_byte_identical(self, tmp_path):
        cfg = ForgeConfig(master_seed=42)
        forge_dataset(cfg, 8, str(tmp_path / "a"))
        forge_dataset(cfg, 8, str(tmp_path / "b"))
        ma = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        mb = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert ma == mb
        wa = (tmp_path / "a" / "wav" / "q000003_query_in.wav").read_bytes()
        wb = (tmp_path / "b" / "wav" / "q000003_query_in.wav").read_bytes()
        assert wa == wb

    def test_entries_decode(self, tmp_path):
        cfg = ForgeConfig(master_seed=1)
        entries = forge_dataset(cfg, 4, str(tmp_path))
        loaded = load_manifest(str(tmp_path / "manifest.jsonl"))
        assert [e.id for e in loaded] == [e.id for e in entries]
        for entry in loaded:
            quad = read_quadruplet(entry, str(tmp_path), expected_len=40960)
            assert len(quad.query_in) == 40960
            assert quad.query_in.sample_rate == 16000

    def test_manifest_source_sharing_invariant(self, tmp_path):
        entries = forge_dataset(ForgeConfig(master_seed=7), 10, str(tmp_path))
        for entry in entries:
            transformed = [t for t in entry.textures if t["role"] != "background"]
            for role in ("added", "removed"):
                ids = {t["source_id"] for t in transformed if t["role"] == role}
                if ids:
                    assert len(ids) == 1


class TestLoadCorpus:
    def make_corpus(self, dir_path, rate=16000, seconds=10.0, n=3):
        os.makedirs(dir_path, exist_ok=True)
        rng = np.random.default_rng(0)
        for i in range(n):
            sig = 0.1 * rng.standard_normal(int(rate * seconds))
            write_wav(os.path.join(dir_path, f"clip{i}.wav"),
                      Waveform(np.clip(sig, -1, 1), rate))

    def test_speech_draws(self, tmp_path):
        self.make_corpus(str(tmp_path))
        bank = load_corpus(str(tmp_path), "speech")
        wave, source_id = bank.draw(np.random.default_rng(0))
        assert len(wave) == 40960 and wave.sample_rate == 16000
        assert "clip" in source_id

    def test_empty_dir(self, tmp_path):
        with pytest.raises(ForgeError):
            load_corpus(str(tmp_path), "speech")

    def test_resample_preserves_tone(self, tmp_path):
        tone = pure_tone(440.0, 10.0, 44100)
        write_wav(str(tmp_path / "tone.wav"), tone)
        bank = load_corpus(str(tmp_path), "speech")
        wave, _ = bank.draw(np.random.default_rng(0))
        assert len(wave) == 40960
        spec = np.abs(np.fft.rfft(wave.samples * np.hanning(len(wave))))
        freqs = np.fft.rfftfreq(len(wave), 1.0 / 16000)
        assert abs(freqs[np.argmax(spec)] - 440.0) < 1.0

    def test_texture_labels(self, tmp_path):
        self.make_corpus(str(tmp_path))
        labels = {f"clip{i}.wav": i % 2 for i in range(3)}
        (tmp_path / "labels.json").write_text(json.dumps(labels))
        bank = load_corpus(str(tmp_path), "texture")
        assert bank.classes == [0, 1]
        clip = bank.crop(np.random.default_rng(1), 0, bank.pick_source(np.random.default_rng(2), 0))
        assert clip.class_id == 0

    def test_bad_kind(self, tmp_path):
        self.make_corpus(str(tmp_path))
        with pytest.raises(ForgeError):
            load_corpus(str(tmp_path), "noises")
