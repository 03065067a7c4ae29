"""Quadruplet forge: self-supervised (exemplar_in, exemplar_out, query_in,
query_target) examples realizing add / remove / replace texture edits.

Exemplar and query use different speech but share the transformed texture's
source recording (independent crops), so the demonstrated edit is
well-defined on the query side. All randomness flows through one generator
per entry, derived from (master_seed, index), so parallel and serial forging
agree and manifests regenerate byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .audio import (DEFAULT_DURATION, DEFAULT_SAMPLE_RATE, Waveform,
                    expected_length, read_wav, resample, write_wav)
from .synth import TextureClip, synth_speech_proxy, synth_texture_source, texture_source_id, MAX_TEXTURE_CLASSES

TASKS = ("add", "remove", "replace")
# task -> admissible count_before values
TASK_GRID = {"add": (0, 1, 2), "remove": (1, 2, 3), "replace": (1, 2, 3)}
TASK_DELTA = {"add": +1, "remove": -1, "replace": 0}
CLIP_CEILING = 0.99
MANIFEST_NAME = "manifest.jsonl"


class ForgeError(ValueError):
    pass


@dataclass
class ForgeConfig:
    n_classes: int = 3
    snr_lo: float = 0.0
    snr_hi: float = 15.0
    duration: float = DEFAULT_DURATION
    sample_rate: int = DEFAULT_SAMPLE_RATE
    n_sources_per_class: int = 16
    master_seed: int = 0
    # D1 alternative: pair transformed textures by class only, not by source.
    pair_by_class_only: bool = False
    speech_dir: str | None = None
    texture_dir: str | None = None

    def __post_init__(self) -> None:
        if not 3 <= self.n_classes <= MAX_TEXTURE_CLASSES:
            raise ForgeError(f"n_classes must be in [3, {MAX_TEXTURE_CLASSES}], got {self.n_classes}")
        if self.snr_lo > self.snr_hi:
            raise ForgeError(f"snr range inverted: [{self.snr_lo}, {self.snr_hi}]")
        if self.duration <= 0 or self.sample_rate <= 0:
            raise ForgeError("duration and sample_rate must be positive")
        if self.n_sources_per_class < 2:
            raise ForgeError("need at least 2 sources per class")

    @property
    def clip_samples(self) -> int:
        return expected_length(self.sample_rate, self.duration)


@dataclass
class TexturePart:
    """One texture's contribution to a quadruplet, with enough bookkeeping
    to invert the mix exactly."""

    side: str  # "exemplar" | "query"
    role: str  # "background" | "removed" | "added"
    clip: TextureClip
    snr_db: float
    gain: float


@dataclass
class QuadrupletParts:
    """Ephemeral construction record (never serialized): the clean speech,
    every texture part and the per-side clip rescale factors."""

    exemplar_speech: Waveform
    query_speech: Waveform
    exemplar_speech_id: str
    query_speech_id: str
    textures: list[TexturePart]
    exemplar_clip_factor: float = 1.0
    query_clip_factor: float = 1.0

    def side_factor(self, side: str) -> float:
        return self.exemplar_clip_factor if side == "exemplar" else self.query_clip_factor


@dataclass
class Quadruplet:
    task: str
    count_before: int
    count_after: int
    exemplar_in: Waveform
    exemplar_out: Waveform
    query_in: Waveform
    query_target: Waveform
    texture_ids: list[tuple[int, str, float]]  # (class_id, source_id, snr_db)
    seed: int
    parts: QuadrupletParts | None = None


@dataclass
class ManifestEntry:
    id: str
    task: str
    count_before: int
    count_after: int
    paths: dict[str, str]  # role -> relative WAV path
    textures: list[dict]  # side/role/class_id/source_id/crop_offset/snr_db/gain
    snr_db: list[float]
    seed: int
    clip_factors: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "ManifestEntry":
        return ManifestEntry(**json.loads(line))


# --- signal banks -----------------------------------------------------------
#
# The forge draws speech and texture material through two small bank
# interfaces so synthetic generators and ingested corpora are
# interchangeable. A texture source is addressed by an opaque key; crops of
# the same key come from the same recording.


class SyntheticSpeechBank:
    def __init__(self, config: ForgeConfig):
        self.config = config

    def draw(self, rng: np.random.Generator) -> tuple[Waveform, str]:
        seed = int(rng.integers(1 << 62))
        wave = synth_speech_proxy(seed, self.config.duration, self.config.sample_rate)
        return wave, f"synspeech:{seed}"


class SyntheticTextureBank:
    def __init__(self, config: ForgeConfig):
        self.config = config
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def classes(self) -> list[int]:
        return list(range(self.config.n_classes))

    def pick_source(self, rng: np.random.Generator, class_id: int):
        return int(rng.integers(self.config.n_sources_per_class))

    def _source(self, class_id: int, source_seed: int) -> np.ndarray:
        key = (class_id, source_seed)
        if key not in self._cache:
            wave = synth_texture_source(class_id, source_seed, sample_rate=self.config.sample_rate)
            self._cache[key] = wave.samples
            if len(self._cache) > 256:  # bound memory; regeneration is cheap
                self._cache.pop(next(iter(self._cache)))
        return self._cache[key]

    def crop(self, rng: np.random.Generator, class_id: int, source_seed) -> TextureClip:
        source = self._source(class_id, source_seed)
        n = self.config.clip_samples
        if n > source.shape[0]:
            raise ForgeError(f"clip of {n} samples exceeds texture source length {source.shape[0]}")
        offset = int(rng.integers(0, source.shape[0] - n + 1))
        wave = Waveform(source[offset : offset + n].copy(), self.config.sample_rate)
        return TextureClip(wave, class_id, texture_source_id(class_id, source_seed), offset)


class CorpusSpeechBank:
    def __init__(self, segments: list[tuple[str, np.ndarray]], config: ForgeConfig):
        if not segments:
            raise ForgeError("speech corpus is empty")
        self.segments = segments
        self.config = config

    def draw(self, rng: np.random.Generator) -> tuple[Waveform, str]:
        idx = int(rng.integers(len(self.segments)))
        source_id, samples = self.segments[idx]
        n = self.config.clip_samples
        offset = int(rng.integers(0, samples.shape[0] - n + 1))
        return Waveform(samples[offset : offset + n].copy(), self.config.sample_rate), source_id


class CorpusTextureBank:
    def __init__(self, by_class: dict[int, list[tuple[str, np.ndarray]]], config: ForgeConfig):
        if not by_class:
            raise ForgeError("texture corpus is empty")
        self.by_class = by_class
        self.config = config

    @property
    def classes(self) -> list[int]:
        return sorted(self.by_class)

    def pick_source(self, rng: np.random.Generator, class_id: int):
        if class_id not in self.by_class:
            raise ForgeError(f"texture corpus has no class {class_id}")
        return int(rng.integers(len(self.by_class[class_id])))

    def crop(self, rng: np.random.Generator, class_id: int, source_index) -> TextureClip:
        source_id, samples = self.by_class[class_id][source_index]
        n = self.config.clip_samples
        offset = int(rng.integers(0, samples.shape[0] - n + 1))
        wave = Waveform(samples[offset : offset + n].copy(), self.config.sample_rate)
        return TextureClip(wave, class_id, source_id, offset)


SEGMENT_SECONDS = 10.0


def load_corpus(dir_path: str, kind: str, config: ForgeConfig | None = None):
    """Ingest a directory of WAVs: resample to the configured rate, split
    into 10-second segments (plus any tail still long enough for one clip),
    and serve random crops at draw time.

    Textures need a `labels.json` file ({filename: class_id}) in the
    directory; without one each file becomes its own class in sorted order.
    """
    config = config or ForgeConfig()
    if kind not in ("speech", "texture"):
        raise ForgeError(f"kind must be 'speech' or 'texture', got {kind!r}")
    try:
        names = sorted(f for f in os.listdir(dir_path) if f.lower().endswith(".wav"))
    except OSError as exc:
        raise ForgeError(f"cannot list corpus directory {dir_path}: {exc}") from exc
    if not names:
        raise ForgeError(f"no WAV files in {dir_path}")

    labels: dict[str, int] | None = None
    label_path = os.path.join(dir_path, "labels.json")
    if kind == "texture" and os.path.exists(label_path):
        with open(label_path, encoding="utf-8") as fh:
            labels = {k: int(v) for k, v in json.load(fh).items()}

    seg_len = expected_length(config.sample_rate, SEGMENT_SECONDS)
    clip_len = config.clip_samples
    segments: list[tuple[str, np.ndarray, int]] = []  # (source_id, samples, class_id)
    for file_index, name in enumerate(names):
        wave = read_wav(os.path.join(dir_path, name))
        if wave.sample_rate != config.sample_rate:
            wave = resample(wave, config.sample_rate)
        if labels is not None:
            if name not in labels:
                raise ForgeError(f"{name} missing from labels.json")
            class_id = labels[name]
        else:
            class_id = file_index
        for start in range(0, len(wave), seg_len):
            chunk = wave.samples[start : start + seg_len]
            if chunk.shape[0] >= clip_len:
                segments.append((f"{name}#{start}", chunk, class_id))
    if not segments:
        raise ForgeError(f"no usable segments of >= {clip_len} samples in {dir_path}")

    if kind == "speech":
        return CorpusSpeechBank([(sid, arr) for sid, arr, _ in segments], config)
    by_class: dict[int, list[tuple[str, np.ndarray]]] = {}
    for sid, arr, class_id in segments:
        by_class.setdefault(class_id, []).append((sid, arr))
    return CorpusTextureBank(by_class, config)


def make_banks(config: ForgeConfig):
    speech = (load_corpus(config.speech_dir, "speech", config)
              if config.speech_dir else SyntheticSpeechBank(config))
    texture = (load_corpus(config.texture_dir, "texture", config)
               if config.texture_dir else SyntheticTextureBank(config))
    return speech, texture


# --- mixing -----------------------------------------------------------------


def snr_gain(clean: Waveform, texture: Waveform, snr_db: float) -> float:
    """Gain g with 10·log10(P_clean / (g²·P_texture)) = snr_db."""
    if len(clean) != len(texture):
        raise ForgeError(f"length mismatch: {len(clean)} vs {len(texture)}")
    if clean.sample_rate != texture.sample_rate:
        raise ForgeError("sample rate mismatch")
    p_tex = texture.power()
    if p_tex <= 0:
        raise ForgeError("texture has zero power")
    return float(np.sqrt(clean.power() / (p_tex * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, texture: Waveform, snr_db: float) -> tuple[Waveform, float]:
    """mixed = clean + gain·texture; the returned gain inverts the mix exactly."""
    gain = snr_gain(clean, texture, snr_db)
    return Waveform(clean.samples + gain * texture.samples, clean.sample_rate), gain


# --- quadruplet construction -------------------------------------------------


def _draw_distinct(rng: np.random.Generator, pool: list[int], k: int) -> list[int]:
    if k > len(pool):
        raise ForgeError(f"cannot draw {k} distinct classes from {len(pool)}")
    return [int(c) for c in rng.choice(pool, size=k, replace=False)] if k else []


def _side_textures(rng, config, bank, side, speech, bg_classes, transformed):
    """Draw one side's texture parts: independent backgrounds, then the
    transformed texture(s) cropped from their shared sources."""
    parts = []
    for class_id in bg_classes:
        source = bank.pick_source(rng, class_id)
        clip = bank.crop(rng, class_id, source)
        snr = float(rng.uniform(config.snr_lo, config.snr_hi))
        parts.append(TexturePart(side, "background", clip, snr, snr_gain(speech, clip.waveform, snr)))
    for role, class_id, source in transformed:
        clip = bank.crop(rng, class_id, source)
        snr = float(rng.uniform(config.snr_lo, config.snr_hi))
        parts.append(TexturePart(side, role, clip, snr, snr_gain(speech, clip.waveform, snr)))
    return parts


def _assemble_side(task, speech, parts) -> tuple[np.ndarray, np.ndarray]:
    """Build (in, out) for one side from its scaled parts. The additive
    relation between in and out is exact by construction."""
    base = speech.samples.copy()
    for p in parts:
        if p.role == "background":
            base = base + p.gain * p.clip.waveform.samples
    if task == "add":
        added = next(p for p in parts if p.role == "added")
        sig_in = base
        sig_out = base + added.gain * added.clip.waveform.samples
    elif task == "remove":
        removed = next(p for p in parts if p.role == "removed")
        sig_out = base
        sig_in = base + removed.gain * removed.clip.waveform.samples
    else:  # replace
        removed = next(p for p in parts if p.role == "removed")
        added = next(p for p in parts if p.role == "added")
        sig_in = base + removed.gain * removed.clip.waveform.samples
        sig_out = base + added.gain * added.clip.waveform.samples
    return sig_in, sig_out


def _clip_side(sig_in: np.ndarray, sig_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    peak = max(np.max(np.abs(sig_in)), np.max(np.abs(sig_out)))
    if peak <= 1.0:
        return sig_in, sig_out, 1.0
    factor = CLIP_CEILING / peak
    return sig_in * factor, sig_out * factor, factor


def make_quadruplet(task: str, count_before: int, rng: np.random.Generator,
                    config: ForgeConfig, banks=None, seed: int = 0) -> Quadruplet:
    """Forge one quadruplet.

    Draw order is fixed (speech pair, transformed sources, then per-side
    backgrounds and crops) so a reseeded generator reproduces the entry
    bit for bit. SNRs are measured against the side's clean speech.
    """
    if task not in TASK_GRID:
        raise ForgeError(f"unknown task {task!r}")
    if count_before not in TASK_GRID[task]:
        raise ForgeError(f"count_before={count_before} invalid for {task}; "
                         f"allowed: {TASK_GRID[task]}")
    count_after = count_before + TASK_DELTA[task]
    speech_bank, texture_bank = banks if banks is not None else make_banks(config)
    classes = texture_bank.classes

    ex_speech, ex_id = speech_bank.draw(rng)
    q_speech, q_id = speech_bank.draw(rng)
    while q_id == ex_id:
        q_speech, q_id = speech_bank.draw(rng)

    # Transformed texture classes and shared sources. For replace, B prefers
    # a class unused by the backgrounds but only A ≠ B is guaranteed (C may
    # be exhausted).
    if task == "add":
        add_class = int(rng.choice(classes))
        add_source = texture_bank.pick_source(rng, add_class)
        bg_pool = [c for c in classes if c != add_class]
        transformed = [("added", add_class, add_source)]
        n_bg = count_before
    elif task == "remove":
        rem_class = int(rng.choice(classes))
        rem_source = texture_bank.pick_source(rng, rem_class)
        bg_pool = [c for c in classes if c != rem_class]
        transformed = [("removed", rem_class, rem_source)]
        n_bg = count_after
    else:
        rem_class = int(rng.choice(classes))
        add_pool = [c for c in classes if c != rem_class]
        add_class = int(rng.choice(add_pool))
        rem_source = texture_bank.pick_source(rng, rem_class)
        add_source = texture_bank.pick_source(rng, add_class)
        bg_pool = [c for c in classes if c not in (rem_class, add_class)]
        n_bg = count_before - 1
        if n_bg > len(bg_pool):
            # Few classes: let backgrounds reuse B's class, never A's, so the
            # removed texture stays absent from the target.
            bg_pool = [c for c in classes if c != rem_class]
        transformed = [("removed", rem_class, rem_source), ("added", add_class, add_source)]

    if config.pair_by_class_only:
        q_transformed = [(role, cid, texture_bank.pick_source(rng, cid))
                         for role, cid, _ in transformed]
    else:
        q_transformed = transformed

    ex_bg = _draw_distinct(rng, bg_pool, n_bg)
    q_bg = _draw_distinct(rng, bg_pool, n_bg)

    ex_parts = _side_textures(rng, config, texture_bank, "exemplar", ex_speech, ex_bg, transformed)
    q_parts = _side_textures(rng, config, texture_bank, "query", q_speech, q_bg, q_transformed)

    ex_in, ex_out = _assemble_side(task, ex_speech, ex_parts)
    q_in, q_out = _assemble_side(task, q_speech, q_parts)
    ex_in, ex_out, ex_factor = _clip_side(ex_in, ex_out)
    q_in, q_out, q_factor = _clip_side(q_in, q_out)

    parts = QuadrupletParts(ex_speech, q_speech, ex_id, q_id, ex_parts + q_parts,
                            ex_factor, q_factor)
    sr = config.sample_rate
    return Quadruplet(
        task=task, count_before=count_before, count_after=count_after,
        exemplar_in=Waveform(ex_in, sr), exemplar_out=Waveform(ex_out, sr),
        query_in=Waveform(q_in, sr), query_target=Waveform(q_out, sr),
        texture_ids=[(p.clip.class_id, p.clip.source_id, p.snr_db) for p in ex_parts + q_parts],
        seed=seed, parts=parts)


def entry_seed(master_seed: int, index: int) -> int:
    """64-bit child seed for entry `index`; stable across runs and processes."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(index,))
    return int(ss.generate_state(1, np.uint64)[0])


def _draw_task(rng: np.random.Generator) -> tuple[str, int]:
    task = TASKS[int(rng.integers(len(TASKS)))]
    count_before = int(TASK_GRID[task][int(rng.integers(len(TASK_GRID[task])))])
    return task, count_before


def forge_stream(config: ForgeConfig, count: int,
                 task: str | None = None, count_before: int | None = None) -> Iterator[Quadruplet]:
    """Yield quadruplets without touching disk. Task and count are sampled
    uniformly from the grid unless pinned."""
    if count <= 0:
        raise ForgeError(f"count must be positive, got {count}")
    banks = make_banks(config)
    for index in range(count):
        seed = entry_seed(config.master_seed, index)
        rng = np.random.default_rng(seed)
        t, cb = _draw_task(rng)
        if task is not None:
            t = task
            cb = count_before if count_before is not None else cb
            if cb not in TASK_GRID[t]:
                cb = int(TASK_GRID[t][int(rng.integers(len(TASK_GRID[t])))])
        yield make_quadruplet(t, cb, rng, config, banks, seed=seed)


ROLES = ("exemplar_in", "exemplar_out", "query_in", "query_target")


def _entry_for(quad: Quadruplet, index: int) -> ManifestEntry:
    qid = f"q{index:06d}"
    paths = {role: f"wav/{qid}_{role}.wav" for role in ROLES}
    textures = [{
        "side": p.side, "role": p.role, "class_id": p.clip.class_id,
        "source_id": p.clip.source_id, "crop_offset": p.clip.crop_offset,
        "snr_db": p.snr_db, "gain": p.gain,
    } for p in quad.parts.textures]
    return ManifestEntry(
        id=qid, task=quad.task, count_before=quad.count_before,
        count_after=quad.count_after, paths=paths, textures=textures,
        snr_db=[p.snr_db for p in quad.parts.textures], seed=quad.seed,
        clip_factors={"exemplar": quad.parts.exemplar_clip_factor,
                      "query": quad.parts.query_clip_factor})


def forge_dataset(config: ForgeConfig, count: int, out_dir: str) -> list[ManifestEntry]:
    """Write `count` quadruplets (four WAVs each) plus a JSON-lines manifest.

    Regenerating with the same config produces byte-identical manifests and
    WAV files.
    """
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    entries = []
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        for index, quad in enumerate(forge_stream(config, count)):
            entry = _entry_for(quad, index)
            for role in ROLES:
                write_wav(os.path.join(out_dir, entry.paths[role]), getattr(quad, role))
            fh.write(entry.to_json() + "\n")
            entries.append(entry)
    return entries


def load_manifest(path: str) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(ManifestEntry.from_json(line))
    if not entries:
        raise ForgeError(f"empty manifest: {path}")
    return entries


def read_quadruplet(entry: ManifestEntry, root: str, expected_rate: int = DEFAULT_SAMPLE_RATE,
                    expected_len: int | None = None) -> Quadruplet:
    """Load a forged entry's four waveforms back from disk, validating the
    declared duration and sample rate."""
    waves = {}
    for role in ROLES:
        wave = read_wav(os.path.join(root, entry.paths[role]))
        if wave.sample_rate != expected_rate:
            raise ForgeError(f"{entry.paths[role]}: sample rate {wave.sample_rate}, "
                             f"expected {expected_rate}")
        if expected_len is not None and len(wave) != expected_len:
            raise ForgeError(f"{entry.paths[role]}: length {len(wave)}, expected {expected_len}")
        waves[role] = wave
    return Quadruplet(
        task=entry.task, count_before=entry.count_before, count_after=entry.count_after,
        exemplar_in=waves["exemplar_in"], exemplar_out=waves["exemplar_out"],
        query_in=waves["query_in"], query_target=waves["query_target"],
        texture_ids=[(t["class_id"], t["source_id"], t["snr_db"]) for t in entry.textures],
        seed=entry.seed, parts=None)
