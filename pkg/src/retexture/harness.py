"""Experiment orchestration.

A run is a fixed pipeline over one output directory:

    forge -> vae -> classifier -> encoder -> diffusion -> evaluate

Each stage writes its artifacts plus a done-marker recording the hash of
the config slice it depends on; reruns skip stages whose hash still
matches, so an interrupted experiment resumes where it stopped and an
edited config reruns exactly the stages it touches. Audio is never stored
for training data: manifests record the draw seeds and the forge
regenerates byte-identical waveforms on demand.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import Waveform, write_wav
from .config import ExperimentConfig, config_hash
from .diffusion import (SamplerConfig, TrainingSet, TransformBundle, ddim_sample,
                        load_denoiser, make_schedule, save_denoiser,
                        train_diffusion, transform)
from .exemplar import (build_conditioning, embed_audio, load_encoder,
                       pretrain_encoder, save_encoder)
from .forge import (TASKS, ForgeConfig, Quadruplet, _entry_for, forge_stream,
                    make_banks, mix_at_snr)
from .metrics import (EmbeddingStats, classifier_embeddings,
                      classifier_posteriors, frechet_distance, inception_score,
                      kl_divergence, load_classifier, lsd, lsd_mel,
                      save_classifier, train_texture_classifier)
from .spectral import griffin_lim, mel_spectrogram
from .unet import UNet
from .vae import Latent, load_vae, save_vae, train_vae, vae_decode, vae_encode

STAGES = ("forge", "vae", "classifier", "encoder", "diffusion", "evaluate")
TEXTURE_COUNTS = (1, 2, 3)
CELLS = tuple((task, n) for task in TASKS for n in TEXTURE_COUNTS)

TRAIN_MANIFEST = "train_manifest.jsonl"
TEST_MANIFEST = "test_manifest.jsonl"
ARTIFACTS = {
    "train_manifest": TRAIN_MANIFEST,
    "test_manifest": TEST_MANIFEST,
    "vae": "vae.ckpt",
    "classifier": "classifier.ckpt",
    "encoder": "encoder.ckpt",
    "denoiser": "denoiser.ckpt",
    "encoder_tuned": "encoder_tuned.ckpt",
    "metrics": "metrics.json",
    "report": "report.txt",
}


class HarnessError(RuntimeError):
    pass


def cell_key(task: str, n_textures: int) -> str:
    return f"{task}/{n_textures}"


def cell_of(quad: Quadruplet) -> str:
    return cell_key(quad.task, max(quad.count_before, quad.count_after))


def _cell_count_before(task: str, n_textures: int) -> int:
    # the cell label counts textures on the fuller side
    return n_textures - 1 if task == "add" else n_textures


# --- metrics table --------------------------------------------------------------


@dataclass
class MetricsTable:
    """Per-cell records for the nine (task x texture-count) combinations,
    an optional pure-noise control block, and run provenance. Cells with
    no data carry {"skipped": true} rather than being absent."""

    cells: dict[str, dict] = field(default_factory=dict)
    controls: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for task, n in CELLS:
            self.cells.setdefault(cell_key(task, n), {"skipped": True})

    def to_json(self) -> str:
        record = {"cells": self.cells, "controls": self.controls,
                  "metadata": self.metadata}
        return json.dumps(record, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "MetricsTable":
        record = json.loads(text)
        return MetricsTable(cells=record["cells"], controls=record["controls"],
                            metadata=record["metadata"])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path: str) -> "MetricsTable":
        with open(path, encoding="utf-8") as fh:
            return MetricsTable.from_json(fh.read())


def format_report(table: MetricsTable) -> str:
    """Human-readable cell table; the JSON file is the machine artifact."""
    columns = ("n", "lsd", "fad", "kl", "is", "detect", "remove_win")
    lines = [f"{'cell':<12}" + "".join(f"{c:>12}" for c in columns)]
    for task, n in CELLS:
        key = cell_key(task, n)
        record = table.cells[key]
        if record.get("skipped"):
            lines.append(f"{key:<12}{'skipped':>12}")
            continue
        row = f"{key:<12}"
        for column in columns:
            value = record.get(column)
            if value is None:
                row += f"{'-':>12}"
            elif isinstance(value, float):
                row += f"{value:>12.4f}"
            else:
                row += f"{value:>12}"
        lines.append(row)
    if table.controls:
        lines.append("")
        lines.append("pure-noise control (lsd / fad):")
        for key in sorted(table.controls):
            rec = table.controls[key]
            lines.append(f"  {key:<10} {rec['lsd']:.4f} / {rec['fad']:.4f}")
    if table.metadata:
        lines.append("")
        lines.append(f"config_hash: {table.metadata.get('config_hash', '-')}")
        lines.append(f"seed: {table.metadata.get('seed', '-')}")
    return "\n".join(lines) + "\n"


# --- stage plumbing -------------------------------------------------------------

# config slices each stage's outputs depend on; a stage reruns iff the
# hash of its slice changed (upstream slices are folded in transitively;
# "stage:" entries name upstream stages, bare entries name config fields)
_STAGE_DEPS: dict[str, tuple] = {
    "forge": ("seed", "data", "n_train", "n_test_per_cell", "forge"),
    "vae": ("stage:forge", "vae"),
    "classifier": ("stage:forge", "clips_per_class", "classifier"),
    "encoder": ("stage:forge", "clips_per_class", "encoder"),
    "diffusion": ("stage:vae", "stage:encoder", "unet", "train"),
    "evaluate": ("stage:diffusion", "stage:classifier", "sampler"),
}


def stage_hash(config: ExperimentConfig, stage: str) -> str:
    record = {}

    def fold(name: str) -> dict:
        out = {}
        for dep in _STAGE_DEPS[name]:
            if dep.startswith("stage:"):
                out[dep] = fold(dep.removeprefix("stage:"))
            else:
                out[dep] = _field_record(config, dep)
        return out

    record[stage] = fold(stage)
    canonical = json.dumps(record, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _field_record(config: ExperimentConfig, name: str):
    value = getattr(config, name)
    if dataclasses.is_dataclass(value):
        return dataclasses.asdict(value)
    return value


def _marker_path(out_dir: str, stage: str) -> str:
    return os.path.join(out_dir, f"{stage}.done")


def stage_is_done(out_dir: str, stage: str, expected_hash: str) -> bool:
    path = _marker_path(out_dir, stage)
    if not os.path.isfile(path):
        return False
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh).get("stage_hash") == expected_hash
    except (OSError, json.JSONDecodeError):
        return False


def _mark_done(out_dir: str, stage: str, stage_hash_value: str, payload: dict) -> None:
    record = {"stage": stage, "stage_hash": stage_hash_value, **payload}
    with open(_marker_path(out_dir, stage), "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")


class ExperimentLock:
    """One directory, one run. A live lock from another process is an
    error; a lock whose pid is gone is stale and gets replaced."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self) -> "ExperimentLock":
        if os.path.isfile(self.path):
            try:
                with open(self.path, encoding="utf-8") as fh:
                    pid = int(json.load(fh)["pid"])
            except (OSError, ValueError, KeyError, json.JSONDecodeError):
                pid = -1
            if pid > 0 and _pid_alive(pid):
                raise HarnessError(f"experiment directory is locked by pid {pid}: {self.path}")
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump({"pid": os.getpid()}, fh)
        return self

    def __exit__(self, *exc_info) -> None:
        try:
            os.remove(self.path)
        except OSError:
            pass


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# --- data regeneration ----------------------------------------------------------


def _split_forge(config: ExperimentConfig, split_seed: int) -> ForgeConfig:
    return dataclasses.replace(config.forge, master_seed=split_seed)


def train_quads(config: ExperimentConfig):
    """The training stream; byte-identical on every call."""
    return forge_stream(_split_forge(config, config.forge.master_seed), config.n_train)


def heldout_quads_for_cell(config: ExperimentConfig, task: str, n_textures: int):
    """Held-out stream pinned to one evaluation cell. Seeds are derived
    from the forge seed and the cell so no cell overlaps another or the
    training set."""
    cell_index = CELLS.index((task, n_textures))
    seed = int(np.random.SeedSequence(
        config.forge.master_seed, spawn_key=(7700 + cell_index,)).generate_state(1, np.uint64)[0])
    return forge_stream(_split_forge(config, seed), config.n_test_per_cell,
                        task=task, count_before=_cell_count_before(task, n_textures))


def all_test_quads(config: ExperimentConfig) -> list[Quadruplet]:
    quads = []
    for task, n in CELLS:
        quads.extend(heldout_quads_for_cell(config, task, n))
    return quads


def labeled_mixture_clips(config: ExperimentConfig, seed: int) -> list[tuple[Waveform, int]]:
    """Speech + one texture at a uniform SNR draw, labeled by texture
    class: the corpus for both the metrics classifier and the exemplar
    encoder pretraining (matching the mixtures they will score)."""
    forge_config = config.forge
    speech_bank, texture_bank = make_banks(forge_config)
    rng = np.random.default_rng(seed)
    clips = []
    for index in range(config.clips_per_class * forge_config.n_classes):
        class_id = index % forge_config.n_classes
        speech, _ = speech_bank.draw(rng)
        texture = texture_bank.crop(rng, class_id, texture_bank.pick_source(rng, class_id))
        snr = float(rng.uniform(forge_config.snr_lo, forge_config.snr_hi))
        mixed, _ = mix_at_snr(speech, texture.waveform, snr)
        peak = float(np.abs(mixed.samples).max())
        if peak > 1.0:
            mixed = Waveform(mixed.samples * (0.99 / peak), mixed.sample_rate)
        clips.append((mixed, class_id))
    return clips


# --- pipeline stages ------------------------------------------------------------


def _forge_stage(config: ExperimentConfig, out_dir: str) -> dict:
    counts = {cell_key(t, n): 0 for t, n in CELLS}
    with open(os.path.join(out_dir, TRAIN_MANIFEST), "w", encoding="utf-8") as fh:
        for index, quad in enumerate(train_quads(config)):
            fh.write(_entry_for(quad, index).to_json() + "\n")
    index = 0
    with open(os.path.join(out_dir, TEST_MANIFEST), "w", encoding="utf-8") as fh:
        for task, n in CELLS:
            for quad in heldout_quads_for_cell(config, task, n):
                fh.write(_entry_for(quad, index).to_json() + "\n")
                counts[cell_key(task, n)] += 1
                index += 1
    return {"n_train": config.n_train, "test_cells": counts}


def _vae_stage(config: ExperimentConfig, out_dir: str, hash_value: str) -> dict:
    mels = []
    for quad in train_quads(config):
        mels.append(mel_spectrogram(quad.query_in))
        mels.append(mel_spectrogram(quad.query_target))
    model, meta = train_vae(mels, config.vae)
    save_vae(os.path.join(out_dir, ARTIFACTS["vae"]),
             model, {"config_hash": hash_value, "seed": config.vae.seed,
                     "val_loss": meta["val_curve"][-1][1]})
    return {"n_mels": len(mels), "val_loss": meta["val_curve"][-1][1]}


def _classifier_stage(config: ExperimentConfig, out_dir: str, hash_value: str) -> dict:
    clips = labeled_mixture_clips(config, config.classifier.seed)
    model, meta = train_texture_classifier(clips, config.classifier)
    save_classifier(os.path.join(out_dir, ARTIFACTS["classifier"]),
                    model, {"config_hash": hash_value, "seed": config.classifier.seed,
                            "val_accuracy": meta["val_accuracy"]})
    return {"val_accuracy": meta["val_accuracy"], "n_clips": len(clips)}


def _encoder_stage(config: ExperimentConfig, out_dir: str, hash_value: str) -> dict:
    clips = labeled_mixture_clips(config, config.encoder.seed)
    model, meta = pretrain_encoder(clips, config.encoder)
    save_encoder(os.path.join(out_dir, ARTIFACTS["encoder"]),
                 model, {"config_hash": hash_value, "seed": config.encoder.seed,
                         "val_accuracy": meta["val_accuracy"]})
    return {"val_accuracy": meta["val_accuracy"], "n_clips": len(clips)}


def _diffusion_stage(config: ExperimentConfig, out_dir: str, hash_value: str,
                     artifact_dirs: list[str]) -> dict:
    vae, _ = load_vae(_find_artifact("vae", artifact_dirs))
    encoder, _ = load_encoder(_find_artifact("encoder", artifact_dirs))

    z0_rows, zq_rows, mel_rows = [], [], []
    for quad in train_quads(config):
        z0 = vae_encode(mel_spectrogram(quad.query_target), vae)
        z_q = vae_encode(mel_spectrogram(quad.query_in), vae)
        z0_rows.append(torch.from_numpy(z0.values).float().permute(2, 0, 1))
        zq_rows.append(torch.from_numpy(z_q.values).float().permute(2, 0, 1))
        pair = np.stack([mel_spectrogram(quad.exemplar_in).values,
                         mel_spectrogram(quad.exemplar_out).values])
        mel_rows.append(torch.from_numpy(pair).float())
    data = TrainingSet(z0=torch.stack(z0_rows), z_q=torch.stack(zq_rows),
                       exemplar_mels=torch.stack(mel_rows))
    del z0_rows, zq_rows, mel_rows

    unet = UNet(config.unet)
    schedule = make_schedule()
    meta = train_diffusion(data, unet, encoder, schedule, config.train)
    save_denoiser(os.path.join(out_dir, ARTIFACTS["denoiser"]), unet, schedule,
                  {"config_hash": hash_value, "seed": config.train.seed,
                   "latent_scale": meta["latent_scale"],
                   "pe_enabled": meta["pe_enabled"]})
    encoder.trained = True
    save_encoder(os.path.join(out_dir, ARTIFACTS["encoder_tuned"]),
                 encoder, {"config_hash": hash_value, "seed": config.train.seed,
                           "fine_tuned": True})
    return {"latent_scale": meta["latent_scale"],
            "val_loss_first": meta["val_loss_first"],
            "val_loss_last": meta["val_loss_last"],
            "dropout_rate": meta["dropout_rate"]}


def _evaluate_stage(config: ExperimentConfig, out_dir: str, hash_value: str,
                    artifact_dirs: list[str]) -> dict:
    bundle = load_bundle_from(artifact_dirs)
    classifier, _ = load_classifier(_find_artifact("classifier", artifact_dirs))
    table = evaluate_suite(bundle, classifier, all_test_quads(config),
                           config.sampler, seed=config.seed)
    table.metadata["config_hash"] = config_hash(config)
    table.metadata["stage_hash"] = hash_value
    table.save(os.path.join(out_dir, ARTIFACTS["metrics"]))
    with open(os.path.join(out_dir, ARTIFACTS["report"]), "w", encoding="utf-8") as fh:
        fh.write(format_report(table))
    return {"cells": sum(1 for r in table.cells.values() if not r.get("skipped"))}


def _find_artifact(name: str, dirs: list[str]) -> str:
    for directory in dirs:
        path = os.path.join(directory, ARTIFACTS[name])
        if os.path.isfile(path):
            return path
    raise HarnessError(f"missing artifact {ARTIFACTS[name]!r} in {dirs}")


def load_bundle_from(artifact_dirs: list[str]) -> TransformBundle:
    unet, schedule, meta = load_denoiser(_find_artifact("denoiser", artifact_dirs))
    encoder, _ = load_encoder(_find_artifact("encoder_tuned", artifact_dirs))
    vae, _ = load_vae(_find_artifact("vae", artifact_dirs))
    return TransformBundle(unet=unet, encoder=encoder, vae=vae, schedule=schedule,
                           latent_scale=float(meta["latent_scale"]),
                           pe_enabled=bool(meta["pe_enabled"]))


def load_bundle(out_dir: str) -> TransformBundle:
    return load_bundle_from([out_dir])


# --- evaluation -----------------------------------------------------------------


def _quad_sampler(sampler: SamplerConfig, seed: int, quad_seed: int) -> SamplerConfig:
    child = int(np.random.SeedSequence([seed, quad_seed]).generate_state(1, np.uint64)[0])
    return dataclasses.replace(sampler, seed=child)


def pure_noise_like(reference: Waveform, rng: np.random.Generator) -> Waveform:
    rms = float(np.sqrt(np.mean(reference.samples**2)))
    samples = rng.standard_normal(len(reference)) * max(rms, 1e-4)
    return Waveform(np.clip(samples, -1.0, 1.0), reference.sample_rate)


def _render_through_codec(wave: Waveform, bundle: TransformBundle) -> Waveform:
    """The identity transform through the same mel -> latent -> mel ->
    Griffin-Lim chain the model output takes; the fair baseline when
    comparing spectral distances against codec-free references."""
    mel = mel_spectrogram(wave)
    decoded = vae_decode(vae_encode(mel, bundle.vae), bundle.vae)
    return griffin_lim(decoded, iters=64, sample_rate=wave.sample_rate)


def _added_class(quad: Quadruplet) -> int | None:
    if quad.parts is not None:
        for part in quad.parts.textures:
            if part.side == "query" and part.role == "added":
                return part.clip.class_id
    return None


def score_cells(outputs: list[Waveform], quads: list[Quadruplet], classifier,
                bundle: TransformBundle | None = None) -> MetricsTable:
    """Cell-grouped metrics for a set of candidate outputs, paired 1:1
    with test quadruplets. `bundle` supplies the codec for the
    remove-task baseline; without it remove_win is omitted."""
    if len(outputs) != len(quads):
        raise HarnessError(f"{len(outputs)} outputs for {len(quads)} quadruplets")
    by_cell: dict[str, list[int]] = {}
    for index, quad in enumerate(quads):
        by_cell.setdefault(cell_of(quad), []).append(index)

    table = MetricsTable()
    for key, indices in sorted(by_cell.items()):
        if len(indices) < 2:
            table.cells[key] = {"skipped": True, "n": len(indices)}
            continue
        outs = [outputs[i] for i in indices]
        tgts = [quads[i].query_target for i in indices]
        ins = [quads[i].query_in for i in indices]
        record: dict = {"n": len(indices), "skipped": False}
        record["lsd"] = float(np.mean([lsd(t, o) for t, o in zip(tgts, outs)]))
        emb_out = classifier_embeddings(classifier, outs)
        emb_tgt = classifier_embeddings(classifier, tgts)
        fad = frechet_distance(EmbeddingStats.from_embeddings(emb_out),
                               EmbeddingStats.from_embeddings(emb_tgt))
        record["fad"] = fad
        record["fd"] = fad  # one embedding space at this scale
        post_out = classifier_posteriors(classifier, outs)
        post_tgt = classifier_posteriors(classifier, tgts)
        record["kl"] = kl_divergence(post_tgt, post_out)
        record["is"] = inception_score(post_out)
        record["pesq"] = "unsupported"

        task = key.split("/")[0]
        if task == "add":
            added = [_added_class(quads[i]) for i in indices]
            if all(a is not None for a in added):
                post_in = classifier_posteriors(classifier, ins)
                hits = sum(post_out.probs[j, a] > post_in.probs[j, a]
                           for j, a in enumerate(added))
                record["detect"] = hits / len(indices)
        if task == "remove" and bundle is not None:
            wins = 0
            for j, idx in enumerate(indices):
                target_mel = mel_spectrogram(tgts[j])
                out_dist = lsd_mel(target_mel, mel_spectrogram(outs[j]))
                base = mel_spectrogram(_render_through_codec(ins[j], bundle))
                if out_dist < lsd_mel(target_mel, base):
                    wins += 1
            record["remove_win"] = wins / len(indices)
        table.cells[key] = record
    return table


def evaluate_suite(bundle: TransformBundle, classifier,
                   quads: list[Quadruplet], sampler: SamplerConfig,
                   seed: int = 0, noise_control: bool = True) -> MetricsTable:
    """Transform every held-out query with its exemplar pair, score the
    nine cells, and (by default) score a pure-noise control against the
    same targets."""
    if not quads:
        raise HarnessError("no test quadruplets")
    outputs = [transform(q.query_in, q.exemplar_in, q.exemplar_out, bundle,
                         _quad_sampler(sampler, seed, q.seed))
               for q in quads]
    table = score_cells(outputs, quads, classifier, bundle)
    table.metadata.update({"seed": seed, "n_total": len(quads),
                           "sampler": dataclasses.asdict(sampler)})
    if noise_control:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]).generate_state(1)[0])
        noise = [pure_noise_like(q.query_target, rng) for q in quads]
        noise_table = score_cells(noise, quads, classifier, bundle)
        table.controls = {key: {"lsd": rec["lsd"], "fad": rec["fad"]}
                          for key, rec in noise_table.cells.items()
                          if not rec.get("skipped")}
    return table


# --- experiment driver ----------------------------------------------------------


def run_experiment(config: ExperimentConfig, stages: tuple = STAGES,
                   artifact_dirs: list[str] | None = None) -> dict:
    """Execute the pipeline, skipping stages whose config slice has not
    changed. `artifact_dirs` prepends extra directories searched for
    upstream checkpoints (used by ablation arms sharing a base run)."""
    out_dir = config.experiment_dir
    os.makedirs(out_dir, exist_ok=True)
    search = [out_dir] + (artifact_dirs or [])
    results: dict = {"out_dir": out_dir, "stages": {}}
    full_hash = config_hash(config)

    with open(os.path.join(out_dir, "config_resolved.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": full_hash, "seed": config.seed,
                   "fingerprint": dataclasses.asdict(config)},
                  fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")

    with ExperimentLock(out_dir):
        last_done = None
        for stage in stages:
            hash_value = stage_hash(config, stage)
            if stage_is_done(out_dir, stage, hash_value):
                results["stages"][stage] = {"skipped": True}
                last_done = stage
                continue
            try:
                if stage == "forge":
                    payload = _forge_stage(config, out_dir)
                elif stage == "vae":
                    payload = _vae_stage(config, out_dir, hash_value)
                elif stage == "classifier":
                    payload = _classifier_stage(config, out_dir, hash_value)
                elif stage == "encoder":
                    payload = _encoder_stage(config, out_dir, hash_value)
                elif stage == "diffusion":
                    payload = _diffusion_stage(config, out_dir, hash_value, search)
                elif stage == "evaluate":
                    payload = _evaluate_stage(config, out_dir, hash_value, search)
                else:
                    raise HarnessError(f"unknown stage {stage!r}")
            except HarnessError:
                raise
            except Exception as exc:
                raise HarnessError(
                    f"stage {stage!r} failed (last completed: {last_done}): {exc}") from exc
            _mark_done(out_dir, stage, hash_value, payload)
            results["stages"][stage] = payload
            last_done = stage

    metrics_path = os.path.join(out_dir, ARTIFACTS["metrics"])
    if "evaluate" in stages and os.path.isfile(metrics_path):
        results["table"] = MetricsTable.load(metrics_path)
    return results


def probe_exemplar_order(bundle: TransformBundle, quads: list[Quadruplet],
                         sampler: SamplerConfig, seed: int = 0) -> dict:
    """Swap the exemplar pair and sample from the same start: with
    positional tagging the conditioning changes, so the output latents
    must differ. Reports the fraction of trials with a nonzero
    difference."""
    nonzero = 0
    diffs = []
    for quad in quads:
        e1 = embed_audio(quad.exemplar_in, bundle.encoder)
        e2 = embed_audio(quad.exemplar_out, bundle.encoder)
        forward = build_conditioning(e1, e2, bundle.encoder, bundle.pe_enabled,
                                     guidance_scale=sampler.guidance_scale)
        swapped = build_conditioning(e2, e1, bundle.encoder, bundle.pe_enabled,
                                     guidance_scale=sampler.guidance_scale)
        z_raw = vae_encode(mel_spectrogram(quad.query_in), bundle.vae)
        z_q = Latent(z_raw.values * bundle.latent_scale)
        child = _quad_sampler(sampler, seed, quad.seed)
        a = ddim_sample(z_q, forward, child, bundle.unet, bundle.encoder, bundle.schedule)
        b = ddim_sample(z_q, swapped, child, bundle.unet, bundle.encoder, bundle.schedule)
        diff = float(np.linalg.norm(a.values - b.values))
        diffs.append(diff)
        nonzero += diff > 0.0
    return {"n": len(quads), "nonzero_fraction": nonzero / max(len(quads), 1),
            "median_diff": float(np.median(diffs)) if diffs else 0.0}


def run_pe_ablation(config: ExperimentConfig, probe_trials: int = 12) -> dict:
    """Positional-encoding ablation: one shared base (forge through
    encoder pretraining), then a diffusion + evaluation arm per PE
    setting, plus the exemplar-order sensitivity probe on the with-PE
    arm's replace-task cells."""
    base = run_experiment(config, stages=("forge", "vae", "classifier", "encoder"))
    arms = {}
    for label, enabled in (("pe_on", True), ("pe_off", False)):
        arm_config = dataclasses.replace(
            config, name=os.path.join(config.name, label),
            train=dataclasses.replace(config.train, pe_enabled=enabled))
        arms[label] = run_experiment(arm_config, stages=("diffusion", "evaluate"),
                                     artifact_dirs=[base["out_dir"]])

    bundle = load_bundle_from([arms["pe_on"]["out_dir"], base["out_dir"]])
    classifier_dir = base["out_dir"]
    replace_quads = list(heldout_quads_for_cell(config, "replace", 2))[:probe_trials]
    probe = probe_exemplar_order(bundle, replace_quads, config.sampler, seed=config.seed)

    record = {
        "pe_on": arms["pe_on"]["table"].to_json() if "table" in arms["pe_on"] else None,
        "pe_off": arms["pe_off"]["table"].to_json() if "table" in arms["pe_off"] else None,
        "order_probe": probe,
    }
    with open(os.path.join(base["out_dir"], "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"base": base, "arms": arms, "order_probe": probe,
            "classifier_dir": classifier_dir}


# --- study bundle ---------------------------------------------------------------

REQUIRED_CONDITIONS = ("ground_truth", "pure_noise")
BUNDLE_MANIFEST = "bundle.json"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    value = FNV_OFFSET
    for byte in text.encode("utf-8"):
        value = ((value ^ byte) * FNV_PRIME) & MASK64
    return value


def _splitmix64(state: int):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


def rater_permutation(rater_id: str, n: int) -> list[int]:
    """Deterministic trial order for one rater: FNV-1a of the id seeds a
    splitmix64 stream driving a Fisher-Yates shuffle. Pure 64-bit integer
    arithmetic so the browser side can derive the identical order."""
    if n < 0:
        raise HarnessError(f"negative permutation size {n}")
    order = list(range(n))
    stream = _splitmix64(fnv1a64(rater_id))
    for i in range(n - 1, 0, -1):
        j = next(stream) % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def export_study_bundle(samples: list[tuple[str, Waveform]], out_dir: str,
                        rel_context: list[Waveform] | None = None) -> dict:
    """Write a listening-study bundle: per-condition WAVs, optional
    shared relevance-context clips, and a manifest with file hashes.
    Condition groups must be equal-sized and aligned: the i-th clip of
    every condition responds to the same underlying query."""
    by_condition: dict[str, list[Waveform]] = {}
    for condition, wave in samples:
        by_condition.setdefault(condition, []).append(wave)
    if not by_condition:
        raise HarnessError("no samples")
    for required in REQUIRED_CONDITIONS:
        if required not in by_condition:
            raise HarnessError(f"missing control condition {required!r}")
    if len(by_condition) < 3:
        raise HarnessError("need at least one model condition besides the controls")
    sizes = {condition: len(waves) for condition, waves in by_condition.items()}
    if len(set(sizes.values())) != 1:
        raise HarnessError(f"unequal condition group sizes: {sizes}")
    n_samples = next(iter(sizes.values()))
    if rel_context is not None and len(rel_context) != n_samples:
        raise HarnessError(f"{len(rel_context)} context clips for {n_samples} samples")

    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)
    context_paths: list[str | None] = [None] * n_samples
    if rel_context is not None:
        for index, wave in enumerate(rel_context):
            rel_path = f"audio/context_{index:03d}.wav"
            write_wav(os.path.join(out_dir, rel_path), wave)
            context_paths[index] = rel_path

    trials = []
    for index in range(n_samples):
        for condition in sorted(by_condition):
            rel_path = f"audio/{condition}_{index:03d}.wav"
            write_wav(os.path.join(out_dir, rel_path), by_condition[condition][index])
            trials.append({
                "trial_id": f"t{index:03d}_{condition}",
                "sample_index": index,
                "condition": condition,
                "wav": rel_path,
                "sha256": _sha256_file(os.path.join(out_dir, rel_path)),
                "rel_context_wav": context_paths[index],
            })

    manifest = {
        "version": 1,
        "n_samples": n_samples,
        "conditions": sorted(by_condition),
        "permutation_algo": "fnv1a64-splitmix64-fisher-yates",
        "context_sha256": {path: _sha256_file(os.path.join(out_dir, path))
                           for path in context_paths if path},
        "trials": trials,
    }
    with open(os.path.join(out_dir, BUNDLE_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def load_study_bundle(bundle_dir: str) -> dict:
    """Reload a bundle, verifying every audio file against its recorded
    hash."""
    path = os.path.join(bundle_dir, BUNDLE_MANIFEST)
    if not os.path.isfile(path):
        raise HarnessError(f"no bundle manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for trial in manifest["trials"]:
        wav_path = os.path.join(bundle_dir, trial["wav"])
        if not os.path.isfile(wav_path):
            raise HarnessError(f"missing audio file {trial['wav']}")
        if _sha256_file(wav_path) != trial["sha256"]:
            raise HarnessError(f"hash mismatch for {trial['wav']}")
    for rel_path, expected in manifest.get("context_sha256", {}).items():
        full = os.path.join(bundle_dir, rel_path)
        if not os.path.isfile(full) or _sha256_file(full) != expected:
            raise HarnessError(f"hash mismatch for {rel_path}")
    return manifest
