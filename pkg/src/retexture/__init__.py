"""Exemplar-driven audio texture editing.

A query clip plus one before/after exemplar pair demonstrates a texture
edit (add, remove, or replace a background texture); a conditional
latent diffusion model applies the demonstrated edit to the query.

The usual entry points:

    transform       apply one exemplar pair to one query waveform
    run_experiment  forge data, train every component, score held-out cells
    forge_dataset   write a quadruplet dataset to disk
"""

__version__ = "0.1.0"

from .audio import AudioError, Waveform, read_wav, write_wav
from .config import ConfigError, ExperimentConfig, parse_experiment_config
from .diffusion import (DiffusionError, NoiseSchedule, SamplerConfig,
                        TrainConfig, TrainingSet, TransformBundle, cfg_eps,
                        combine_guidance, ddim_sample, load_denoiser,
                        make_schedule, q_sample, save_denoiser, schedule_steps,
                        train_diffusion, transform)
from .exemplar import (ConditioningBundle, Embedding, ExemplarConfig,
                       ExemplarEncoder, ExemplarError, build_conditioning,
                       embed_audio, load_encoder, pretrain_encoder,
                       save_encoder)
from .forge import (TASKS, ForgeConfig, ForgeError, ManifestEntry, Quadruplet,
                    forge_dataset, forge_stream, load_manifest, read_quadruplet)
from .harness import (HarnessError, MetricsTable, evaluate_suite,
                      export_study_bundle, load_bundle, load_study_bundle,
                      rater_permutation, run_experiment, run_pe_ablation,
                      score_cells)
from .metrics import (ClassifierConfig, EmbeddingStats, MetricsError,
                      PosteriorSet, frechet_distance, inception_score,
                      kl_divergence, load_classifier, lsd, lsd_mel,
                      save_classifier, train_texture_classifier)
from .spectral import (MelSpectrogram, SpectralError, SpectralParams,
                       griffin_lim, mel_spectrogram)
from .unet import UNet, UNetConfig, UNetError
from .vae import (Latent, MelVae, VaeConfig, VaeError, load_vae, save_vae,
                  train_vae, vae_decode, vae_encode)

__all__ = [name for name in dir() if not name.startswith("_")]
