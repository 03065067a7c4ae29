"""Command-line entry points.

    retexture forge --config exp.ini --out data/         write a dataset to disk
    retexture train --config exp.ini                     run the pipeline
    retexture evaluate --config exp.ini                  rerun held-out scoring
    retexture ablate-pe --config exp.ini                 positional-tag ablation
    retexture transform --run runs/exp ...               apply one exemplar pair
    retexture export-study --config exp.ini --out dir/   listening-study bundle

Exit codes: 0 success, 1 unexpected error, 2 config error, 3 data or
artifact error, 4 numeric or training error.
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from .audio import AudioError, read_wav, write_wav
from .config import ConfigError, ExperimentConfig, parse_experiment_config
from .diffusion import DiffusionError, SamplerConfig, transform
from .exemplar import ExemplarError
from .forge import ForgeError, forge_dataset
from .harness import (STAGES, HarnessError, MetricsTable, export_study_bundle,
                      format_report, load_bundle, pure_noise_like,
                      run_experiment, run_pe_ablation, heldout_quads_for_cell)
from .metrics import MetricsError
from .spectral import SpectralError
from .unet import UNetError
from .vae import VaeError

log = logging.getLogger("retexture")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_NUMERIC_ERRORS = (DiffusionError, VaeError, UNetError, ExemplarError,
                   MetricsError, np.linalg.LinAlgError)
_DATA_ERRORS = (ForgeError, AudioError, SpectralError, HarnessError,
                FileNotFoundError)


def exit_code_for(exc: BaseException) -> int:
    """Most specific class anywhere on the cause chain wins: a numeric
    failure wrapped in a harness stage error still exits 4."""
    chain = []
    seen: BaseException | None = exc
    while seen is not None and seen not in chain:
        chain.append(seen)
        seen = seen.__cause__ or seen.__context__
    if any(isinstance(e, ConfigError) for e in chain):
        return EXIT_CONFIG
    if any(isinstance(e, _NUMERIC_ERRORS) for e in chain):
        return EXIT_NUMERIC
    if any(isinstance(e, _DATA_ERRORS) for e in chain):
        return EXIT_DATA
    return 1


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = parse_experiment_config(args.config)
    if getattr(args, "output_root", None):
        config = dataclasses.replace(config, output_root=args.output_root)
    return config


def _parse_stages(raw: str | None) -> tuple:
    if not raw:
        return STAGES
    wanted = tuple(s.strip() for s in raw.split(",") if s.strip())
    unknown = [s for s in wanted if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; choose from {list(STAGES)}")
    return tuple(s for s in STAGES if s in wanted)


def cmd_forge(args: argparse.Namespace) -> int:
    config = _load_config(args)
    count = args.count if args.count is not None else config.n_train
    entries = forge_dataset(config.forge, count, args.out)
    log.info("wrote %d quadruplets to %s", len(entries), args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    stages = _parse_stages(args.stages)
    result = run_experiment(config, stages=stages)
    for stage, payload in result["stages"].items():
        if payload.get("skipped"):
            log.info("%s: up to date", stage)
        else:
            log.info("%s: %s", stage, payload)
    report = os.path.join(result["out_dir"], "report.txt")
    if os.path.isfile(report):
        with open(report, encoding="utf-8") as fh:
            print(fh.read(), end="")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out_dir = config.experiment_dir
    marker = os.path.join(out_dir, "evaluate.done")
    if args.force and os.path.isfile(marker):
        os.remove(marker)
    result = run_experiment(config, stages=("evaluate",))
    table: MetricsTable = result["table"]
    print(format_report(table), end="")
    return 0


def cmd_ablate_pe(args: argparse.Namespace) -> int:
    config = _load_config(args)
    result = run_pe_ablation(config, probe_trials=args.probe_trials)
    probe = result["order_probe"]
    log.info("exemplar-order probe: %d/%d trials changed the output latent",
             round(probe["nonzero_fraction"] * probe["n"]), probe["n"])
    for label in ("pe_on", "pe_off"):
        report = os.path.join(result["arms"][label]["out_dir"], "report.txt")
        if os.path.isfile(report):
            print(f"--- {label} ---")
            with open(report, encoding="utf-8") as fh:
                print(fh.read(), end="")
    return 0


def cmd_transform(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.run)
    sampler = SamplerConfig(steps=args.steps, eta=args.eta,
                            guidance_scale=args.guidance, seed=args.seed)
    result = transform(read_wav(args.query), read_wav(args.exemplar_in),
                       read_wav(args.exemplar_out), bundle, sampler)
    write_wav(args.out, result)
    log.info("wrote %s", args.out)
    return 0


def cmd_export_study(args: argparse.Namespace) -> int:
    config = _load_config(args)
    bundle = load_bundle(config.experiment_dir)
    rng = np.random.default_rng(args.seed)
    sampler = dataclasses.replace(config.sampler, seed=args.seed)

    samples, context = [], []
    per_task = {}
    for task in ("add", "remove", "replace"):
        quads = list(heldout_quads_for_cell(config, task, 2))[: args.per_task]
        per_task[task] = len(quads)
        for quad in quads:
            samples.append(("ground_truth", quad.query_target))
            samples.append(("pure_noise", pure_noise_like(quad.query_target, rng)))
            samples.append(("model", transform(quad.query_in, quad.exemplar_in,
                                               quad.exemplar_out, bundle, sampler)))
            context.append(quad.query_in)
    manifest = export_study_bundle(samples, args.out, rel_context=context)
    log.info("exported %d trials (%s per task) to %s",
             len(manifest["trials"]), per_task, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retexture",
        description="Exemplar-driven audio texture transformation.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("forge", cmd_forge, "write a quadruplet dataset (WAVs + manifest)")
    p.add_argument("--config", required=True, help="experiment INI file")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, default=None,
                   help="quadruplets to write (default: the configured n_train)")

    p = add("train", cmd_train, "run the experiment pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--output-root", default=None,
                   help="override the output root (RETEXTURE_OUT also works)")
    p.add_argument("--stages", default=None,
                   help="comma-separated subset of: " + ",".join(STAGES))

    p = add("evaluate", cmd_evaluate, "rerun held-out scoring for a trained run")
    p.add_argument("--config", required=True)
    p.add_argument("--output-root", default=None)
    p.add_argument("--force", action="store_true",
                   help="rescore even if the stage is marked done")

    p = add("ablate-pe", cmd_ablate_pe, "run the positional-tag ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--output-root", default=None)
    p.add_argument("--probe-trials", type=int, default=12,
                   help="exemplar-order probe trials on replace-task queries")

    p = add("transform", cmd_transform, "apply one exemplar pair to one query")
    p.add_argument("--run", required=True, help="experiment directory with checkpoints")
    p.add_argument("--query", required=True, help="input WAV")
    p.add_argument("--exemplar-in", required=True, help="before-exemplar WAV")
    p.add_argument("--exemplar-out", required=True, help="after-exemplar WAV")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--steps", type=int, default=SamplerConfig().steps)
    p.add_argument("--guidance", type=float, default=SamplerConfig().guidance_scale)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)

    p = add("export-study", cmd_export_study,
            "export a listening-study bundle from a trained run")
    p.add_argument("--config", required=True)
    p.add_argument("--output-root", default=None)
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--per-task", type=int, default=4,
                   help="held-out queries per task")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # map to the documented exit codes
        code = exit_code_for(exc)
        log.error("%s", exc)
        if code == 1:
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
