"""Experiment configuration.

One INI file describes a whole experiment; each section maps onto the
config dataclass of the module it drives. Values are typed by the default
they override, unknown sections or keys are errors, and every sub-seed is
derived from the experiment seed unless the file pins it explicitly.
"""

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .diffusion import SamplerConfig, TrainConfig
from .exemplar import ExemplarConfig
from .forge import ForgeConfig
from .metrics import ClassifierConfig
from .unet import UNetConfig
from .vae import VaeConfig

OUTPUT_ROOT_ENV = "RETEXTURE_OUT"
DEFAULT_OUTPUT_ROOT = "runs"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything one run needs, resolved and typed. `name` and
    `output_root` locate artifacts; they do not enter the config hash."""

    seed: int = 0
    name: str = "experiment"
    output_root: str = ""
    data: str = "synthetic"  # "synthetic" | "corpus"
    n_train: int = 2000
    n_test_per_cell: int = 34
    clips_per_class: int = 200  # classifier / encoder pretraining corpus
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    encoder: ExemplarConfig = field(default_factory=ExemplarConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self) -> None:
        if self.data not in ("synthetic", "corpus"):
            raise ConfigError(f"data must be 'synthetic' or 'corpus', got {self.data!r}")
        if self.n_train < 1 or self.n_test_per_cell < 1 or self.clips_per_class < 1:
            raise ConfigError("n_train, n_test_per_cell and clips_per_class must be positive")
        if self.data == "corpus":
            for label, path in (("speech_dir", self.forge.speech_dir),
                                ("texture_dir", self.forge.texture_dir)):
                if not path:
                    raise ConfigError(f"data = corpus requires forge.{label}")
                if not os.path.isdir(path):
                    raise ConfigError(f"forge.{label} does not exist: {path}")

    @property
    def experiment_dir(self) -> str:
        return os.path.join(resolve_output_root(self.output_root), self.name)


def resolve_output_root(configured: str = "", cli_value: str | None = None) -> str:
    """Precedence: explicit CLI flag, config file, environment, ./runs."""
    if cli_value:
        return cli_value
    if configured:
        return configured
    return os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT


# Sections, in file order, mapped to the attribute they populate. The
# experiment section sets scalars on ExperimentConfig itself.
_SECTIONS = {
    "experiment": None,
    "forge": "forge",
    "vae": "vae",
    "encoder": "encoder",
    "classifier": "classifier",
    "unet": "unet",
    "diffusion": "train",
    "sampler": "sampler",
}

# seed-bearing fields derived from experiment.seed when the file does not
# pin them; the index keys a SeedSequence spawn so streams stay independent
_DERIVED_SEEDS = (
    ("forge", "master_seed", 0),
    ("vae", "seed", 1),
    ("encoder", "seed", 2),
    ("classifier", "seed", 3),
    ("train", "seed", 4),
    ("sampler", "seed", 5),
)


def derive_seed(seed: int, index: int) -> int:
    """Stable 63-bit child seed (63 so it round-trips any signed store)."""
    state = np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1, np.uint64)
    return int(state[0] >> 1)


def _convert(section: str, key: str, raw: str, default):
    kind = type(default)
    try:
        if default is None or kind is str:
            return None if raw.strip().lower() in ("", "none") else raw.strip()
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw.strip())
        if kind is float:
            return float(raw.strip())
        if kind is tuple:
            element = type(default[0]) if default else float
            return tuple(element(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    raise ConfigError(f"[{section}] {key} is not settable from a config file")


def _section_kwargs(section: str, items, template) -> dict:
    fields = {f.name: f for f in dataclasses.fields(template)}
    defaults = dataclasses.asdict(template)
    kwargs = {}
    for key, raw in items:
        if key not in fields:
            raise ConfigError(f"unknown key [{section}] {key}")
        default = defaults[key]
        if isinstance(default, dict):  # nested dataclass, e.g. spectral params
            raise ConfigError(f"[{section}] {key} is not settable from a config file")
        kwargs[key] = _convert(section, key, raw, default)
    return kwargs


def parse_experiment_config(path: str) -> ExperimentConfig:
    """Load and fully resolve an experiment description."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    scalar_top = top_fields - set(filter(None, _SECTIONS.values()))
    top_kwargs = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in scalar_top:
                raise ConfigError(f"unknown key [experiment] {key}")
            default = getattr(ExperimentConfig, key, "")
            top_kwargs[key] = _convert("experiment", key, raw, default)

    sub_kwargs: dict[str, dict] = {attr: {} for attr in _SECTIONS.values() if attr}
    templates = {
        "forge": ForgeConfig(), "vae": VaeConfig(), "encoder": ExemplarConfig(),
        "classifier": ClassifierConfig(), "unet": UNetConfig(),
        "diffusion": TrainConfig(), "sampler": SamplerConfig(),
    }
    for section, attr in _SECTIONS.items():
        if attr is None or not parser.has_section(section):
            continue
        sub_kwargs[attr] = _section_kwargs(section, parser.items(section),
                                           templates[section])

    seed = int(top_kwargs.get("seed", 0))
    for attr, seed_field, index in _DERIVED_SEEDS:
        sub_kwargs[attr].setdefault(seed_field, derive_seed(seed, index))

    try:
        return ExperimentConfig(
            **top_kwargs,
            forge=ForgeConfig(**sub_kwargs["forge"]),
            vae=VaeConfig(**sub_kwargs["vae"]),
            encoder=ExemplarConfig(**sub_kwargs["encoder"]),
            classifier=ClassifierConfig(**sub_kwargs["classifier"]),
            unet=UNetConfig(**sub_kwargs["unet"]),
            train=TrainConfig(**sub_kwargs["train"]),
            sampler=SamplerConfig(**sub_kwargs["sampler"]),
        )
    except ConfigError:
        raise
    except Exception as exc:  # module validators speak for themselves
        raise ConfigError(f"{path}: {exc}") from exc


def config_fingerprint(config: ExperimentConfig) -> dict:
    """Canonical nested dict of everything that affects results. Location
    fields are excluded so moving an experiment does not invalidate it."""
    record = dataclasses.asdict(config)
    record.pop("name")
    record.pop("output_root")
    return record


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_fingerprint(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
