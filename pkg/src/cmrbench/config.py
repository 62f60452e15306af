"""Declarative experiment configuration.

Experiments are described by a TOML file with one table per pipeline stage;
every key has a default, unknown keys are rejected, and the fully resolved
(defaults-applied) configuration is persisted beside each run's outputs so
results stay auditable. Per-stage random seeds are derived from the single
top-level ``seed``, so model-table ``seed`` keys are rejected.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .core import config_hash
from .ddpm import DiffusionTrainConfig
from .errors import ConfigError
from .fidelity import EmbedderTrainConfig
from .flowmatch import FlowTrainConfig
from .ldm import AETrainConfig, LatentDiffusionConfig
from .phantom import PhantomConfig
from .segutil import SegTrainConfig, TrainingSetup

GENERATOR_NAMES = ("ddpm", "ldm", "fm")


@dataclass
class DataConfig:
    """Phantom dataset parameters (domain profiles use library defaults)."""

    counts: dict = field(default_factory=lambda: {"A": 120, "B": 120})
    split_fractions: tuple = (0.7, 0.1, 0.2)
    resolution: int = 32
    margin: int = 6
    p_lo: float = 1.0
    p_hi: float = 99.0

    def to_phantom_config(self, seed: int) -> PhantomConfig:
        return PhantomConfig(
            counts=dict(self.counts),
            split_fractions=tuple(self.split_fractions),
            out_size=int(self.resolution),
            margin=int(self.margin),
            p_lo=float(self.p_lo),
            p_hi=float(self.p_hi),
            seed=int(seed),
        )


@dataclass
class EvalConfig:
    """Evaluation toggles and protocol settings."""

    fidelity: bool = True
    shape: bool = True
    utility: bool = True
    privacy: bool = True
    n_synth: int = 64  # generated images per generator for evaluation
    sample_batch: int = 32
    solver_steps: int = 100  # flow ODE integration steps
    record_every: int = 200  # denoising-strip snapshot interval
    mia_members: int = 32
    mia_repeats: int = 8
    kid_subsets: int = 10
    kid_subset_size: int = 32
    utility_setups: tuple = (
        "RealA",
        "RealB",
        "FullSyn-ddpm",
        "FullSyn-ldm",
        "FullSyn-fm",
    )

    def __post_init__(self):
        for name in self.utility_setups:
            TrainingSetup(name)  # raises ConfigError on unknown setup names
        if self.n_synth < 2:
            raise ConfigError("n_synth must be at least 2")


@dataclass
class LdmSection:
    autoencoder: AETrainConfig = field(default_factory=AETrainConfig)
    diffusion: LatentDiffusionConfig = field(default_factory=LatentDiffusionConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/quickstart"
    data: DataConfig = field(default_factory=DataConfig)
    ddpm: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    ldm: LdmSection = field(default_factory=LdmSection)
    fm: FlowTrainConfig = field(default_factory=FlowTrainConfig)
    segmenter: SegTrainConfig = field(default_factory=SegTrainConfig)
    embedder: EmbedderTrainConfig = field(default_factory=EmbedderTrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> dict:
        """Full defaults-applied dict; the canonical form that gets hashed."""
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))

    def hash(self) -> str:
        return config_hash(self.resolved())


def _build_section(cls, mapping: dict, path: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"[{path}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{path}]")
    if path != "" and "seed" in mapping:
        raise ConfigError(
            f"[{path}].seed is not configurable; stage seeds derive from the top-level seed"
        )
    defaults = cls()
    kwargs = {}
    for key, value in mapping.items():
        if isinstance(value, list) and isinstance(getattr(defaults, key), tuple):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in [{path}]: {exc}") from exc


_SECTIONS = {
    "data": DataConfig,
    "ddpm": DiffusionTrainConfig,
    "fm": FlowTrainConfig,
    "segmenter": SegTrainConfig,
    "embedder": EmbedderTrainConfig,
    "evaluation": EvalConfig,
}
_LDM_SECTIONS = {"autoencoder": AETrainConfig, "diffusion": LatentDiffusionConfig}


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed TOML mapping."""
    known = set(_SECTIONS) | {"ldm", "seed", "out_dir"}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs = {}
    if "seed" in mapping:
        if not isinstance(mapping["seed"], int) or isinstance(mapping["seed"], bool):
            raise ConfigError(f"seed must be an integer, got {mapping['seed']!r}")
        kwargs["seed"] = mapping["seed"]
    if "out_dir" in mapping:
        if not isinstance(mapping["out_dir"], str):
            raise ConfigError("out_dir must be a string")
        kwargs["out_dir"] = mapping["out_dir"]
    for name, cls in _SECTIONS.items():
        if name in mapping:
            kwargs[name] = _build_section(cls, mapping[name], name)
    if "ldm" in mapping:
        sub = mapping["ldm"]
        if not isinstance(sub, dict):
            raise ConfigError("[ldm] must be a table")
        unknown = sorted(set(sub) - set(_LDM_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown} in [ldm]")
        kwargs["ldm"] = LdmSection(
            **{
                key: _build_section(cls, sub[key], f"ldm.{key}")
                for key, cls in _LDM_SECTIONS.items()
                if key in sub
            }
        )
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            mapping = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return config_from_mapping(mapping)


def write_resolved(config: ExperimentConfig, path) -> Path:
    """Persist the defaults-applied config snapshot next to the run outputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config": config.resolved(), "config_hash": config.hash()}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


QUICKSTART_TOML = """\
# Desk-scale quickstart: two synthetic domains at 32x32, every generator and
# every evaluation axis enabled. Runtimes target a small CPU budget.
seed = 0
out_dir = "runs/quickstart"

[data]
counts = { A = 120, B = 120 }
resolution = 32

[ddpm]
epochs = 40

[ldm.autoencoder]
epochs = 40

[ldm.diffusion]
epochs = 40

[fm]
epochs = 60

[segmenter]
epochs = 40

[embedder]
epochs = 30

[evaluation]
n_synth = 64
"""


def write_quickstart(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(QUICKSTART_TOML, encoding="utf-8")
    return path
