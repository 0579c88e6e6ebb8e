"""Experiment configuration: TOML files, shipped presets and validation."""
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.diagnostics import DiagnosticsConfig
from app.errors import ConfigError
from app.neural import NNConfig
from app.sampler import SamplerConfig

logger = logging.getLogger(__name__)

PRESET_DIR = Path(os.path.dirname(os.path.dirname(__file__))) / "presets"
RBMC_OUTPUT_DIR = os.getenv("RBMC_OUTPUT_DIR", "runs")

Kind = Literal["pb1d", "pb3d", "nn", "convergence", "fixedpoint", "exactness"]


class PotentialsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    external: Literal["quadratic", "zero"] = Field("quadratic", description="external potential U")
    stiffness: float = Field(1.0, ge=0, description="lambda of U(x) = lambda |x|^2 / 2")
    kernel: Literal[
        "zero", "constant", "gaussian", "coulomb1d", "coulomb3d_cutoff"
    ] = Field("zero", description="pair kernel W")
    value: float = Field(0.0, description="constant kernel value")
    amplitude: float = Field(1.0, description="gaussian kernel amplitude")
    width: float = Field(1.0, gt=0, description="gaussian kernel width")
    epsilon: float = Field(1.0, gt=0, description="dielectric constant of Coulomb kernels")
    r_n: float | None = Field(None, gt=0, description="mollification radius of coulomb3d_cutoff")
    gamma: float | None = Field(
        None, gt=0, description="r_N = N^-gamma when r_n is unset (default 1/(2d))"
    )


class DomainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["box", "annulus", "all_space"] = Field("box", description="domain shape")
    dim: int = Field(1, ge=1, description="dimension d")
    low: float = Field(0.0, description="box lower edge or annulus inner radius")
    high: float = Field(1.0, description="box upper edge or annulus outer radius")
    boundary: Literal["reflecting", "none"] = Field("reflecting", description="boundary behavior")

    @model_validator(mode="after")
    def check_shape(self):
        if self.kind == "all_space":
            if self.boundary != "none":
                raise ValueError("all_space domains need boundary = 'none'")
        elif not self.low < self.high:
            raise ValueError(f"empty {self.kind}: low={self.low}, high={self.high}")
        return self


class PBConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epsilon: float = Field(gt=0, description="dielectric constant")
    Q_f: float = Field(description="free charge at the origin")
    Q_plus: float = Field(gt=0, description="total cation charge")
    n_plus: int = Field(ge=2, description="numerical cations N_+ (q = Q_+ / (z_+ N_+))")
    z_plus: float = Field(1.0, gt=0, description="cation valence")
    z_minus: float = Field(-1.0, lt=0, description="anion valence")
    r_c: float | None = Field(None, gt=0, description="Coulomb split radius (3D)")
    lj_epsilon: float | None = Field(None, gt=0, description="Lennard-Jones well depth (3D)")
    lj_sigma: float | None = Field(None, gt=0, description="Lennard-Jones zero crossing (3D)")
    interaction: Literal["coulomb", "none"] = Field(
        "coulomb", description="'none' switches pair interactions off"
    )


class OracleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    nodes: int = Field(2048, ge=3, description="grid nodes")
    low: float | None = Field(None, description="grid start (defaults to the domain)")
    high: float | None = Field(None, description="grid end (defaults to the domain)")
    damping: float = Field(0.5, gt=0, le=1, description="Picard damping theta")
    tol: float = Field(1e-10, gt=0, description="sup-norm residual tolerance")
    max_iter: int = Field(10000, ge=1, description="Picard iteration cap")
    method: Literal["direct", "fft"] = Field("direct", description="convolution method")


class StudyConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_values: list[int] = Field(
        default_factory=list, description="particle counts (N_+ for convergence runs)"
    )
    repetitions: int = Field(1, ge=1, description="independent repetitions M per N")
    taus: list[float] = Field(default_factory=list, description="step sizes of the exactness study")
    refinements: list[int] = Field(
        default_factory=list, description="grid node counts of the refinement study"
    )

    @model_validator(mode="after")
    def check_values(self):
        if any(n < 2 for n in self.n_values):
            raise ValueError("particle counts must be >= 2")
        if any(t <= 0 for t in self.taus):
            raise ValueError("step sizes must be positive")
        if any(n < 5 for n in self.refinements):
            raise ValueError("refinement grids need at least 5 nodes")
        return self


SECTIONS: dict[str, type[BaseModel]] = {
    "potentials": PotentialsConfig,
    "domain": DomainConfig,
    "pb": PBConfig,
    "sampler": SamplerConfig,
    "oracle": OracleConfig,
    "diagnostics": DiagnosticsConfig,
    "nn": NNConfig,
    "study": StudyConfig,
}

REQUIRED_SECTIONS: dict[str, set[str]] = {
    "pb1d": {"pb", "domain", "sampler", "oracle"},
    "pb3d": {"pb", "domain", "sampler", "oracle"},
    "convergence": {"pb", "domain", "sampler", "oracle", "study"},
    "nn": {"nn"},
    "fixedpoint": {"potentials", "domain", "sampler", "oracle", "study"},
    "exactness": {"potentials", "domain", "sampler", "study"},
}

OPTIONAL_SECTIONS: dict[str, set[str]] = {
    "pb1d": {"diagnostics"},
    "pb3d": {"diagnostics"},
    "convergence": {"diagnostics"},
    "nn": set(),
    "fixedpoint": {"diagnostics"},
    "exactness": {"diagnostics", "oracle"},
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Kind
    seed: int = Field(0, ge=0)
    output_dir: str | None = None
    preset: str | None = None
    potentials: PotentialsConfig | None = None
    domain: DomainConfig | None = None
    pb: PBConfig | None = None
    sampler: SamplerConfig | None = None
    oracle: OracleConfig | None = None
    diagnostics: DiagnosticsConfig | None = None
    nn: NNConfig | None = None
    study: StudyConfig | None = None

    @model_validator(mode="after")
    def check_sections(self):
        present = {name for name in SECTIONS if getattr(self, name) is not None}
        required = REQUIRED_SECTIONS[self.kind]
        missing = required - present
        if missing:
            raise ValueError(f"kind {self.kind!r} needs sections {sorted(missing)}")
        unused = present - required - OPTIONAL_SECTIONS[self.kind]
        if unused:
            raise ValueError(f"kind {self.kind!r} does not use sections {sorted(unused)}")
        return self

    def sampler_config(self) -> SamplerConfig:
        """Sampler section with the experiment seed applied."""
        return self.sampler.model_copy(update={"seed": self.seed})

    def diagnostics_config(self) -> DiagnosticsConfig:
        return self.diagnostics or DiagnosticsConfig()

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(RBMC_OUTPUT_DIR) / (self.preset or self.kind) / f"seed{self.seed}"


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def preset_path(name: str) -> Path:
    path = PRESET_DIR / f"{name}.toml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return path


def _read_document(path: Path) -> dict:
    try:
        if path.suffix == ".json":
            manifest = json.loads(path.read_text(encoding="utf-8"))
            if "config" not in manifest:
                raise ConfigError(f"{path} is not a run manifest (no 'config' key)")
            return manifest["config"]
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e


def merge_documents(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_documents(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(document: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def load_config(
    path: str | Path | None = None,
    preset: str | None = None,
    seed: int | None = None,
    output_dir: str | None = None,
) -> ExperimentConfig:
    """Resolve preset < config file < explicit seed / output directory."""
    if path is None and preset is None:
        raise ConfigError("give a config file or a preset")
    document: dict = {}
    if preset is not None:
        document = _read_document(preset_path(preset))
        document.setdefault("preset", preset)
    if path is not None:
        document = merge_documents(document, _read_document(Path(path)))
    if seed is not None:
        document["seed"] = seed
    if output_dir is not None:
        document["output_dir"] = str(output_dir)
    config = build_config(document)
    logger.info(f"Loaded {config.kind} config (preset={config.preset}, seed={config.seed})")
    return config


def key_registry() -> list[str]:
    """Documented keys, one line per key."""
    lines = [
        "kind: one of " + ", ".join(REQUIRED_SECTIONS),
        "seed: base RNG seed (overrides [sampler] seed)",
        "output_dir: directory for CSV files and manifest.json",
    ]
    for section, model in SECTIONS.items():
        for name, info in model.model_fields.items():
            default = "required" if info.is_required() else f"default {info.get_default(call_default_factory=True)!r}"
            lines.append(f"[{section}] {name}: {info.description or ''} ({default})")
    lines.append("[sampler] burn_in_time / end_time: run lengths in time units, converted with tau * inner_steps")
    return lines
