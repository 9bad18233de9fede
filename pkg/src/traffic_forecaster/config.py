"""Run configuration: one TOML file, validated with pydantic before any work starts."""

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import SliceConfig
from .errors import ConfigError
from .graphs import ALL_GRAPHS, DEFAULT_CACHE_SIZE, GraphKind
from .synth import SynthSpec
from .training import TrainConfig

# Load environment variables
load_dotenv()

DATA_DIR_ENV = "TRAFFIC_DATA_DIR"
OUTPUT_DIR_ENV = "TRAFFIC_OUTPUT_DIR"
LOG_LEVEL_ENV = "TRAFFIC_LOG_LEVEL"
DEFAULT_OUTPUT_DIR = "outputs"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsSection(_Section):
    traffic: Optional[Path] = None
    stations: Optional[Path] = None
    holidays: Optional[Path] = None
    output_dir: Optional[Path] = None


class SlicingSection(_Section):
    l: int = Field(12, ge=1)
    T_r: int = Field(1, ge=1)
    T_d: int = Field(2, ge=0)
    T_w: int = Field(1, ge=0)
    T_o: Optional[int] = Field(None, ge=1)
    no_time_slicing: bool = False

    def to_slice_config(self, points_per_day: int, horizon: int) -> SliceConfig:
        if self.T_o is not None and self.T_o != points_per_day:
            raise ConfigError(
                f"slicing.T_o={self.T_o} but the data has {points_per_day} points per day",
                field="slicing.T_o",
            )
        cfg = SliceConfig(
            l=self.l, T_r=self.T_r, T_d=self.T_d, T_w=self.T_w, T_o=points_per_day, horizon=horizon
        )
        return cfg.without_time_slicing() if self.no_time_slicing else cfg


class GraphsSection(_Section):
    sigma: float = Field(100.0, gt=0)
    p: float = Field(0.9, gt=0, lt=1)
    H: int = Field(48, ge=2)
    enabled: List[GraphKind] = Field(default_factory=lambda: list(ALL_GRAPHS), min_length=1)
    spatial_edge_list: Optional[Path] = None
    cache_size: int = Field(DEFAULT_CACHE_SIZE, ge=1)
    focus_station: Optional[str] = None

    @field_validator("enabled")
    @classmethod
    def _unique(cls, value: List[GraphKind]) -> List[GraphKind]:
        if len(set(value)) != len(value):
            raise ValueError("graphs listed more than once")
        return value


class ModelSection(_Section):
    K: int = Field(3, ge=1)
    c_h: int = Field(64, ge=1)
    C: int = Field(32, ge=1)
    use_external_features: bool = True


class SplitSection(_Section):
    """Date boundaries win over fractions when both dates are given."""

    train_end: Optional[str] = None
    val_end: Optional[str] = None
    train_fraction: float = Field(0.7, gt=0, lt=1)
    val_fraction: float = Field(0.1, gt=0, lt=1)

    @field_validator("val_fraction")
    @classmethod
    def _fractions(cls, value: float, info) -> float:
        if info.data.get("train_fraction", 0) + value >= 1:
            raise ValueError("train_fraction + val_fraction must be below 1")
        return value


class ScalingSection(_Section):
    per_node: bool = False


class RunConfig(_Section):
    """Everything one command needs; ``base_dir`` anchors relative paths."""

    paths: PathsSection = Field(default_factory=PathsSection)
    slicing: SlicingSection = Field(default_factory=SlicingSection)
    graphs: GraphsSection = Field(default_factory=GraphsSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    split: SplitSection = Field(default_factory=SplitSection)
    scaling: ScalingSection = Field(default_factory=ScalingSection)
    synth: SynthSpec = Field(default_factory=SynthSpec)
    horizons: List[int] = Field(default_factory=lambda: [1], min_length=1)
    seed: int = 0
    base_dir: Path = Field(default_factory=Path.cwd)

    @field_validator("horizons")
    @classmethod
    def _positive_horizons(cls, value: List[int]) -> List[int]:
        if any(k < 1 for k in value):
            raise ValueError("horizons must be >= 1")
        return value

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "RunConfig":
        data = dict(data)
        data.setdefault("base_dir", base_dir or Path.cwd())
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise _config_error(e) from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """Parse and validate a TOML config.

        Relative paths resolve against ``$TRAFFIC_DATA_DIR`` when set, else the
        config file's directory.
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found at {path}", path=str(path))
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}", path=str(path)) from e
        base = Path(os.getenv(DATA_DIR_ENV) or path.resolve().parent).expanduser()
        try:
            return cls.model_validate({**data, "base_dir": base})
        except ValidationError as e:
            raise _config_error(e, path=str(path)) from e

    def with_overrides(
        self,
        horizon: Optional[int] = None,
        seed: Optional[int] = None,
        out: Optional[Union[str, Path]] = None,
    ) -> "RunConfig":
        """Apply command-line overrides and validate again."""
        data = self.model_dump()
        if horizon is not None:
            data["horizons"] = [horizon]
        if seed is not None:
            data["seed"] = seed
            data["train"]["seed"] = seed
            data["synth"]["seed"] = seed
        if out is not None:
            data["paths"]["output_dir"] = Path(out).resolve()
        return RunConfig.from_dict(data)

    def resolve(self, path: Optional[Path]) -> Optional[Path]:
        if path is None:
            return None
        return path if path.is_absolute() else self.base_dir / path

    @property
    def traffic_path(self) -> Path:
        if self.paths.traffic is None:
            raise ConfigError("no traffic CSV configured", field="paths.traffic")
        return self.resolve(self.paths.traffic)

    @property
    def output_dir(self) -> Path:
        if self.paths.output_dir is not None:
            return self.resolve(self.paths.output_dir)
        return Path(os.getenv(OUTPUT_DIR_ENV) or self.base_dir / DEFAULT_OUTPUT_DIR).expanduser()

    def require_files(self, fields: Sequence[str]) -> None:
        """Raise ConfigError for every named ``paths`` entry that is unset or missing on disk."""
        for name in fields:
            value = getattr(self.paths, name)
            if name == "stations" and value is None and self.graphs.spatial_edge_list:
                continue
            if value is None:
                raise ConfigError(f"paths.{name} is required", field=f"paths.{name}")
            resolved = self.resolve(value)
            if not resolved.exists():
                raise ConfigError(
                    f"file not found: {resolved}", field=f"paths.{name}", path=str(resolved)
                )
        edge_list = self.resolve(self.graphs.spatial_edge_list)
        if edge_list is not None and not edge_list.exists():
            raise ConfigError(
                f"file not found: {edge_list}",
                field="graphs.spatial_edge_list",
                path=str(edge_list),
            )


def _config_error(exc: ValidationError, path: Optional[str] = None) -> ConfigError:
    first = exc.errors()[0]
    field = ".".join(str(part) for part in first["loc"])
    return ConfigError(f"invalid config: {first['msg']}", field=field, path=path)
