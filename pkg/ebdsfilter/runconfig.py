"""
Per-run configuration: a validated RunConfig assembled from a preset, a
YAML/JSON file and dotted ``key=value`` overrides, in that order.
"""

import copy
import json
import logging
import os
from enum import Enum
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, root_validator, validator

import ebdsfilter
from ebdsfilter.config import GCONFIG
from ebdsfilter.ebds import TrainConfig
from ebdsfilter.exception import ConfigError, StorageError
from ebdsfilter.grid import Grid1D
from ebdsfilter.model import BUILTIN_MODELS, ModelBundle, get_builtin
from ebdsfilter.reference import Readout
from ebdsfilter.simulate import TimeGrid
from ebdsfilter.split_quad import DEFAULT_GH_ORDER, MIN_GH_ORDER
from ebdsfilter.store import write_yaml

logger = logging.getLogger(__name__)

RUN_MANIFEST = "manifest.yaml"


class TimeSection(BaseModel):
    T: float = Field(2.0, gt=0.0)
    K: int = Field(20, ge=1)
    N: int = Field(16, ge=1)

    class Config:
        extra = "forbid"

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.K, self.N)


class GridSection(BaseModel):
    lower: float = Field(-8.0)
    upper: float = Field(12.0)
    points: int = Field(2000, ge=2)

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _ordered(cls, values):  # pylint: disable=no-self-argument
        if not values["lower"] < values["upper"]:
            raise ValueError("grid.lower must be below grid.upper")
        return values


class ReferenceKind(str, Enum):
    AUTO = "auto"
    KALMAN = "kalman"
    PARTICLE = "particle"
    QUADRATURE = "quadrature"


class EvaluationSection(BaseModel):
    Me: int = Field(100, ge=1, description="number of evaluation sequences")
    seed: int = Field(1000, description="seed of the evaluation sequences")
    normalize: bool = Field(True)
    reference: ReferenceKind = Field(ReferenceKind.AUTO)
    particles: int = Field(10000, ge=1)
    bandwidth: Optional[float] = Field(None, gt=0.0)
    readout: Readout = Field(Readout.TRANSITION)
    substeps: int = Field(8, ge=1)

    class Config:
        extra = "forbid"


class SimulateSection(BaseModel):
    count: int = Field(2, ge=1)
    substeps: int = Field(8, ge=1)
    seed: int = Field(0)

    class Config:
        extra = "forbid"


class OracleMode(str, Enum):
    FILTER = "filter"
    STANDALONE = "standalone"


class OracleSection(BaseModel):
    mode: OracleMode = Field(OracleMode.FILTER)
    observations: Optional[str] = Field(
        None, description="directory of obs_*.csv files"
    )
    normalized_updates: bool = Field(False)
    long_format: bool = Field(True)

    class Config:
        extra = "forbid"


class ConvergeMethod(str, Enum):
    ORACLE = "oracle"
    EBDS = "ebds"


class ConvergeSection(BaseModel):
    method: ConvergeMethod = Field(ConvergeMethod.ORACLE)
    N_values: List[int] = Field([1, 2, 4, 8, 16])
    final_time_only: bool = Field(True)

    class Config:
        extra = "forbid"

    @validator("N_values")
    def _ascending(cls, value):  # pylint: disable=no-self-argument
        if not value or any(n < 1 for n in value):
            raise ValueError("N_values must be a non-empty list of positive integers")
        if value != sorted(set(value)):
            raise ValueError("N_values must be strictly ascending")
        return value


class RunConfig(BaseModel):
    model: str = Field("drifted_bm")
    gh_order: int = Field(DEFAULT_GH_ORDER, ge=MIN_GH_ORDER)
    seeds: List[int] = Field([0])
    output_dir: str = Field("runs/latest")
    time: TimeSection = Field(TimeSection())
    grid: GridSection = Field(GridSection())
    train: TrainConfig = Field(TrainConfig())
    evaluation: EvaluationSection = Field(EvaluationSection())
    simulate: SimulateSection = Field(SimulateSection())
    oracle: OracleSection = Field(OracleSection())
    converge: ConvergeSection = Field(ConvergeSection())

    class Config:
        extra = "forbid"

    @validator("model")
    def _known_model(cls, value):  # pylint: disable=no-self-argument
        if value not in BUILTIN_MODELS:
            raise ValueError(
                f"unknown model '{value}', known: {sorted(BUILTIN_MODELS)}"
            )
        return value

    @validator("seeds")
    def _some_seeds(cls, value):  # pylint: disable=no-self-argument
        if not value:
            raise ValueError("at least one seed is required")
        return value

    def time_grid(self, N: Optional[int] = None) -> TimeGrid:
        grid = self.time.grid()
        return grid if N is None else grid.with_N(N)

    def eval_grid(self) -> Grid1D:
        return Grid1D(self.grid.lower, self.grid.upper, self.grid.points)

    def bundle(self) -> ModelBundle:
        return get_builtin(self.model, self.train.training_init)

    def resolved(self) -> dict:
        return json.loads(self.json())


def preset_path(name: str) -> str:
    return os.path.join(GCONFIG.preset_dir, f"{name}.yaml")


def list_presets() -> List[str]:
    directory = GCONFIG.preset_dir
    if not os.path.isdir(directory):
        return []
    return sorted(
        os.path.splitext(n)[0] for n in os.listdir(directory) if n.endswith(".yaml")
    )


def _read_mapping(path: str) -> Dict[str, Any]:
    _, ext = os.path.splitext(path)
    try:
        with open(path, "r", encoding="utf-8") as fileobj:
            data = json.load(fileobj) if ext == ".json" else yaml.safe_load(fileobj)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found", {"file": path}) from exc
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config file {path}", {"file": path}) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping", {"file": path})
    return data


def load_preset(name: str) -> Dict[str, Any]:
    path = preset_path(name)
    if not os.path.exists(path):
        raise ConfigError(
            f"unknown preset '{name}'", {"preset": name, "known": list_presets()}
        )
    return _read_mapping(path)


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Set dotted keys (``train.M=2000``); string values are read as YAML scalars."""
    out = copy.deepcopy(data)
    for dotted, value in overrides.items():
        if isinstance(value, str):
            value = yaml.safe_load(value)
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(
                    f"cannot override '{dotted}': '{part}' is not a section"
                )
            node = child
        node[parts[-1]] = value
    return out


def load_run_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    data: Dict[str, Any] = {}
    if preset:
        data = deep_merge(data, load_preset(preset))
    if path:
        data = deep_merge(data, _read_mapping(path))
    data = apply_overrides(data, overrides or {})
    try:
        cfg = RunConfig.parse_obj(data)
    except ValidationError as exc:
        raise ConfigError(
            "invalid run configuration",
            {
                "errors": [
                    {"loc": ".".join(map(str, e["loc"])), "msg": e["msg"]}
                    for e in exc.errors()
                ]
            },
        ) from exc
    logger.debug("run config resolved", extra={"preset": preset, "file": path})
    return cfg


def prepare_output_dir(directory: str) -> str:
    """Create a fresh run directory; an existing non-empty one is never reused."""
    if os.path.isdir(directory) and os.listdir(directory):
        raise StorageError(
            f"output directory {directory} already exists and is not empty",
            {"output_dir": directory},
        )
    os.makedirs(directory, exist_ok=True)
    return directory


def write_run_manifest(
    cfg: RunConfig, directory: str, command: str, outputs: Optional[dict] = None
) -> str:
    manifest = {
        "command": command,
        "ebdsfilter_version": ebdsfilter.__version__,
        "git_sha": ebdsfilter.get_git_sha(),
        "config": cfg.resolved(),
        "outputs": outputs or {},
    }
    path = os.path.join(directory, RUN_MANIFEST)
    write_yaml(manifest, path)
    return path
