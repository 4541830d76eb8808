"""
Run configuration.

A run is described by one `RunConfig`. On disk it is a UTF-8 file of
`key = value` lines with dotted keys for nested sections, e.g.

    epochs = 5
    pgd.k = 1
    pgd.budget.max_scale_deviation = 0.01
    pgd.components = scale,rotation,translation

Command-line overrides use the same dotted keys. Process-level settings
(log level, worker count, output root) come from the environment and `.env`.
"""

from __future__ import annotations

import logging
import os
import pathlib
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Mapping, Optional, Union, get_args, get_origin

import dotenv
import pydantic
from pydantic import BaseModel, Field, field_validator

from aroface.adversary import PGDConfig
from aroface.data import Dataset, PerturbSpec, SyntheticSpec
from aroface.errors import ConfigError
from aroface.recognizer import MarginConfig, ModelSpec

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = pathlib.Path("benchmark/template_112.txt")
RESOLVED_CONFIG_NAME = "resolved_config.txt"


class OptimizerConfig(BaseModel):
    """Momentum SGD with cosine annealing from `lr` to 0 over all iterations."""

    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    schedule: Literal["cosine", "constant"] = "cosine"


class EvalConfig(BaseModel):
    perturb: PerturbSpec = Field(default_factory=PerturbSpec)
    far_list: List[float] = Field(default_factory=lambda: [0.1, 0.01, 0.001])
    seed: int = Field(0, ge=0)
    gallery_fraction: float = Field(0.5, gt=0.0, lt=1.0)

    @field_validator("far_list")
    @classmethod
    def _far_in_open_unit_interval(cls, value: List[float]) -> List[float]:
        bad = [f for f in value if not 0.0 < f < 1.0]
        if bad:
            raise ValueError(f"FAR values must lie in (0, 1), got {bad}")
        return sorted(value, reverse=True)


class RunConfig(BaseModel):
    """Everything one train/evaluate run needs.

    Large-corpus training typically uses lr 0.1, batch 512, 28 epochs; the
    defaults here are desk scale. Model input dims and class count are taken
    from the data source when the run starts.
    """

    dataset: Optional[pathlib.Path] = None
    test_dataset: Optional[pathlib.Path] = None
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    template: pathlib.Path = DEFAULT_TEMPLATE
    model: ModelSpec = Field(default_factory=ModelSpec)
    margin: MarginConfig = Field(default_factory=MarginConfig)
    pgd: PGDConfig = Field(default_factory=PGDConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    output_dir: pathlib.Path = pathlib.Path("runs/default")

    def check_paths(self) -> None:
        """Every referenced input must exist before any work starts."""
        for name in ("template", "dataset", "test_dataset"):
            value = getattr(self, name)
            if value is not None and not pathlib.Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")

    def with_data_dims(self, dataset: Dataset) -> "RunConfig":
        model = self.model.model_copy(update={
            "input_channels": dataset.channels,
            "height": dataset.shape.height,
            "width": dataset.shape.width,
            "num_classes": dataset.num_classes,
        })
        return self.model_copy(update={"model": model})

    def updated(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied and re-validated."""
        merged = flatten(self.model_dump(mode="json"))
        merged.update({k: v for k, v in overrides.items()})
        return build_config(merged)


@dataclass(frozen=True)
class Settings:
    log_level: str
    workers: Optional[int]
    output_root: Optional[pathlib.Path]


def load_settings(env_file: Union[str, pathlib.Path, None] = None) -> Settings:
    """Read process settings from the environment, after loading `.env`."""
    dotenv.load_dotenv(dotenv_path=env_file or pathlib.Path(".env"))
    workers = os.getenv("AROFACE_WORKERS")
    root = os.getenv("AROFACE_OUTPUT_ROOT")
    try:
        workers_value = int(workers) if workers else None
    except ValueError as e:
        raise ConfigError(f"AROFACE_WORKERS must be an integer, got {workers!r}") from e
    return Settings(
        log_level=os.getenv("AROFACE_LOG_LEVEL", "INFO").upper(),
        workers=workers_value,
        output_root=pathlib.Path(root) if root else None,
    )


def flatten(tree: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, f"{name}."))
        else:
            out[name] = value
    return out


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key!r} nests under scalar {part!r}")
            node = child
        node[parts[-1]] = value
    return tree


def _split_lists(model_cls: type, tree: Dict[str, Any]) -> Dict[str, Any]:
    """Turn comma-separated strings into lists wherever the model expects a list."""
    for name, info in model_cls.model_fields.items():
        if name not in tree:
            continue
        annotation = info.annotation
        value = tree[name]
        if get_origin(annotation) in (list, List) and isinstance(value, str):
            tree[name] = [tok.strip() for tok in value.split(",") if tok.strip()]
        elif isinstance(value, dict):
            nested = [a for a in (annotation, *get_args(annotation)) if isinstance(a, type) and issubclass(a, BaseModel)]
            if nested:
                tree[name] = _split_lists(nested[0], value)
    return tree


def build_config(flat: Mapping[str, Any]) -> RunConfig:
    cleaned = {k: v for k, v in flat.items() if v is not None and v != ""}
    tree = _split_lists(RunConfig, _nest(cleaned))
    try:
        return RunConfig.model_validate(tree)
    except pydantic.ValidationError as e:
        raise ConfigError(f"invalid run configuration:\n{e}") from e


def load_config(path: Union[str, pathlib.Path, None] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    flat: Dict[str, Any] = {}
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        flat.update(dotenv.dotenv_values(path, interpolate=False, encoding="utf-8"))
    flat.update(overrides or {})
    return build_config(flat)


def parse_overrides(tokens: List[str]) -> Dict[str, str]:
    """`--key value` / `--key=value` pairs left over by argparse."""
    out: Dict[str, str] = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"override --{key} is missing its value")
        out[key.replace("-", "_")] = value
    return out


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = ["# resolved run configuration"]
    for key, value in flatten(cfg.model_dump(mode="json")).items():
        if value is None:
            continue
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, directory: Union[str, pathlib.Path], name: str = RESOLVED_CONFIG_NAME) -> pathlib.Path:
    """Write the fully expanded config; commands sharing a directory with a training run pass their own name."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
