"""
Run configuration: the model and world parameters plus paths and
training schedule, read from plain key=value files.

Keys are flattened with dots (model.d_model=128) and list values are
comma separated (world.actions=move-to,pick-up). Every command writes
its resolved configuration next to its outputs so a run can be
repeated from that file alone.

Typical Usage:

>>> from r3_captioner.config import RunConfigLoader
>>> run = RunConfigLoader("run.conf").load({"seed": "3"})
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Optional
import logging

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, model_validator

from r3_captioner.errors import ConfigError
from r3_captioner.model import R3Config
from r3_captioner.world import WorldSpec

logger = logging.getLogger(__name__)

LIST_FIELDS = {"world.colors", "world.shapes", "world.actions", "world.event_weights"}
SEED_KEYS = ("seed", "model.seed", "world.seed")


class RunConfig(BaseModel):
    """
    Everything a command needs besides its input and output paths.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    model: R3Config = R3Config()
    world: WorldSpec = WorldSpec()
    data_dir: Path = Path("data")
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")
    episodes: int = Field(2000, ge=1)
    train_fraction: float = Field(0.8, ge=0.0, le=1.0)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(16, ge=1)
    eval_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def check_geometry(self):
        if self.world.timesteps > self.model.temporal_buckets:
            raise ValueError(
                f"world spans {self.world.timesteps} time steps but the model "
                f"has {self.model.temporal_buckets} temporal buckets"
            )
        return self


def flatten(run: RunConfig) -> Dict[str, str]:
    """
    Dotted key -> string value, lists joined by commas and None as
    an empty value.
    """

    flat = {}

    def visit(prefix: str, value):
        if isinstance(value, dict):
            for key, item in value.items():
                visit(f"{prefix}{key}." if isinstance(item, dict) else f"{prefix}{key}", item)
        elif isinstance(value, list):
            flat[prefix] = ",".join(str(item) for item in value)
        elif value is None:
            flat[prefix] = ""
        else:
            flat[prefix] = str(value)

    visit("", run.model_dump(mode="json"))
    return flat


def unflatten(flat: Dict[str, Optional[str]]) -> dict:
    """
    Turns dotted key=value pairs back into nested dicts. Empty values
    become None and list fields are split on commas.

    Args:
        flat: Mapping as read from a run.conf file

    Returns:
        Nested dict ready for RunConfig validation
    """

    nested: dict = {}

    for key, value in flat.items():
        if value is None or value == "":
            value = None
        elif key in LIST_FIELDS:
            value = [item.strip() for item in value.split(",") if item.strip()]

        *parents, leaf = key.split(".")
        node = nested

        for parent in parents:
            node = node.setdefault(parent, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key} clashes with a scalar setting")

        if value is not None or leaf in ("vocab_size", "event_weights"):
            node[leaf] = value

    return nested


class ConfigHandler(ABC):
    """
    Abstract base class for sources of run configuration values.
    """

    @abstractmethod
    def can_operate(self):
        """
        Checks that the source exists before values are read.
        """
        pass

    @abstractmethod
    def get_values(self):
        """
        Returns the raw dotted key -> string values of the source.
        """
        pass


class FileConfig(ConfigHandler):
    """
    Reads a key=value file.
    """

    def __init__(self, path):
        self.path = Path(path)

    def can_operate(self):
        return self.path.is_file()

    def get_values(self):
        return dict(dotenv_values(str(self.path)))


class DefaultConfig(ConfigHandler):
    """
    No file: every setting keeps its default.
    """

    def __init__(self, path=None):
        self.path = path

    def can_operate(self):
        return True

    def get_values(self):
        return {}


HANDLERS = {"file": FileConfig, "default": DefaultConfig}


class RunConfigLoader:
    """
    Picks a handler for the given path and builds a validated
    RunConfig from its values and any overrides.
    """

    def __init__(self, path=None):
        source = "default" if path is None else "file"
        self.handler = HANDLERS[source](path)

        if not self.handler.can_operate():
            raise ConfigError(f"Unable to find config {path}")

    def load(self, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
        """
        Args:
            overrides: Dotted key -> value pairs that win over the file

        Returns:
            Validated RunConfig
        """

        values = self.handler.get_values()
        values.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})

        run = RunConfig(**unflatten(values))
        logger.debug("config loaded source=%s keys=%d", type(self.handler).__name__, len(values))
        return run


def cli_overrides(seed: Optional[int] = None, variant: Optional[str] = None) -> Dict[str, str]:
    """
    A command-line seed applies to the run, the model and the world.
    """

    overrides = {}

    if seed is not None:
        overrides.update({key: str(seed) for key in SEED_KEYS})

    if variant is not None:
        overrides["model.variant"] = variant

    return overrides


def dump_run_config(run: RunConfig, path) -> Path:
    """
    Writes the resolved configuration as one key=value line per
    setting.

    Args:
        run: Configuration to write
        path: Destination file

    Returns:
        The path written
    """

    path = Path(path)
    path.write_text("".join(f"{key}={value}\n" for key, value in flatten(run).items()))
    return path


def load_run_config(path) -> RunConfig:
    """
    Reads a run.conf file written by dump_run_config (or by hand).

    Args:
        path: Source file
    """

    return RunConfigLoader(path).load()
