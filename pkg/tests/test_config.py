"""
Tests the run configuration handlers in config.py
"""

from pathlib import Path

import pytest
from pydantic import ValidationError

from r3_captioner.config import (
    DefaultConfig,
    FileConfig,
    RunConfig,
    RunConfigLoader,
    cli_overrides,
    dump_run_config,
    flatten,
    load_run_config,
    unflatten,
)
from r3_captioner.errors import ConfigError


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(
        "\n".join(
            [
                "# small desk run",
                "model.d_model=16",
                "model.heads=2",
                "model.d_k=8",
                "world.actions=stir,cut",
                "world.max_events=2",
                "steps=10",
                "data_dir=somewhere",
            ]
        )
    )
    return path


class TestHandlers:
    """
    Tests the configuration sources.
    """

    def test_file_handler(self, config_file):
        handler = FileConfig(config_file)

        assert handler.can_operate() is True
        assert handler.get_values()["model.d_model"] == "16"

    def test_missing_file(self, tmp_path):
        assert FileConfig(tmp_path / "absent.conf").can_operate() is False

    def test_default_handler(self):
        handler = DefaultConfig()

        assert handler.can_operate() is True
        assert handler.get_values() == {}


class TestRunConfigLoader:
    """
    Tests building validated run configurations.
    """

    def test_defaults(self):
        run = RunConfigLoader().load()

        assert run == RunConfig()
        assert run.model.d_model == 128
        assert run.world.grid == 3

    def test_file_values(self, config_file):
        run = RunConfigLoader(config_file).load()

        assert run.model.d_model == 16
        assert run.world.actions == ["stir", "cut"]
        assert run.steps == 10
        assert run.data_dir == Path("somewhere")

    def test_overrides_win(self, config_file):
        run = RunConfigLoader(config_file).load({"steps": "3", "model.heads": None})

        assert run.steps == 3
        assert run.model.heads == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfigLoader(tmp_path / "absent.conf")

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text("model.width=3\n")

        with pytest.raises(ValidationError):
            RunConfigLoader(path).load()

    def test_geometry_checked(self, tmp_path):
        """
        The world may not span more time steps than the model has
        temporal buckets.
        """

        path = tmp_path / "run.conf"
        path.write_text("world.slots=20\nmodel.temporal_buckets=50\n")

        with pytest.raises(ValidationError):
            RunConfigLoader(path).load()

    def test_scalar_clash(self):
        with pytest.raises(ConfigError):
            unflatten({"model": "3", "model.d_k": "4"})


class TestOverrides:
    def test_seed_applies_everywhere(self):
        run = RunConfigLoader().load(cli_overrides(seed=9))

        assert (run.seed, run.model.seed, run.world.seed) == (9, 9, 9)

    def test_variant(self):
        assert cli_overrides(variant="baseline") == {"model.variant": "baseline"}

    def test_nothing(self):
        assert cli_overrides() == {}


class TestDump:
    """
    Tests writing resolved configurations.
    """

    def test_flatten(self):
        flat = flatten(RunConfig())

        assert flat["model.d_model"] == "128"
        assert flat["model.vocab_size"] == ""
        assert flat["world.actions"] == "move-to,pick-up,place-on,stir,cut,combine"

    def test_round_trip(self, tmp_path, config_file):
        run = RunConfigLoader(config_file).load(cli_overrides(seed=4, variant="baseline"))
        path = dump_run_config(run, tmp_path / "resolved.conf")

        assert load_run_config(path) == run

    def test_event_weights_round_trip(self, tmp_path):
        run = RunConfigLoader().load({"world.event_weights": "1,2,3,4"})
        path = dump_run_config(run, tmp_path / "resolved.conf")

        assert load_run_config(path).world.event_weights == [1.0, 2.0, 3.0, 4.0]
