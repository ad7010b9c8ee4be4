"""
Tests the commands in cli.py end to end on a tiny configuration
"""

import json
import logging

import pytest
from typer.testing import CliRunner

from r3_captioner.cli import app
from r3_captioner.metrics import GenerationTrace
from r3_captioner.storage import load_checkpoint, load_feature_file, load_traces, save_traces

runner = CliRunner()

SETTINGS = {
    "model.d_model": "8",
    "model.d_k": "4",
    "model.heads": "2",
    "model.roles": "4",
    "model.encoder_layers": "1",
    "model.decoder_layers": "1",
    "model.feedforward": "16",
    "model.learning_rate": "0.01",
    "world.max_events": "2",
    "episodes": "10",
    "train_fraction": "0.8",
    "steps": "4",
    "batch_size": "4",
    "eval_every": "2",
    "log_every": "1",
}


def invoke(*args):
    """
    Runs one command and detaches the log handlers it installed, since
    they point at the runner's captured streams.
    """

    result = runner.invoke(app, [str(arg) for arg in args])

    package = logging.getLogger("r3_captioner")
    for handler in list(package.handlers):
        package.removeHandler(handler)
        handler.close()

    return result


def write_config(directory, **overrides):
    settings = {
        **SETTINGS,
        "data_dir": str(directory / "data"),
        "checkpoint_dir": str(directory / "checkpoints"),
        "report_dir": str(directory / "reports"),
        **overrides,
    }
    path = directory / "run.conf"
    path.write_text("".join(f"{key}={value}\n" for key, value in settings.items()))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """
    Generates data and trains once for the whole module.
    """

    directory = tmp_path_factory.mktemp("run")
    config = write_config(directory)

    generated = invoke("gen-data", "--config", config)
    trained = invoke("train", "--config", config)

    return directory, config, generated, trained


class TestGenData:
    """
    Tests the gen-data command.
    """

    def test_outputs(self, workspace):
        directory, _, generated, _ = workspace
        data = directory / "data"

        assert generated.exit_code == 0
        assert "records=10" in generated.output
        assert "train=8 eval=2" in generated.output

        for name in ("episodes.r3f", "train.r3f", "eval.r3f", "splits.txt", "run.conf"):
            assert (data / name).is_file()

        assert len(load_feature_file(data / "train.r3f")) == 8

    def test_strata_counts(self, workspace):
        _, _, generated, _ = workspace

        assert "min1=10" in generated.output
        assert "min3=0" in generated.output

    def test_seed_changes_data(self, tmp_path):
        config = write_config(tmp_path)
        invoke("gen-data", "--config", config, "--out", tmp_path / "a")
        invoke("gen-data", "--config", config, "--seed", 5, "--out", tmp_path / "b")

        first = load_feature_file(tmp_path / "a" / "episodes.r3f")
        second = load_feature_file(tmp_path / "b" / "episodes.r3f")

        assert [r.seed for r in first] != [r.seed for r in second]

    def test_missing_config(self, tmp_path):
        result = invoke("gen-data", "--config", tmp_path / "absent.conf")

        assert result.exit_code == 1
        assert "error" in result.output


class TestTrain:
    """
    Tests the train command.
    """

    def test_outputs(self, workspace):
        directory, _, _, trained = workspace
        checkpoints = directory / "checkpoints"

        assert trained.exit_code == 0
        assert "step=4 token_accuracy=" in trained.output

        for name in ("step000000.ckpt", "step000002.ckpt", "step000004.ckpt", "latest.ckpt"):
            assert (checkpoints / name).is_file()

        assert load_checkpoint(checkpoints / "latest.ckpt").step == 4

    def test_loss_log(self, workspace):
        directory, _, _, _ = workspace
        lines = (directory / "checkpoints" / "loss.log").read_text().splitlines()

        assert [line.split()[0] for line in lines] == ["step=1", "step=2", "step=3", "step=4"]
        assert all(" l_q=" in line for line in lines)

    def test_resume_matches_uninterrupted(self, workspace, tmp_path):
        """
        Two steps, then two more from the checkpoint, log the same
        losses as the four-step run.
        """

        directory, _, _, _ = workspace
        data = directory / "data"

        config = write_config(tmp_path, steps="2")
        first = invoke("train", "--config", config, "--data", data)

        config = write_config(tmp_path, steps="4")
        latest = tmp_path / "checkpoints" / "latest.ckpt"
        second = invoke("train", "--config", config, "--data", data, "--resume", latest)

        assert first.exit_code == 0
        assert second.exit_code == 0

        resumed = (tmp_path / "checkpoints" / "loss.log").read_text()
        straight = (directory / "checkpoints" / "loss.log").read_text()

        assert resumed == straight

    def test_baseline_variant(self, workspace, tmp_path):
        directory, _, _, _ = workspace
        config = write_config(tmp_path, steps="1")

        result = invoke(
            "train", "--config", config, "--variant", "baseline", "--data", directory / "data"
        )

        assert result.exit_code == 0
        assert " l_q=0.0" in (tmp_path / "checkpoints" / "loss.log").read_text()

    def test_unknown_variant(self, workspace, tmp_path):
        directory, _, _, _ = workspace
        config = write_config(tmp_path)

        result = invoke(
            "train", "--config", config, "--variant", "lstm", "--data", directory / "data"
        )

        assert result.exit_code == 1
        assert "error" in result.output

    def test_missing_data(self, tmp_path):
        config = write_config(tmp_path)

        result = invoke("train", "--config", config)

        assert result.exit_code == 1


class TestGenerateEvaluate:
    """
    Tests generation, evaluation and role analysis on the trained run.
    """

    @pytest.fixture()
    def traces(self, workspace, tmp_path):
        directory, config, _, _ = workspace
        out = tmp_path / "traces.jsonl"

        result = invoke(
            "generate",
            directory / "checkpoints" / "latest.ckpt",
            directory / "data" / "eval.r3f",
            "--out",
            out,
            "--config",
            config,
            "--max-len",
            12,
        )

        assert result.exit_code == 0
        assert "traces=2" in result.output
        return out

    def test_trace_contents(self, traces):
        dump = load_traces(traces)

        assert [t.example_id for t in dump] == [0, 1]
        assert all(len(t.generated_ids) <= 12 for t in dump)
        assert all(t.reference_words for t in dump)
        assert all(set(t.encoder_roles) == {"enc0.self"} for t in dump)

    def test_evaluate(self, traces, tmp_path):
        out = tmp_path / "reports"
        result = invoke("evaluate", traces, "--out", out)

        assert result.exit_code == 0
        assert "count=2" in result.output
        assert (out / "report.txt").read_text().splitlines()[0] == "count=2"

    def test_evaluate_single_stratum(self, traces, tmp_path):
        result = invoke("evaluate", traces, "--min-predicates", 1, "--out", tmp_path)

        assert result.exit_code == 0
        assert "min1.count=2" in result.output
        assert "min2.count" not in result.output

    def test_compare_with_itself(self, traces, tmp_path):
        result = invoke("evaluate", traces, "--compare", traces, "--out", tmp_path)

        assert result.exit_code == 0
        assert (tmp_path / "improvement.csv").is_file()
        assert (tmp_path / "baseline_report.txt").is_file()
        assert "improvement.all.bleu4=" in result.output

    def test_compare_different_examples(self, traces, tmp_path):
        dump = load_traces(traces)
        other = tmp_path / "other.jsonl"
        save_traces(other, [dump[0].model_copy(update={"example_id": 7}), dump[1]])

        result = invoke("evaluate", traces, "--compare", other, "--out", tmp_path)

        assert result.exit_code == 1
        assert "error" in result.output

    def test_references_from_feature_file(self, workspace, traces, tmp_path):
        directory, config, _, _ = workspace
        bare = tmp_path / "bare.jsonl"
        save_traces(
            bare,
            [
                t.model_copy(update={"reference_ids": None, "reference_words": None})
                for t in load_traces(traces)
            ],
        )

        result = invoke(
            "evaluate",
            bare,
            "--refs",
            directory / "data" / "eval.r3f",
            "--config",
            config,
            "--out",
            tmp_path / "reports",
        )

        assert result.exit_code == 0
        assert "count=2" in result.output

    def test_analyze_roles(self, traces, tmp_path):
        dump = load_traces(traces)
        result = invoke("analyze-roles", traces, "--site", "dec0.cross", "--out", tmp_path)

        if not any(t.generated_ids for t in dump):
            assert result.exit_code == 1
            return

        assert result.exit_code == 0
        assert "mean_probability=" in result.output
        header = (tmp_path / "roles.csv").read_text().splitlines()[0]
        assert header == "word,role,probability,frequency,pos_tag"
        assert (tmp_path / "word_frequency.csv").is_file()

    def test_analyze_roles_empty_dump(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        save_traces(path, [])

        result = invoke("analyze-roles", path, "--out", tmp_path)

        assert result.exit_code == 1
        assert "error" in result.output

    def test_analyze_roles_unknown_site(self, tmp_path):
        path = tmp_path / "dump.jsonl"
        trace = GenerationTrace(
            example_id=0,
            generated_ids=[3],
            generated_words=["the"],
            roles={"dec0.cross": [[1, 0]]},
        )
        save_traces(path, [trace])

        result = invoke("analyze-roles", path, "--site", "dec9.self", "--out", tmp_path)

        assert result.exit_code == 1

    def test_not_a_trace_dump(self, tmp_path):
        path = tmp_path / "dump.jsonl"
        path.write_text(json.dumps({"format": "csv"}) + "\n")

        result = invoke("evaluate", path, "--out", tmp_path)

        assert result.exit_code == 1
