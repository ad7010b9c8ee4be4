"""
Tests the feature file, checkpoint and trace containers in storage.py
"""

import struct

import numpy as np
import pytest

from r3_captioner.errors import FormatError, RecordValidationError
from r3_captioner.metrics import GenerationTrace
from r3_captioner.model import R3Captioner, R3Config, make_batch, train_step, training_loss
from r3_captioner.optim import Adam
from r3_captioner.storage import (
    load_checkpoint,
    load_feature_file,
    load_traces,
    read_split_manifest,
    restore,
    save_checkpoint,
    save_feature_file,
    save_traces,
    write_split_manifest,
)
from r3_captioner.world import EpisodeRecord, Vocabulary, WorldSpec, generate_dataset

SPEC = WorldSpec(max_events=2, seed=6)


@pytest.fixture()
def records():
    return generate_dataset(SPEC, 3)


@pytest.fixture()
def config():
    return R3Config(
        d_model=8,
        d_k=4,
        heads=2,
        roles=3,
        encoder_layers=1,
        decoder_layers=1,
        feedforward=16,
        vocab_size=len(Vocabulary.from_spec(SPEC)),
        init_std=0.3,
        learning_rate=1e-2,
    )


class TestFeatureFile:
    """
    Tests writing and reading episode records.
    """

    def test_round_trip(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        loaded = load_feature_file(path)

        assert len(loaded) == len(records)

        for before, after in zip(records, loaded):
            assert np.array_equal(before.features, after.features)
            assert np.array_equal(before.positions, after.positions)
            assert before.caption == after.caption
            assert before.pos_tags == after.pos_tags
            assert before.seed == after.seed

    def test_bitwise_stable(self, tmp_path, records):
        first, second = tmp_path / "a.r3f", tmp_path / "b.r3f"
        save_feature_file(first, records)
        save_feature_file(second, load_feature_file(first))

        assert first.read_bytes() == second.read_bytes()

    def test_uncaptioned_records(self, tmp_path, records):
        bare = [
            EpisodeRecord(features=r.features, positions=r.positions, seed=r.seed)
            for r in records
        ]
        path = tmp_path / "bare.r3f"
        save_feature_file(path, bare)

        assert all(r.caption is None and r.pos_tags is None for r in load_feature_file(path))

    def test_header_layout(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        raw = path.read_bytes()

        assert raw[:4] == b"R3VF"
        assert struct.unpack("<HII", raw[4:14]) == (1, 3, 32)

    def test_box_outside_unit_square(self, tmp_path, records):
        """
        A corrupted x1 of the first token is reported with the index
        of its record.
        """

        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        raw = bytearray(path.read_bytes())
        raw[50:58] = struct.pack("<d", 1.5)
        path.write_bytes(bytes(raw))

        with pytest.raises(RecordValidationError) as error:
            load_feature_file(path)

        assert error.value.index == 0

    def test_bad_magic(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])

        with pytest.raises(FormatError):
            load_feature_file(path)

    def test_truncated(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        path.write_bytes(path.read_bytes()[:-3])

        with pytest.raises(FormatError):
            load_feature_file(path)

    def test_trailing_bytes(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        path.write_bytes(path.read_bytes() + b"\x00")

        with pytest.raises(FormatError):
            load_feature_file(path)

    def test_unsupported_version(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)
        raw = bytearray(path.read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        path.write_bytes(bytes(raw))

        with pytest.raises(FormatError):
            load_feature_file(path)


class TestCheckpoint:
    """
    Tests saving and restoring training state.
    """

    def test_forward_bitwise_identical(self, tmp_path, records, config):
        model = R3Captioner(config)
        optimizer = Adam(model.named_parameters(), lr=config.learning_rate)
        rng = np.random.default_rng(0)
        batch = make_batch(records, config)
        train_step(model, optimizer, batch, rng)

        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, optimizer, rng)
        restored, restored_optimizer, restored_rng = restore(load_checkpoint(path))

        before = training_loss(model, batch, rng=3, training=False).total.item()
        after = training_loss(restored, batch, rng=3, training=False).total.item()

        assert before == after
        assert restored_optimizer.step_count == 1
        assert restored_rng.random() == rng.random()

    def test_checkpoint_contents(self, tmp_path, config):
        model = R3Captioner(config)
        optimizer = Adam(model.named_parameters(), lr=config.learning_rate)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, optimizer, np.random.default_rng(1))

        checkpoint = load_checkpoint(path)

        assert checkpoint.config == config
        assert checkpoint.step == 0
        assert set(checkpoint.params) == set(model.named_parameters())
        assert set(checkpoint.adam_m) == set(checkpoint.params)

    def test_resume_matches_uninterrupted(self, tmp_path, records, config):
        """
        Stopping after two steps and resuming from the checkpoint
        gives the same losses as running four steps straight.
        """

        batch = make_batch(records, config)

        model = R3Captioner(config)
        optimizer = Adam(model.named_parameters(), lr=config.learning_rate)
        rng = np.random.default_rng(5)
        straight = [train_step(model, optimizer, batch, rng).total for _ in range(4)]

        model = R3Captioner(config)
        optimizer = Adam(model.named_parameters(), lr=config.learning_rate)
        rng = np.random.default_rng(5)
        resumed = [train_step(model, optimizer, batch, rng).total for _ in range(2)]

        path = tmp_path / "step2.ckpt"
        save_checkpoint(path, model, optimizer, rng)
        model, optimizer, rng = restore(load_checkpoint(path))
        resumed += [train_step(model, optimizer, batch, rng).total for _ in range(2)]

        assert resumed == straight

    def test_wrong_container(self, tmp_path, records):
        path = tmp_path / "episodes.r3f"
        save_feature_file(path, records)

        with pytest.raises(FormatError):
            load_checkpoint(path)


class TestTraces:
    """
    Tests the generation trace dump.
    """

    @pytest.fixture()
    def traces(self):
        return [
            GenerationTrace(
                example_id=4,
                generated_ids=[3, 5],
                generated_words=["the", "red"],
                generated_tags=["DET", "ADJ"],
                reference_ids=[3, 5, 6],
                reference_words=["the", "red", "cube"],
                reference_tags=["DET", "ADJ", "NOUN"],
                roles={"dec0.cross": [[0, 1], [2, 2]]},
                encoder_roles={"enc0.self": [[1, 1]]},
            )
        ]

    def test_round_trip(self, tmp_path, traces):
        path = tmp_path / "traces.jsonl"
        save_traces(path, traces)

        assert load_traces(path) == traces

    def test_header_required(self, tmp_path):
        path = tmp_path / "traces.jsonl"
        path.write_text('{"format": "something-else", "version": 1}\n')

        with pytest.raises(FormatError):
            load_traces(path)

    def test_bad_line(self, tmp_path, traces):
        path = tmp_path / "traces.jsonl"
        save_traces(path, traces)
        path.write_text(path.read_text() + '{"example_id": "x"}\n')

        with pytest.raises(FormatError):
            load_traces(path)

    def test_misaligned_roles_rejected(self):
        with pytest.raises(ValueError):
            GenerationTrace(
                example_id=0,
                generated_ids=[3],
                generated_words=["the"],
                roles={"dec0.self": [[0], [1]]},
            )


class TestSplitManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "splits.txt"
        write_split_manifest(path, {"train": [3, 0, 2], "eval": [1]})

        assert read_split_manifest(path) == {"train": [3, 0, 2], "eval": [1]}

    def test_empty_split(self, tmp_path):
        path = tmp_path / "splits.txt"
        write_split_manifest(path, {"train": [0, 1], "eval": []})

        assert read_split_manifest(path)["eval"] == []

    def test_malformed(self, tmp_path):
        path = tmp_path / "splits.txt"
        path.write_text("train 1,2\n")

        with pytest.raises(FormatError):
            read_split_manifest(path)
