"""
On-disk containers: feature files of episode records, model
checkpoints and generation trace dumps. Byte layouts are described
in FORMATS.md; every binary field is little-endian.

Typical Usage:

>>> from r3_captioner.storage import save_feature_file, load_feature_file
>>> save_feature_file("episodes.r3f", records)
>>> records = load_feature_file("episodes.r3f")
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, NamedTuple
import json
import logging
import struct

import numpy as np
from pydantic import ValidationError

from r3_captioner.errors import FormatError, RecordValidationError
from r3_captioner.metrics import GenerationTrace
from r3_captioner.model import R3Captioner, R3Config
from r3_captioner.optim import Adam
from r3_captioner.world import POS_TAGS, EpisodeRecord

logger = logging.getLogger(__name__)


class _Cursor:
    """
    Sequential reader over a byte buffer that raises FormatError
    instead of reading past the end.
    """

    def __init__(self, buffer: bytes, name: str):
        self.buffer = buffer
        self.name = name
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.buffer):
            raise FormatError(
                f"{self.name}: truncated at byte {self.offset}, needed {size} more"
            )

        chunk = self.buffer[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return values[0] if len(values) == 1 else values

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def finish(self):
        if self.offset != len(self.buffer):
            raise FormatError(
                f"{self.name}: {len(self.buffer) - self.offset} trailing bytes"
            )


class Container(ABC):
    """
    Abstract base class for a versioned binary container that starts
    with a four byte magic and a u16 version.
    """

    magic: bytes = b""
    version: int = 1

    def save(self, path, payload):
        """
        Encodes payload and writes it to path.
        """

        body = self.encode(payload)
        Path(path).write_bytes(self.magic + struct.pack("<H", self.version) + body)
        logger.debug("container written kind=%s path=%s bytes=%d", self.kind, path, len(body))

    def load(self, path):
        """
        Reads path, checks magic and version and decodes the rest.
        """

        cursor = _Cursor(Path(path).read_bytes(), str(path))
        magic = cursor.take(len(self.magic))

        if magic != self.magic:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {self.magic!r}")

        version = cursor.unpack("H")

        if version != self.version:
            raise FormatError(f"{path}: unsupported {self.kind} version {version}")

        payload = self.decode(cursor)
        cursor.finish()
        return payload

    @property
    def kind(self) -> str:
        return type(self).__name__

    @abstractmethod
    def encode(self, payload) -> bytes:
        """
        Serializes everything after the version field.
        """
        pass

    @abstractmethod
    def decode(self, cursor: _Cursor):
        """
        Parses everything after the version field.
        """
        pass


class FeatureFile(Container):
    """
    Episode records: u32 count, u32 d_feat, then per record u64 seed,
    u32 token count, per token 5 position and d_feat feature float64s,
    and an optional caption block.
    """

    magic = b"R3VF"

    def encode(self, records: List[EpisodeRecord]) -> bytes:
        d_feat = records[0].features.shape[1] if records else 0
        parts = [struct.pack("<II", len(records), d_feat)]

        for record in records:
            if record.features.shape[1] != d_feat:
                raise FormatError("all records of a feature file need the same d_feat")

            tokens = np.concatenate([record.positions, record.features], axis=1)
            parts.append(struct.pack("<QI", record.seed, tokens.shape[0]))
            parts.append(tokens.astype("<f8").tobytes())

            if record.caption is None:
                parts.append(struct.pack("<B", 0))
                continue

            parts.append(struct.pack("<BI", 1, len(record.caption)))
            parts.append(np.asarray(record.caption, dtype="<u4").tobytes())
            parts.append(struct.pack("<I", len(record.pos_tags)))
            parts.append(bytes(POS_TAGS.index(tag) for tag in record.pos_tags))

        return b"".join(parts)

    def decode(self, cursor: _Cursor) -> List[EpisodeRecord]:
        count, d_feat = cursor.unpack("II")
        records = []

        for index in range(count):
            seed, n_tokens = cursor.unpack("QI")
            tokens = cursor.floats(n_tokens * (5 + d_feat)).reshape(n_tokens, 5 + d_feat)
            caption = tags = None

            if cursor.unpack("B"):
                length = cursor.unpack("I")
                caption = np.frombuffer(cursor.take(4 * length), dtype="<u4").tolist()
                length = cursor.unpack("I")
                codes = cursor.take(length)

                if any(code >= len(POS_TAGS) for code in codes):
                    raise RecordValidationError(index, "unknown pos tag code")

                tags = [POS_TAGS[code] for code in codes]

            try:
                records.append(
                    EpisodeRecord(
                        features=tokens[:, 5:],
                        positions=tokens[:, :5],
                        caption=caption,
                        pos_tags=tags,
                        seed=seed,
                    )
                )
            except ValidationError as error:
                reason = "; ".join(e["msg"] for e in error.errors())
                raise RecordValidationError(index, reason) from error

        return records


class Checkpoint(NamedTuple):
    config: R3Config
    step: int
    rng_state: dict
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]


class CheckpointFile(Container):
    """
    u32 length + JSON config, u64 step, u32 length + JSON rng state,
    u32 block count, then named float64 blocks: u16 name length,
    utf-8 name, u8 rank, u32 per dimension, data.
    """

    magic = b"R3CK"

    @staticmethod
    def _text(value: str) -> bytes:
        raw = value.encode("utf-8")
        return struct.pack("<I", len(raw)) + raw

    def encode(self, checkpoint: Checkpoint) -> bytes:
        blocks = {f"param/{k}": v for k, v in checkpoint.params.items()}
        blocks.update({f"adam_m/{k}": v for k, v in checkpoint.adam_m.items()})
        blocks.update({f"adam_v/{k}": v for k, v in checkpoint.adam_v.items()})

        parts = [
            self._text(checkpoint.config.model_dump_json()),
            struct.pack("<Q", checkpoint.step),
            self._text(json.dumps(checkpoint.rng_state)),
            struct.pack("<I", len(blocks)),
        ]

        for name, array in blocks.items():
            raw = name.encode("utf-8")
            array = np.asarray(array, dtype=np.float64)
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
            parts.append(array.astype("<f8").tobytes())

        return b"".join(parts)

    def decode(self, cursor: _Cursor) -> Checkpoint:
        try:
            config = R3Config.model_validate_json(cursor.take(cursor.unpack("I")))
        except ValidationError as error:
            raise FormatError(f"{cursor.name}: invalid config block: {error}") from error

        step = cursor.unpack("Q")
        rng_state = json.loads(cursor.take(cursor.unpack("I")).decode("utf-8"))
        sections = {"param": {}, "adam_m": {}, "adam_v": {}}

        for _ in range(cursor.unpack("I")):
            name = cursor.take(cursor.unpack("H")).decode("utf-8")
            ndim = cursor.unpack("B")
            shape = tuple(struct.unpack(f"<{ndim}I", cursor.take(4 * ndim)))
            data = cursor.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)

            section, _, key = name.partition("/")
            if section not in sections:
                raise FormatError(f"{cursor.name}: unknown block {name!r}")
            sections[section][key] = data

        return Checkpoint(
            config, step, rng_state, sections["param"], sections["adam_m"], sections["adam_v"]
        )


CONTAINERS = {"features": FeatureFile, "checkpoint": CheckpointFile}


def save_feature_file(path, records: List[EpisodeRecord]):
    """
    Writes records to a feature file.

    Args:
        path: Destination file
        records: Records sharing one feature width
    """

    CONTAINERS["features"]().save(path, records)


def load_feature_file(path) -> List[EpisodeRecord]:
    """
    Reads and validates every record of a feature file.

    Args:
        path: Source file
    """

    records = CONTAINERS["features"]().load(path)
    logger.info("feature file loaded path=%s records=%d", path, len(records))
    return records


def rng_state(rng: np.random.Generator) -> dict:
    """
    JSON-ready state of the generator's bit generator.
    """

    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    """
    Rebuilds a generator that continues the stream state was taken
    from.

    Args:
        state: Output of rng_state
    """

    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def save_checkpoint(path, model: R3Captioner, optimizer: Adam, rng: np.random.Generator):
    """
    Writes parameters, Adam moments, the optimizer step and the
    training rng state.
    """

    state = optimizer.state_dict()
    checkpoint = Checkpoint(
        config=model.config,
        step=state["step"],
        rng_state=rng_state(rng),
        params={name: p.data for name, p in model.named_parameters().items()},
        adam_m=state["m"],
        adam_v=state["v"],
    )

    CONTAINERS["checkpoint"]().save(path, checkpoint)
    logger.info("checkpoint saved path=%s step=%d", path, checkpoint.step)


def load_checkpoint(path) -> Checkpoint:
    """
    Reads a checkpoint without building a model from it.

    Args:
        path: Source file
    """

    return CONTAINERS["checkpoint"]().load(path)


def restore(checkpoint: Checkpoint):
    """
    Rebuilds (model, optimizer, rng) from a checkpoint.
    """

    model = R3Captioner(checkpoint.config)
    model.load_parameters(checkpoint.params)

    optimizer = Adam(model.named_parameters(), lr=checkpoint.config.learning_rate)
    optimizer.load_state_dict(
        {"step": checkpoint.step, "m": checkpoint.adam_m, "v": checkpoint.adam_v}
    )

    return model, optimizer, restore_rng(checkpoint.rng_state)


TRACE_FORMAT = "r3-trace"
TRACE_VERSION = 1


def save_traces(path, traces: List[GenerationTrace]):
    """
    JSON lines: a header object, then one trace per line.
    """

    header = json.dumps({"format": TRACE_FORMAT, "version": TRACE_VERSION})
    lines = [header] + [trace.model_dump_json() for trace in traces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_traces(path) -> List[GenerationTrace]:
    lines = Path(path).read_text().splitlines()

    try:
        header = json.loads(lines[0]) if lines else None
    except json.JSONDecodeError as error:
        raise FormatError(f"{path}: unreadable trace header") from error

    if not isinstance(header, dict) or header.get("format") != TRACE_FORMAT:
        raise FormatError(f"{path}: not a trace dump")

    if header.get("version") != TRACE_VERSION:
        raise FormatError(f"{path}: unsupported trace version {header.get('version')}")

    traces = []

    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            traces.append(GenerationTrace.model_validate_json(line))
        except ValidationError as error:
            raise FormatError(f"{path}: line {number}: {error}") from error

    return traces


def read_split_manifest(path) -> Dict[str, List[int]]:
    """
    Parses key=value lines of comma-separated record indices.
    """

    splits = {}

    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        splits[key.strip()] = [int(i) for i in value.split(",") if i.strip()]

    return splits


def write_split_manifest(path, splits: Dict[str, List[int]]):
    lines = [f"{key}={','.join(str(i) for i in indices)}" for key, indices in splits.items()]
    Path(path).write_text("\n".join(lines) + "\n")
