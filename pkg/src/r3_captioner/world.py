"""
A small synthetic world of coloured objects acted upon over time,
rendered as voxel-feature tokens and described by a closed grammar.

Each episode holds one to four events. An event occupies a window of
a 3 x 3 spatial grid over two temporal slots, giving 18 tokens per
window. The caption names every event in order, and every word
carries the part-of-speech tag the grammar assigned it.

Typical Usage:

>>> from r3_captioner.world import WorldSpec, Vocabulary, generate_episode
>>> spec = WorldSpec(seed=7)
>>> record = generate_episode(spec, seed=7)
>>> words = Vocabulary.from_spec(spec).detokenize(record.caption)
"""

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.model_selection import train_test_split
from sklearn.utils import shuffle

from r3_captioner.errors import ConfigError, ContractError, VocabularyError
from r3_captioner.positions import iter_boxes

logger = logging.getLogger(__name__)

PAD, EOS, MASK = "<pad>", "</s>", "<mask>"
PAD_ID, EOS_ID, MASK_ID = 0, 1, 2
SPECIAL_IDS = (PAD_ID, EOS_ID, MASK_ID)

POS_TAGS = ("NOUN", "VERB", "DET", "ADP", "ADJ", "OTHER")

# action -> (predicate word, optional particle)
ACTIONS: Dict[str, Tuple[str, Optional[str]]] = {
    "move-to": ("moves", "to"),
    "pick-up": ("picks", "up"),
    "place-on": ("drops", "onto"),
    "stir": ("stirs", None),
    "cut": ("cuts", None),
    "combine": ("mixes", "with"),
}

# the agent ends the window in the patient's cell
TRAVELLING_ACTIONS = ("move-to", "place-on")

COLORS = ("red", "blue", "green", "yellow", "white", "black", "orange", "purple")
SHAPES = ("cube", "ball", "plate", "bowl", "cup", "knife", "spoon", "pot", "pan", "board")

FEATURE_DIM = 32
SHAPE_SLICE = slice(0, 10)
COLOR_SLICE = slice(10, 18)
ACTION_SLICE = slice(18, 24)
AGENT_CHANNEL, PATIENT_CHANNEL, DISTRACTOR_CHANNEL, PHASE_CHANNEL = 24, 25, 26, 27
EVENT_SLICE = slice(28, 32)
MAX_EVENTS = 4


class WorldSpec(BaseModel):
    """
    Parameters of the synthetic world.

    Args:
        grid: Cells per side of the spatial grid
        slots: Temporal slots per event window
        colors / shapes: Entity attribute lexicon
        actions: Predicate inventory, a subset of ACTIONS
        max_events: Upper bound on events per episode
        event_weights: Relative probability of 1..max_events events
        distractor_prob: Chance of an uninvolved entity per event
        feature_noise: Std of gaussian noise added to features
        seed: Base seed of generate_dataset
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    grid: int = Field(3, ge=1)
    slots: int = Field(2, ge=1)
    colors: List[str] = list(COLORS)
    shapes: List[str] = list(SHAPES)
    actions: List[str] = list(ACTIONS)
    max_events: int = Field(MAX_EVENTS, ge=1, le=MAX_EVENTS)
    event_weights: Optional[List[float]] = None
    distractor_prob: float = Field(0.5, ge=0.0, le=1.0)
    feature_noise: float = Field(0.0, ge=0.0)
    seed: int = 0

    @field_validator("actions")
    @classmethod
    def check_actions(cls, value):
        if not value:
            raise ValueError("at least one action is required")

        unknown = [a for a in value if a not in ACTIONS]
        if unknown:
            raise ValueError(f"unknown actions {unknown}")

        return value

    @field_validator("colors")
    @classmethod
    def check_colors(cls, value):
        if not value or any(c not in COLORS for c in value):
            raise ValueError(f"colors must be a non-empty subset of {COLORS}")
        return value

    @field_validator("shapes")
    @classmethod
    def check_shapes(cls, value):
        if not value or any(s not in SHAPES for s in value):
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")
        return value

    @model_validator(mode="after")
    def check_world(self):
        if self.event_weights is not None:
            if len(self.event_weights) != self.max_events:
                raise ValueError("event_weights needs one entry per event count")
            if min(self.event_weights) < 0 or sum(self.event_weights) <= 0:
                raise ValueError("event_weights must be non-negative with a positive sum")

        # agent, patient and a distractor need distinct cells and identities
        if self.grid * self.grid < 3:
            raise ValueError("grid needs at least three cells")

        if len(self.colors) * len(self.shapes) < 3:
            raise ValueError("lexicon needs at least three distinct entities")

        return self

    @property
    def tokens_per_event(self) -> int:
        return self.grid * self.grid * self.slots

    @property
    def timesteps(self) -> int:
        return self.max_events * self.slots


class Entity(BaseModel):
    color: str
    shape: str


class Event(BaseModel):
    action: str
    agent: Entity
    patient: Entity


class EpisodeRecord(BaseModel):
    """
    One video/caption pair.

    features: float array [n_tokens, d_feat]
    positions: float array [n_tokens, 5] of (t, x0, y0, x1, y1)
    caption: word ids without EOS, or None for inference-only records
    pos_tags: one tag per caption word
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    positions: np.ndarray
    caption: Optional[List[int]] = None
    pos_tags: Optional[List[str]] = None
    seed: int = 0
    events: Optional[List[Event]] = None

    @field_validator("features", "positions", mode="before")
    @classmethod
    def as_float_array(cls, value):
        return np.asarray(value, dtype=np.float64)

    @field_validator("positions")
    @classmethod
    def check_positions(cls, value):
        if value.ndim != 2 or value.shape[1] != 5:
            raise ValueError(f"positions must be [n, 5], got {value.shape}")

        if value.shape[0] == 0:
            raise ValueError("a record needs at least one video token")

        t, x0, y0, x1, y1 = value.T

        if np.any(t < 0) or np.any(t != np.floor(t)):
            raise ValueError("timestamps must be non-negative integers")

        inside = (x0 >= 0) & (y0 >= 0) & (x1 <= 1) & (y1 <= 1) & (x0 <= x1) & (y0 <= y1)
        if not np.all(inside):
            bad = int(np.argmin(inside))
            raise ValueError(f"token {bad} box {value[bad, 1:].tolist()} leaves the unit square")

        return value

    @field_validator("pos_tags")
    @classmethod
    def check_tags(cls, value):
        if value is not None and any(tag not in POS_TAGS for tag in value):
            raise ValueError(f"pos tags must come from {POS_TAGS}")
        return value

    @model_validator(mode="after")
    def check_alignment(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ValueError(
                f"features {self.features.shape} do not align with positions "
                f"{self.positions.shape}"
            )

        if (self.caption is None) != (self.pos_tags is None):
            raise ValueError("caption and pos_tags must be given together")

        if self.caption is not None and len(self.caption) != len(self.pos_tags):
            raise ValueError("pos_tags length differs from caption length")

        return self

    @property
    def predicates(self) -> int:
        return 0 if self.pos_tags is None else self.pos_tags.count("VERB")


def action_words(action: str) -> List[Tuple[str, str]]:
    verb, particle = ACTIONS[action]
    words = [(verb, "VERB")]
    if particle is not None:
        words.append((particle, "ADP"))
    return words


def describe(events: Sequence[Event]) -> List[Tuple[str, str]]:
    """
    Renders events as (word, tag) pairs, joined by "then".
    """

    tagged = []

    for i, event in enumerate(events):
        if i:
            tagged.append(("then", "OTHER"))

        for entity in (event.agent, None, event.patient):
            if entity is None:
                tagged.extend(action_words(event.action))
            else:
                tagged.extend([("the", "DET"), (entity.color, "ADJ"), (entity.shape, "NOUN")])

    return tagged


class Vocabulary:
    """
    Closed word-level vocabulary. Ids 0, 1 and 2 are the pad (also
    used as beginning of sentence), end of sentence and mask tokens.
    """

    def __init__(self, words: Sequence[str], tags: Optional[Dict[str, str]] = None):
        self.words = [PAD, EOS, MASK] + [w for w in words if w not in (PAD, EOS, MASK)]
        self.ids = {word: i for i, word in enumerate(self.words)}
        self.tags = dict(tags or {})

        if len(self.ids) != len(self.words):
            raise ConfigError("vocabulary words must be unique")

    @classmethod
    def from_spec(cls, spec: WorldSpec) -> "Vocabulary":
        """
        Every word the grammar can emit for spec, in a fixed order.
        """

        tagged = [("the", "DET"), ("then", "OTHER")]
        tagged += [(c, "ADJ") for c in spec.colors]
        tagged += [(s, "NOUN") for s in spec.shapes]

        for action in spec.actions:
            tagged += action_words(action)

        tags = {}
        for word, tag in tagged:
            tags.setdefault(word, tag)

        return cls(list(tags), tags)

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.ids

    def tokenize(self, text: str) -> List[int]:
        ids = []

        for word in text.split():
            if word not in self.ids:
                raise VocabularyError(word)
            ids.append(self.ids[word])

        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        """
        Joins words up to the first end-of-sentence id, skipping pads.
        """

        return " ".join(self.id_words(ids))

    def id_words(self, ids: Sequence[int]) -> List[str]:
        words = []

        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            words.append(self.words[i])

        return words

    def tag_of(self, word: str) -> str:
        return self.tags.get(word, "OTHER")


def _channel(index: int) -> np.ndarray:
    vector = np.zeros(FEATURE_DIM)
    vector[index] = 1.0
    return vector


def _entity_vector(entity: Entity) -> np.ndarray:
    vector = np.zeros(FEATURE_DIM)
    vector[SHAPE_SLICE.start + SHAPES.index(entity.shape)] = 1.0
    vector[COLOR_SLICE.start + COLORS.index(entity.color)] = 1.0
    return vector


def _sample_entities(rng: np.random.Generator, spec: WorldSpec, count: int) -> List[Entity]:
    pool = [(c, s) for c in spec.colors for s in spec.shapes]
    picks = rng.choice(len(pool), size=count, replace=False)
    return [Entity(color=pool[i][0], shape=pool[i][1]) for i in picks]


def generate_episode(spec: WorldSpec, seed: int) -> EpisodeRecord:
    """
    Samples and renders one episode; a pure function of (spec, seed).

    Args:
        spec: World parameters
        seed: Episode seed

    Returns:
        EpisodeRecord with features, positions, caption words as ids
        of Vocabulary.from_spec(spec), tags and the event list
    """

    rng = np.random.default_rng(seed)
    vocabulary = Vocabulary.from_spec(spec)

    weights = np.asarray(spec.event_weights or [1.0] * spec.max_events, dtype=np.float64)
    n_events = int(rng.choice(np.arange(1, spec.max_events + 1), p=weights / weights.sum()))

    cells = list(iter_boxes(spec.grid))
    features, positions, events = [], [], []

    for e in range(n_events):
        action = spec.actions[int(rng.integers(len(spec.actions)))]
        agent, patient, distractor = _sample_entities(rng, spec, 3)
        agent_cell, patient_cell, distractor_cell = (
            int(c) for c in rng.choice(len(cells), size=3, replace=False)
        )
        has_distractor = bool(rng.random() < spec.distractor_prob)

        events.append(Event(action=action, agent=agent, patient=patient))

        action_vector = np.zeros(FEATURE_DIM)
        action_vector[ACTION_SLICE.start + list(ACTIONS).index(action)] = 1.0

        for slot in range(spec.slots):
            occupants = {}

            final_slot = slot == spec.slots - 1 and spec.slots > 1
            here = patient_cell if final_slot and action in TRAVELLING_ACTIONS else agent_cell

            occupants.setdefault(here, []).append(
                _entity_vector(agent) + action_vector + _channel(AGENT_CHANNEL)
            )
            occupants.setdefault(patient_cell, []).append(
                _entity_vector(patient) + action_vector + _channel(PATIENT_CHANNEL)
            )

            if has_distractor:
                occupants.setdefault(distractor_cell, []).append(
                    _entity_vector(distractor) + _channel(DISTRACTOR_CHANNEL)
                )

            phase = slot / (spec.slots - 1) if spec.slots > 1 else 0.0

            for index, (_, _, box) in enumerate(cells):
                vector = np.sum(occupants.get(index, [np.zeros(FEATURE_DIM)]), axis=0)
                vector[PHASE_CHANNEL] = phase
                vector[EVENT_SLICE.start + e] = 1.0

                features.append(vector)
                positions.append([e * spec.slots + slot, *box])

    features = np.asarray(features)

    if spec.feature_noise > 0:
        features = features + rng.normal(0.0, spec.feature_noise, features.shape)

    tagged = describe(events)

    return EpisodeRecord(
        features=features,
        positions=np.asarray(positions),
        caption=vocabulary.tokenize(" ".join(word for word, _ in tagged)),
        pos_tags=[tag for _, tag in tagged],
        seed=seed,
        events=events,
    )


def generate_dataset(spec: WorldSpec, count: int) -> List[EpisodeRecord]:
    """
    Episodes seeded spec.seed, spec.seed + 1, ...
    """

    records = [generate_episode(spec, spec.seed + i) for i in range(count)]
    logger.info("episodes generated count=%d seed=%d", count, spec.seed)
    return records


class Splits(NamedTuple):
    train: list
    eval: list
    train_indices: List[int]
    eval_indices: List[int]


def split_indices(count: int, train_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """
    Seeded shuffle of range(count) partitioned into a train part of
    round(train_fraction * count) indices and an eval part.
    """

    if count == 0:
        raise ContractError("cannot split an empty record list")

    n_train = int(round(train_fraction * count))
    indices = np.arange(count)

    if n_train in (0, count):
        shuffled = shuffle(indices, random_state=seed)
        train, held_out = shuffled[:n_train], shuffled[n_train:]
    else:
        train, held_out = train_test_split(
            indices, train_size=n_train, random_state=seed, shuffle=True
        )

    return [int(i) for i in train], [int(i) for i in held_out]


def make_splits(
    records: Sequence, fractions: Sequence[float] = (0.8, 0.2), seed: int = 0
) -> Splits:
    """
    Disjoint, exhaustive train/eval partition of records.

    Args:
        records: Anything indexable
        fractions: (train, eval) fractions summing to 1
        seed: Shuffle seed
    """

    if len(fractions) != 2:
        raise ConfigError(f"expected (train, eval) fractions, got {fractions}")

    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {fractions}")

    train, held_out = split_indices(len(records), fractions[0], seed)

    return Splits(
        [records[i] for i in train], [records[i] for i in held_out], train, held_out
    )
