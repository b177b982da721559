"""Procedural counting scenes with an exact verifier.

A scene is a row of K object slots, each with one color and one shape. A
question asks how many slots carry a target color, a target shape, or both.
Answers are single digit tokens followed by EOS.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

K_MAX = 6
COLORS = ("red", "blue", "green", "yellow", "purple", "orange")
SHAPES = ("circle", "square", "triangle", "star")


class ConfigError(ValueError):
    """Invalid configuration (sizes, flags, dimensions)."""


class QuestionKind(str, enum.Enum):
    COUNT_COLOR = "count_color"
    COUNT_SHAPE = "count_shape"
    COUNT_COLOR_SHAPE = "count_color_shape"


KINDS = tuple(QuestionKind)


@dataclass(frozen=True)
class EnvConfig:
    K: int = 4
    C: int = 3
    S: int = 2
    kind_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 1 <= self.K <= K_MAX:
            raise ConfigError(f"K must be in [1, {K_MAX}], got {self.K}")
        if not 2 <= self.C <= len(COLORS):
            raise ConfigError(f"C must be in [2, {len(COLORS)}], got {self.C}")
        if not 2 <= self.S <= len(SHAPES):
            raise ConfigError(f"S must be in [2, {len(SHAPES)}], got {self.S}")
        w = tuple(float(x) for x in self.kind_weights)
        if len(w) != 3 or min(w) < 0 or sum(w) <= 0:
            raise ConfigError(f"kind_weights must be 3 nonnegative numbers with positive sum, got {w}")
        object.__setattr__(self, "kind_weights", w)


# --- tokens -----------------------------------------------------------------

FACT, DIGIT, EOC, EOS = "fact", "digit", "eoc", "eos"


@dataclass(frozen=True)
class Token:
    kind: str
    slot: int = -1
    attr: str = ""  # "color" | "shape" for facts
    value: int = -1  # attribute index for facts, the digit for digits

    def __repr__(self):
        if self.kind == FACT:
            return f"FACT({self.slot},{self.attr},{self.value})"
        if self.kind == DIGIT:
            return f"DIGIT({self.value})"
        return self.kind.upper()


def fact(slot: int, attr: str, value: int) -> Token:
    if attr not in ("color", "shape"):
        raise ValueError(f"unknown attribute kind {attr!r}")
    return Token(FACT, slot, attr, value)


def digit(d: int) -> Token:
    return Token(DIGIT, value=d)


EOC_TOKEN = Token(EOC)
EOS_TOKEN = Token(EOS)


# --- scenes and questions ---------------------------------------------------

@dataclass(frozen=True)
class Slot:
    color: int
    shape: int


@dataclass(frozen=True)
class Scene:
    slots: tuple[Slot, ...]
    scene_id: int = 0

    @property
    def K(self) -> int:
        return len(self.slots)


@dataclass(frozen=True)
class Question:
    kind: QuestionKind
    target_color: int | None = None
    target_shape: int | None = None

    def __post_init__(self):
        kind = QuestionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        wants_color = kind in (QuestionKind.COUNT_COLOR, QuestionKind.COUNT_COLOR_SHAPE)
        wants_shape = kind in (QuestionKind.COUNT_SHAPE, QuestionKind.COUNT_COLOR_SHAPE)
        if wants_color != (self.target_color is not None):
            raise ValueError(f"{kind.value} {'requires' if wants_color else 'forbids'} target_color")
        if wants_shape != (self.target_shape is not None):
            raise ValueError(f"{kind.value} {'requires' if wants_shape else 'forbids'} target_shape")

    @property
    def targeted_attrs(self) -> tuple[str, ...]:
        out = []
        if self.target_color is not None:
            out.append("color")
        if self.target_shape is not None:
            out.append("shape")
        return tuple(out)

    def target(self, attr: str) -> int | None:
        return self.target_color if attr == "color" else self.target_shape


@dataclass(frozen=True)
class Instance:
    scene: Scene
    question: Question
    gold: int
    seed: int = field(default=0, compare=False)


def slot_attr(slot: Slot, attr: str) -> int:
    return slot.color if attr == "color" else slot.shape


def slot_matches(slot: Slot, question: Question) -> bool:
    return all(slot_attr(slot, a) == question.target(a) for a in question.targeted_attrs)


def oracle_answer(scene: Scene, question: Question) -> int:
    """Brute-force count of slots matching every targeted attribute."""
    return sum(1 for s in scene.slots if slot_matches(s, question))


def generate_scene(seed: int, cfg: EnvConfig) -> Scene:
    rng = np.random.default_rng([seed, 0])
    colors = rng.integers(cfg.C, size=cfg.K)
    shapes = rng.integers(cfg.S, size=cfg.K)
    return Scene(tuple(Slot(int(c), int(s)) for c, s in zip(colors, shapes)), scene_id=seed)


def generate_instance(seed: int, cfg: EnvConfig | None = None) -> Instance:
    cfg = cfg or EnvConfig()
    scene = generate_scene(seed, cfg)
    rng = np.random.default_rng([seed, 1])
    w = np.asarray(cfg.kind_weights)
    kind = KINDS[int(rng.choice(3, p=w / w.sum()))]
    tc = int(rng.integers(cfg.C)) if kind != QuestionKind.COUNT_SHAPE else None
    ts = int(rng.integers(cfg.S)) if kind != QuestionKind.COUNT_COLOR else None
    q = Question(kind, tc, ts)
    return Instance(scene, q, oracle_answer(scene, q), seed=seed)


# --- verifier ---------------------------------------------------------------

def format_score(tokens: Sequence[Token]) -> int:
    """1 iff the answer is exactly one digit followed by EOS."""
    tokens = list(tokens)
    return int(len(tokens) == 2 and tokens[0].kind == DIGIT and tokens[1].kind == EOS)


def verify(predicted: Sequence[Token], gold: int) -> int:
    predicted = list(predicted)
    if not format_score(predicted):
        return 0
    return int(predicted[0].value == gold)


def answer_digit(tokens: Sequence[Token]) -> int | None:
    tokens = list(tokens)
    return tokens[0].value if format_score(tokens) else None


# --- JSON lines -------------------------------------------------------------

def instance_to_dict(inst: Instance) -> dict:
    q = inst.question
    rec = {
        "scene_id": inst.scene.scene_id,
        "slots": [{"color": COLORS[s.color], "shape": SHAPES[s.shape]} for s in inst.scene.slots],
        "kind": q.kind.value,
    }
    if q.target_color is not None:
        rec["target_color"] = COLORS[q.target_color]
    if q.target_shape is not None:
        rec["target_shape"] = SHAPES[q.target_shape]
    rec["gold"] = inst.gold
    return rec


def instance_from_dict(rec: dict) -> Instance:
    slots = tuple(Slot(COLORS.index(s["color"]), SHAPES.index(s["shape"])) for s in rec["slots"])
    scene = Scene(slots, scene_id=int(rec["scene_id"]))
    tc = rec.get("target_color")
    ts = rec.get("target_shape")
    q = Question(
        QuestionKind(rec["kind"]),
        COLORS.index(tc) if tc is not None else None,
        SHAPES.index(ts) if ts is not None else None,
    )
    gold = int(rec["gold"])
    if gold != oracle_answer(scene, q):
        raise ValueError(f"record gold {gold} disagrees with scene (scene_id={scene.scene_id})")
    return Instance(scene, q, gold, seed=scene.scene_id)


def write_jsonl(instances: Iterable[Instance], path) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(instance_to_dict(inst), sort_keys=True) + "\n")


def read_jsonl(path) -> list[Instance]:
    with open(path) as f:
        return [instance_from_dict(json.loads(line)) for line in f if line.strip()]
