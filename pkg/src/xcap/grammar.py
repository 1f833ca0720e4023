"""Closed sentence grammar for fracture descriptions.

Structured labels render to exactly one canonical sentence and every
canonical sentence parses back to its labels. Anything else is
``UNPARSEABLE``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

DISPLACEMENTS = ("undisplaced", "mildly_displaced", "moderately_displaced", "severely_displaced")
# ordered from femoral head to trochanters; neighbours are "off-by-one"
LOCATIONS = ("subcapital", "transcervical", "basicervical")

SOT, EOT, UNK, PAD = "<sot>", "<eot>", "<unk>", "<pad>"
SPECIALS = (SOT, EOT, UNK, PAD)
SOT_ID, EOT_ID, UNK_ID, PAD_ID = range(4)

NEGATIVE_SENTENCE = ("no", "fracture", "was", "identified", "on", "this", "study")
# longest rendering: severe displacement, both flags, avulsed fragment
MAX_SENTENCE_TOKENS = 18


@dataclass(frozen=True)
class FractureLabels:
    displacement: str
    comminuted: bool
    impacted: bool
    avulsed_fragment: bool
    location: str

    def __post_init__(self):
        if self.displacement not in DISPLACEMENTS:
            raise ValueError(f"unknown displacement {self.displacement!r}")
        if self.location not in LOCATIONS:
            raise ValueError(f"unknown location {self.location!r}")
        for flag in ("comminuted", "impacted", "avulsed_fragment"):
            if not isinstance(getattr(self, flag), bool):
                raise TypeError(f"{flag} must be a bool")

    def to_dict(self) -> dict:
        return {
            "displacement": self.displacement,
            "comminuted": self.comminuted,
            "impacted": self.impacted,
            "avulsed_fragment": self.avulsed_fragment,
            "location": self.location,
        }


class _Marker:
    """Singleton marker value (compared by identity)."""

    __slots__ = ("_label",)

    def __init__(self, label: str):
        self._label = label

    def __repr__(self) -> str:
        return self._label


NO_FRACTURE = _Marker("NO_FRACTURE")
UNPARSEABLE = _Marker("UNPARSEABLE")

CaseDescription = Union[FractureLabels, _Marker]


def case_to_dict(case: CaseDescription) -> dict | None:
    return None if case is NO_FRACTURE else case.to_dict()


def case_from_dict(d: dict | None) -> CaseDescription:
    return NO_FRACTURE if d is None else FractureLabels(**d)


def all_cases() -> list[CaseDescription]:
    """The 96 fracture label combinations followed by the negative case."""
    cases: list[CaseDescription] = [
        FractureLabels(d, c, i, a, loc)
        for d, c, i, a, loc in itertools.product(
            DISPLACEMENTS, (False, True), (False, True), (False, True), LOCATIONS
        )
    ]
    cases.append(NO_FRACTURE)
    return cases


def fracture_cases() -> list[FractureLabels]:
    return [c for c in all_cases() if c is not NO_FRACTURE]


def _article(next_word: str) -> str:
    return "an" if next_word[0] in "aeiou" else "a"


def render(case: CaseDescription) -> list[str]:
    if case is NO_FRACTURE:
        return list(NEGATIVE_SENTENCE)
    descriptor = case.displacement.split("_")
    if case.comminuted:
        descriptor.append("comminuted")
    if case.impacted:
        descriptor.append("impacted")
    words = ["there", "is", _article(descriptor[0]), *descriptor, "fracture", "of", "the",
             case.location, "neck", "of", "femur"]
    if case.avulsed_fragment:
        words += ["with", "an", "avulsed", "fragment"]
    return words


def render_text(case: CaseDescription) -> str:
    return " ".join(render(case))


def tokenize(text: str) -> list[str]:
    """Lower-case and split on whitespace, dropping punctuation."""
    cleaned = "".join(ch if ch.isalnum() or ch.isspace() or ch == "_" else " " for ch in text.lower())
    return cleaned.split()


def parse(tokens: Sequence[str] | str) -> CaseDescription | _Marker:
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    words = [w for w in tokens if w not in (SOT, EOT, PAD)]
    if tuple(words) == NEGATIVE_SENTENCE:
        return NO_FRACTURE
    if len(words) < 3 or words[:2] != ["there", "is"]:
        return UNPARSEABLE
    rest = words[3:]
    if rest and rest[0] in ("mildly", "moderately", "severely"):
        if len(rest) < 2 or rest[1] != "displaced":
            return UNPARSEABLE
        displacement, rest = f"{rest[0]}_displaced", rest[2:]
    elif rest and rest[0] == "undisplaced":
        displacement, rest = "undisplaced", rest[1:]
    else:
        return UNPARSEABLE
    comminuted = bool(rest) and rest[0] == "comminuted"
    rest = rest[comminuted:]
    impacted = bool(rest) and rest[0] == "impacted"
    rest = rest[impacted:]
    if len(rest) < 7 or rest[:3] != ["fracture", "of", "the"] or rest[4:7] != ["neck", "of", "femur"]:
        return UNPARSEABLE
    location, tail = rest[3], rest[7:]
    if location not in LOCATIONS:
        return UNPARSEABLE
    if tail not in ([], ["with", "an", "avulsed", "fragment"]):
        return UNPARSEABLE
    case = FractureLabels(displacement, comminuted, impacted, bool(tail), location)
    # the article is part of the canonical form; reject mismatches
    return case if render(case) == list(words) else UNPARSEABLE


class Vocabulary:
    """Bijective token <-> id map with the four specials at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Iterable[str], specials: bool = True) -> list[int]:
        ids = [self.index.get(w, UNK_ID) for w in words]
        return [SOT_ID, *ids, EOT_ID] if specials else ids

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        words = [self.tokens[i] for i in ids]
        if strip:
            if EOT in words:
                words = words[:words.index(EOT)]
            words = [w for w in words if w not in (SOT, PAD)]
        return words

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab() -> Vocabulary:
    words = sorted({w for case in all_cases() for w in render(case)})
    return Vocabulary([*SPECIALS, *words])
