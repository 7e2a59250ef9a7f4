"""Longitudinal event-sequence cohorts: vocabulary, records, encoding and JSONL I/O.

A cohort file is JSON Lines. Line 1 holds the vocabulary header, every
following line one patient::

    {"groups":{...},"protected":[...],"provenance":"...","statics":{...},"tokens":[...]}
    {"encounters":[{"age":51,"code":17,"year":1994}],"id":"p0","region":3,"sex":1,"smoking":0,"t":1,"y":0}

Files are written canonically (sorted keys, compact separators, UTF-8, LF)
so that ``write_cohort(read_cohort(path))`` reproduces the input bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CohortFormatError, ValidationError

SPECIAL_TOKENS = ("PAD", "UNK", "MASK", "CLS", "SEP")
PAD, UNK, MASK, CLS, SEP = range(5)
CATEGORIES = ("diagnosis", "medication", "bp-bucket", "special")
STATIC_NAMES = ("sex", "region", "smoking")

# Slot kinds of an encoded sequence. PAD only appears after batching.
KIND_PAD, KIND_CLS, KIND_ENC, KIND_SEX, KIND_REGION, KIND_SMOKING = range(6)
STATIC_KINDS = {"sex": KIND_SEX, "region": KIND_REGION, "smoking": KIND_SMOKING}

# Systolic BP buckets: [<116), [116,121), ..., [181,186), [>=186).
BP_EDGES = tuple(range(116, 187, 5))
N_BP_BUCKETS = len(BP_EDGES) + 1


def bp_bucket(systolic: float) -> int:
    """Index (0..15) of the systolic blood-pressure bucket.

    Buckets are half-open ``[lo, hi)``; readings below 90 mmHg clamp into
    bucket 0 and everything from 186 upward lands in bucket 15.
    """
    try:
        value = float(systolic)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"systolic must be a number, got {systolic!r}") from exc
    if not math.isfinite(value) or value <= 0:
        raise ValidationError(f"systolic must be finite and positive, got {systolic!r}")
    return int(np.searchsorted(BP_EDGES, value, side="right"))


def bucket_bp(systolic: float, vocab: "Vocabulary") -> int:
    """Token id of the BP bucket that ``systolic`` falls into."""
    return vocab.bp_token(bp_bucket(systolic))


@dataclass(frozen=True)
class Token:
    id: int
    label: str
    category: str


@dataclass(frozen=True)
class Vocabulary:
    """Dense token table plus group memberships and protected tokens.

    ``groups`` maps a group name to the ids of its member tokens,
    ``protected`` holds the exposure/outcome-defining ids that masked
    modelling must never sample as replacements, and ``statics`` records
    the cardinality of each static variable.
    """

    tokens: tuple[Token, ...]
    groups: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    protected: frozenset[int] = frozenset()
    statics: Mapping[str, int] = field(
        default_factory=lambda: {"sex": 2, "region": 10, "smoking": 2}
    )

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "protected", frozenset(int(i) for i in self.protected))
        object.__setattr__(
            self,
            "groups",
            {str(k): tuple(sorted(int(i) for i in v)) for k, v in sorted(self.groups.items())},
        )
        object.__setattr__(self, "statics", {k: int(self.statics[k]) for k in STATIC_NAMES})
        for i, tok in enumerate(self.tokens):
            if tok.id != i:
                raise ValidationError(f"token ids must be dense from 0; position {i} has id {tok.id}")
            if tok.category not in CATEGORIES:
                raise ValidationError(f"token {tok.id} has unknown category {tok.category!r}")
        for i, name in enumerate(SPECIAL_TOKENS):
            if i >= len(self.tokens) or self.tokens[i].label != name:
                raise ValidationError(f"special token {name} must have id {i}")
        n = len(self.tokens)
        bad = [i for i in self.protected if not 0 <= i < n]
        if bad:
            raise ValidationError(f"protected ids outside vocabulary: {sorted(bad)}")
        for name, members in self.groups.items():
            if any(not 0 <= i < n for i in members):
                raise ValidationError(f"group {name!r} references ids outside vocabulary")
        for name, card in self.statics.items():
            if card < 1:
                raise ValidationError(f"static {name!r} needs at least one class")
        object.__setattr__(self, "_by_label", {t.label: t.id for t in self.tokens})
        object.__setattr__(
            self, "_category", np.array([CATEGORIES.index(t.category) for t in self.tokens])
        )

    @classmethod
    def build(
        cls,
        diagnoses: Sequence[str] = (),
        medications: Sequence[str] = (),
        groups: Mapping[str, Iterable[str]] | None = None,
        protected: Iterable[str] = (),
        n_regions: int = 10,
        with_bp: bool = True,
    ) -> "Vocabulary":
        """Assemble a vocabulary from labels; groups and protected refer to labels."""
        tokens = [Token(i, name, "special") for i, name in enumerate(SPECIAL_TOKENS)]
        for label in diagnoses:
            tokens.append(Token(len(tokens), label, "diagnosis"))
        for label in medications:
            tokens.append(Token(len(tokens), label, "medication"))
        if with_bp:
            lows = (0,) + BP_EDGES
            for k in range(N_BP_BUCKETS):
                label = f"BP{lows[k]}+" if k == N_BP_BUCKETS - 1 else f"BP{lows[k]}-{BP_EDGES[k]}"
                tokens.append(Token(len(tokens), label, "bp-bucket"))
        ids = {t.label: t.id for t in tokens}
        if len(ids) != len(tokens):
            raise ValidationError("token labels must be unique")
        group_ids = {g: [ids[label] for label in members] for g, members in (groups or {}).items()}
        return cls(
            tokens=tuple(tokens),
            groups=group_ids,
            protected=frozenset(ids[label] for label in protected),
            statics={"sex": 2, "region": n_regions, "smoking": 2},
        )

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, label: str) -> int:
        return self._by_label[label]

    def category_of(self, token_id: int) -> str:
        return self.tokens[token_id].category

    @property
    def category_codes(self) -> np.ndarray:
        """Category index (into ``CATEGORIES``) for every token id."""
        return self._category

    def ids_in_category(self, category: str) -> list[int]:
        return [t.id for t in self.tokens if t.category == category]

    def bp_token(self, index: int) -> int:
        bp = self.ids_in_category("bp-bucket")
        if len(bp) != N_BP_BUCKETS:
            raise ValidationError("vocabulary has no complete set of 16 BP bucket tokens")
        return bp[index]

    def group_members(self, name: str) -> tuple[int, ...]:
        try:
            return self.groups[name]
        except KeyError:
            raise ValidationError(f"unknown group {name!r}") from None

    def to_json(self) -> dict:
        return {
            "tokens": [{"id": t.id, "label": t.label, "category": t.category} for t in self.tokens],
            "protected": sorted(self.protected),
            "groups": {k: list(v) for k, v in self.groups.items()},
            "statics": dict(self.statics),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocabulary":
        return cls(
            tokens=tuple(Token(int(t["id"]), str(t["label"]), str(t["category"])) for t in obj["tokens"]),
            groups=obj.get("groups", {}),
            protected=frozenset(obj.get("protected", ())),
            statics=obj.get("statics", {"sex": 2, "region": 10, "smoking": 2}),
        )


@dataclass(frozen=True)
class Encounter:
    code: int
    age: int
    year: int
    position: int


@dataclass(frozen=True)
class StaticVars:
    sex: int
    region: int
    smoking: int

    def get(self, name: str) -> int:
        return getattr(self, name)


@dataclass(frozen=True)
class PatientRecord:
    """One subject. ``y0``/``y1``/``lam`` are only set for synthetic cohorts."""

    id: str
    statics: StaticVars
    encounters: tuple[Encounter, ...]
    t: int
    y: int
    y0: int | None = None
    y1: int | None = None
    lam: float | None = None

    def replace(self, **changes) -> "PatientRecord":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return PatientRecord(**values)

    def validate(self, vocab: Vocabulary | None = None) -> None:
        pid = self.id
        if self.t not in (0, 1) or self.y not in (0, 1):
            raise ValidationError(f"patient {pid}: t and y must be 0/1")
        if (self.y0 is None) != (self.y1 is None):
            raise ValidationError(f"patient {pid}: y0 and y1 must be given together")
        if self.y0 is not None:
            if self.y0 not in (0, 1) or self.y1 not in (0, 1):
                raise ValidationError(f"patient {pid}: potential outcomes must be 0/1")
            if self.y != (self.y1 if self.t == 1 else self.y0):
                raise ValidationError(f"patient {pid}: factual y disagrees with potential outcomes")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ValidationError(f"patient {pid}: lambda must be a probability")
        prev_age, prev_pos = -1, -1
        for e in self.encounters:
            if e.age < 0 or e.age < prev_age or e.position <= prev_pos:
                raise ValidationError(f"patient {pid}: encounters out of order at position {e.position}")
            prev_age, prev_pos = e.age, e.position
        if vocab is not None:
            n = len(vocab)
            for e in self.encounters:
                if not 0 <= e.code < n:
                    raise ValidationError(f"patient {pid}: code {e.code} not in vocabulary")
            for name in STATIC_NAMES:
                v = self.statics.get(name)
                if not 0 <= v < vocab.statics[name]:
                    raise ValidationError(f"patient {pid}: static {name}={v} out of range")


@dataclass(frozen=True)
class Cohort:
    vocabulary: Vocabulary
    patients: tuple[PatientRecord, ...]
    provenance: str = "ingested"

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))

    def __len__(self):
        return len(self.patients)

    def validate(self) -> "Cohort":
        seen = set()
        for p in self.patients:
            if p.id in seen:
                raise ValidationError(f"duplicate patient id {p.id}")
            seen.add(p.id)
            p.validate(self.vocabulary)
        return self

    def with_patients(self, patients: Iterable[PatientRecord]) -> "Cohort":
        return Cohort(self.vocabulary, tuple(patients), self.provenance)

    def subset(self, indices: Iterable[int]) -> "Cohort":
        return self.with_patients(self.patients[i] for i in indices)

    def arrays(self) -> dict[str, np.ndarray]:
        """Exposure/outcome columns as integer arrays (``y0``/``y1`` when present)."""
        out = {
            "t": np.fromiter((p.t for p in self.patients), dtype=np.int64, count=len(self)),
            "y": np.fromiter((p.y for p in self.patients), dtype=np.int64, count=len(self)),
        }
        if self.patients and self.patients[0].y0 is not None:
            out["y0"] = np.array([p.y0 for p in self.patients], dtype=np.int64)
            out["y1"] = np.array([p.y1 for p in self.patients], dtype=np.int64)
        if self.patients and self.patients[0].lam is not None:
            out["lam"] = np.array([p.lam for p in self.patients], dtype=np.float64)
        return out


# ---------------------------------------------------------------------------
# encoding


@dataclass
class EncodedSequence:
    """Parallel per-slot arrays for one patient.

    Layout is ``[CLS, e_1 .. e_m, sex, region, smoking]``. ``statics`` holds
    the category value at static slots and 0 elsewhere; a value equal to the
    variable's cardinality means "masked/withheld".
    """

    codes: np.ndarray
    ages: np.ndarray
    years: np.ndarray
    positions: np.ndarray
    kinds: np.ndarray
    statics: np.ndarray
    n_unknown: int = 0

    def __len__(self):
        return len(self.codes)


def encode_patient(
    p: PatientRecord,
    vocab: Vocabulary,
    max_len: int,
    withheld_statics: Iterable[str] = (),
    withheld_codes: Iterable[int] = (),
) -> EncodedSequence:
    """Lay out one patient as CLS + most recent encounters + static slots.

    Encounters whose code is in ``withheld_codes`` are dropped before
    truncation; withheld static variables are emitted with the mask value.
    Unknown codes become UNK and are tallied in ``n_unknown``.
    """
    n_static = len(STATIC_NAMES)
    room = max_len - 1 - n_static
    if room < 0:
        raise ValidationError(f"max_len={max_len} leaves no room for CLS and static slots")
    drop = set(withheld_codes)
    encs = [e for e in p.encounters if e.code not in drop] if drop else list(p.encounters)
    if len(encs) > room:
        encs = encs[len(encs) - room:] if room else []
    m = len(encs)
    length = 1 + m + n_static
    V = len(vocab)
    codes = np.zeros(length, dtype=np.int64)
    ages = np.zeros(length, dtype=np.int64)
    years = np.zeros(length, dtype=np.int64)
    kinds = np.empty(length, dtype=np.int64)
    statics = np.zeros(length, dtype=np.int64)
    codes[0] = CLS
    kinds[0] = KIND_CLS
    n_unknown = 0
    for j, e in enumerate(encs, start=1):
        c = e.code
        if not 0 <= c < V:
            c = UNK
            n_unknown += 1
        codes[j] = c
        ages[j] = e.age
        years[j] = e.year
        kinds[j] = KIND_ENC
    if m:
        # static slots inherit the baseline timestamp so age/year stay monotone
        ages[0], years[0] = encs[0].age, encs[0].year
        ages[m + 1:], years[m + 1:] = encs[-1].age, encs[-1].year
    withheld = set(withheld_statics)
    for k, name in enumerate(STATIC_NAMES):
        slot = m + 1 + k
        kinds[slot] = STATIC_KINDS[name]
        statics[slot] = vocab.statics[name] if name in withheld else p.statics.get(name)
    return EncodedSequence(
        codes=codes,
        ages=ages,
        years=years,
        positions=np.arange(length, dtype=np.int64),
        kinds=kinds,
        statics=statics,
        n_unknown=n_unknown,
    )


# ---------------------------------------------------------------------------
# JSONL I/O


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def patient_to_json(p: PatientRecord) -> dict:
    obj = {
        "id": p.id,
        "sex": p.statics.sex,
        "region": p.statics.region,
        "smoking": p.statics.smoking,
        "encounters": [{"code": e.code, "age": e.age, "year": e.year} for e in p.encounters],
        "t": p.t,
        "y": p.y,
    }
    if p.y0 is not None:
        obj["y0"], obj["y1"] = p.y0, p.y1
    if p.lam is not None:
        obj["lambda"] = p.lam
    return obj


def patient_from_json(obj: Mapping) -> PatientRecord:
    encs = tuple(
        Encounter(int(e["code"]), int(e["age"]), int(e["year"]), j)
        for j, e in enumerate(obj["encounters"])
    )
    lam = obj.get("lambda")
    return PatientRecord(
        id=str(obj["id"]),
        statics=StaticVars(int(obj["sex"]), int(obj["region"]), int(obj["smoking"])),
        encounters=encs,
        t=int(obj["t"]),
        y=int(obj["y"]),
        y0=None if obj.get("y0") is None else int(obj["y0"]),
        y1=None if obj.get("y1") is None else int(obj["y1"]),
        lam=None if lam is None else float(lam),
    )


def dumps_cohort(cohort: Cohort) -> str:
    header = cohort.vocabulary.to_json()
    header["provenance"] = cohort.provenance
    lines = [_dumps(header)]
    lines.extend(_dumps(patient_to_json(p)) for p in cohort.patients)
    return "\n".join(lines) + "\n"


def write_cohort(cohort: Cohort, path) -> None:
    Path(path).write_text(dumps_cohort(cohort), encoding="utf-8", newline="\n")


def loads_cohort(text: str) -> Cohort:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CohortFormatError("empty file: missing vocabulary header", line=1)
    try:
        header = json.loads(lines[0])
        vocab = Vocabulary.from_json(header)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CohortFormatError(f"bad vocabulary header: {exc}", line=1) from exc
    patients = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            raise CohortFormatError("blank line", line=lineno)
        try:
            patients.append(patient_from_json(json.loads(raw)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise CohortFormatError(f"malformed patient record: {exc}", line=lineno) from exc
    cohort = Cohort(vocab, tuple(patients), str(header.get("provenance", "ingested")))
    return cohort.validate()


def read_cohort(path) -> Cohort:
    return loads_cohort(Path(path).read_text(encoding="utf-8"))
