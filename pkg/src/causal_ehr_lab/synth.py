"""Synthetic longitudinal cohorts with injected, controllable confounding.

Histories are drawn per patient from independent RNG streams. A designated
variable ``Z`` (a static attribute for persistent confounding, or the
occurrence of any code from a group for transient confounding) drives
exposure assignment. Outcomes are then sampled as::

    y ~ Bernoulli(sigmoid(a * t + m * beta * (lambda + c)))

where ``lambda = P(T = 1 | Z)`` is the empirical propensity of the
patient's ``Z`` stratum, so ``Z`` confounds the exposure/outcome relation
whenever ``beta > 0`` and the strata are imbalanced.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

from .cohort import (
    BP_EDGES,
    Cohort,
    Encounter,
    PatientRecord,
    StaticVars,
    Vocabulary,
)
from .errors import EstimationError, ValidationError

CARDIO_GROUP = "cardiometabolic"
CARDIO_MED_GROUPS = ("statins", "diabetes_drugs")
OTHER_MED_GROUPS = ("anticholinergics", "gi_bleeding_drugs")
EXPOSURE_LABELS = ("EXP_A", "EXP_B")
OUTCOME_LABEL = "OUTCOME"

# stream purposes for per-patient generators
_HISTORY, _EXPOSURE, _OUTCOME = 0, 1, 2


@dataclass(frozen=True)
class VocabSpec:
    """Sizes of the synthetic vocabulary.

    ``n_diagnosis`` counts ordinary diagnosis codes (the four cardiometabolic
    codes and the outcome code come on top). ``n_sex_linked`` of them have
    sex-dependent frequencies, which makes sex recoverable from history.
    """

    n_diagnosis: int = 36
    n_disease_groups: int = 8
    n_medication: int = 12
    n_regions: int = 10
    n_sex_linked: int = 8


@dataclass(frozen=True)
class HistorySpec:
    """Knobs of the history sampler (all probabilities per encounter)."""

    p_diagnosis: float = 0.5
    p_medication: float = 0.25
    sex_skew: float = 6.0
    p_cardio: float = 0.4
    onset_max_frac: float = 0.6
    cardio_med_weight: float = 0.6
    cardio_recur: float = 0.25
    bp_mean: float = 124.0
    bp_shift_cardio: float = 18.0
    bp_sd: float = 11.0
    p_smoking: float = 0.35


@dataclass(frozen=True)
class ConfounderSpec:
    """Which variable plays ``Z``.

    ``kind='persistent'`` uses ``static`` (a static attribute name) with
    ``Z = 1`` iff the attribute equals ``value``; ``kind='transient'`` uses
    ``group`` with ``Z = 1`` iff any encounter code belongs to the group.
    """

    kind: str = "persistent"
    static: str | None = "sex"
    value: int = 1
    group: str | None = None

    def __post_init__(self):
        if self.kind == "persistent":
            if not self.static:
                raise ValidationError("persistent confounder needs a static attribute")
        elif self.kind == "transient":
            if not self.group:
                raise ValidationError("transient confounder needs a code group")
        else:
            raise ValidationError(f"confounder kind must be persistent|transient, got {self.kind!r}")

    @classmethod
    def persistent(cls, static="sex", value=1):
        return cls("persistent", static, value, None)

    @classmethod
    def transient(cls, group=CARDIO_GROUP):
        return cls("transient", None, 1, group)


@dataclass(frozen=True)
class Coeffs:
    a: float = 1.0
    m: float = 1.0
    c: float = -0.5


@dataclass(frozen=True)
class ExposureAssoc:
    p1: float = 0.7
    p0: float = 0.3


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 2000
    vocab_spec: VocabSpec = field(default_factory=VocabSpec)
    confounder: ConfounderSpec = field(default_factory=ConfounderSpec)
    beta: float = 1.0
    coeffs: Coeffs = field(default_factory=Coeffs)
    exposure_assoc: ExposureAssoc = field(default_factory=ExposureAssoc)
    history_len_range: tuple[int, int] = (8, 24)
    history: HistorySpec = field(default_factory=HistorySpec)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.history_len_range
        object.__setattr__(self, "history_len_range", (int(lo), int(hi)))
        if self.n_patients < 2:
            raise ValidationError("n_patients must be at least 2")
        if not (0 < self.exposure_assoc.p1 < 1 and 0 < self.exposure_assoc.p0 < 1):
            raise ValidationError("exposure probabilities must lie strictly inside (0, 1)")
        if lo < 0 or lo > hi:
            raise ValidationError("history_len_range must satisfy 0 <= min <= max")
        if self.beta < 0:
            raise ValidationError("beta must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history_len_range"] = list(self.history_len_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SynthConfig":
        d = dict(d)
        sub = {
            "vocab_spec": VocabSpec,
            "confounder": ConfounderSpec,
            "coeffs": Coeffs,
            "exposure_assoc": ExposureAssoc,
            "history": HistorySpec,
        }
        for key, typ in sub.items():
            if key in d and isinstance(d[key], Mapping):
                d[key] = typ(**d[key])
        if "history_len_range" in d:
            d["history_len_range"] = tuple(d["history_len_range"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)

    def with_beta(self, beta: float) -> "SynthConfig":
        return replace(self, beta=float(beta))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def persistent_config(beta: float = 1.0, n_patients: int = 2000, seed: int = 0, **kw) -> SynthConfig:
    """Sex as confounder; default grid [1, 5, 10]."""
    return SynthConfig(
        n_patients=n_patients,
        confounder=ConfounderSpec.persistent("sex", 1),
        beta=beta,
        coeffs=kw.pop("coeffs", Coeffs(1.0, 1.0, -0.5)),
        seed=seed,
        **kw,
    )


def transient_config(beta: float = 25.0, n_patients: int = 2000, seed: int = 0, **kw) -> SynthConfig:
    """Cardiometabolic occurrence as confounder; default grid [25, 50, 75].

    ``m`` is scaled to 0.1 so that the larger transient beta values land
    on the same logit scale as the persistent grid.
    """
    return SynthConfig(
        n_patients=n_patients,
        confounder=ConfounderSpec.transient(CARDIO_GROUP),
        beta=beta,
        coeffs=kw.pop("coeffs", Coeffs(1.0, 0.1, -0.5)),
        seed=seed,
        **kw,
    )


PERSISTENT_BETAS = (1.0, 5.0, 10.0)
TRANSIENT_BETAS = (25.0, 50.0, 75.0)


@dataclass(frozen=True)
class GroundTruth:
    rr: float
    ey1: float
    ey0: float
    sampled_rr: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# vocabulary and histories


def make_vocabulary(spec: VocabSpec) -> Vocabulary:
    """Synthetic vocabulary with disease/medication groups and protected codes."""
    if spec.n_diagnosis < spec.n_disease_groups or spec.n_diagnosis < spec.n_sex_linked:
        raise ValidationError("vocab too small: need n_diagnosis >= n_disease_groups and n_sex_linked")
    if spec.n_medication < len(CARDIO_MED_GROUPS) + len(OTHER_MED_GROUPS):
        raise ValidationError("vocab too small: need at least 4 medication codes for the medication groups")
    cardio = ["DX_HF", "DX_HTN", "DX_IHD", "DX_DM"]
    diag = [f"DX{i:03d}" for i in range(spec.n_diagnosis)]
    meds = [f"RX{i:03d}" for i in range(spec.n_medication)]
    groups: dict[str, list[str]] = {CARDIO_GROUP: cardio}
    # two thirds of the ordinary diagnoses are spread round-robin over groups
    n_grouped = (2 * spec.n_diagnosis) // 3
    for i in range(n_grouped):
        groups.setdefault(f"disease_{i % spec.n_disease_groups:02d}", []).append(diag[i])
    med_groups = CARDIO_MED_GROUPS + OTHER_MED_GROUPS
    for i, label in enumerate(meds):
        if i < 2 * len(med_groups):
            groups.setdefault(med_groups[i % len(med_groups)], []).append(label)
    return Vocabulary.build(
        diagnoses=cardio + diag + [OUTCOME_LABEL],
        medications=meds + list(EXPOSURE_LABELS),
        groups=groups,
        protected=list(EXPOSURE_LABELS) + [OUTCOME_LABEL],
        n_regions=spec.n_regions,
    )


def patient_rng(seed: int, purpose: int, index: int) -> np.random.Generator:
    """Independent generator for one (purpose, patient) pair of a master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(purpose, index))))


class _Sampler:
    """Precomputed code tables for the history sampler."""

    def __init__(self, vocab: Vocabulary, cfg: SynthConfig):
        h = cfg.history
        spec = cfg.vocab_spec
        self.cardio = np.array(vocab.group_members(CARDIO_GROUP))
        protected = vocab.protected
        self.diag = np.array([i for i in vocab.ids_in_category("diagnosis")
                              if i not in protected and i not in set(self.cardio)])
        w = np.ones(len(self.diag))
        half = spec.n_sex_linked // 2
        # first half favoured in sex=1, next half in sex=0
        self.diag_w = {
            1: w.copy(),
            0: w.copy(),
        }
        self.diag_w[1][:half] *= h.sex_skew
        self.diag_w[0][half:spec.n_sex_linked] *= h.sex_skew
        for s in (0, 1):
            self.diag_w[s] /= self.diag_w[s].sum()
        self.meds = np.array([i for i in vocab.ids_in_category("medication") if i not in protected])
        cardio_meds = set()
        for g in CARDIO_MED_GROUPS:
            cardio_meds.update(vocab.group_members(g))
        is_cm = np.array([i in cardio_meds for i in self.meds])
        base = np.where(is_cm, 0.15, 1.0)
        self.med_w = {False: base / base.sum()}
        boosted = np.where(is_cm, h.cardio_med_weight / is_cm.sum(), (1 - h.cardio_med_weight) / (~is_cm).sum())
        self.med_w[True] = boosted / boosted.sum()
        self.bp_tokens = np.array(vocab.ids_in_category("bp-bucket"))
        self.edges = np.array(BP_EDGES, dtype=float)

    def history(self, rng: np.random.Generator, cfg: SynthConfig, sex: int):
        h = cfg.history
        lo, hi = cfg.history_len_range
        n = int(rng.integers(lo, hi + 1))
        birth_year = int(rng.integers(1925, 1961))
        age0 = int(rng.integers(35, 56))
        gaps = rng.integers(0, 3, size=n)
        if n:
            gaps[0] = 0
        ages = age0 + np.cumsum(gaps)
        has_cardio = bool(rng.random() < h.p_cardio) and n > 0
        onset = int(rng.integers(0, max(1, int(h.onset_max_frac * n)))) if has_cardio else n
        active = np.arange(n) >= onset
        cat_u = rng.random(n)
        diag_pick = rng.choice(self.diag, size=n, p=self.diag_w[sex])
        med_plain = rng.choice(self.meds, size=n, p=self.med_w[False])
        med_boost = rng.choice(self.meds, size=n, p=self.med_w[True])
        cardio_pick = rng.choice(self.cardio, size=n)
        recur = rng.random(n) < h.cardio_recur
        sbp = rng.normal(h.bp_mean + h.bp_shift_cardio * active, h.bp_sd)
        bp = self.bp_tokens[np.searchsorted(self.edges, np.maximum(sbp, 1.0), side="right")]
        p_d, p_m = h.p_diagnosis, h.p_medication
        codes = np.where(
            cat_u < p_d,
            np.where(active & recur, cardio_pick, diag_pick),
            np.where(cat_u < p_d + p_m, np.where(active, med_boost, med_plain), bp),
        )
        if has_cardio:
            codes[onset] = cardio_pick[onset]
        return codes, ages, birth_year


def confounder_indicator(cohort: Cohort, spec: ConfounderSpec) -> np.ndarray:
    """``Z`` (0/1) for every patient under the given confounder definition."""
    if spec.kind == "persistent":
        return np.array([int(p.statics.get(spec.static) == spec.value) for p in cohort.patients], dtype=np.int64)
    members = set(cohort.vocabulary.group_members(spec.group))
    return np.array(
        [int(any(e.code in members for e in p.encounters)) for p in cohort.patients], dtype=np.int64
    )


def gen_histories(cfg: SynthConfig) -> Cohort:
    """Histories, statics and exposures for ``cfg.n_patients`` patients (no outcomes).

    Output is a pure function of ``cfg``: every patient draws from its own
    stream keyed by ``(seed, purpose, index)``.
    """
    vocab = make_vocabulary(cfg.vocab_spec)
    sampler = _Sampler(vocab, cfg)
    R = cfg.vocab_spec.n_regions
    patients = []
    for i in range(cfg.n_patients):
        rng = patient_rng(cfg.seed, _HISTORY, i)
        sex = int(rng.random() < 0.5)
        region = int(rng.integers(R))
        smoking = int(rng.random() < cfg.history.p_smoking)
        codes, ages, birth_year = sampler.history(rng, cfg, sex)
        encs = tuple(
            Encounter(int(c), int(a), birth_year + int(a), j) for j, (c, a) in enumerate(zip(codes, ages))
        )
        patients.append(PatientRecord(f"p{i:06d}", StaticVars(sex, region, smoking), encs, 0, 0))
    cohort = Cohort(vocab, tuple(patients), f"synth:{cfg.config_hash()}")
    z = confounder_indicator(cohort, cfg.confounder)
    p1, p0 = cfg.exposure_assoc.p1, cfg.exposure_assoc.p0
    out = []
    for i, p in enumerate(cohort.patients):
        u = patient_rng(cfg.seed, _EXPOSURE, i).random()
        out.append(p.replace(t=int(u < (p1 if z[i] else p0))))
    return cohort.with_patients(out)


def compute_lambda(cohort: Cohort, spec: ConfounderSpec) -> Cohort:
    """Attach ``lambda_i``: the treated fraction of patient i's ``Z`` stratum."""
    z = confounder_indicator(cohort, spec)
    t = cohort.arrays()["t"]
    lam_by_z = {}
    for value in np.unique(z):
        stratum = z == value
        lam_by_z[int(value)] = float(t[stratum].sum()) / float(stratum.sum())
    return cohort.with_patients(p.replace(lam=lam_by_z[int(zi)]) for p, zi in zip(cohort.patients, z))


def outcome_probabilities(lam: np.ndarray, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(P(y1=1), P(y0=1))`` per patient from the outcome-sampling function."""
    a, m, c = cfg.coeffs.a, cfg.coeffs.m, cfg.coeffs.c
    conf = m * cfg.beta * (np.asarray(lam, dtype=float) + c)
    return expit(a + conf), expit(conf)


def _lambdas(cohort: Cohort) -> np.ndarray:
    if not cohort.patients or cohort.patients[0].lam is None:
        raise ValidationError("lambda not attached; run compute_lambda first")
    return cohort.arrays()["lam"]


def sample_outcomes(cohort: Cohort, cfg: SynthConfig) -> Cohort:
    """Draw independent ``y1``/``y0`` per patient and set the factual ``y``."""
    pr1, pr0 = outcome_probabilities(_lambdas(cohort), cfg)
    out = []
    for i, p in enumerate(cohort.patients):
        u1, u0 = patient_rng(cfg.seed, _OUTCOME, i).random(2)
        y1, y0 = int(u1 < pr1[i]), int(u0 < pr0[i])
        out.append(p.replace(y0=y0, y1=y1, y=y1 if p.t == 1 else y0))
    return cohort.with_patients(out)


def ground_truth_rr(cohort: Cohort, cfg: SynthConfig) -> GroundTruth:
    pr1, pr0 = outcome_probabilities(_lambdas(cohort), cfg)
    ey1, ey0 = float(pr1.mean()), float(pr0.mean())
    sampled = None
    if cohort.patients[0].y0 is not None:
        arr = cohort.arrays()
        if arr["y0"].sum() > 0:
            sampled = float(arr["y1"].mean() / arr["y0"].mean())
    return GroundTruth(ey1 / ey0, ey1, ey0, sampled)


def empirical_rr(cohort: Cohort) -> float:
    arr = cohort.arrays()
    return empirical_rr_arrays(arr["t"], arr["y"])


def empirical_rr_arrays(t, y) -> float:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n1, n0 = t.sum(), (1 - t).sum()
    if n1 == 0 or n0 == 0:
        raise EstimationError("empirical RR undefined: an exposure group is empty")
    control_events = (y * (1 - t)).sum()
    if control_events == 0:
        raise EstimationError("empirical RR undefined: no outcome events among controls")
    return float(((y * t).sum() / n1) / (control_events / n0))


def standardized_rr(cohort: Cohort, z: np.ndarray) -> tuple[float, float]:
    """Z-standardized RR and its delta-method standard error.

    Each stratum's risks are weighted by the stratum's share of the whole
    cohort, which removes confounding by ``Z`` exactly.
    """
    arr = cohort.arrays()
    t, y = arr["t"], arr["y"].astype(float)
    z = np.asarray(z)
    n = len(t)
    num = den = var_num = var_den = 0.0
    for value in np.unique(z):
        s = z == value
        w = s.sum() / n
        treated, control = s & (t == 1), s & (t == 0)
        if treated.sum() == 0 or control.sum() == 0:
            raise EstimationError(f"stratum Z={value} lacks an exposure group")
        r1, r0 = y[treated].mean(), y[control].mean()
        num += w * r1
        den += w * r0
        var_num += w**2 * r1 * (1 - r1) / treated.sum()
        var_den += w**2 * r0 * (1 - r0) / control.sum()
    if den == 0:
        raise EstimationError("standardized RR undefined: zero control risk")
    rr = num / den
    se = rr * math.sqrt(var_num / num**2 + var_den / den**2)
    return float(rr), float(se)


def generate(cfg: SynthConfig) -> tuple[Cohort, GroundTruth]:
    """Full pipeline: histories, lambda, outcomes, ground truth."""
    cohort = gen_histories(cfg)
    cohort = compute_lambda(cohort, cfg.confounder)
    cohort = sample_outcomes(cohort, cfg)
    return cohort, ground_truth_rr(cohort, cfg)


def with_outcomes_for_beta(histories: Cohort, cfg: SynthConfig, beta: float) -> tuple[Cohort, GroundTruth]:
    """Re-sample outcomes of an existing lambda-annotated cohort at another beta."""
    cfg_b = cfg.with_beta(beta)
    cohort = sample_outcomes(histories, cfg_b)
    return cohort, ground_truth_rr(cohort, cfg_b)
