"""Batching, MEM pretraining and five-fold causal fitting."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from ..cohort import (
    STATIC_KINDS,
    STATIC_NAMES,
    Cohort,
    EncodedSequence,
    encode_patient,
)
from ..errors import CellTimeout, TrainingError, ValidationError
from ..estimators import PredictionTable
from ..folds import kfold_split
from .config import MODES, ModelConfig
from .losses import loss_parts, mode_loss, pretrain_loss, uses_mem
from .masking import ReplacementPool, mask_batch
from .net import TBEHRT

log = logging.getLogger(__name__)

_ARRAYS = ("codes", "ages", "years", "positions", "kinds", "statics")


@dataclass
class EncodedCohort:
    """Padded ``[n, L]`` arrays for a whole cohort plus labels."""

    codes: np.ndarray
    ages: np.ndarray
    years: np.ndarray
    positions: np.ndarray
    kinds: np.ndarray
    statics: np.ndarray
    lengths: np.ndarray
    t: np.ndarray
    y: np.ndarray
    ids: list
    static_cards: dict
    withheld_statics: frozenset = frozenset()
    withheld_codes: frozenset = frozenset()
    n_unknown: int = 0

    def __len__(self):
        return len(self.lengths)


def collate(seqs: Sequence[EncodedSequence]) -> dict:
    """Right-pad sequences into ``[B, L]`` arrays (kind ``KIND_PAD`` on padding)."""
    L = max(len(s) for s in seqs)
    out = {name: np.zeros((len(seqs), L), dtype=np.int64) for name in _ARRAYS}
    for i, s in enumerate(seqs):
        n = len(s)
        for name in _ARRAYS:
            out[name][i, :n] = getattr(s, name)
    out["lengths"] = np.array([len(s) for s in seqs], dtype=np.int64)
    return out


def encode_cohort(cohort: Cohort, max_len: int, withheld_statics: Iterable[str] = (),
                  withheld_codes: Iterable[int] = ()) -> EncodedCohort:
    ws, wc = frozenset(withheld_statics), frozenset(withheld_codes)
    unknown = set(ws) - set(STATIC_NAMES)
    if unknown:
        raise ValidationError(f"unknown static variables {sorted(unknown)}")
    seqs = [encode_patient(p, cohort.vocabulary, max_len, ws, wc) for p in cohort.patients]
    arr = collate(seqs) if seqs else {n: np.zeros((0, 0), np.int64) for n in _ARRAYS} | {"lengths": np.zeros(0, np.int64)}
    lab = cohort.arrays()
    return EncodedCohort(
        **{n: arr[n] for n in _ARRAYS},
        lengths=arr["lengths"],
        t=lab["t"],
        y=lab["y"],
        ids=[p.id for p in cohort.patients],
        static_cards=dict(cohort.vocabulary.statics),
        withheld_statics=ws,
        withheld_codes=wc,
        n_unknown=sum(s.n_unknown for s in seqs),
    )


def batch_arrays(ec: EncodedCohort, idx: np.ndarray) -> dict:
    L = int(ec.lengths[idx].max())
    b = {name: getattr(ec, name)[idx, :L] for name in _ARRAYS}
    b["lengths"] = ec.lengths[idx]
    b["t"] = ec.t[idx]
    b["y"] = ec.y[idx]
    return b


def to_tensors(b: dict) -> dict:
    out = {}
    for k, v in b.items():
        if k == "static_labels":
            out[k] = {n: torch.as_tensor(a) for n, a in v.items()}
        else:
            out[k] = torch.as_tensor(v)
    return out


def embed_sequence(enc: EncodedSequence, model: TBEHRT) -> torch.Tensor:
    """``[L, hidden]`` embedding of a single encoded sequence."""
    b = to_tensors(collate([enc]))
    return model.embed(b["codes"], b["ages"], b["years"], b["positions"], b["kinds"], b["statics"])[0]


class InputAudit:
    """Records what every model saw, for out-of-fold and withholding checks."""

    def __init__(self, withheld_statics: Iterable[str] = (), withheld_codes: Iterable[int] = (),
                 static_cards: dict | None = None):
        self.withheld_statics = frozenset(withheld_statics)
        self.withheld_codes = np.array(sorted(withheld_codes), dtype=np.int64)
        self.static_cards = static_cards or {}
        self.trained_on: dict[int, set] = {}
        self.predicted: dict[int, set] = {}
        self.violations: list[str] = []
        self.batches_seen = 0

    def on_batch(self, phase: str, fold, b: dict) -> None:
        self.batches_seen += 1
        if len(self.withheld_codes) and np.isin(b["codes"], self.withheld_codes).any():
            self.violations.append(f"{phase} fold {fold}: withheld code present in input")
        for name in self.withheld_statics:
            slot = b["kinds"] == STATIC_KINDS[name]
            if np.any(b["statics"][slot] != self.static_cards[name]):
                self.violations.append(f"{phase} fold {fold}: withheld static {name} visible")

    def on_train(self, fold: int, ids) -> None:
        self.trained_on.setdefault(fold, set()).update(ids)

    def on_predict(self, fold: int, ids) -> None:
        self.predicted.setdefault(fold, set()).update(ids)

    def out_of_fold_ok(self) -> bool:
        return all(not (self.predicted[f] & self.trained_on.get(f, set())) for f in self.predicted)

    def check(self) -> None:
        if self.violations:
            raise ValidationError("input audit failed: " + "; ".join(self.violations[:5]))
        if not self.out_of_fold_ok():
            raise ValidationError("input audit failed: a patient was predicted by a model trained on it")


@dataclass
class FitResult:
    predictions: PredictionTable
    fold_states: list = field(default_factory=list)
    pretrained_state: dict | None = None
    history: dict = field(default_factory=dict)
    folds: np.ndarray | None = None


class Trainer:
    """Owns one model and its optimiser; runs epochs over index sets."""

    def __init__(self, model: TBEHRT, ec: EncodedCohort, cfg: ModelConfig, pool: ReplacementPool,
                 rng: np.random.Generator, audit: InputAudit | None = None, deadline: float | None = None):
        self.model = model
        self.ec = ec
        self.cfg = cfg
        self.pool = pool
        self.rng = rng
        self.audit = audit
        self.deadline = deadline

    def _make_batch(self, idx, masked: bool) -> dict:
        b = batch_arrays(self.ec, idx)
        if masked:
            codes, statics, labels, static_labels = mask_batch(
                b["codes"], b["kinds"], b["statics"], self.pool, self.cfg, self.ec.static_cards, self.rng,
                withheld=self.ec.withheld_statics,
            )
            b["codes"], b["statics"] = codes, statics
            b["mem_labels"] = labels
            b["static_labels"] = static_labels
        return b

    def run(self, idx: np.ndarray, epochs: int, mode: str | None, phase: str, fold=None) -> list[float]:
        """Train for ``epochs``; ``mode=None`` means MEM-only pretraining."""
        cfg = self.cfg
        masked = mode is None or uses_mem(mode)
        opt = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
        sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.decay_rate)
        history = []
        for epoch in range(epochs):
            self.model.train()
            order = self.rng.permutation(idx)
            total, count = 0.0, 0
            for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
                if self.deadline is not None and time.monotonic() > self.deadline:
                    raise CellTimeout(f"{phase}: wall-clock budget exceeded at epoch {epoch}")
                bidx = order[start:start + cfg.batch_size]
                b = self._make_batch(bidx, masked)
                if self.audit is not None:
                    self.audit.on_batch(phase, fold, b)
                tb = to_tensors(b)
                out = self.model(tb, with_mem=masked)
                parts = loss_parts(out, tb)
                loss = pretrain_loss(parts) if mode is None else mode_loss(parts, mode, cfg.delta)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss in {phase} at epoch {epoch}, batch {bi}",
                        epoch=epoch, batch=bi, parts={k: float(v) for k, v in parts.items()},
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(bidx)
                count += len(bidx)
            sched.step()
            history.append(total / max(count, 1))
            log.debug("%s fold=%s epoch=%d loss=%.5f", phase, fold, epoch, history[-1])
        return history

    @torch.no_grad()
    def predict(self, idx: np.ndarray, fold=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        self.model.eval()
        g, q0, q1 = [], [], []
        for start in range(0, len(idx), 512):
            bidx = idx[start:start + 512]
            b = batch_arrays(self.ec, bidx)
            if self.audit is not None:
                self.audit.on_batch("predict", fold, b)
            out = self.model(to_tensors(b), with_mem=False)
            g.append(out.g.double().numpy())
            q0.append(out.q0.double().numpy())
            q1.append(out.q1.double().numpy())
        clip = lambda a: np.clip(np.concatenate(a), 1e-6, 1 - 1e-6)
        return clip(q0), clip(q1), clip(g)


def _seeded_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def pretrain(model: TBEHRT, ec: EncodedCohort, cfg: ModelConfig, pool: ReplacementPool,
             audit: InputAudit | None = None, deadline: float | None = None) -> list[float]:
    """MEM-only training over the whole cohort (no exposure or outcome labels used)."""
    torch.manual_seed(cfg.seed)
    trainer = Trainer(model, ec, cfg, pool, _seeded_rng(cfg.seed, 1), audit, deadline)
    return trainer.run(np.arange(len(ec)), cfg.epochs_pretrain, None, "pretrain")


def fit(cohort: Cohort, cfg: ModelConfig, mode: str = "t-behrt", folds: np.ndarray | None = None,
        k: int = 5, fold_seed: int | None = None, withheld_statics: Iterable[str] = (),
        withheld_codes: Iterable[int] = (), audit: InputAudit | None = None,
        deadline: float | None = None, keep_states: bool = False,
        pretrained: dict | None = None) -> FitResult:
    """Fit one network per fold and return out-of-fold predictions.

    Modes with MEM first pretrain on the whole cohort for
    ``cfg.epochs_pretrain`` epochs; every fold then starts from the same
    initial weights, trains on the other folds for ``cfg.epochs_joint``
    epochs and predicts its held-out patients.

    ``pretrained`` is a state dict from an earlier MEM pass over the same
    histories; when given (and the mode uses MEM) pretraining is skipped.
    Pretraining never sees exposure or outcome labels, so one pass can be
    shared by every outcome draw of a cohort.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    ec = encode_cohort(cohort, cfg.max_seq_len, withheld_statics, withheld_codes)
    if folds is None:
        folds = kfold_split(ec.t, k, cfg.seed if fold_seed is None else fold_seed)
    folds = np.asarray(folds)
    torch.manual_seed(cfg.seed)
    model = TBEHRT.for_vocab(cfg, cohort.vocabulary)
    pool = ReplacementPool(cohort.vocabulary)
    history = {"pretrain": [], "folds": []}
    if uses_mem(mode) and pretrained is not None:
        model.load_state_dict(pretrained)
    elif uses_mem(mode) and cfg.epochs_pretrain > 0:
        history["pretrain"] = pretrain(model, ec, cfg, pool, audit, deadline)
    init_state = copy.deepcopy(model.state_dict())

    n = len(ec)
    q0 = np.empty(n)
    q1 = np.empty(n)
    g = np.empty(n)
    states = []
    for f in sorted(set(folds.tolist())):
        test = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        model.load_state_dict(init_state)
        torch.manual_seed(cfg.seed + 1000 + f)
        trainer = Trainer(model, ec, cfg, pool, _seeded_rng(cfg.seed, 2, f), audit, deadline)
        if audit is not None:
            audit.on_train(f, [ec.ids[i] for i in train])
        history["folds"].append(trainer.run(train, cfg.epochs_joint, mode, "joint", f))
        if audit is not None:
            audit.on_predict(f, [ec.ids[i] for i in test])
        q0[test], q1[test], g[test] = trainer.predict(test, f)
        if keep_states:
            states.append(copy.deepcopy(model.state_dict()))
    preds = PredictionTable(
        patient_id=ec.ids, fold=folds, q0=q0, q1=q1, g=g, t=ec.t, y=ec.y,
    )
    return FitResult(preds, states, init_state if uses_mem(mode) else None, history, folds)
