"""Masked-encounter and masked-static perturbation for the auxiliary objectives."""
from __future__ import annotations

import numpy as np

from ..cohort import (
    CATEGORIES,
    KIND_ENC,
    MASK,
    STATIC_KINDS,
    STATIC_NAMES,
    EncodedSequence,
    Vocabulary,
)
from .config import ModelConfig
from .losses import IGNORE


class ReplacementPool:
    """Same-category, non-protected, non-special replacement candidates."""

    def __init__(self, vocab: Vocabulary):
        cats = vocab.category_codes
        special = CATEGORIES.index("special")
        flat, start, count = [], [], []
        for ci in range(len(CATEGORIES)):
            members = [
                i for i in range(len(vocab)) if cats[i] == ci and ci != special and i not in vocab.protected
            ]
            start.append(len(flat))
            count.append(len(members))
            flat.extend(members)
        self.category = np.asarray(cats)
        self.flat = np.asarray(flat, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)

    def draw(self, originals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(originals.shape)
        if not len(self.flat):
            return originals.copy()
        cat = self.category[originals]
        n = self.count[cat]
        idx = np.minimum(self.start[cat] + (u * n).astype(np.int64), len(self.flat) - 1)
        return np.where(n > 0, self.flat[idx], originals)


def mask_batch(codes, kinds, statics, pool: ReplacementPool, cfg: ModelConfig, static_cards: dict,
               rng: np.random.Generator, withheld: frozenset = frozenset()):
    """Perturb a padded batch.

    Returns ``(codes, statics, mem_labels, static_labels)`` where labels hold
    the original value at perturbed slots and ``IGNORE`` elsewhere.
    ``static_labels`` maps each static name to a per-row label array.
    """
    codes = np.array(codes, dtype=np.int64, copy=True)
    statics = np.array(statics, dtype=np.int64, copy=True)
    temporal = kinds == KIND_ENC
    u = rng.random(codes.shape)
    f_mask, f_repl = cfg.mem_mask_fraction, cfg.mem_replace_fraction
    selected = temporal & (u < cfg.mem_budget)
    labels = np.where(selected, codes, IGNORE)
    to_mask = selected & (u < f_mask)
    to_replace = selected & (u >= f_mask) & (u < f_mask + f_repl)
    if to_replace.any():
        codes[to_replace] = pool.draw(codes[to_replace], rng)
    codes[to_mask] = MASK

    static_labels = {}
    B = codes.shape[0]
    su = rng.random((B, len(STATIC_NAMES)))
    for k, name in enumerate(STATIC_NAMES):
        lab = np.full(B, IGNORE, dtype=np.int64)
        card = static_cards[name]
        if name not in withheld:
            slot = kinds == STATIC_KINDS[name]
            rows, cols = np.nonzero(slot)
            pick = su[rows, k] < cfg.static_mask_prob
            pick &= statics[rows, cols] < card
            lab[rows[pick]] = statics[rows[pick], cols[pick]]
            statics[rows[pick], cols[pick]] = card
        static_labels[name] = lab
    return codes, statics, labels, static_labels


def mask_encounters(enc: EncodedSequence, vocab: Vocabulary, cfg: ModelConfig, rng: np.random.Generator,
                    pool: ReplacementPool | None = None):
    """Single-sequence wrapper around :func:`mask_batch`.

    Returns the perturbed sequence, the per-slot label array and the
    per-static labels.
    """
    pool = pool or ReplacementPool(vocab)
    codes, statics, labels, static_labels = mask_batch(
        enc.codes[None], enc.kinds[None], enc.statics[None], pool, cfg, vocab.statics, rng
    )
    perturbed = EncodedSequence(
        codes=codes[0], ages=enc.ages.copy(), years=enc.years.copy(), positions=enc.positions.copy(),
        kinds=enc.kinds.copy(), statics=statics[0], n_unknown=enc.n_unknown,
    )
    return perturbed, labels[0], {k: int(v[0]) for k, v in static_labels.items()}
