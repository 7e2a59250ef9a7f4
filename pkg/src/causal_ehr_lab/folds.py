"""Exposure-stratified k-fold assignment."""
from __future__ import annotations

import numpy as np

from .cohort import Cohort
from .errors import ValidationError


def kfold_split(cohort_or_t, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold id (0..k-1) for every patient, stratified by exposure.

    Treated patients are shuffled and dealt round-robin, then controls
    continue the same deal, so fold sizes differ by at most one and each
    fold's treated count is within one of ``n_treated / k``.
    """
    if isinstance(cohort_or_t, Cohort):
        t = cohort_or_t.arrays()["t"]
    else:
        t = np.asarray(cohort_or_t, dtype=np.int64)
    n = len(t)
    if k < 2:
        raise ValidationError("k must be at least 2")
    if n < k:
        raise ValidationError(f"cannot split {n} patients into {k} folds")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0xF01D,))))
    order = np.concatenate([rng.permutation(np.flatnonzero(t == 1)), rng.permutation(np.flatnonzero(t == 0))])
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k
    for f in range(k):
        classes = np.unique(t[folds == f])
        if len(classes) < 2:
            raise ValidationError(f"fold {f} contains a single exposure class")
    return folds
