"""Tabular covariates and logistic-regression baselines.

The objective is the summed log-likelihood minus a penalty on the
non-intercept weights: ``lam/2 * ||w||^2`` (L2) or ``lam * ||w||_1`` (L1).
Plain and L2 fits use damped Newton; L1 uses proximal Newton with an inner
coordinate-descent solve. All stop when the (sub)gradient infinity norm of
the objective drops below ``tol``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .cohort import STATIC_NAMES, Cohort
from .errors import ConvergenceError, ValidationError
from .estimators import PredictionTable, naive_rr, tmle_rr
from .folds import kfold_split

PENALTIES = ("none", "l1", "l2")
PROB_FLOOR = 1e-6


@dataclass
class FeatureManifest:
    """Column names plus the scaling constants used for baseline age."""

    columns: list[str]
    age_min: float
    age_max: float
    excluded_statics: list[str] = field(default_factory=list)
    excluded_groups: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "age_min": self.age_min,
            "age_max": self.age_max,
            "excluded_statics": list(self.excluded_statics),
            "excluded_groups": list(self.excluded_groups),
        }


def build_features(cohort: Cohort, exclude_statics: Iterable[str] = (),
                   exclude_groups: Iterable[str] = ()) -> tuple[np.ndarray, FeatureManifest]:
    """Fixed-width covariate matrix, one row per patient.

    Columns, in order: ``age`` (age at the last encounter, min-max scaled
    over the cohort; all zero when constant), ``sex``, ``region=<r>`` one-hot,
    ``smoking``, then ``group:<name>`` for every vocabulary group in
    definition order. A group indicator is 1 when any encounter code belongs
    to the group. Excluded statics and groups are left out entirely.
    """
    vocab = cohort.vocabulary
    missing = [s for s in STATIC_NAMES if s not in vocab.statics]
    if missing:
        raise ValidationError(f"vocabulary lacks static variables {missing}")
    ex_s, ex_g = set(exclude_statics), set(exclude_groups)
    bad = ex_s - set(STATIC_NAMES)
    if bad:
        raise ValidationError(f"unknown static variables {sorted(bad)}")
    bad = ex_g - set(vocab.groups)
    if bad:
        raise ValidationError(f"unknown groups {sorted(bad)}")
    groups = [g for g in vocab.groups if g not in ex_g]
    if not groups and not vocab.groups:
        raise ValidationError("vocabulary has no groups")

    n = len(cohort)
    ages = np.array([p.encounters[-1].age if p.encounters else 0 for p in cohort.patients], dtype=float)
    lo, hi = (float(ages.min()), float(ages.max())) if n else (0.0, 0.0)
    cols: list[np.ndarray] = [np.zeros(n) if hi == lo else (ages - lo) / (hi - lo)]
    names = ["age"]
    if "sex" not in ex_s:
        cols.append(np.array([p.statics.sex for p in cohort.patients], dtype=float))
        names.append("sex")
    if "region" not in ex_s:
        regions = np.array([p.statics.region for p in cohort.patients], dtype=np.int64)
        for r in range(vocab.statics["region"]):
            cols.append((regions == r).astype(float))
            names.append(f"region={r}")
    if "smoking" not in ex_s:
        cols.append(np.array([p.statics.smoking for p in cohort.patients], dtype=float))
        names.append("smoking")

    code_group = np.full((len(vocab), len(groups)), False)
    for j, g in enumerate(groups):
        code_group[list(vocab.group_members(g)), j] = True
    occ = np.zeros((n, len(groups)))
    for i, p in enumerate(cohort.patients):
        if p.encounters:
            codes = np.fromiter((e.code for e in p.encounters), dtype=np.int64)
            occ[i] = code_group[codes].any(axis=0)
    cols.extend(occ.T)
    names.extend(f"group:{g}" for g in groups)

    X = np.column_stack(cols) if n else np.zeros((0, len(names)))
    return X, FeatureManifest(names, lo, hi, sorted(ex_s), sorted(ex_g))


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LogRegModel:
    weights: np.ndarray
    intercept: float
    penalty: str = "none"
    lam: float = 0.0
    n_iter: int = 0

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "intercept": self.intercept,
                "penalty": self.penalty, "lam": self.lam, "n_iter": self.n_iter}


def objective(X, y, intercept: float, w, penalty: str = "none", lam: float = 0.0) -> float:
    """Penalised log-likelihood (to be maximised)."""
    eta = intercept + X @ w
    ll = float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))
    if penalty == "l2":
        ll -= 0.5 * lam * float(w @ w)
    elif penalty == "l1":
        ll -= lam * float(np.abs(w).sum())
    return ll


def _gradient(X, y, b, w, penalty, lam):
    r = y - expit(b + X @ w)
    gb, gw = float(r.sum()), X.T @ r
    if penalty == "l2":
        gw = gw - lam * w
    elif penalty == "l1":
        # minimum-norm subgradient of the penalised objective
        gw = np.where(
            w != 0, gw - lam * np.sign(w),
            np.sign(gw) * np.maximum(np.abs(gw) - lam, 0.0),
        )
    return gb, gw


def _check_inputs(X, y, penalty, lam):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary")
    if penalty not in PENALTIES:
        raise ValidationError(f"penalty must be one of {PENALTIES}")
    if not (lam >= 0 and math.isfinite(lam)):
        raise ValidationError("lam must be finite and non-negative")
    return X, y


def _separation_error(X, y, b, w):
    eta = b + X @ w
    worst = float(np.max(-(y * log_expit(eta) + (1 - y) * log_expit(-eta)))) if len(y) else 0.0
    return worst < 1e-6


def fit_logreg(X, y, penalty: str = "none", lam: float = 1.0, max_iter: int = 200,
               tol: float = 1e-8) -> LogRegModel:
    """Fit a logistic regression with an unpenalised intercept.

    Raises
    ------
    ConvergenceError
        When the gradient criterion is not met within ``max_iter`` outer
        iterations, or when an unpenalised fit separates the data.
    """
    X, y = _check_inputs(X, y, penalty, lam)
    lam = 0.0 if penalty == "none" else float(lam)
    if penalty == "l1":
        return _fit_l1(X, y, lam, max_iter, tol)
    n, d = X.shape
    A = np.column_stack([np.ones(n), X])
    beta = np.zeros(d + 1)
    ybar = float(np.clip(y.mean(), 1e-12, 1 - 1e-12)) if n else 0.5
    beta[0] = math.log(ybar / (1 - ybar))
    reg = np.full(d + 1, lam)
    reg[0] = 0.0
    obj = objective(X, y, beta[0], beta[1:], penalty, lam)
    for it in range(max_iter):
        p = expit(A @ beta)
        grad = A.T @ (y - p) - reg * beta
        if np.max(np.abs(grad)) < tol:
            if penalty == "none" and _separation_error(X, y, beta[0], beta[1:]):
                break
            return LogRegModel(beta[1:].copy(), float(beta[0]), penalty, lam, it)
        hess = A.T @ ((p * (1 - p))[:, None] * A) + np.diag(reg)
        # minimum-norm step: the full region one-hot is collinear with the intercept
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        s = 1.0
        while True:
            cand = beta + s * step
            new = objective(X, y, cand[0], cand[1:], penalty, lam)
            if new >= obj or s < 1e-12:
                break
            s *= 0.5
        if new < obj:
            break
        beta, obj = cand, new
    gb, gw = _gradient(X, y, beta[0], beta[1:], penalty, lam)
    gnorm = max(abs(gb), float(np.max(np.abs(gw))) if d else 0.0)
    if gnorm < tol and not (penalty == "none" and _separation_error(X, y, beta[0], beta[1:])):
        return LogRegModel(beta[1:].copy(), float(beta[0]), penalty, lam, max_iter)
    raise ConvergenceError(
        f"logistic regression did not converge (gradient norm {gnorm:.3e}); "
        "the data may be separable, consider penalty='l1' or 'l2'"
    )


def _fit_l1(X, y, lam, max_iter, tol) -> LogRegModel:
    n, d = X.shape
    ybar = float(np.clip(y.mean(), 1e-12, 1 - 1e-12)) if n else 0.5
    b, w = math.log(ybar / (1 - ybar)), np.zeros(d)
    obj = objective(X, y, b, w, "l1", lam)
    for it in range(max_iter):
        gb, gw = _gradient(X, y, b, w, "l1", lam)
        if max(abs(gb), float(np.max(np.abs(gw))) if d else 0.0) < tol:
            return LogRegModel(w, float(b), "l1", lam, it)
        # quadratic model of the log-likelihood around (b, w)
        eta = b + X @ w
        p = expit(eta)
        wt = np.maximum(p * (1 - p), 1e-12)
        z = eta + (y - p) / wt
        nb, nw = _weighted_lasso_cd(X, z, wt, lam, b, w.copy())
        db, dw = nb - b, nw - w
        s = 1.0
        while True:
            cb, cw = b + s * db, w + s * dw
            new = objective(X, y, cb, cw, "l1", lam)
            if new >= obj or s < 1e-12:
                break
            s *= 0.5
        if new < obj:
            break
        b, w, obj = cb, cw, new
    gb, gw = _gradient(X, y, b, w, "l1", lam)
    gnorm = max(abs(gb), float(np.max(np.abs(gw))) if d else 0.0)
    if gnorm < tol:
        return LogRegModel(w, float(b), "l1", lam, max_iter)
    raise ConvergenceError(f"L1 logistic regression did not converge (gradient norm {gnorm:.3e})")


def _weighted_lasso_cd(X, z, wt, lam, b, w, sweeps: int = 10000, tol: float = 1e-14):
    """Minimise ``0.5 * sum wt (z - b - Xw)^2 + lam |w|_1`` by coordinate descent."""
    resid = z - b - X @ w
    col_sq = (wt[:, None] * X * X).sum(axis=0)
    wsum = wt.sum()
    for _ in range(sweeps):
        delta = 0.0
        nb = b + float(wt @ resid) / wsum
        resid -= nb - b
        delta = max(delta, abs(nb - b))
        b = nb
        for j in range(X.shape[1]):
            if col_sq[j] == 0:
                continue
            rho = float((wt * X[:, j]) @ resid) + col_sq[j] * w[j]
            nj = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if nj != w[j]:
                resid -= X[:, j] * (nj - w[j])
                delta = max(delta, abs(nj - w[j]))
                w[j] = nj
        if delta < tol:
            break
    return b, w


def predict_proba(model: LogRegModel, X) -> np.ndarray:
    return expit(model.intercept + np.asarray(X, dtype=float) @ model.weights)


# ---------------------------------------------------------------------------
# causal estimators


def lr_predictions(X: np.ndarray, t: np.ndarray, y: np.ndarray, folds: np.ndarray,
                   penalty: str = "none", lam: float = 1.0, ids: Sequence | None = None) -> PredictionTable:
    """Out-of-fold ``q0, q1, g`` from an outcome LR on ``[X, t]`` and a propensity LR on ``X``."""
    n = len(t)
    q0, q1, g = np.empty(n), np.empty(n), np.empty(n)
    for f in np.unique(folds):
        te, tr = folds == f, folds != f
        out_model = fit_logreg(np.column_stack([X[tr], t[tr]]), y[tr], penalty, lam)
        prop_model = fit_logreg(X[tr], t[tr], penalty, lam)
        Xt = X[te]
        q0[te] = predict_proba(out_model, np.column_stack([Xt, np.zeros(len(Xt))]))
        q1[te] = predict_proba(out_model, np.column_stack([Xt, np.ones(len(Xt))]))
        g[te] = predict_proba(prop_model, Xt)
    clip = lambda a: np.clip(a, PROB_FLOOR, 1 - PROB_FLOOR)
    return PredictionTable(
        patient_id=list(ids) if ids is not None else list(range(n)),
        fold=folds, q0=clip(q0), q1=clip(q1), g=clip(g), t=t, y=y,
    )


BASELINES = {"lr": ("none", "naive"), "lr-l1": ("l1", "naive"), "lr-l2": ("l2", "naive"),
             "lr-tmle": ("none", "tmle")}


def run_baseline(cohort: Cohort, model: str = "lr-tmle", k: int = 5, seed: int = 0, lam: float = 1.0,
                 exclude_statics: Iterable[str] = (), exclude_groups: Iterable[str] = (),
                 folds: np.ndarray | None = None):
    """Five-fold LR plug-in or LR-TMLE risk ratio.

    Returns ``(EstimateReport, PredictionTable, FeatureManifest)``.
    """
    if model not in BASELINES:
        raise ValidationError(f"model must be one of {sorted(BASELINES)}")
    penalty, est = BASELINES[model]
    X, manifest = build_features(cohort, exclude_statics, exclude_groups)
    arr = cohort.arrays()
    if folds is None:
        folds = kfold_split(arr["t"], k, seed)
    preds = lr_predictions(X, arr["t"], arr["y"], np.asarray(folds), penalty, lam,
                           ids=[p.id for p in cohort.patients])
    report = tmle_rr(preds) if est == "tmle" else naive_rr(preds)
    report.method = model
    return report, preds, manifest


def lr_tmle(cohort: Cohort, **kw):
    """Fold-wise LR-TMLE report (see :func:`run_baseline`)."""
    return run_baseline(cohort, "lr-tmle", **kw)[0]
