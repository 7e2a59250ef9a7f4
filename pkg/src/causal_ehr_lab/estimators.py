"""Risk-ratio estimators on out-of-fold predictions.

Predictions are ``(q0, q1, g, t, y)`` per patient: the two conditional
outcome probabilities, the propensity, the observed exposure and outcome.
Estimators accept either a list of :class:`PredictionTriple` or a
:class:`PredictionTable` (column arrays) and return an
:class:`EstimateReport`.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .errors import EstimationError, FluctuationError, ValidationError

TRIM_LOW = 0.03
TRIM_HIGH = 0.97
Z95 = 1.96


@dataclass(frozen=True)
class PredictionTriple:
    patient_id: str
    fold: int
    q0: float
    q1: float
    g: float
    t: int
    y: int


@dataclass
class PredictionTable:
    """Column view of a prediction list; row order is preserved everywhere."""

    patient_id: np.ndarray
    fold: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    g: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.patient_id = np.asarray(self.patient_id, dtype=object)
        self.fold = np.asarray(self.fold, dtype=np.int64)
        for name in ("q0", "q1", "g"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = len(self.q0)
        if any(len(getattr(self, f)) != n for f in ("patient_id", "fold", "q1", "g", "t", "y")):
            raise ValidationError("prediction columns have unequal lengths")

    def __len__(self):
        return len(self.q0)

    @classmethod
    def from_triples(cls, preds: Sequence[PredictionTriple]) -> "PredictionTable":
        return cls(
            patient_id=[p.patient_id for p in preds],
            fold=[p.fold for p in preds],
            q0=[p.q0 for p in preds],
            q1=[p.q1 for p in preds],
            g=[p.g for p in preds],
            t=[p.t for p in preds],
            y=[p.y for p in preds],
        )

    def to_triples(self) -> list[PredictionTriple]:
        return [
            PredictionTriple(str(i), int(f), float(a), float(b), float(c), int(t), int(y))
            for i, f, a, b, c, t, y in zip(self.patient_id, self.fold, self.q0, self.q1, self.g, self.t, self.y)
        ]

    def subset(self, mask) -> "PredictionTable":
        return PredictionTable(*(getattr(self, f)[mask] for f in _COLUMNS))

    @property
    def folds(self) -> list[int]:
        return sorted(set(self.fold.tolist()))


_COLUMNS = ("patient_id", "fold", "q0", "q1", "g", "t", "y")


def as_table(preds) -> PredictionTable:
    if isinstance(preds, PredictionTable):
        return preds
    return PredictionTable.from_triples(list(preds))


@dataclass(frozen=True)
class FluctuationEps:
    eps0: float
    eps1: float


@dataclass
class EstimateReport:
    """RR point estimate with interval and provenance.

    ``ci_kind`` is ``"fold"`` for the spread of per-fold estimates or
    ``"influence-curve"`` for the pooled targeted estimate, in which case
    the fold-spread interval is still given in ``fold_ci``.
    """

    rr: float
    ci_low: float | None
    ci_high: float | None
    per_fold: list[float] = field(default_factory=list)
    method: str = ""
    se: float | None = None
    ci_kind: str = "fold"
    eps: FluctuationEps | None = None
    fold_eps: list[FluctuationEps] | None = None
    fold_ci: tuple[float, float] | None = None
    n_trimmed: int = 0
    n: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.fold_ci is not None:
            d["fold_ci"] = list(self.fold_ci)
        return d

    @classmethod
    def from_dict(cls, d) -> "EstimateReport":
        d = dict(d)
        if d.get("eps") is not None:
            d["eps"] = FluctuationEps(**d["eps"])
        if d.get("fold_eps") is not None:
            d["fold_eps"] = [FluctuationEps(**e) for e in d["fold_eps"]]
        if d.get("fold_ci") is not None:
            d["fold_ci"] = tuple(d["fold_ci"])
        return cls(**d)


# ---------------------------------------------------------------------------


def trim(preds, low: float = TRIM_LOW, high: float = TRIM_HIGH):
    """Drop patients whose propensity lies outside ``[low, high]``.

    Boundary values are kept. Returns ``(kept, n_trimmed)`` with ``kept`` of
    the same kind (list or table) as the input.
    """
    tab = as_table(preds)
    keep = (tab.g >= low) & (tab.g <= high)
    n_trimmed = int((~keep).sum())
    if len(tab) and not keep.any():
        raise EstimationError("every patient was trimmed by the propensity bounds")
    if isinstance(preds, PredictionTable):
        return tab.subset(keep), n_trimmed
    kept = [p for p, k in zip(preds, keep) if k]
    return kept, n_trimmed


def fold_ci(per_fold: Sequence[float]) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval over fold estimates."""
    x = np.asarray(per_fold, dtype=float)
    k = len(x)
    if k < 2:
        raise ValidationError("fold_ci needs at least two fold estimates")
    mean = float(x.mean())
    half = Z95 * float(x.std(ddof=1)) / math.sqrt(k)
    return mean, mean - half, mean + half


def _ratio(num: float, den: float) -> float:
    if den < 1e-12:
        raise EstimationError(f"mean control-arm prediction {den!r} is too small for a ratio")
    return num / den


def pooled_rr(preds) -> float:
    tab = as_table(preds)
    if not len(tab):
        raise EstimationError("no predictions")
    return _ratio(float(tab.q1.mean()), float(tab.q0.mean()))


def _fold_report(per_fold: list[float], method: str, **kw) -> EstimateReport:
    if len(per_fold) >= 2:
        mean, lo, hi = fold_ci(per_fold)
        se = float(np.std(per_fold, ddof=1)) / math.sqrt(len(per_fold))
    else:
        mean, lo, hi, se = per_fold[0], None, None, None
    return EstimateReport(rr=mean, ci_low=lo, ci_high=hi, per_fold=list(per_fold), method=method, se=se, **kw)


def naive_rr(preds) -> EstimateReport:
    """Plug-in RR: per-fold ratio of mean predicted risks, averaged over folds."""
    tab = as_table(preds)
    if not len(tab):
        raise EstimationError("no predictions")
    per_fold = [pooled_rr(tab.subset(tab.fold == f)) for f in tab.folds]
    return _fold_report(per_fold, "naive", n=len(tab))


# ---------------------------------------------------------------------------
# targeting


def _loglik(offset, X, y, eps):
    eta = offset + X @ eps
    # sum of y*eta - log(1 + e^eta), stable form
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _golden_fallback(offset, X, y, eps):
    eps = eps.copy()
    for j in range(X.shape[1]):
        if not np.any(X[:, j]):
            eps[j] = 0.0
            continue

        def nll(v, j=j):
            e = eps.copy()
            e[j] = v
            return -_loglik(offset, X, y, e)

        res = optimize.minimize_scalar(nll, bracket=(eps[j] - 1.0, eps[j] + 1.0), method="golden",
                                       options={"xtol": 1e-12})
        eps[j] = res.x
    return eps


def solve_fluctuation(offset, X, y, max_iter: int = 100, tol: float = 1e-10):
    """Maximise the offset-logistic likelihood in the fluctuation coefficients.

    Damped Newton with likelihood backtracking. Coordinates whose clever
    covariate is identically zero stay at 0. Falls back to per-coordinate
    golden-section search when the Hessian condition number exceeds 1e8.
    """
    offset = np.asarray(offset, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    active = np.flatnonzero(np.any(X != 0, axis=0))
    eps = np.zeros(X.shape[1])
    if not len(active):
        return eps
    Xa = X[:, active]
    ea = np.zeros(len(active))
    ll = _loglik(offset, Xa, y, ea)
    score = Xa.T @ (y - expit(offset))
    for _ in range(max_iter):
        if np.max(np.abs(score)) < tol:
            eps[active] = ea
            return eps
        p = expit(offset + Xa @ ea)
        hess = Xa.T @ ((p * (1 - p))[:, None] * Xa)
        if not np.all(np.isfinite(hess)) or np.linalg.cond(hess) > 1e8:
            ea = _golden_fallback(offset, Xa, y, ea)
            eps[active] = ea
            return eps
        step = np.linalg.solve(hess, score)
        s = 1.0
        while True:
            cand = ea + s * step
            ll_new = _loglik(offset, Xa, y, cand)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)) or s < 1e-10:
                break
            s *= 0.5
        moved = np.max(np.abs(cand - ea))
        ea, ll = cand, ll_new
        score = Xa.T @ (y - expit(offset + Xa @ ea))
        if moved <= 1e-15 * (1.0 + np.max(np.abs(ea))):
            eps[active] = ea
            return eps
    if np.max(np.abs(score)) < tol:
        eps[active] = ea
        return eps
    raise FluctuationError(
        f"fluctuation solve did not converge in {max_iter} iterations (|score|={np.max(np.abs(score)):.3e})",
        grad_norm=float(np.max(np.abs(score))),
    )


def clever_covariates(t, g):
    t = np.asarray(t, dtype=float)
    g = np.asarray(g, dtype=float)
    return (1 - t) / (1 - g), t / g


def tmle_fluctuate(preds, max_iter: int = 100):
    """One targeting step with two clever covariates.

    Fits ``logit q*(t) = logit q(t) + eps1 * t/g + eps0 * (1-t)/(1-g)``
    by maximum likelihood and returns ``(q0*, q1*, FluctuationEps)`` for
    every input row. An arm whose coefficient is exactly zero is returned
    unchanged.
    """
    tab = as_table(preds)
    h0, h1 = clever_covariates(tab.t, tab.g)
    q_t = np.where(tab.t == 1, tab.q1, tab.q0)
    eps0, eps1 = solve_fluctuation(logit(q_t), np.column_stack([h0, h1]), tab.y, max_iter=max_iter)
    q1s = tab.q1 if eps1 == 0.0 else expit(logit(tab.q1) + eps1 / tab.g)
    q0s = tab.q0 if eps0 == 0.0 else expit(logit(tab.q0) + eps0 / (1 - tab.g))
    return q0s, q1s, FluctuationEps(float(eps0), float(eps1))


def fluctuation_score(preds, q0s, q1s) -> tuple[float, float]:
    """Score equations ``sum H_a (y - q*_t)`` at the updated predictions."""
    tab = as_table(preds)
    h0, h1 = clever_covariates(tab.t, tab.g)
    resid = tab.y - np.where(tab.t == 1, q1s, q0s)
    return float(h0 @ resid), float(h1 @ resid)


def cv_tmle_rr(preds) -> EstimateReport:
    """Pooled CV-TMLE: trim, target all out-of-fold predictions at once, take the ratio.

    The interval comes from the influence curve of log RR; the per-fold
    ratios of the targeted predictions are reported alongside with their
    fold-spread interval.
    """
    tab = as_table(preds)
    kept, n_trimmed = trim(tab)
    q0s, q1s, eps = tmle_fluctuate(kept)
    psi1, psi0 = float(q1s.mean()), float(q0s.mean())
    rr = _ratio(psi1, psi0)
    h0, h1 = clever_covariates(kept.t, kept.g)
    resid = kept.y - np.where(kept.t == 1, q1s, q0s)
    ic = (h1 * resid + q1s - psi1) / psi1 - (h0 * resid + q0s - psi0) / psi0
    n = len(kept)
    se_log = math.sqrt(float(np.var(ic)) / n)
    per_fold = []
    for f in kept.folds:
        sel = kept.fold == f
        per_fold.append(_ratio(float(q1s[sel].mean()), float(q0s[sel].mean())))
    fci = fold_ci(per_fold)[1:] if len(per_fold) >= 2 else None
    return EstimateReport(
        rr=rr,
        ci_low=rr * math.exp(-Z95 * se_log),
        ci_high=rr * math.exp(Z95 * se_log),
        per_fold=per_fold,
        method="cv-tmle",
        se=rr * se_log,
        ci_kind="influence-curve",
        eps=eps,
        fold_ci=fci,
        n_trimmed=n_trimmed,
        n=n,
    )


def tmle_rr(preds) -> EstimateReport:
    """Fold-wise TMLE: trim and target within each fold, then average fold ratios."""
    tab = as_table(preds)
    per_fold, fold_eps, n_trimmed = [], [], 0
    for f in tab.folds:
        kept, nt = trim(tab.subset(tab.fold == f))
        n_trimmed += nt
        q0s, q1s, eps = tmle_fluctuate(kept)
        per_fold.append(_ratio(float(q1s.mean()), float(q0s.mean())))
        fold_eps.append(eps)
    return _fold_report(per_fold, "tmle", fold_eps=fold_eps, n_trimmed=n_trimmed, n=len(tab) - n_trimmed)


# ---------------------------------------------------------------------------


def sae(estimates: Sequence[float], truths: Sequence[float]) -> float:
    """Sum of absolute errors across a grid of experiments."""
    if len(estimates) != len(truths):
        raise ValidationError("estimates and truths differ in length")
    return float(np.sum(np.abs(np.asarray(estimates, float) - np.asarray(truths, float))))


def sae_se(ses: Sequence[float]) -> float:
    """Root-sum-of-squares propagation of per-experiment standard errors."""
    return float(math.sqrt(np.sum(np.square(np.asarray(ses, float)))))


ESTIMATORS = {"naive": naive_rr, "tmle": tmle_rr, "cv-tmle": cv_tmle_rr}


# ---------------------------------------------------------------------------
# CSV


def write_predictions(preds, path) -> None:
    tab = as_table(preds)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_COLUMNS)
        for row in zip(tab.patient_id, tab.fold, tab.q0, tab.q1, tab.g, tab.t, tab.y):
            w.writerow([row[0], int(row[1]), repr(float(row[2])), repr(float(row[3])), repr(float(row[4])),
                        int(row[5]), int(row[6])])


def read_predictions(path) -> PredictionTable:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(_COLUMNS) - set(rows[0]):
        raise ValidationError(f"prediction CSV must have columns {','.join(_COLUMNS)}")
    return PredictionTable(
        patient_id=[r["patient_id"] for r in rows],
        fold=[int(r["fold"]) for r in rows],
        q0=[float(r["q0"]) for r in rows],
        q1=[float(r["q1"]) for r in rows],
        g=[float(r["g"]) for r in rows],
        t=[int(r["t"]) for r in rows],
        y=[int(r["y"]) for r in rows],
    )
