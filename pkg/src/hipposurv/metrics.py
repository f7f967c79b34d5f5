"""Evaluation statistics: concordance, time-dependent ROC, Kaplan-Meier,
log-rank, risk stratification, correlation/agreement tests and the amyloid rule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._special import chi2_sf, norm_sf
from .errors import PreconditionError, ShapeError, UndefinedCorrelationError, UndefinedWeightError

TIE_RULES = ("strict", "half")
# CSF Abeta42 below this (pg/mL) is amyloid positive
CSF_ABETA42_CUTOFF = 192.0
# florbetapir SUVR (whole-cerebellum reference) above this is amyloid positive
SUVR_CUTOFF = 1.11


def _arrays(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    if len({a.size for a in out}) != 1:
        raise ShapeError("input lengths differ")
    return out


# --------------------------------------------------------------------------- concordance


@dataclass
class Concordance:
    c_index: float
    pairs: int

    def __float__(self):
        return self.c_index


def concordance_index(risks, times, events, tie_rule="strict", block=2048) -> Concordance:
    """Fraction of orderable pairs ranked correctly by ``risks``.

    A pair (i, j) is orderable when ``T_j < T_i`` and ``j`` had the event; it
    is concordant when ``risk_j > risk_i``. Under ``tie_rule="half"`` a risk
    tie scores 1/2, under ``"strict"`` it scores 0.
    """
    if tie_rule not in TIE_RULES:
        raise PreconditionError(f"tie_rule must be one of {TIE_RULES}")
    r, t, e = _arrays(risks, times, events)
    ev = np.flatnonzero(e == 1)
    pairs = conc = ties = 0
    for s in range(0, ev.size, block):
        j = ev[s : s + block]
        later = t[None, :] > t[j, None]  # rows: event subject j, cols: candidate i
        pairs += int(later.sum())
        conc += int((later & (r[j, None] > r[None, :])).sum())
        ties += int((later & (r[j, None] == r[None, :])).sum())
    if pairs == 0:
        raise PreconditionError("no orderable pairs")
    num = conc + 0.5 * ties if tie_rule == "half" else float(conc)
    return Concordance(num / pairs, pairs)


# --------------------------------------------------------------------------- Kaplan-Meier & log-rank


@dataclass
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t):
        """Right-continuous ``S(t)``; 1 before the first event time."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)] if self.times.size else 1.0, 1.0)

    def before(self, t):
        """Left limit ``S(t-)``."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t, side="left") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)] if self.times.size else 1.0, 1.0)


def kaplan_meier(times, events) -> SurvivalCurve:
    """Product-limit estimate at the distinct event times.

    Subjects censored at an event time still count as at risk there.
    """
    t, e = _arrays(times, events)
    if t.size == 0:
        raise PreconditionError("Kaplan-Meier needs at least one subject")
    ut = np.unique(t[e == 1])
    ts = np.sort(t)
    n = t.size - np.searchsorted(ts, ut, side="left")
    d = np.array([np.sum((t == u) & (e == 1)) for u in ut], dtype=np.int64)
    s = np.cumprod(1.0 - d / n) if ut.size else np.zeros(0)
    return SurvivalCurve(ut, s, n.astype(np.int64), d)


@dataclass
class LogRankResult:
    statistic: float
    p_value: float
    df: int
    observed: np.ndarray
    expected: np.ndarray


def logrank_test(groups, times, events) -> LogRankResult:
    """K-group log-rank test (chi-square with k-1 degrees of freedom)."""
    groups = np.asarray(groups).ravel()
    t, e = _arrays(times, events)
    if groups.size != t.size:
        raise ShapeError("group labels and times differ in length")
    labels = sorted(set(groups.tolist()), key=str)
    if len(labels) < 2:
        raise PreconditionError("log-rank needs at least two non-empty groups")
    k = len(labels)
    gidx = np.array([labels.index(g) for g in groups.tolist()])
    O = np.zeros(k)
    E = np.zeros(k)
    V = np.zeros((k, k))
    for u in np.unique(t[e == 1]):
        at_risk = t >= u
        n_g = np.bincount(gidx[at_risk], minlength=k).astype(np.float64)
        dmask = (t == u) & (e == 1)
        d_g = np.bincount(gidx[dmask], minlength=k).astype(np.float64)
        n, d = n_g.sum(), d_g.sum()
        O += d_g
        E += d * n_g / n
        if n > 1:
            frac = n_g / n
            V += d * (n - d) / (n - 1) * (np.diag(frac) - np.outer(frac, frac))
    diff = (O - E)[: k - 1]
    Vr = V[: k - 1, : k - 1]
    if np.allclose(diff, 0):
        stat = 0.0
    else:
        stat = float(diff @ np.linalg.pinv(Vr) @ diff)
    stat = max(stat, 0.0)
    return LogRankResult(stat, chi2_sf(stat, k - 1), k - 1, O, E)


# --------------------------------------------------------------------------- stratification


GROUPS = ("Low", "Middle", "High")


def stratify_by_risk(risks) -> np.ndarray:
    """Low below the first quartile, High at or above the third, Middle otherwise."""
    r = np.asarray(risks, dtype=np.float64).ravel()
    if r.size < 4:
        raise PreconditionError("risk stratification needs at least 4 subjects")
    q1, q3 = np.quantile(r, [0.25, 0.75])
    out = np.full(r.size, "Middle", dtype=object)
    out[r < q1] = "Low"
    out[r >= q3] = "High"
    return out


# --------------------------------------------------------------------------- ROC


@dataclass
class RocPoint:
    threshold: float
    sensitivity: float
    specificity: float


def _weighted_auc(pos_scores, pos_w, neg_scores, neg_w):
    """Weighted Mann-Whitney with half credit for ties (exact for unit weights)."""
    order = np.argsort(neg_scores, kind="stable")
    ns = neg_scores[order]
    cw = np.concatenate([[0.0], np.cumsum(neg_w[order])])
    lo = np.searchsorted(ns, pos_scores, side="left")
    hi = np.searchsorted(ns, pos_scores, side="right")
    below = cw[lo]
    tied = cw[hi] - cw[lo]
    num = float(np.sum(pos_w * (below + 0.5 * tied)))
    return num / (float(np.sum(pos_w)) * float(np.sum(neg_w)))


def _roc_points(pos_scores, pos_w, neg_scores, neg_w):
    thresholds = np.unique(np.concatenate([pos_scores, neg_scores]))[::-1]
    tp, fp = float(np.sum(pos_w)), float(np.sum(neg_w))
    pts = [RocPoint(math.inf, 0.0, 1.0)]
    for c in thresholds:
        sens = float(np.sum(pos_w[pos_scores >= c])) / tp
        fpr = float(np.sum(neg_w[neg_scores >= c])) / fp
        pts.append(RocPoint(float(c), sens, 1.0 - fpr))
    return pts


def binary_roc_auc(scores, labels):
    """ROC points (threshold sweep, ``score >= threshold`` is positive) and AUC."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.size != y.size:
        raise ShapeError("scores and labels differ in length")
    if y.all() or not y.any():
        raise PreconditionError("both classes must be present")
    pw, nw = np.ones(int(y.sum())), np.ones(int((~y).sum()))
    return _roc_points(s[y], pw, s[~y], nw), _weighted_auc(s[y], pw, s[~y], nw)


@dataclass
class TdAuc:
    horizon: float
    auc: float
    n_cases: int
    n_controls: int


def td_roc_ipcw(risks, times, events, horizon):
    """Cumulative/dynamic ROC at ``horizon`` with inverse-probability-of-censoring weights.

    Cases (event by the horizon) are weighted by ``1/G(T-)``, controls (still
    event-free after it) by ``1/G(horizon)``, where ``G`` is the Kaplan-Meier
    estimate of the censoring distribution. Subjects censored before the
    horizon drop out. Returns ``(roc_points, TdAuc)``.
    """
    r, t, e = _arrays(risks, times, events)
    cases = (t <= horizon) & (e == 1)
    controls = t > horizon
    if not cases.any() or not controls.any():
        raise PreconditionError(f"horizon {horizon} needs events before it and subjects at risk after it")
    G = kaplan_meier(t, 1 - e)
    g_case = G.before(t[cases])
    g_ctrl = float(G.at(horizon))
    if np.any(g_case <= 0) or g_ctrl <= 0:
        raise UndefinedWeightError(f"censoring survivor function reaches 0 before horizon {horizon}")
    cw = 1.0 / g_case
    kw = np.full(int(controls.sum()), 1.0 / g_ctrl)
    pts = _roc_points(r[cases], cw, r[controls], kw)
    auc = _weighted_auc(r[cases], cw, r[controls], kw)
    return pts, TdAuc(float(horizon), auc, int(cases.sum()), int(controls.sum()))


# --------------------------------------------------------------------------- correlation & tests


def pearson_r(x, y) -> float:
    x, y = _arrays(x, y)
    if x.size < 3:
        raise PreconditionError("pearson_r needs at least 3 observations")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for zero-variance input")
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def icc(measurements) -> float:
    """One-way random-effects ICC(1,1) for an n x k table (subjects x raters)."""
    m = np.asarray(measurements, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] < 2:
        raise ShapeError("icc expects an n x k table with k >= 2")
    n, k = m.shape
    if n < 3:
        raise PreconditionError("icc needs at least 3 subjects")
    row_means = m.mean(axis=1)
    grand = m.mean()
    msb = k * float(np.sum((row_means - grand) ** 2)) / (n - 1)
    msw = float(np.sum((m - row_means[:, None]) ** 2)) / (n * (k - 1))
    if msb + (k - 1) * msw == 0:
        raise UndefinedCorrelationError("icc undefined for constant measurements")
    return (msb - msw) / (msb + (k - 1) * msw)


@dataclass
class RankSumResult:
    statistic: float
    z: float
    p_value: float


def wilcoxon_rank_sum(a, b) -> RankSumResult:
    """Two-sided rank-sum test, normal approximation with tie and continuity corrections.

    ``statistic`` is the rank sum of ``a``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise PreconditionError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    N = n1 + n2
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    W = float(ranks[:n1].sum())
    mu = n1 * (N + 1) / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = n1 * n2 / 12.0 * ((N + 1) - tie / (N * (N - 1))) if N > 1 else 0.0
    if var <= 0:
        return RankSumResult(W, 0.0, 1.0)
    z = max(abs(W - mu) - 0.5, 0.0) / math.sqrt(var)
    return RankSumResult(W, math.copysign(z, W - mu), min(1.0, 2 * norm_sf(z)))


def amyloid_status(csf_abeta42=None, suvr=None) -> str:
    """``positive``/``negative``/``unknown``; CSF decides when present, SUVR otherwise."""

    def missing(v):
        return v is None or (isinstance(v, float) and math.isnan(v))

    if not missing(csf_abeta42):
        return "positive" if csf_abeta42 < CSF_ABETA42_CUTOFF else "negative"
    if not missing(suvr):
        return "positive" if suvr > SUVR_CUTOFF else "negative"
    return "unknown"


# --------------------------------------------------------------------------- bootstrap & adjusted comparison


@dataclass
class BootstrapCI:
    estimate: float
    low: float
    high: float
    n_resamples: int


def bootstrap_ci(statistic, arrays, n_resamples=2000, seed=0, level=0.95) -> BootstrapCI:
    """Percentile bootstrap over subjects.

    ``statistic(*resampled_arrays)`` is evaluated on each resample; resamples
    where it raises ``PreconditionError`` (e.g. no orderable pair) are skipped.
    Resample ``b`` uses the seed sequence ``(seed, b)``.
    """
    arrays = [np.asarray(a) for a in arrays]
    n = arrays[0].shape[0]
    est = float(statistic(*arrays))
    vals = []
    for b in range(n_resamples):
        idx = np.random.default_rng([seed, b]).integers(0, n, size=n)
        try:
            vals.append(float(statistic(*[a[idx] for a in arrays])))
        except PreconditionError:
            continue
    if not vals:
        return BootstrapCI(est, float("nan"), float("nan"), 0)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(vals, [alpha, 1 - alpha])
    return BootstrapCI(est, float(lo), float(hi), len(vals))


@dataclass
class AdjustedGroupTest:
    statistic: float
    p_value: float
    df: int


def adjusted_group_test(groups, times, events, covariates=None) -> AdjustedGroupTest:
    """Likelihood-ratio test for group differences in a Cox model with covariates.

    Compares Cox fits with and without group indicators (reference = first
    group in sorted order); covariates enter both fits.
    """
    from .survival import SurvivalData, fit_cox, neg_log_partial_likelihood

    groups = np.asarray(groups).ravel()
    labels = sorted(set(groups.tolist()), key=str)
    if len(labels) < 2:
        raise PreconditionError("need at least two groups")
    dummies = np.column_stack([(groups == g).astype(float) for g in labels[1:]])
    t, e = _arrays(times, events)
    cov = np.zeros((t.size, 0)) if covariates is None else np.asarray(covariates, dtype=np.float64).reshape(t.size, -1)
    full = fit_cox(SurvivalData(np.column_stack([dummies, cov]), t, e))
    if cov.shape[1]:
        reduced_ll = fit_cox(SurvivalData(cov, t, e)).loglik
    else:
        reduced_ll = -neg_log_partial_likelihood(SurvivalData(np.zeros((t.size, 1)), t, e), np.zeros(1))[0]
    stat = max(0.0, 2 * (full.loglik - reduced_ll))
    df = len(labels) - 1
    return AdjustedGroupTest(stat, chi2_sf(stat, df), df)
