"""Cox proportional-hazards models with Breslow ties.

Covariates are always z-scored inside a fit and coefficients are reported in
standardized units. Two solvers share one partial-likelihood kernel:

* :func:`fit_cox` - unpenalized Newton-Raphson with step halving;
* :func:`fit_lasso_path` - cyclic coordinate descent on
  ``NLL(beta)/n + lam * ||beta||_1`` along a decreasing ``lam`` path, with
  :func:`cv_select_lambda` picking ``lam`` by K-fold cross-validated deviance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, FormatError, PreconditionError, ShapeError

COXFIT_MAGIC = "COXFIT1"


@dataclass
class SurvivalData:
    """``X`` is n x p; ``time`` in months (> 0); ``event`` 1 = progressed, 0 = censored."""

    X: np.ndarray
    time: np.ndarray
    event: np.ndarray
    names: list = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event).astype(np.int64)
        n = self.X.shape[0]
        if self.time.shape != (n,) or self.event.shape != (n,):
            raise ShapeError("X, time and event disagree on the number of subjects")
        if not np.all(np.isfinite(self.X)):
            raise PreconditionError("covariates must be finite and non-missing")
        if not np.all(np.isfinite(self.time)) or np.any(self.time <= 0):
            raise PreconditionError("times must be finite and positive")
        if not np.all(np.isin(self.event, (0, 1))):
            raise PreconditionError("event indicators must be 0 or 1")
        if self.names is None:
            self.names = [f"x{j}" for j in range(self.X.shape[1])]
        if len(self.names) != self.X.shape[1]:
            raise ShapeError("one name per covariate column is required")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def subset(self, idx):
        return SurvivalData(self.X[idx], self.time[idx], self.event[idx], list(self.names))


@dataclass
class CoxFit:
    beta: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lam: float
    baseline: np.ndarray  # rows (t_k, H0(t_k)) at distinct event times
    names: list
    loglik: float = float("nan")
    iterations: int = 0
    kind: str = "cox"
    se: np.ndarray | None = None

    def standardize(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.beta.size:
            raise ShapeError(f"expected {self.beta.size} covariates, got {X.shape[1]}")
        return (X - self.mean) / self.sd

    def summary(self):
        """Rows of (name, coef, exp(coef), se, z, p) in standardized units."""
        rows = []
        for j, name in enumerate(self.names):
            b = float(self.beta[j])
            se = float(self.se[j]) if self.se is not None else float("nan")
            z = b / se if se > 0 else float("nan")
            p = math.erfc(abs(z) / math.sqrt(2)) if math.isfinite(z) else float("nan")
            rows.append((name, b, math.exp(b), se, z, p))
        return rows


# --------------------------------------------------------------------------- likelihood kernel


class _RiskSets:
    """Sorted-time bookkeeping for Breslow risk sets, reused across evaluations."""

    def __init__(self, time, event):
        self.order = np.argsort(time, kind="stable")
        self.t = time[self.order]
        self.d = event[self.order].astype(np.float64)
        # risk set of subject i (sorted) starts at the first index with the same time
        self.first = np.searchsorted(self.t, self.t, side="left")
        self.last = np.searchsorted(self.t, self.t, side="right") - 1

    def rev_cumsum(self, v):
        return np.cumsum(v[::-1], axis=0)[::-1]


def _eta_terms(rs, eta):
    """NLL, gradient and Hessian diagonal with respect to eta (sorted order)."""
    es = eta[rs.order]
    c = es.max()
    w = np.exp(es - c)
    S = rs.rev_cumsum(w)[rs.first]  # risk-set sum at each subject's time (scaled)
    nll = -float(np.sum(rs.d * (es - c - np.log(S))))
    A = np.cumsum(rs.d / S)[rs.last]
    B = np.cumsum(rs.d / S**2)[rs.last]
    g = -rs.d + w * A
    h = w * A - w**2 * B
    return nll, g, h, w, S


def neg_log_partial_likelihood(data: SurvivalData, beta, X=None):
    """Breslow negative log partial likelihood.

    Returns ``(value, gradient, hessian_diagonal)`` with respect to ``beta``
    for the covariate matrix ``X`` (default ``data.X`` as given).
    """
    X = data.X if X is None else X
    if data.event.sum() < 1:
        raise PreconditionError("partial likelihood needs at least one event")
    beta = np.asarray(beta, dtype=np.float64)
    rs = _RiskSets(data.time, data.event)
    nll, g_eta, _, w, S = _eta_terms(rs, X @ beta)
    Xs = X[rs.order]
    grad = Xs.T @ g_eta
    # d^2/dbeta_j^2 = sum_k d_k [ sum_R x^2 w / S - (sum_R x w / S)^2 ]
    m1 = rs.rev_cumsum(Xs * w[:, None])[rs.first] / S[:, None]
    m2 = rs.rev_cumsum(Xs**2 * w[:, None])[rs.first] / S[:, None]
    hdiag = (rs.d[:, None] * (m2 - m1**2)).sum(axis=0)
    return nll, grad, hdiag


def _nll_grad_hess(rs, X, beta):
    """Value, gradient and full Hessian for Newton steps."""
    Xs = X[rs.order]
    nll, g_eta, _, w, S = _eta_terms(rs, X @ beta)
    grad = Xs.T @ g_eta
    m1 = rs.rev_cumsum(Xs * w[:, None])[rs.first] / S[:, None]
    outer = rs.rev_cumsum(Xs[:, :, None] * Xs[:, None, :] * w[:, None, None])[rs.first] / S[:, None, None]
    ev = rs.d > 0
    H = np.einsum("i,ijk->jk", rs.d[ev], outer[ev] - m1[ev, :, None] * m1[ev, None, :])
    return nll, grad, H


def _standardize(X, allow_constant=False):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    const = ~(sd > 1e-12 * np.maximum(1.0, np.abs(mean)))
    if np.any(const):
        if not allow_constant:
            raise PreconditionError(f"constant covariate column(s) {np.flatnonzero(const).tolist()}")
        sd = np.where(const, 1.0, sd)
    return (X - mean) / sd, mean, sd


# --------------------------------------------------------------------------- Newton fit


# a standardized coefficient this large means a hazard ratio above e^30 per SD
MAX_STD_COEF = 30.0


def fit_cox(data: SurvivalData, max_iter=100, tol=1e-8) -> CoxFit:
    """Unpenalized Cox fit by Newton-Raphson on standardized covariates.

    Stops when the max-abs gradient drops below ``tol``; halves the step
    whenever the likelihood would decrease. Standard errors come from the
    observed information at the optimum.
    """
    nev = int(data.event.sum())
    if nev < 1:
        raise PreconditionError("Cox fit needs at least one event")
    if data.p >= nev:
        raise PreconditionError(f"{data.p} covariates for {nev} events: model not identifiable")
    Xs, mean, sd = _standardize(data.X)
    rs = _RiskSets(data.time, data.event)
    beta = np.zeros(data.p)
    nll, grad, H = _nll_grad_hess(rs, Xs, beta)
    converged = False
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta - t * step
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                new = _nll_grad_hess(rs, Xs, cand)
            ok = np.isfinite(new[0]) and np.all(np.isfinite(new[1])) and np.all(np.isfinite(new[2]))
            if ok and new[0] <= nll + 1e-12 * abs(nll):
                break
            if t < 1e-10:
                ok = False
                break
            t /= 2
        if not ok:
            break
        beta, (nll, grad, H) = cand, new
    else:
        converged = np.max(np.abs(grad)) < tol
        it = max_iter
    if converged and (np.max(np.abs(beta)) > MAX_STD_COEF or np.linalg.cond(H) > 1e12):
        raise ConvergenceError(
            f"coefficients diverge (max |beta| {np.max(np.abs(beta)):.3g} per SD): monotone likelihood"
        )
    if not converged:
        raise ConvergenceError(
            f"Newton-Raphson did not converge in {max_iter} iterations "
            f"(max |grad| {np.max(np.abs(grad)):.3g}, max |beta| {np.max(np.abs(beta)):.3g}); "
            "possible monotone likelihood"
        )
    try:
        se = np.sqrt(np.diag(np.linalg.inv(H)))
    except np.linalg.LinAlgError:
        se = np.full(data.p, np.nan)
    eta = Xs @ beta
    return CoxFit(beta, mean, sd, 0.0, _breslow(data.time, data.event, eta), list(data.names),
                  loglik=-nll, iterations=it - 1, kind="cox", se=se)


# --------------------------------------------------------------------------- LASSO path


def _soft(u, lam):
    return math.copysign(max(abs(u) - lam, 0.0), u)


def penalized_objective(data, beta, lam, X=None):
    X = data.X if X is None else X
    return neg_log_partial_likelihood(data, beta, X)[0] / data.n + lam * float(np.sum(np.abs(beta)))


def lambda_max(data: SurvivalData, Xs=None) -> float:
    """Smallest ``lam`` whose solution is all zeros."""
    if Xs is None:
        Xs = _standardize(data.X, allow_constant=True)[0]
    rs = _RiskSets(data.time, data.event)
    _, g, *_ = _eta_terms(rs, np.zeros(data.n))
    r = np.empty(data.n)
    r[rs.order] = -g
    # same arithmetic as the first coordinate update, so lam >= lambda_max gives exact zeros
    return max(abs(float(np.ascontiguousarray(Xs[:, j]) @ r)) / data.n for j in range(data.p))


def default_lambdas(lmax, n_lambda=100, ratio=1e-3):
    return lmax * np.logspace(0, math.log10(ratio), n_lambda)


def _active_solve(G, c, beta, lam):
    """Exact minimizer on the current support and signs, or None.

    Solves ``G_AA b = c_A - lam * sign(b_A)`` and accepts it only when the
    signs are kept and every inactive coordinate satisfies ``|c_j - G_j b| <= lam``.
    """
    active = np.flatnonzero(beta)
    if active.size == 0:
        return None
    signs = np.sign(beta[active])
    try:
        b = np.linalg.solve(G[np.ix_(active, active)], c[active] - lam * signs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(b)) or np.any(np.sign(b) != signs):
        return None
    out = np.zeros_like(beta)
    out[active] = b
    slack = np.abs(c - G @ out)
    slack[active] = 0.0
    if np.any(slack > lam * (1 + 1e-10) + 1e-14):
        return None
    return out


def _cd_quadratic(G, c, beta, lam, tol, max_sweeps):
    """Cyclic coordinate descent on ``0.5 b'Gb - c'b + lam |b|_1``.

    Sweeps cycle over the current nonzero set, with a full sweep whenever the
    active set settles. Once a full sweep keeps the support and signs, the
    active subproblem is solved exactly; that answer is kept if it satisfies
    the optimality conditions.
    """
    p = len(beta)
    diag = np.diag(G).copy()
    q = G @ beta
    sweeps = 0

    def sweep(coords):
        biggest = 0.0
        for j in coords:
            if diag[j] <= 0:
                continue
            bj = beta[j]
            nb = _soft(c[j] - q[j] + diag[j] * bj, lam) / diag[j]
            if nb != bj:
                q[:] += G[:, j] * (nb - bj)
                beta[j] = nb
                biggest = max(biggest, abs(nb - bj))
        return biggest

    everything = range(p)
    while sweeps < max_sweeps:
        pattern = np.sign(beta)
        sweeps += 1
        if sweep(everything) < tol:
            return beta
        if np.array_equal(pattern, np.sign(beta)):
            exact = _active_solve(G, c, beta, lam)
            if exact is not None:
                return exact
        active = np.flatnonzero(beta).tolist()
        for _ in range(10):
            sweeps += 1
            if sweep(active) < tol:
                break
    return beta


def _cd_path(Xs, time, event, lambdas, tol=1e-7, max_outer=1000, max_sweeps=100000, beta0=None):
    """Coordinate descent along ``lambdas`` on an already standardized matrix.

    Each outer step replaces the partial likelihood by its second-order
    expansion around the current ``beta`` and minimizes that penalized
    quadratic by coordinate descent (a proximal Newton step), followed by a
    backtracking line search on the true objective.
    """
    n, p = Xs.shape
    rs = _RiskSets(time, event)
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    path = []

    def objective(b, lam):
        return _eta_terms(rs, Xs @ b)[0] / n + lam * np.abs(b).sum()

    for lam in lambdas:
        for outer in range(max_outer):
            nll, grad, H = _nll_grad_hess(rs, Xs, beta)
            G = H / n
            c = G @ beta - grad / n
            old = beta.copy()
            beta = _cd_quadratic(G, c, beta.copy(), lam, tol * 0.1, max_sweeps)
            # safeguard: the quadratic model is not a majorizer
            f_old = nll / n + lam * np.abs(old).sum()
            step = beta - old
            t = 1.0
            while objective(old + t * step, lam) > f_old + 1e-15 * abs(f_old) and t > 1e-8:
                t /= 2
            beta = old + t * step
            if np.max(np.abs(beta - old)) < tol:
                break
        else:
            raise ConvergenceError(f"coordinate descent did not converge at lambda={lam:.4g}")
        path.append((float(lam), beta.copy()))
    return path


def fit_lasso_path(data: SurvivalData, lambdas=None, tol=1e-7):
    """LASSO-Cox solutions along a non-increasing ``lambdas`` sequence.

    Defaults to 100 log-spaced values from ``lambda_max`` down to
    ``0.001 * lambda_max``. Returns ``[(lam, beta), ...]`` with ``beta`` in
    standardized units; solutions are warm-started along the path.
    """
    if data.event.sum() < 1:
        raise PreconditionError("LASSO-Cox needs at least one event")
    Xs, _, _ = _standardize(data.X, allow_constant=True)
    if lambdas is None:
        lambdas = default_lambdas(lambda_max(data, Xs))
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(np.diff(lambdas) > 0) or np.any(lambdas < 0):
        raise PreconditionError("lambda sequence must be non-negative and non-increasing")
    return _cd_path(Xs, data.time, data.event, lambdas, tol=tol)


def stratified_folds(event, folds, seed):
    """Fold index per subject; events and non-events are dealt out separately."""
    rng = np.random.default_rng(seed)
    assign = np.empty(len(event), dtype=np.int64)
    start = 0
    for cls in (1, 0):
        idx = np.flatnonzero(np.asarray(event) == cls)
        idx = idx[rng.permutation(len(idx))]
        assign[idx] = (start + np.arange(len(idx))) % folds
        start += len(idx)
    return assign


@dataclass
class CVResult:
    lam: float
    lambdas: np.ndarray
    mean_deviance: np.ndarray
    se_deviance: np.ndarray
    nonzero: np.ndarray
    path: list = field(repr=False, default_factory=list)

    def curve_rows(self):
        return list(zip(self.lambdas, self.mean_deviance, self.se_deviance, self.nonzero))


def cv_select_lambda(data: SurvivalData, folds=10, seed=0, lambdas=None) -> CVResult:
    """Choose ``lam`` by minimum mean cross-validated partial-likelihood deviance.

    Fold ``k`` contributes ``-2 * (l_full(b_k) - l_train_k(b_k))`` where ``b_k``
    is fitted without fold ``k`` and ``l`` is the log partial likelihood; this
    stays defined for folds too small to form their own risk sets.
    """
    nev = int(data.event.sum())
    if nev < folds:
        raise PreconditionError(f"{nev} events cannot fill {folds} folds")
    Xs, _, _ = _standardize(data.X, allow_constant=True)
    if lambdas is None:
        lambdas = default_lambdas(lambda_max(data, Xs))
    lambdas = np.asarray(lambdas, dtype=np.float64)
    assign = stratified_folds(data.event, folds, seed)
    full_rs = _RiskSets(data.time, data.event)
    dev = np.zeros((folds, len(lambdas)))
    for k in range(folds):
        tr = assign != k
        path = _cd_path(Xs[tr], data.time[tr], data.event[tr], lambdas)
        tr_rs = _RiskSets(data.time[tr], data.event[tr])
        for i, (_, b) in enumerate(path):
            l_full = -_eta_terms(full_rs, Xs @ b)[0]
            l_tr = -_eta_terms(tr_rs, Xs[tr] @ b)[0] if data.event[tr].sum() else 0.0
            dev[k, i] = -2.0 * (l_full - l_tr)
    mean = dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / math.sqrt(folds)
    best = int(np.argmin(mean))
    full_path = _cd_path(Xs, data.time, data.event, lambdas[: best + 1])
    nz = np.array([np.count_nonzero(b) for _, b in full_path] + [-1] * (len(lambdas) - best - 1))
    return CVResult(float(lambdas[best]), lambdas, mean, se, nz, full_path)


def fit_lasso_cox(data: SurvivalData, folds=10, seed=0, lambdas=None) -> tuple[CoxFit, CVResult]:
    """CV-selected LASSO-Cox fit with its Breslow baseline."""
    cv = cv_select_lambda(data, folds, seed, lambdas)
    Xs, mean, sd = _standardize(data.X, allow_constant=True)
    beta = cv.path[-1][1]
    eta = Xs @ beta
    rs = _RiskSets(data.time, data.event)
    nll = _eta_terms(rs, eta)[0]
    fit = CoxFit(beta, mean, sd, cv.lam, _breslow(data.time, data.event, eta), list(data.names),
                 loglik=-nll, iterations=0, kind="lasso")
    return fit, cv


# --------------------------------------------------------------------------- baseline & prediction


def _breslow(time, event, eta):
    rs = _RiskSets(np.asarray(time, float), np.asarray(event))
    es = eta[rs.order]
    c = es.max() if es.size else 0.0
    S = rs.rev_cumsum(np.exp(es - c))
    rows = []
    H = 0.0
    for t in np.unique(rs.t[rs.d > 0]):
        i0 = np.searchsorted(rs.t, t, "left")
        i1 = np.searchsorted(rs.t, t, "right")
        d = rs.d[i0:i1].sum()
        H += d / (S[i0] * math.exp(c))
        rows.append((t, H))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def breslow_baseline(data: SurvivalData, beta, standardized=True) -> np.ndarray:
    """Breslow cumulative baseline hazard as rows ``(t_k, H0(t_k))``.

    ``beta`` is in standardized units unless ``standardized=False``.
    """
    X = _standardize(data.X, allow_constant=True)[0] if standardized else data.X
    return _breslow(data.time, data.event, X @ np.asarray(beta, dtype=np.float64))


def baseline_at(baseline, t):
    """Right-continuous step lookup of ``H0`` at time(s) ``t``."""
    t = np.asarray(t, dtype=np.float64)
    if baseline.size == 0:
        return np.zeros_like(t)
    idx = np.searchsorted(baseline[:, 0], t, side="right") - 1
    return np.where(idx >= 0, baseline[np.maximum(idx, 0), 1], 0.0)


def predict_risk(fit: CoxFit, X) -> np.ndarray:
    """Linear predictor ``standardized(x) @ beta`` per row."""
    return fit.standardize(X) @ fit.beta


def predict_survival(fit: CoxFit, X, t) -> np.ndarray:
    """``S(t|x) = exp(-H0(t) * exp(eta))``; progression probability is ``1 - S``."""
    if np.any(np.asarray(t) < 0):
        raise PreconditionError("time must be non-negative")
    eta = predict_risk(fit, X)
    return np.exp(-baseline_at(fit.baseline, t) * np.exp(eta))


# --------------------------------------------------------------------------- COXFIT1


def _fmt(v):
    return repr(float(v))


def save_coxfit(fit: CoxFit, path) -> None:
    lines = [
        COXFIT_MAGIC,
        f"kind {fit.kind}",
        "covariates " + ",".join(fit.names),
        f"lambda {_fmt(fit.lam)}",
        "mean " + " ".join(map(_fmt, fit.mean)),
        "sd " + " ".join(map(_fmt, fit.sd)),
        "beta " + " ".join(map(_fmt, fit.beta)),
    ]
    if fit.se is not None:
        lines.append("se " + " ".join(map(_fmt, fit.se)))
    lines += [f"loglik {_fmt(fit.loglik)}", f"iterations {fit.iterations}", f"baseline {len(fit.baseline)}"]
    lines += [f"{_fmt(t)} {_fmt(h)}" for t, h in fit.baseline]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_coxfit(path) -> CoxFit:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != COXFIT_MAGIC:
        raise FormatError(f"{path}: not a {COXFIT_MAGIC} file")
    rec, i = {}, 1
    while i < len(lines):
        key, _, value = lines[i].partition(" ")
        i += 1
        if key == "baseline":
            m = int(value)
            rows = lines[i : i + m]
            if len(rows) != m:
                raise FormatError(f"{path}: baseline table truncated ({len(rows)} of {m} rows)")
            rec["baseline"] = np.array([[float(a) for a in r.split()] for r in rows]).reshape(-1, 2)
            i += m
        else:
            rec[key] = value
    try:
        vec = lambda k: np.array([float(v) for v in rec[k].split()]) if rec[k] else np.zeros(0)
        names = rec["covariates"].split(",") if rec["covariates"] else []
        fit = CoxFit(
            beta=vec("beta"), mean=vec("mean"), sd=vec("sd"), lam=float(rec["lambda"]),
            baseline=rec["baseline"], names=names, loglik=float(rec["loglik"]),
            iterations=int(rec["iterations"]), kind=rec["kind"], se=vec("se") if "se" in rec else None,
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    if not (fit.beta.size == fit.mean.size == fit.sd.size == len(names)):
        raise FormatError(f"{path}: coefficient, standardization and name counts disagree")
    return fit
