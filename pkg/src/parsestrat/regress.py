"""Linear mixed-effects regression of log reading time with two crossed random intercepts.

Fits are maximum likelihood. Given the relative standard deviations of the
two random intercepts, the fixed effects and the residual variance have a
closed form (penalized least squares); the remaining two-dimensional problem
is solved by Nelder-Mead from several fixed starting points.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaincc, ndtr

log = logging.getLogger(__name__)

BASELINE_PREDICTORS = [
    "length", "prev_length", "freq", "prev_freq", "is_first", "is_last", "is_second_last",
    "screenN", "lineN", "segmentN",
]
NUMERIC = {"length", "prev_length", "freq", "prev_freq", "screenN", "lineN", "segmentN"}
GROUPS = ("article", "subj")
ALPHA = 0.05 / 9
MODEL_ORDER = ("LSTM", "TD", "LC")
STARTS = [(1.0, 1.0), (0.1, 0.1), (1.0, 0.1), (0.1, 1.0), (0.01, 0.01)]


class RegressError(ValueError):
    pass


class JoinFailure(RegressError):
    def __init__(self, segment_id: str):
        super().__init__(f"no surprisal for segment {segment_id}")
        self.segment_id = segment_id


class Singular(RegressError):
    pass


class NonConvergence(RegressError):
    def __init__(self, iterations: int, deviance: float):
        super().__init__(f"optimizer did not converge after {iterations} iterations (best {deviance})")
        self.iterations = iterations
        self.deviance = deviance


class NotNested(RegressError):
    pass


@dataclass
class RtDataPoint:
    log_rt: float
    length: float
    prev_length: float
    freq: float
    prev_freq: float
    is_first: int
    is_last: int
    is_second_last: int
    screenN: float
    lineN: float
    segmentN: float
    article: str
    subj: str
    surprisals: dict[str, float] = field(default_factory=dict)
    main_text: bool = True
    fixated: bool = True
    unk_free: bool = True


@dataclass
class Dataset:
    """Column store of the analysis rows."""

    y: np.ndarray
    columns: dict[str, np.ndarray]
    groups: dict[str, np.ndarray]
    keys: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    @property
    def signature(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.y).tobytes())
        for g in sorted(self.groups):
            h.update("\x00".join(map(str, self.groups[g])).encode())
        return h.hexdigest()[:16]

    @classmethod
    def from_points(cls, points: Sequence[RtDataPoint], keys=None) -> "Dataset":
        cols = {p: np.array([getattr(d, p) for d in points], dtype=float) for p in BASELINE_PREDICTORS}
        names = sorted({k for d in points for k in d.surprisals})
        for n in names:
            cols[n] = np.array([d.surprisals[n] for d in points], dtype=float)
        groups = {g: np.array([getattr(d, g) for d in points], dtype=object) for g in GROUPS}
        return cls(np.array([d.log_rt for d in points]), cols, groups, list(keys or []))


# -- data preparation -----------------------------------------------------------

def segment_key(sentence_id: str, index) -> str:
    return f"{sentence_id}:{int(index)}"


def read_rt_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def log_gm_frequency(surface: str, freq: Mapping[str, int]) -> float:
    toks = surface.split() or [surface]
    return sum(math.log(freq.get(t, 0) + 1) for t in toks) / len(toks)


def prepare(
    rows: Sequence[Mapping],
    surprisals: Mapping[str, Mapping[str, tuple[float, bool]]],
    freq: Mapping[str, int] | None = None,
    sd_cut: float = 3.0,
) -> Dataset:
    """Join reading times with per-model segment surprisals and clean the result.

    ``surprisals[model][segment_key] = (I(p), unk_flag)``. Rows are dropped
    when off the main text, not fixated or unknown to any model; then rows
    whose log RT lies beyond ``sd_cut`` SDs are removed; finally numeric
    predictors (and surprisals) are centered on the remaining rows.
    """
    counts = {"input": len(rows)}
    models = list(surprisals)
    points, keys = [], []
    n_main = n_fix = 0
    for i, r in enumerate(rows):
        key = segment_key(r["sentence_id"], r["segment_index"])
        sv = {}
        unk = False
        for m in models:
            if key not in surprisals[m]:
                raise JoinFailure(key)
            s, flag = surprisals[m][key]
            sv[m] = float(s)
            unk = unk or bool(flag)
        if int(r["main_text"]) != 1:
            continue
        n_main += 1
        time = float(r["time"])
        if int(r["fixated"]) != 1 or time <= 0:
            continue
        n_fix += 1
        if unk:
            continue
        if "freq" in r and r["freq"] not in (None, ""):
            f, pf = float(r["freq"]), float(r["prev_freq"])
        else:
            if freq is None:
                raise RegressError("frequency table required when rows lack freq columns")
            f = log_gm_frequency(r["surface"], freq)
            pf = log_gm_frequency(r["prev_surface"], freq) if r.get("prev_surface") else _prev_freq(rows, i, freq)
        points.append(RtDataPoint(
            math.log(time), float(r["length"]), float(r["prev_length"]), f, pf,
            int(r["is_first"]), int(r["is_last"]), int(r["is_second_last"]),
            float(r["screenN"]), float(r["lineN"]), float(r["segmentN"]),
            str(r["article"]), str(r["subj"]), sv,
        ))
        keys.append(f"{r['subj']}|{key}")
    counts["main_text"] = n_main
    counts["fixated"] = n_fix
    counts["unk_free"] = len(points)
    if not points:
        raise RegressError("no rows left after filtering")
    y = np.array([p.log_rt for p in points])
    z = (y - y.mean()) / y.std()
    inlier = np.abs(z) <= sd_cut
    points = [p for p, ok in zip(points, inlier) if ok]
    keys = [k for k, ok in zip(keys, inlier) if ok]
    counts["outliers_removed"] = int((~inlier).sum())
    counts["final"] = len(points)
    data = Dataset.from_points(points, keys)
    for name in sorted(NUMERIC) + models:
        data.columns[name] = data.columns[name] - data.columns[name].mean()
    data.counts = counts
    return data


SPILLOVER = "@prev"


def with_spillover(
    surprisals: Mapping[str, Mapping[str, tuple[float, bool]]],
) -> dict[str, dict[str, tuple[float, bool]]]:
    """Add ``<model>@prev``: the surprisal of the preceding segment in the same sentence.

    Sentence-initial segments get 0 and inherit no unknown flag.
    """
    out = {m: dict(v) for m, v in surprisals.items()}
    for m, table in surprisals.items():
        prev = {}
        for key in table:
            sid, idx = key.rsplit(":", 1)
            idx = int(idx)
            prev[key] = (0.0, False) if idx == 0 else table.get(segment_key(sid, idx - 1), (0.0, False))
        out[m + SPILLOVER] = prev
    return out


def _prev_freq(rows, i, freq) -> float:
    # previous segment of the same subject and article, else 0
    if i == 0:
        return 0.0
    p, r = rows[i - 1], rows[i]
    if p["subj"] != r["subj"] or p["article"] != r["article"]:
        return 0.0
    return log_gm_frequency(p["surface"], freq)


# -- mixed model ----------------------------------------------------------------

@dataclass
class MixedModelFit:
    names: list[str]
    beta: list[float]
    se: list[float]
    residual_variance: float
    group_variances: dict[str, float]
    deviance: float
    n: int
    relative_sd: list[float]
    converged: bool
    iterations: int
    evaluations: int
    signature: str = ""
    dropped_groups: list[str] = field(default_factory=list)
    aliased: list[str] = field(default_factory=list)

    @property
    def terms(self) -> set[str]:
        return set(self.names) | set(self.aliased)

    def coef(self, name: str) -> float:
        return self.beta[self.names.index(name)]

    def z(self, name: str) -> float:
        i = self.names.index(name)
        return self.beta[i] / self.se[i]

    def to_dict(self) -> dict:
        return asdict(self)


class _Profile:
    """Profiled ML deviance as a function of the relative random-intercept SDs."""

    def __init__(self, X: np.ndarray, y: np.ndarray, Z: np.ndarray, sizes: list[int]):
        self.n, self.p = X.shape
        self.q = Z.shape[1]
        self.sizes = sizes
        self.X, self.y, self.Z = X, y, Z
        self.ZtZ = Z.T @ Z
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.XtX = X.T @ X
        self.Xty = X.T @ y

    def lam(self, s) -> np.ndarray:
        return np.concatenate([np.full(k, abs(v)) for k, v in zip(self.sizes, s)]) if self.q else np.zeros(0)

    def solve(self, s):
        lam = self.lam(s)
        q, p = self.q, self.p
        A = np.empty((q + p, q + p))
        A[:q, :q] = lam[:, None] * self.ZtZ * lam[None, :] + np.eye(q)
        A[:q, q:] = lam[:, None] * self.ZtX
        A[q:, :q] = A[:q, q:].T
        A[q:, q:] = self.XtX
        c = np.concatenate([lam * self.Zty, self.Xty])
        L = np.linalg.cholesky(A)
        b = np.linalg.solve(L.T, np.linalg.solve(L, c))
        # penalized RSS from the residuals; yty - c.b cancels badly for large n
        u = b[:q]
        resid = self.y - self.X @ b[q:] - self.Z @ (lam * u)
        r2 = float(resid @ resid + u @ u)
        logdet_z = 2.0 * float(np.log(np.diag(L)[:q]).sum())
        return b, r2, logdet_z, L

    def deviance(self, s) -> float:
        try:
            _, r2, logdet, _ = self.solve(s)
        except np.linalg.LinAlgError:
            return math.inf
        if r2 <= 0:
            return math.inf
        n = self.n
        return logdet + n * (1.0 + math.log(2.0 * math.pi * r2 / n))


def _design(data: Dataset, fixed: Sequence[str]):
    """Intercept plus ``fixed``; columns linearly dependent on earlier ones are aliased out."""
    n = len(data)
    if n <= len(fixed) + 1:
        raise Singular(f"{n} rows cannot identify {len(fixed) + 1} fixed effects")
    cols = [np.ones(n)]
    kept, aliased = [], []
    for f in fixed:
        trial = np.column_stack(cols + [data.columns[f]])
        if np.linalg.matrix_rank(trial) < trial.shape[1]:
            log.warning("fixed effect %s is collinear with earlier columns; dropped", f)
            aliased.append(f)
            continue
        cols.append(data.columns[f])
        kept.append(f)
    return np.column_stack(cols), kept, aliased


def _indicators(data: Dataset, groups: Sequence[str]):
    blocks, sizes, used, dropped = [], [], [], []
    for g in groups:
        levels = sorted(set(data.groups[g]))
        if len(levels) < 2:
            log.warning("grouping factor %s has %d level(s); intercept dropped", g, len(levels))
            dropped.append(g)
            continue
        idx = {v: i for i, v in enumerate(levels)}
        Zg = np.zeros((len(data), len(levels)))
        Zg[np.arange(len(data)), [idx[v] for v in data.groups[g]]] = 1.0
        blocks.append(Zg)
        sizes.append(len(levels))
        used.append(g)
    Z = np.hstack(blocks) if blocks else np.zeros((len(data), 0))
    return Z, sizes, used, dropped


def fit_lmm(data: Dataset, fixed: Sequence[str], groups: Sequence[str] = GROUPS,
            max_iter: int = 4000) -> MixedModelFit:
    X, fixed, aliased = _design(data, list(fixed))
    Z, sizes, used, dropped = _indicators(data, groups)
    prof = _Profile(X, data.y, Z, sizes)
    k = len(sizes)
    iters = evals = 0
    best_s, best_d, any_ok = np.zeros(k), prof.deviance(np.zeros(k)), False
    if k:
        # deviance is only accurate to a few ulps of its magnitude
        fatol = max(1e-10, 1e-13 * abs(best_d))
        for start in STARTS:
            x0 = np.array(start[:k]) if k == 2 else np.array([start[0]])
            res = minimize(prof.deviance, x0, method="Nelder-Mead",
                           options={"xatol": 1e-10, "fatol": fatol, "maxiter": max_iter,
                                    "maxfev": 2 * max_iter})
            iters += int(res.nit)
            evals += int(res.nfev)
            any_ok = any_ok or bool(res.success)
            if res.fun < best_d:
                best_s, best_d = np.abs(res.x), float(res.fun)
        # snap components that sit at the boundary
        for i in range(k):
            trial = best_s.copy()
            trial[i] = 0.0
            d = prof.deviance(trial)
            if d <= best_d:
                best_s, best_d = trial, d
        if not any_ok:
            raise NonConvergence(iters, best_d)
    else:
        any_ok = True
    b, r2, _, L = prof.solve(best_s)
    n, q = prof.n, prof.q
    sigma2 = r2 / n
    beta = b[q:]
    # fixed-effect covariance: sigma^2 times the inverse Schur complement
    Lxx = L[q:, q:]
    inv = np.linalg.inv(Lxx)
    cov = sigma2 * inv.T @ inv
    se = np.sqrt(np.diag(cov))
    gv = {g: float(s ** 2 * sigma2) for g, s in zip(used, best_s)}
    for g in dropped:
        gv[g] = 0.0
    return MixedModelFit(
        ["(Intercept)"] + fixed, [float(x) for x in beta], [float(x) for x in se], float(sigma2), gv,
        float(best_d), int(n), [float(x) for x in best_s], any_ok, iters, evals, data.signature, dropped,
        aliased,
    )


def ols_deviance(data: Dataset, fixed: Sequence[str]) -> float:
    X, _, _ = _design(data, list(fixed))
    beta, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    r2 = float(((data.y - X @ beta) ** 2).sum())
    n = len(data)
    return n * (1.0 + math.log(2.0 * math.pi * r2 / n))


# -- comparisons ----------------------------------------------------------------

def delta_deviance(baseline: MixedModelFit, augmented: MixedModelFit, tol: float = 1e-4) -> float:
    if baseline.signature != augmented.signature or baseline.n != augmented.n:
        raise NotNested("fits were made on different data")
    if not baseline.terms <= augmented.terms:
        raise NotNested(f"{sorted(baseline.terms)} is not contained in {sorted(augmented.terms)}")
    d = baseline.deviance - augmented.deviance
    if d < 0:
        if d < -tol:
            log.warning("deviance increased by %.3g under a larger model; clamping", -d)
        d = 0.0
    return d


def chi_square_test(delta: float, df: int) -> float:
    """Upper tail of chi-square(df) at ``delta``."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if delta <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, delta / 2.0))


@dataclass
class ComparisonResult:
    label: str
    chi2: float
    df: int
    p: float
    significant: bool


def comparison_rows(models: Sequence[str] = MODEL_ORDER) -> list[tuple[str | None, str]]:
    """(reduced model, added model) pairs in table order; None is the baseline."""
    rows = [(None, m) for m in models]
    rows += [(a, b) for a in models for b in models if a != b]
    return rows


def comparison_matrix(
    data: Dataset,
    baseline: Sequence[str],
    models: Sequence[str] = MODEL_ORDER,
    alpha: float = ALPHA,
    terms: Mapping[str, Sequence[str]] | None = None,
) -> tuple[list[ComparisonResult], dict[str, MixedModelFit]]:
    """``terms`` maps a model to its predictor columns (default: the column named after it)."""
    cols = {m: list((terms or {}).get(m, [m])) for m in models}
    fits: dict[str, MixedModelFit] = {"Baseline": fit_lmm(data, baseline)}
    for m in models:
        fits[m] = fit_lmm(data, list(baseline) + cols[m])
    for i, a in enumerate(models):
        for b in models[i + 1:]:
            fits[f"{a}+{b}"] = fit_lmm(data, list(baseline) + cols[a] + cols[b])

    def union(a, b):
        key = f"{a}+{b}" if f"{a}+{b}" in fits else f"{b}+{a}"
        return fits[key]

    out = []
    for a, b in comparison_rows(models):
        small = fits["Baseline"] if a is None else fits[a]
        big = fits[b] if a is None else union(a, b)
        dd = delta_deviance(small, big)
        df = len(big.names) - len(small.names)
        p = chi_square_test(dd, df) if df > 0 else 1.0
        out.append(ComparisonResult(f"{a or 'Baseline'}<{b}", dd, df, p, p < alpha))
    return out, fits


def wald_p(z: float) -> float:
    return float(2.0 * ndtr(-abs(z)))


def baseline_predictor_selection(
    data: Dataset, predictors: Sequence[str] = BASELINE_PREDICTORS, z_crit: float = 1.96,
) -> tuple[list[str], list[str], MixedModelFit]:
    """Drop predictors whose Wald |z| <= z_crit in the full baseline fit, then refit once."""
    predictors = [p for p in predictors if np.ptp(data.columns[p]) > 0]
    full = fit_lmm(data, predictors)
    keep = [p for p in full.names[1:] if abs(full.z(p)) > z_crit]
    dropped = [p for p in predictors if p not in keep]
    fit = fit_lmm(data, keep) if dropped else full
    return keep, dropped, fit


def delta_d_table(fits: Mapping[str, MixedModelFit], models: Sequence[str] = MODEL_ORDER) -> dict[str, float]:
    return {m: delta_deviance(fits["Baseline"], fits[m]) for m in models if m in fits}


def write_comparison_csv(path, rows: Sequence[ComparisonResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "chi2", "df", "p", "significant"])
        for r in rows:
            w.writerow([r.label, f"{r.chi2:.6f}", r.df, f"{r.p:.6g}", int(r.significant)])


def write_fit_report(path, fits: Mapping[str, MixedModelFit], counts: Mapping[str, int],
                     dropped: Sequence[str] = ()) -> None:
    report = {
        "counts": dict(counts),
        "dropped_predictors": list(dropped),
        "fits": {k: v.to_dict() for k, v in fits.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
