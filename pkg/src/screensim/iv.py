"""Screener-leniency instrumental variables toolkit.

Applicants are randomly assigned to screeners who differ in how readily they
grant interviews. Each applicant's instrument is the jackknife (leave-own-
decision-out) mean interview rate of their assigned screener, standardized on
the retained sample. The toolkit covers instrument construction, balance and
monotonicity diagnostics, just-identified 2SLS with screener-clustered
standard errors, and complier-outcome estimation above/below an ML-score
threshold.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .glm import fit_l1_logistic, predict_probability
from .population import Population


class DegenerateInstrumentError(ValueError):
    """Instrument has no variance on the retained sample."""


@dataclass
class LeniencyInstrument:
    values: np.ndarray            # standardized; NaN where excluded
    raw: np.ndarray               # leave-out means; NaN where excluded
    retained: np.ndarray          # applicants kept (screener met the caseload)
    excluded_screeners: list[int]
    mean_raw: float
    sd_raw: float

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())


def build_instrument(screener_id, interviewed, min_caseload: int = 50) -> LeniencyInstrument:
    """Jackknife leniency instrument from decisions and screener assignments.

    Screeners with fewer than ``min_caseload`` decisions are dropped and their
    applicants excluded from the retained sample. The retained values are
    standardized to mean 0, sd 1 (exactly, on the retained sample).
    """
    sid = np.asarray(screener_id, dtype=int)
    dec = np.asarray(interviewed, dtype=float)
    if sid.shape != dec.shape:
        raise ValueError("screener_id and interviewed must align")
    if np.any(dec < 0):
        raise ValueError("interview decisions not filled")

    screeners = np.unique(sid)
    caseload = {int(k): int(np.sum(sid == k)) for k in screeners}
    kept = [k for k in screeners if caseload[int(k)] >= max(min_caseload, 2)]
    excluded = [int(k) for k in screeners if int(k) not in set(int(j) for j in kept)]
    if len(kept) < 2:
        raise ValueError("fewer than 2 screeners meet the caseload threshold")

    raw = np.full(len(sid), np.nan)
    for k in kept:
        mask = sid == k
        total = dec[mask].sum()
        n_k = int(mask.sum())
        raw[mask] = (total - dec[mask]) / (n_k - 1)
    retained = ~np.isnan(raw)

    mu = float(raw[retained].mean())
    sd = float(raw[retained].std())
    if sd == 0:
        raise DegenerateInstrumentError("instrument has zero variance on the retained sample")
    values = np.full(len(sid), np.nan)
    values[retained] = (raw[retained] - mu) / sd
    return LeniencyInstrument(
        values=values, raw=raw, retained=retained,
        excluded_screeners=excluded, mean_raw=mu, sd_raw=sd,
    )


# ---------------------------------------------------------------------------
# regression core: fixed-effect partialling + cluster-robust sandwich

def _control_design(controls, n: int) -> np.ndarray:
    """[constant, dummy columns] for a list of categorical control factors."""
    cols = [np.ones((n, 1))]
    if controls:
        for factor in controls:
            factor = np.asarray(factor)
            if len(factor) != n:
                raise ValueError("control factor must align with the sample")
            levels = np.unique(factor)
            for lev in levels[1:]:  # drop-first coding
                cols.append((factor == lev).reshape(-1, 1).astype(float))
    return np.hstack(cols)


def _partial_out(design: np.ndarray, *arrays):
    coef, *_ = np.linalg.lstsq(design, np.column_stack(arrays), rcond=None)
    resid = np.column_stack(arrays) - design @ coef
    return [resid[:, j] for j in range(resid.shape[1])]


def _sandwich_se(score: np.ndarray, denom: float, cluster, n: int, k: int) -> float:
    """SE of a ratio estimator sum(score)/denom with clustered or HC scores."""
    if cluster is None:
        meat = float(np.sum(score**2))
        dof = n / max(n - k, 1)
        return float(np.sqrt(dof * meat) / abs(denom))
    cluster = np.asarray(cluster)
    labels = np.unique(cluster)
    g = len(labels)
    if g < 2:
        raise ValueError("need at least 2 clusters")
    sums = np.array([score[cluster == lab].sum() for lab in labels])
    meat = float(np.sum(sums**2))
    dof = (g / (g - 1)) * ((n - 1) / max(n - k, 1))
    return float(np.sqrt(dof * meat) / abs(denom))


@dataclass(frozen=True)
class RegressionResult:
    coefficient: float
    se: float
    n: int
    n_clusters: int | None = None
    first_stage_f: float | None = None
    weak_instrument: bool = False

    @property
    def t(self) -> float:
        return self.coefficient / self.se if self.se > 0 else float("inf")


def ols_on_scalar(y, x, controls=None, cluster=None) -> RegressionResult:
    """OLS coefficient of y on a scalar regressor, after FE partialling."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n = len(y)
    design = _control_design(controls, n)
    y_t, x_t = _partial_out(design, y, x)
    denom = float(x_t @ x_t)
    if denom <= 0:
        raise ValueError("regressor has no residual variance after controls")
    beta = float(x_t @ y_t) / denom
    u = y_t - beta * x_t
    k = design.shape[1] + 1
    se = _sandwich_se(x_t * u, denom, cluster, n, k)
    ncl = None if cluster is None else len(np.unique(cluster))
    return RegressionResult(coefficient=beta, se=se, n=n, n_clusters=ncl)


def two_stage_least_squares(y, x, z, controls=None, cluster=None) -> RegressionResult:
    """Just-identified IV of y on x instrumented by z, FE controls partialled out.

    Standard errors are cluster-robust when ``cluster`` is given,
    heteroskedasticity-robust otherwise. A first-stage F below 1 attaches a
    weak-instrument warning.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n = len(y)
    if not (len(x) == len(z) == n):
        raise ValueError("y, x, z must align")
    design = _control_design(controls, n)
    y_t, x_t, z_t = _partial_out(design, y, x, z)
    zz = float(z_t @ z_t)
    if zz <= 0:
        raise ValueError("instrument has no residual variance after controls")
    zx = float(z_t @ x_t)
    if zx == 0:
        raise ValueError("instrument is uncorrelated with the endogenous regressor")
    beta = float(z_t @ y_t) / zx
    u = y_t - beta * x_t
    k = design.shape[1] + 1
    se = _sandwich_se(z_t * u, zx, cluster, n, k)

    gamma = zx / zz
    v = x_t - gamma * z_t
    se_g = _sandwich_se(z_t * v, zz, cluster, n, k)
    f_stat = (gamma / se_g) ** 2 if se_g > 0 else float("inf")
    weak = f_stat < 1.0
    if weak:
        warnings.warn(f"weak instrument: first-stage F = {f_stat:.3f}", RuntimeWarning)
    ncl = None if cluster is None else len(np.unique(cluster))
    return RegressionResult(
        coefficient=beta, se=se, n=n, n_clusters=ncl,
        first_stage_f=float(f_stat), weak_instrument=weak,
    )


def balance_check(
    instrument: LeniencyInstrument,
    covariates: np.ndarray,
    names: list[str] | None = None,
    controls=None,
    cluster=None,
) -> pd.DataFrame:
    """Regress each covariate on the instrument; randomization predicts nulls."""
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    keep = instrument.retained
    z = instrument.values[keep]
    if cluster is not None:
        cluster = np.asarray(cluster)[keep]
    ctl = None if controls is None else [np.asarray(c)[keep] for c in controls]
    if names is None:
        names = [f"x{j}" for j in range(X.shape[1])]
    rows = []
    for j, name in enumerate(names):
        res = ols_on_scalar(X[keep, j], z, controls=ctl, cluster=cluster)
        rows.append({"covariate": name, "coefficient": res.coefficient,
                     "se": res.se, "t": res.t, "n": res.n})
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class ComplierEstimate:
    """IV estimate of the mean outcome among instrument compliers."""

    coefficient: float
    se: float
    subsample: str                # "high" or "low" (ML score side of the threshold)
    n: int
    first_stage_f: float


def complier_outcomes(
    y,
    interviewed,
    instrument: LeniencyInstrument,
    ml_scores,
    threshold: float | None = None,
    controls=None,
    cluster=None,
    outcome_override=None,
) -> dict[str, ComplierEstimate]:
    """Mean outcomes of marginal (complier) applicants, split by ML score.

    Within each side of the threshold (default: the retained-sample median ML
    score), regresses the observed outcome y*I on the interview decision I,
    instrumented by screener leniency. The IV coefficient on I estimates the
    mean potential outcome among compliers on that side. Passing
    ``outcome_override`` replaces y*I (e.g. with a demographic indicator) to
    profile complier composition instead.
    """
    y = np.asarray(y, dtype=float)
    interviewed_arr = np.asarray(interviewed, dtype=float)
    scores = np.asarray(ml_scores, dtype=float)
    keep = instrument.retained
    if threshold is None:
        threshold = float(np.median(scores[keep]))
    outcome = y * interviewed_arr if outcome_override is None else np.asarray(outcome_override, dtype=float)

    out: dict[str, ComplierEstimate] = {}
    for label, side in (("high", scores >= threshold), ("low", scores < threshold)):
        mask = keep & side
        n = int(mask.sum())
        if n == 0:
            raise ValueError(f"no retained applicants in the {label}-score half")
        ctl = None if controls is None else [np.asarray(c)[mask] for c in controls]
        cl = None if cluster is None else np.asarray(cluster)[mask]
        res = two_stage_least_squares(
            outcome[mask], interviewed_arr[mask], instrument.values[mask],
            controls=ctl, cluster=cl,
        )
        out[label] = ComplierEstimate(
            coefficient=res.coefficient, se=res.se, subsample=label,
            n=n, first_stage_f=res.first_stage_f,
        )
    return out


# ---------------------------------------------------------------------------
# monotonicity diagnostics

@dataclass
class MonotonicityReport:
    first_stage: pd.DataFrame          # subgroup, coefficient, se, t, n
    propensity_correlation: pd.DataFrame  # subgroup, correlation, n
    calibration: pd.DataFrame          # subsample, predicted, actual, gap, n
    threshold_leniency: float = float("nan")
    notes: list[str] = field(default_factory=list)


def _subgroup_masks(population: Population) -> dict[str, np.ndarray]:
    masks = {"all": np.ones(population.n, dtype=bool)}
    for g in population.spec.groups:
        masks[f"group_{g}"] = population.group == g
    masks["female"] = population.gender == 1
    masks["male"] = population.gender == 0
    return masks


def monotonicity_suite(
    population: Population,
    instrument: LeniencyInstrument | None = None,
    min_caseload: int = 50,
    seed: int = 0,
    train_fraction: float = 0.5,
    penalty_grid=(0.01,),
    cluster_by_screener: bool = True,
) -> MonotonicityReport:
    """Diagnostics for the screener-monotonicity assumption.

    (a) First-stage coefficients (interviewed on leniency) per demographic
    subgroup: monotone screening implies every subgroup coefficient positive.
    (b) Interview-propensity models trained separately on strict- and
    lenient-screener samples; high within-applicant score correlation says the
    two screener tiers rank applicants similarly.
    (c) A hire model trained on lenient-screener interviewees, calibration-
    checked on strict vs. lenient holdouts: if stricter screeners use
    unobservables differently, the lenient-trained model miscalibrates on the
    strict subsample.
    """
    if np.any(population.interviewed < 0):
        raise ValueError("population must have human screening simulated first")
    if instrument is None:
        instrument = build_instrument(population.screener_id, population.interviewed,
                                      min_caseload=min_caseload)
    keep = instrument.retained
    cluster = population.screener_id if cluster_by_screener else None
    masks = _subgroup_masks(population)

    fs_rows = []
    for name, mask in masks.items():
        m = mask & keep
        if m.sum() < 10:
            continue
        cl = None if cluster is None else np.asarray(cluster)[m]
        res = ols_on_scalar(population.interviewed[m].astype(float),
                            instrument.values[m], cluster=cl)
        fs_rows.append({"subgroup": name, "coefficient": res.coefficient,
                        "se": res.se, "t": res.t, "n": res.n})
    first_stage = pd.DataFrame(fs_rows)

    # screener tiers: strict = below-median raw pass rate among retained screeners
    sid = population.screener_id
    kept_screeners = np.unique(sid[keep])
    rates = {int(k): float(population.interviewed[sid == k].mean()) for k in kept_screeners}
    med = float(np.median(list(rates.values())))
    lenient_screeners = {k for k, r in rates.items() if r >= med}
    lenient_mask = np.isin(sid, list(lenient_screeners)) & keep
    strict_mask = keep & ~lenient_mask

    n_rounds = population.n_rounds
    split = max(int(np.floor(n_rounds * train_fraction)), 1)
    train = population.round < split
    evalm = ~train

    X = population.features
    I = population.interviewed

    notes: list[str] = []
    prop_rows = []
    cal_rows = []
    try:
        m_len = fit_l1_logistic(X[lenient_mask & train], I[lenient_mask & train],
                                penalty_grid=penalty_grid, seed=seed)
        m_str = fit_l1_logistic(X[strict_mask & train], I[strict_mask & train],
                                penalty_grid=penalty_grid, seed=seed)
        s_len = predict_probability(m_len, X[evalm])
        s_str = predict_probability(m_str, X[evalm])
        for name, mask in masks.items():
            m = mask[evalm]
            if m.sum() < 10:
                continue
            corr = float(np.corrcoef(s_len[m], s_str[m])[0, 1])
            prop_rows.append({"subgroup": name, "correlation": corr, "n": int(m.sum())})
    except ValueError as exc:
        notes.append(f"propensity-correlation check skipped: {exc}")

    try:
        hire_train = lenient_mask & train & (I == 1)
        hire_model = fit_l1_logistic(X[hire_train], population.potential_outcome[hire_train],
                                     penalty_grid=penalty_grid, seed=seed)
        yh = population.potential_outcome[hire_train]
        n1, n0 = int(yh.sum()), int(len(yh) - yh.sum())
        hire_model.theta_ = hire_model.theta_.copy()
        hire_model.theta_[0] += np.log(n1 / n0)  # undo the balanced-sample shift
        for label, mask in (("lenient", lenient_mask), ("strict", strict_mask),
                            ("full", keep)):
            m = mask & evalm & (I == 1)
            if m.sum() < 10:
                continue
            pred = float(np.mean(predict_probability(hire_model, X[m])))
            act = float(population.potential_outcome[m].mean())
            cal_rows.append({"subsample": label, "predicted": pred, "actual": act,
                             "gap": pred - act, "n": int(m.sum())})
    except ValueError as exc:
        notes.append(f"calibration check skipped: {exc}")

    return MonotonicityReport(
        first_stage=first_stage,
        propensity_correlation=pd.DataFrame(prop_rows),
        calibration=pd.DataFrame(cal_rows),
        threshold_leniency=med,
        notes=notes,
    )
