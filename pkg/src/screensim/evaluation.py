"""Off-policy and descriptive evaluation of screening policies.

The central estimator reweights outcomes observed among human-interviewed
applicants by the ratio of a counterfactual policy's (deterministic) selection
rule to the human interview propensity, recovering the mean outcome the
counterfactual policy's selections would have had.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ._validation import check_binary_labels
from .engine import HUMAN_ACTUAL, ExperimentLog
from .population import Population

NORMALIZATIONS = ("hajek", "horvitz-thompson")


@dataclass(frozen=True)
class IPWEstimate:
    point: float
    normalization: str
    n_interviewed: int
    n_ml_selected: int
    weight_min: float          # over contributing (selected & interviewed) rows
    weight_max: float
    effective_sample_size: float
    clipped_count: int


def ipw_yield(
    y,
    ml_selected,
    propensity,
    counts: tuple[int, int],
    normalization: str = "hajek",
    clip: float = 0.01,
) -> IPWEstimate:
    """Inverse-propensity estimate of the mean outcome among policy-selected applicants.

    Inputs describe the *interviewed* sample: outcomes ``y``, a flag for
    whether the counterfactual policy selected the applicant, and the
    propensity of being interviewed given covariates. ``counts`` carries the
    full-sample totals (number interviewed, number policy-selected).

    Horvitz-Thompson: (n_int / n_ml) * mean(1{ml} * y / p). Hajek: the
    weight-normalized variant, bounded in [0, 1]. Propensities are floored at
    ``clip`` (0 disables) with the number of clipped rows reported.
    """
    y = check_binary_labels(y)
    ml = np.asarray(ml_selected, dtype=bool)
    p = np.asarray(propensity, dtype=float)
    if not (len(y) == len(ml) == len(p)):
        raise ValueError("y, ml_selected, propensity must align")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("propensities must lie strictly in (0, 1)")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    n_int, n_ml = int(counts[0]), int(counts[1])
    if n_int <= 0 or n_ml <= 0:
        raise ValueError("counts must be positive")
    if not ml.any():
        raise ValueError("no policy-selected applicants among the interviewed: estimate undefined")

    clipped = int(np.sum(p[ml] < clip)) if clip > 0 else 0
    p_eff = np.maximum(p, clip) if clip > 0 else p
    w = ml / p_eff
    if normalization == "hajek":
        point = float(np.sum(w * y) / np.sum(w))
    else:
        point = float((n_int / n_ml) * np.mean(w * y))
    w_nz = w[ml]
    ess = float(np.sum(w) ** 2 / np.sum(w**2))
    return IPWEstimate(
        point=point,
        normalization=normalization,
        n_interviewed=n_int,
        n_ml_selected=n_ml,
        weight_min=float(w_nz.min()),
        weight_max=float(w_nz.max()),
        effective_sample_size=ess,
        clipped_count=clipped,
    )


@dataclass(frozen=True)
class CommonSupportReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    flagged_low: int           # propensity < 0.01
    flagged_high: int          # propensity > 0.99

    @property
    def flagged(self) -> int:
        return self.flagged_low + self.flagged_high


def common_support(propensities) -> CommonSupportReport:
    """Histogram of selection propensities among policy-selected applicants."""
    p = np.asarray(propensities, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("propensities must lie in [0, 1]")
    counts, edges = np.histogram(p, bins=20, range=(0.0, 1.0))
    return CommonSupportReport(
        bin_edges=edges,
        counts=counts,
        flagged_low=int(np.sum(p < 0.01)),
        flagged_high=int(np.sum(p > 0.99)),
    )


@dataclass(frozen=True)
class AgreementRow:
    quantile: float
    k: int
    agree_share: float
    yield_both: float | None
    yield_a_only: float | None
    yield_b_only: float | None
    note: str = ""


def _top_fraction(scores: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((np.arange(len(scores)), -scores))
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:k]] = True
    return mask


def agreement_table(
    scores_a,
    scores_b,
    labels,
    quantiles: tuple[float, ...] = (0.25, 0.5, 0.75),
) -> list[AgreementRow]:
    """Agreement and disagreement yields when two scores each pick a top fraction.

    For each quantile q, each score selects its top q share of the sample
    (ties by ascending position). Rows report the share of selections the two
    policies agree on and the mean outcome among jointly selected,
    a-only-selected, and b-only-selected applicants; empty cells are None.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    y = check_binary_labels(labels)
    n = len(y)
    if not (len(a) == len(b) == n):
        raise ValueError("scores and labels must align")
    if n < 4:
        raise ValueError("need at least 4 rows")
    rows = []
    for q in quantiles:
        if not 0 < q <= 1:
            raise ValueError("quantiles must lie in (0, 1]")
        k = max(int(math.floor(q * n + 1e-9)), 1)
        note = ""
        if np.all(a == a[0]) or np.all(b == b[0]):
            note = "degenerate scores: selection fell back to tie-break order"
        sel_a = _top_fraction(a, k)
        sel_b = _top_fraction(b, k)
        both = sel_a & sel_b
        a_only = sel_a & ~sel_b
        b_only = sel_b & ~sel_a

        def _mean(mask):
            return float(y[mask].mean()) if mask.any() else None

        rows.append(
            AgreementRow(
                quantile=q,
                k=k,
                agree_share=float(both.sum() / k),
                yield_both=_mean(both),
                yield_a_only=_mean(a_only),
                yield_b_only=_mean(b_only),
                note=note,
            )
        )
    return rows


def agreement_frame(rows: list[AgreementRow]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "quantile": [r.quantile for r in rows],
            "k": [r.k for r in rows],
            "agree_share": [r.agree_share for r in rows],
            "yield_both": [np.nan if r.yield_both is None else r.yield_both for r in rows],
            "yield_a_only": [np.nan if r.yield_a_only is None else r.yield_a_only for r in rows],
            "yield_b_only": [np.nan if r.yield_b_only is None else r.yield_b_only for r in rows],
            "note": [r.note for r in rows],
        }
    )


def composition_report(
    selections: dict[str, np.ndarray],
    pool_ids: np.ndarray,
    pool_groups: np.ndarray,
) -> pd.DataFrame:
    """Group shares of each policy's selections, against the pool's shares."""
    pool_ids = np.asarray(pool_ids)
    pool_groups = np.asarray(pool_groups)
    id_to_group = dict(zip(pool_ids.tolist(), pool_groups.tolist()))
    group_names = sorted(set(pool_groups.tolist()))
    pool_share = {g: float(np.mean(pool_groups == g)) for g in group_names}
    rows = []
    for policy, ids in selections.items():
        ids = np.asarray(ids)
        if ids.size == 0:
            raise ValueError(f"policy {policy!r} selected nobody")
        sel_groups = np.array([id_to_group[int(i)] for i in ids])
        for g in group_names:
            share = float(np.mean(sel_groups == g))
            rows.append(
                {
                    "policy": policy,
                    "group": g,
                    "share": share,
                    "pool_share": pool_share[g],
                    "diff": share - pool_share[g],
                }
            )
    return pd.DataFrame(rows)


def policy_propensities(log: ExperimentLog, population: Population) -> np.ndarray:
    """Interview propensities from the run's static human-decision model."""
    if log.human_model_state is None:
        raise ValueError("log carries no human-decision model; pass propensities explicitly")
    table = log.human_model_state.score(population.features, population.ids, use_bonus=False)
    return table.belief


def yield_time_series(
    log: ExperimentLog,
    population: Population,
    propensity: np.ndarray | None = None,
    window: int = 10,
    normalization: str = "hajek",
    clip: float = 0.01,
) -> pd.DataFrame:
    """Cumulative IPW and realized yields per policy, plus rolling group shares.

    The IPW column at round t pools every analysis round up to t; the final
    row therefore equals a single pooled estimate. Group shares are rolling
    means over ``window`` rounds of selections.
    """
    if propensity is None:
        propensity = policy_propensities(log, population)
    propensity = np.asarray(propensity, dtype=float)
    if len(propensity) != population.n:
        raise ValueError("propensity must align with the population")
    pos_of = {int(a): i for i, a in enumerate(population.ids)}

    policies = list(log.policy_names) + [HUMAN_ACTUAL]
    rows = []
    int_ids: list[int] = []
    sel_ids: dict[str, list[int]] = {p: [] for p in policies}
    for r_i, rec in enumerate(log.rounds):
        int_ids.extend(int(i) for i in rec.interviewed_ids)
        for p in policies:
            sel_ids[p].extend(int(i) for i in rec.selected.get(p, ()))
        int_pos = np.array([pos_of[i] for i in int_ids], dtype=int)
        y_int = population.potential_outcome[int_pos]
        p_int = propensity[int_pos]
        for p in policies:
            chosen = set(sel_ids[p])
            sel_pos = np.array([pos_of[i] for i in sel_ids[p]], dtype=int)
            realized = float(population.potential_outcome[sel_pos].mean()) if sel_pos.size else float("nan")
            if p == HUMAN_ACTUAL:
                ipw_point = realized
            else:
                ml_flags = np.array([int(i) in chosen for i in int_ids], dtype=bool)
                try:
                    ipw_point = ipw_yield(
                        y_int, ml_flags, p_int,
                        counts=(len(int_ids), len(sel_ids[p])),
                        normalization=normalization, clip=clip,
                    ).point
                except ValueError:
                    ipw_point = float("nan")
            row = {
                "round": rec.round_index,
                "policy": p,
                "cum_ipw_yield": ipw_point,
                "cum_realized_yield": realized,
            }
            lo = max(0, r_i - window + 1)
            recent = [
                log.rounds[j].selected.get(p, np.array([], dtype=int))
                for j in range(lo, r_i + 1)
            ]
            recent_ids = np.concatenate(recent) if recent else np.array([], dtype=int)
            if recent_ids.size:
                rpos = np.array([pos_of[int(i)] for i in recent_ids])
                rgroups = population.group[rpos]
                for g in log.group_names:
                    row[f"rolling_share_{g}"] = float(np.mean(rgroups == g))
            else:
                for g in log.group_names:
                    row[f"rolling_share_{g}"] = float("nan")
            rows.append(row)
    return pd.DataFrame(rows)
