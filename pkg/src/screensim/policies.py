"""Scoring policies and capacity-constrained selection.

Every policy reduces to a scorer: features in, per-applicant (belief, bonus,
score) out, where score = belief + alpha * bonus for exploration policies and
score = belief otherwise. Selection is always top-k with ties broken by
ascending applicant id, the package-wide tie-break order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_feature_matrix
from .glm import BonusParams, L1LogisticRegression, PrecisionState, predict_probability


@dataclass(frozen=True)
class PolicyScore:
    applicant_id: int
    score: float
    belief: float
    bonus: float


@dataclass
class ScoreTable:
    """Columnar per-applicant scores for one policy on one batch."""

    ids: np.ndarray
    belief: np.ndarray
    bonus: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.belief) == len(self.bonus) == len(self.score) == n):
            raise ValueError("score table columns must agree in length")

    def __len__(self) -> int:
        return len(self.ids)

    def rows(self) -> list[PolicyScore]:
        return [
            PolicyScore(int(i), float(s), float(be), float(bo))
            for i, s, be, bo in zip(self.ids, self.score, self.belief, self.bonus)
        ]


@dataclass
class SelectionResult:
    selected_ids: np.ndarray
    scores: ScoreTable
    tie_break_events: int

    @property
    def k(self) -> int:
        return len(self.selected_ids)


def _ranking(ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending id."""
    return np.lexsort((ids, -scores))


def select_top_k(scores: ScoreTable, k: int) -> SelectionResult:
    """Pick the k highest scores; ties at the boundary go to smaller ids.

    ``tie_break_events`` counts excluded applicants whose score exactly ties
    the lowest selected score (0 when the cutoff is unambiguous).
    """
    n = len(scores)
    if not 0 < k <= n:
        raise ValueError(f"k must lie in (0, {n}]")
    order = _ranking(scores.ids, scores.score)
    chosen = order[:k]
    cutoff = scores.score[chosen[-1]]
    ties = int(np.sum(scores.score[order[k:]] == cutoff))
    return SelectionResult(
        selected_ids=np.sort(scores.ids[chosen]),
        scores=scores,
        tie_break_events=ties,
    )


def quota_select(
    scores: ScoreTable,
    k: int,
    groups: np.ndarray,
    target_shares: dict[str, float],
) -> SelectionResult:
    """Top-k selection under per-group seat quotas.

    Seats are apportioned as k * share per group via the largest-remainder
    rule, which keeps every group's count within one seat of its exact quota.
    If a group has fewer candidates than seats, the surplus is reassigned to
    the remaining groups in remainder order. Within a group, seats go to the
    top scores (ties by ascending id).
    """
    n = len(scores)
    if not 0 < k <= n:
        raise ValueError(f"k must lie in (0, {n}]")
    groups = np.asarray(groups)
    if len(groups) != n:
        raise ValueError("groups must align with scores")

    names = sorted(target_shares)
    counts = {g: int(np.sum(groups == g)) for g in names}
    extra = int(np.sum(~np.isin(groups, names)))
    if extra:
        raise ValueError("every candidate must belong to a target-share group")

    quota = {g: k * target_shares[g] for g in names}
    seats = {g: min(int(np.floor(quota[g])), counts[g]) for g in names}
    remainder_order = sorted(names, key=lambda g: (-(quota[g] - np.floor(quota[g])), g))
    surplus = k - sum(seats.values())
    while surplus > 0:
        progressed = False
        for g in remainder_order:
            if surplus == 0:
                break
            if seats[g] < counts[g]:
                seats[g] += 1
                surplus -= 1
                progressed = True
        if not progressed:
            raise ValueError("not enough candidates to fill k seats")

    selected = []
    ties = 0
    for g in names:
        m = seats[g]
        if m == 0:
            continue
        mask = groups == g
        sub_ids = scores.ids[mask]
        sub_scores = scores.score[mask]
        order = _ranking(sub_ids, sub_scores)
        chosen = order[:m]
        cutoff = sub_scores[chosen[-1]]
        ties += int(np.sum(sub_scores[order[m:]] == cutoff))
        selected.append(sub_ids[chosen])
    return SelectionResult(
        selected_ids=np.sort(np.concatenate(selected)),
        scores=scores,
        tie_break_events=ties,
    )


def blind_features(X, protected_columns) -> np.ndarray:
    """Drop the protected indicator block (group one-hots plus gender flag)."""
    X = check_feature_matrix(X)
    keep = np.setdiff1d(np.arange(X.shape[1]), np.asarray(protected_columns, dtype=int))
    return X[:, keep]


def sl_policy(model: L1LogisticRegression):
    """Exploitation-only scorer: score = predicted success probability."""

    def scorer(X, ids) -> ScoreTable:
        belief = np.atleast_1d(predict_probability(model, X))
        z = np.zeros_like(belief)
        return ScoreTable(ids=np.asarray(ids), belief=belief, bonus=z, score=belief.copy())

    return scorer


def ucb_policy(model: L1LogisticRegression, state: PrecisionState, params: BonusParams):
    """Upper-confidence scorer: score = belief + alpha * exploration bonus.

    Belief and bonus are reported separately so the beliefs-only variant of
    the policy can be tracked alongside the full score.
    """

    def scorer(X, ids) -> ScoreTable:
        belief = np.atleast_1d(predict_probability(model, X))
        bonus = np.atleast_1d(state.bonus(X))
        return ScoreTable(
            ids=np.asarray(ids),
            belief=belief,
            bonus=bonus,
            score=belief + params.alpha * bonus,
        )

    return scorer


def human_policy(model: L1LogisticRegression):
    """Static scorer over a model of the human interview decision.

    The belief column doubles as the interview propensity consumed by
    inverse-propensity evaluation.
    """
    return sl_policy(model)
