"""Round-by-round screening experiments.

The engine walks a screened population in arrival rounds. Each round, every
policy scores the arrivals, selects up to the round's capacity, reveals
outcomes according to the update mode, appends them to its own training set,
and refits. Two update modes are supported:

* ``feasible`` -- outcomes are revealed only for applicants the policy
  selected who were also actually interviewed by a human screener.
* ``live``    -- outcomes are revealed for every applicant the policy selects.

Model states are checkpointed every round, keyed by the round they scored,
which makes it possible to re-score a frozen cohort of applicants under the
model's beliefs at different points in time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._validation import child_rng
from .glm import (
    BonusParams,
    L1LogisticRegression,
    PrecisionState,
    SingleClassError,
    build_precision_state,
    fit_l1_logistic,
    model_from_keyvalue,
    model_to_keyvalue,
    precision_state_from_keyvalue,
    precision_state_to_keyvalue,
)
from .policies import (
    ScoreTable,
    SelectionResult,
    quota_select,
    select_top_k,
    sl_policy,
    ucb_policy,
)
from .population import Population, RoundConfig, TrainingSet, apply_drift  # noqa: F401

UPDATE_MODES = ("feasible", "live")
HUMAN_ACTUAL = "human_actual"

_SALT_INIT_FIT = 501
_SALT_ROUND_FIT = 502


@dataclass
class GLMOptions:
    """Fit options shared by every learning policy in a run."""

    penalty_grid: tuple | None = None   # None -> package default grid
    folds: int = 4
    retune_every: int = 0               # 0: cross-validate once, at initialization
    tol: float = 1e-8
    max_iter: int = 10000
    ridge: float | None = None          # None -> scale-aware default


@dataclass
class PolicySpecification:
    """Declarative description of one policy in an experiment.

    ``static`` freezes the model after the initial fit (train-once), while
    outcomes still accrue to the training set under the active update mode.
    Human-kind policies are always static and never accrue outcome rows.
    """

    name: str
    kind: str                            # "sl" | "ucb" | "human"
    alpha: float = 1.96
    blinded: bool = False
    quota_targets: dict[str, float] | None = None
    quota_window: int | None = None      # applicants per quota window; None -> round size
    static: bool = False

    def __post_init__(self):
        if self.kind not in ("sl", "ucb", "human"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


@dataclass
class PolicyState:
    """Frozen snapshot of a policy's model, sufficient to re-score applicants."""

    kind: str
    alpha: float
    blinded: bool
    keep_columns: np.ndarray
    theta: np.ndarray
    penalty: float
    x_bar: np.ndarray | None = None
    v_matrix: np.ndarray | None = None
    ridge: float | None = None
    n_obs: int = 0

    def model(self) -> L1LogisticRegression:
        m = L1LogisticRegression(penalty_grid=[self.penalty])
        m.theta_ = self.theta.copy()
        m.penalty_ = self.penalty
        m.n_features_in_ = len(self.theta) - 1
        m.converged_ = True
        m.train_log_loss_ = float("nan")
        m.train_auc_ = float("nan")
        return m

    def precision_state(self) -> PrecisionState | None:
        if self.v_matrix is None:
            return None
        return PrecisionState(
            v_matrix=self.v_matrix.copy(),
            x_bar=self.x_bar.copy(),
            ridge=self.ridge,
            n_obs=self.n_obs,
        )

    def score(self, X: np.ndarray, ids: np.ndarray, use_bonus: bool | None = None) -> ScoreTable:
        """Score raw (unblinded) features under this snapshot."""
        Xv = X[:, self.keep_columns]
        if use_bonus is None:
            use_bonus = self.kind == "ucb"
        if use_bonus and self.v_matrix is not None:
            return ucb_policy(self.model(), self.precision_state(), BonusParams(self.alpha))(Xv, ids)
        return sl_policy(self.model())(Xv, ids)


class _QuotaLedger:
    """Carries fractional quota credit across rounds inside a window."""

    def __init__(self, targets: dict[str, float], window_rounds: int):
        self.targets = dict(targets)
        self.window_rounds = max(int(window_rounds), 1)
        self._round_in_window = 0
        self._credit = {g: 0.0 for g in targets}
        self._given = {g: 0 for g in targets}

    def effective_shares(self, capacity: int) -> dict[str, float]:
        if self._round_in_window == 0:
            self._credit = {g: 0.0 for g in self.targets}
            self._given = {g: 0 for g in self.targets}
        for g, s in self.targets.items():
            self._credit[g] += s * capacity
        due = {g: max(self._credit[g] - self._given[g], 0.0) for g in self.targets}
        total = sum(due.values())
        if total <= 0:
            return dict(self.targets)
        return {g: d / total for g, d in due.items()}

    def record(self, selected_groups: np.ndarray) -> None:
        for g in self.targets:
            self._given[g] += int(np.sum(selected_groups == g))
        self._round_in_window = (self._round_in_window + 1) % self.window_rounds


class PolicyRunner:
    """Stateful wrapper that owns a policy's training data and fitted model."""

    def __init__(self, spec: PolicySpecification, glm_options: GLMOptions,
                 n_features: int, protected_columns: np.ndarray, round_size: int):
        self.spec = spec
        self.glm_options = glm_options
        if spec.blinded:
            self.keep_columns = np.setdiff1d(np.arange(n_features), protected_columns)
        else:
            self.keep_columns = np.arange(n_features)
        self.training = TrainingSet()
        self.model: L1LogisticRegression | None = None
        self.state: PrecisionState | None = None
        self.is_human = spec.kind == "human"
        self.static = self.is_human or spec.static
        window = spec.quota_window if spec.quota_window else round_size
        self.quota = (
            _QuotaLedger(spec.quota_targets, max(window // round_size, 1))
            if spec.quota_targets
            else None
        )

    @property
    def name(self) -> str:
        return self.spec.name

    def _view(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.keep_columns]

    def initialize(self, X, y, ids, seed: int) -> None:
        self.training.append(X, y, ids, "initial")
        opts = self.glm_options
        self.model = fit_l1_logistic(
            self._view(X), y, penalty_grid=opts.penalty_grid, folds=opts.folds,
            seed=seed, tol=opts.tol, max_iter=opts.max_iter,
        )
        if self.spec.kind == "ucb":
            self.state = build_precision_state(self._view(self.training.X), ridge=opts.ridge)

    def append(self, X, y, ids, provenance: str) -> None:
        self.training.append(X, y, ids, provenance)

    def refit(self, round_index: int, seed: int) -> list[str]:
        """Refit on the current training set; keeps the prior model if untrainable."""
        if self.static:
            return []
        notes: list[str] = []
        opts = self.glm_options
        retune = opts.retune_every > 0 and (round_index % opts.retune_every == 0)
        grid = opts.penalty_grid if retune else [self.model.penalty_]
        try:
            self.model = fit_l1_logistic(
                self._view(self.training.X), self.training.y,
                penalty_grid=grid, folds=opts.folds, seed=seed,
                theta_init=None if retune else self.model.theta_,
                tol=opts.tol, max_iter=opts.max_iter,
            )
        except SingleClassError:
            notes.append(f"round {round_index}: single-class training data, refit skipped")
        if self.spec.kind == "ucb":
            self.state = build_precision_state(self._view(self.training.X), ridge=opts.ridge)
        return notes

    def score(self, X, ids) -> ScoreTable:
        Xv = self._view(np.asarray(X))
        if self.spec.kind == "ucb":
            scorer = ucb_policy(self.model, self.state, BonusParams(self.spec.alpha))
        else:
            scorer = sl_policy(self.model)
        return scorer(Xv, ids)

    def select(self, table: ScoreTable, k: int, groups: np.ndarray) -> SelectionResult:
        if self.quota is not None:
            shares = self.quota.effective_shares(k)
            result = quota_select(table, k, groups, shares)
            sel_mask = np.isin(table.ids, result.selected_ids)
            self.quota.record(np.asarray(groups)[sel_mask])
            return result
        return select_top_k(table, k)

    def checkpoint(self) -> PolicyState:
        st = self.state
        return PolicyState(
            kind=self.spec.kind,
            alpha=self.spec.alpha,
            blinded=self.spec.blinded,
            keep_columns=self.keep_columns.copy(),
            theta=self.model.theta_.copy(),
            penalty=self.model.penalty_,
            x_bar=None if st is None else st.x_bar.copy(),
            v_matrix=None if st is None else st.v_matrix.copy(),
            ridge=None if st is None else st.ridge,
            n_obs=0 if st is None else st.n_obs,
        )


def _fit_human_runner(spec: PolicySpecification, glm_options: GLMOptions,
                      population: Population, train_mask: np.ndarray,
                      seed: int, round_size: int) -> PolicyRunner:
    """Static model of the human interview decision, fit on all training-period
    applicants, with the balanced-sampling intercept shift undone so scores are
    usable as interview propensities."""
    runner = PolicyRunner(spec, glm_options, population.n_features,
                          population.protected_columns, round_size)
    X = population.features[train_mask]
    y = population.interviewed[train_mask]
    runner.training.append(X, y, population.ids[train_mask], "initial")
    opts = glm_options
    model = fit_l1_logistic(
        runner._view(X), y, penalty_grid=opts.penalty_grid, folds=opts.folds,
        seed=seed, tol=opts.tol, max_iter=opts.max_iter,
    )
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if 0 < n_pos and 0 < n_neg:
        # case-control correction: the 50/50 subsample inflates the intercept
        # by log(N0/N1) relative to the population base rate
        model.theta_ = model.theta_.copy()
        model.theta_[0] += np.log(n_pos / n_neg)
    runner.model = model
    return runner


@dataclass
class RoundRecord:
    round_index: int
    capacity: int
    arrival_ids: np.ndarray
    interviewed_ids: np.ndarray
    selected: dict[str, np.ndarray]
    tie_break_events: dict[str, int]
    scores: dict[str, ScoreTable]
    appended: dict[str, np.ndarray]
    yield_true: dict[str, float]
    yield_observed: dict[str, float]
    group_shares: dict[str, dict[str, float]]
    mean_bonus: dict[str, float]
    train_size: dict[str, int]
    notes: list[str] = field(default_factory=list)


@dataclass
class ExperimentLog:
    seed: int
    update_mode: str
    outcome_label: str
    policy_names: list[str]
    group_names: list[str]
    start_round: int
    end_round: int
    rounds: list[RoundRecord]
    checkpoints: dict[str, dict[int, PolicyState]]
    initial_training_ids: np.ndarray
    human_model_state: PolicyState | None

    def appended_ids(self, policy: str) -> set[int]:
        """Applicant ids whose outcome rows a policy accrued during rounds."""
        out: set[int] = set()
        for rec in self.rounds:
            out.update(int(i) for i in rec.appended.get(policy, ()))
        return out

    def selected_ids(self, policy: str) -> np.ndarray:
        parts = [rec.selected[policy] for rec in self.rounds if policy in rec.selected]
        return np.concatenate(parts) if parts else np.array([], dtype=int)

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for rec in self.rounds:
            for pol in list(self.policy_names) + [HUMAN_ACTUAL]:
                if pol not in rec.selected:
                    continue
                row = {
                    "round": rec.round_index,
                    "policy": pol,
                    "capacity": rec.capacity,
                    "n_selected": len(rec.selected[pol]),
                    "yield_true": rec.yield_true.get(pol, float("nan")),
                    "yield_observed": rec.yield_observed.get(pol, float("nan")),
                    "mean_bonus": rec.mean_bonus.get(pol, 0.0),
                    "train_size": rec.train_size.get(pol, 0),
                }
                for g in self.group_names:
                    row[f"share_{g}"] = rec.group_shares.get(pol, {}).get(g, float("nan"))
                rows.append(row)
        return pd.DataFrame(rows)

    def comparable_state(self) -> dict:
        """Policy-name-free view used to assert equivalence of two runs."""
        out = {}
        for pol in self.policy_names:
            out[pol] = {
                "selected": [rec.selected[pol].tolist() for rec in self.rounds],
                "appended": [rec.appended[pol].tolist() for rec in self.rounds],
                "theta": [self.checkpoints[pol][rec.round_index].theta.tolist()
                          for rec in self.rounds],
            }
        return out


def run_experiment(
    population: Population,
    policy_specs: list[PolicySpecification],
    round_config: RoundConfig,
    update_mode: str,
    seed: int,
    glm_options: GLMOptions | None = None,
    train_fraction: float = 0.5,
    start_round: int | None = None,
    end_round: int | None = None,
    keep_scores: bool = True,
) -> ExperimentLog:
    """Run the training/selection/update loop over a screened population.

    The initial training set is the interviewed subset of the training-period
    prefix (rounds before ``start_round``, default the first half). Each
    analysis round: score arrivals, select the round's capacity, reveal
    outcomes per ``update_mode``, append, refit, checkpoint. Deterministic
    given ``seed``.
    """
    if update_mode not in UPDATE_MODES:
        raise ValueError(f"update_mode must be one of {UPDATE_MODES}")
    if np.any(population.interviewed < 0):
        raise ValueError("population must have human screening simulated first")
    names = [s.name for s in policy_specs]
    if len(set(names)) != len(names):
        raise ValueError("policy names must be unique")
    if glm_options is None:
        glm_options = GLMOptions()

    n_rounds = population.n_rounds
    if start_round is None:
        start_round = int(np.floor(n_rounds * train_fraction))
    if end_round is None:
        end_round = n_rounds
    if not 0 < start_round < end_round <= n_rounds:
        raise ValueError("invalid round window")

    train_mask = population.round < start_round
    init_mask = train_mask & (population.interviewed == 1)
    if init_mask.sum() < 2:
        raise ValueError("training period has too few interviewed applicants")
    X_init = population.features[init_mask]
    y_init = population.potential_outcome[init_mask]
    ids_init = population.ids[init_mask]

    runners: list[PolicyRunner] = []
    human_state: PolicyState | None = None
    for spec in policy_specs:
        if isinstance(spec, PolicyRunner):
            runner = spec
            runner.initialize(X_init, y_init, ids_init, seed=_derived(seed, _SALT_INIT_FIT))
        elif spec.kind == "human":
            runner = _fit_human_runner(spec, glm_options, population, train_mask,
                                       seed=_derived(seed, _SALT_INIT_FIT),
                                       round_size=round_config.round_size)
            human_state = runner.checkpoint()
        else:
            runner = PolicyRunner(spec, glm_options, population.n_features,
                                  population.protected_columns, round_config.round_size)
            runner.initialize(X_init, y_init, ids_init, seed=_derived(seed, _SALT_INIT_FIT))
        runners.append(runner)

    groups_all = population.group
    records: list[RoundRecord] = []
    checkpoints: dict[str, dict[int, PolicyState]] = {r.name: {} for r in runners}
    provenance = "feasible-update" if update_mode == "feasible" else "live-update"

    for t in range(start_round, end_round):
        mask = population.round_mask(t)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        ids_t = population.ids[idx]
        X_t = population.features[idx]
        groups_t = groups_all[idx]
        y_t = population.potential_outcome[idx]
        interviewed_t = population.interviewed[idx] == 1
        n_interviewed = int(interviewed_t.sum())

        if round_config.capacity is not None:
            capacity = min(round_config.capacity, idx.size)
        else:
            capacity = min(max(n_interviewed, 1), idx.size)

        rec = RoundRecord(
            round_index=t,
            capacity=capacity,
            arrival_ids=ids_t,
            interviewed_ids=ids_t[interviewed_t],
            selected={},
            tie_break_events={},
            scores={},
            appended={},
            yield_true={},
            yield_observed={},
            group_shares={},
            mean_bonus={},
            train_size={},
        )

        for runner in runners:
            checkpoints[runner.name][t] = runner.checkpoint()
            table = runner.score(X_t, ids_t)
            result = runner.select(table, capacity, groups_t)
            sel_mask = np.isin(ids_t, result.selected_ids)

            rec.selected[runner.name] = result.selected_ids
            rec.tie_break_events[runner.name] = result.tie_break_events
            if keep_scores:
                rec.scores[runner.name] = table
            rec.yield_true[runner.name] = float(y_t[sel_mask].mean())
            obs = sel_mask & interviewed_t
            rec.yield_observed[runner.name] = (
                float(y_t[obs].mean()) if obs.any() else float("nan")
            )
            rec.group_shares[runner.name] = {
                g: float(np.mean(groups_t[sel_mask] == g)) for g in population.spec.groups
            }
            rec.mean_bonus[runner.name] = float(table.bonus[sel_mask].mean())

            if runner.is_human:
                rec.appended[runner.name] = np.array([], dtype=int)
                rec.train_size[runner.name] = runner.training.n_rows
                continue

            if update_mode == "feasible":
                add_mask = sel_mask & interviewed_t
            else:
                add_mask = sel_mask
            rec.appended[runner.name] = ids_t[add_mask]
            if add_mask.any():
                runner.append(X_t[add_mask], y_t[add_mask], ids_t[add_mask], provenance)
            notes = runner.refit(t, seed=_derived(seed, _SALT_ROUND_FIT, t))
            for note in notes:
                rec.notes.append(f"{runner.name}: {note}")
            rec.train_size[runner.name] = runner.training.n_rows

        # realized human screening, for comparison rows
        rec.selected[HUMAN_ACTUAL] = ids_t[interviewed_t]
        rec.yield_true[HUMAN_ACTUAL] = (
            float(y_t[interviewed_t].mean()) if interviewed_t.any() else float("nan")
        )
        rec.yield_observed[HUMAN_ACTUAL] = rec.yield_true[HUMAN_ACTUAL]
        rec.group_shares[HUMAN_ACTUAL] = {
            g: float(np.mean(groups_t[interviewed_t] == g)) if interviewed_t.any() else float("nan")
            for g in population.spec.groups
        }
        rec.mean_bonus[HUMAN_ACTUAL] = 0.0
        rec.train_size[HUMAN_ACTUAL] = 0
        records.append(rec)

    return ExperimentLog(
        seed=seed,
        update_mode=update_mode,
        outcome_label=round_config.outcome_label,
        policy_names=names,
        group_names=list(population.spec.groups),
        start_round=start_round,
        end_round=end_round,
        rounds=records,
        checkpoints=checkpoints,
        initial_training_ids=ids_init,
        human_model_state=human_state,
    )


def _derived(seed: int, *salts: int) -> int:
    # stable scalar seed for APIs that take one; collisions are irrelevant here
    rng = child_rng(seed, *salts)
    return int(rng.integers(0, 2**31 - 1))


@dataclass
class CohortScoreRow:
    checkpoint: int
    line: str                      # policy name, or "<name>_beliefs" for UCB
    selected_share: dict[str, float]
    mean_outcome: float
    median_bonus: float


def score_evaluation_cohort(
    log: ExperimentLog,
    cohort: Population,
    checkpoints: list[int],
    k: int,
) -> list[CohortScoreRow]:
    """Score one frozen cohort under the model states at several checkpoints.

    For each checkpoint round and each policy, the cohort is scored with the
    model state that scored that round, the top ``k`` are selected, and the
    row reports the group composition and mean true outcome of the selection.
    UCB policies contribute an extra beliefs-only line (bonus switched off),
    so drift plots can separate learning from exploration.
    """
    if not 0 < k <= cohort.n:
        raise ValueError("k must lie in (0, cohort size]")
    rows: list[CohortScoreRow] = []
    for t in checkpoints:
        for pol in log.policy_names:
            if t not in log.checkpoints.get(pol, {}):
                raise ValueError(f"missing checkpoint state for policy {pol!r} at round {t}")
            state = log.checkpoints[pol][t]
            variants = [(pol, None)]
            if state.kind == "ucb":
                variants.append((f"{pol}_beliefs", False))
            for line, use_bonus in variants:
                table = state.score(cohort.features, cohort.ids, use_bonus=use_bonus)
                result = select_top_k(table, k)
                sel = np.isin(cohort.ids, result.selected_ids)
                rows.append(
                    CohortScoreRow(
                        checkpoint=t,
                        line=line,
                        selected_share={
                            g: float(np.mean(cohort.group[sel] == g))
                            for g in log.group_names
                        },
                        mean_outcome=float(cohort.potential_outcome[sel].mean()),
                        median_bonus=float(np.median(table.bonus)),
                    )
                )
    return rows


def cohort_rows_frame(rows: list[CohortScoreRow], group_names: list[str]) -> pd.DataFrame:
    data = []
    for r in rows:
        row = {"checkpoint": r.checkpoint, "line": r.line,
               "mean_outcome": r.mean_outcome, "median_bonus": r.median_bonus}
        for g in group_names:
            row[f"share_{g}"] = r.selected_share.get(g, float("nan"))
        data.append(row)
    return pd.DataFrame(data)


# ---------------------------------------------------------------------------
# checkpoint serialization (key-value text, one file per policy per round)

def policy_state_to_keyvalue(state: PolicyState) -> str:
    parts = [
        f"kind\t{state.kind}",
        f"alpha\t{state.alpha!r}",
        f"blinded\t{int(state.blinded)}",
        "keep_columns\t" + ",".join(str(int(c)) for c in state.keep_columns),
    ]
    text = "\n".join(parts) + "\n" + model_to_keyvalue(state.model())
    if state.v_matrix is not None:
        text += precision_state_to_keyvalue(state.precision_state())
    return text


def policy_state_from_keyvalue(text: str) -> PolicyState:
    meta: dict[str, str] = {}
    model_lines: list[str] = []
    state_lines: list[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        key = line.split("\t", 1)[0]
        if key in ("kind", "alpha", "blinded", "keep_columns"):
            meta[key] = line.split("\t", 1)[1]
        elif key.startswith(("x_bar_", "v_", "ridge", "n_obs")):
            state_lines.append(line)
        else:
            model_lines.append(line)
    model = model_from_keyvalue("\n".join(model_lines))
    prec = precision_state_from_keyvalue("\n".join(state_lines)) if state_lines else None
    return PolicyState(
        kind=meta["kind"],
        alpha=float(meta["alpha"]),
        blinded=bool(int(meta["blinded"])),
        keep_columns=np.array([int(c) for c in meta["keep_columns"].split(",")]),
        theta=model.theta_,
        penalty=model.penalty_,
        x_bar=None if prec is None else prec.x_bar,
        v_matrix=None if prec is None else prec.v_matrix,
        ridge=None if prec is None else prec.ridge,
        n_obs=0 if prec is None else prec.n_obs,
    )
