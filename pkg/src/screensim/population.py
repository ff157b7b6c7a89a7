"""Synthetic applicant populations with known ground truth.

A population carries, for every applicant, a standardized feature vector,
a protected-group label (plus a binary gender flag), a latent potential
outcome (would the applicant be hired if interviewed), and -- once human
screening has been simulated -- an interview decision and a screener
assignment. Policies only ever see features; potential outcomes are for
ground-truth evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from ._validation import (
    check_feature_matrix,
    check_psd,
    check_simplex,
    check_vector,
    child_rng,
)

# salts for deterministic child RNG streams
_SALT_ASSIGN = 11
_SALT_COVARIATES = 12
_SALT_OUTCOME = 13
_SALT_SCREENING = 21
_SALT_DRIFT = 31

POPULATION_COLUMNS = ("id", "round", "group", "gender", "I", "screener_id", "Y")


@dataclass(frozen=True)
class GroupDistribution:
    """Covariate distribution for one protected group."""

    mean: np.ndarray            # continuous means, length n_continuous
    cov: np.ndarray             # (n_continuous, n_continuous), PSD
    indicator_rates: np.ndarray  # Bernoulli rates for the extra indicator block
    female_rate: float = 0.33

    def validate(self, n_continuous: int, n_indicators: int) -> None:
        check_vector(self.mean, n_continuous, "group mean")
        if n_continuous:
            check_psd(np.asarray(self.cov, dtype=float), "group covariance")
        rates = check_vector(self.indicator_rates, n_indicators, "indicator rates")
        if np.any(rates < 0) or np.any(rates > 1):
            raise ValueError("indicator rates must lie in [0, 1]")
        if not 0.0 <= self.female_rate <= 1.0:
            raise ValueError("female_rate must lie in [0, 1]")


@dataclass(frozen=True)
class DriftSchedule:
    """Linear quality drift for one group's newly arriving applicants.

    Between ``start_round`` and ``end_round`` the group's outcome mean moves
    linearly from its baseline to ``terminal_mean``. With ``hold_after`` (the
    default), arrivals after the window keep the terminal mean, so a frozen
    evaluation cohort drawn from later rounds lives in the drifted world;
    set it False to leave post-window arrivals untouched.
    """

    target_group: str
    direction: str              # "increase" or "decrease"
    start_round: int
    end_round: int
    terminal_mean: float = 1.0
    hold_after: bool = True

    def __post_init__(self):
        if self.direction not in ("increase", "decrease"):
            raise ValueError("direction must be 'increase' or 'decrease'")
        if self.start_round >= self.end_round:
            raise ValueError("start_round must be < end_round")
        if not 0.0 <= self.terminal_mean <= 1.0:
            raise ValueError("terminal_mean must lie in [0, 1]")


@dataclass(frozen=True)
class PopulationSpec:
    """Generator parameters for a synthetic applicant population.

    The feature vector is laid out as
    ``[group one-hots] + [gender flag] + [continuous block] + [indicator block]``
    so the protected block (one-hots plus gender) can be excised exactly when
    a policy is blinded. Continuous features are standardized at generation
    (pooled mean 0, sd 1) and potential outcomes are drawn from a logistic
    model on the standardized features: Y ~ Bernoulli(logistic(x'theta)).
    """

    group_shares: dict[str, float]
    group_distributions: dict[str, GroupDistribution]
    true_theta: np.ndarray      # length d + 1, intercept first
    round_size: int = 100
    seed: int = 0
    drift: DriftSchedule | None = None
    unobservable_weight: float = 0.0  # weight of latent quality u in the Y index

    def __post_init__(self):
        check_simplex(self.group_shares)
        if set(self.group_shares) != set(self.group_distributions):
            raise ValueError("group_shares and group_distributions must list the same groups")
        nc, ni = self.n_continuous, self.n_indicators
        for g, dist in self.group_distributions.items():
            dist.validate(nc, ni)
        check_vector(self.true_theta, self.n_features + 1, "true_theta")
        if self.round_size <= 0:
            raise ValueError("round_size must be positive")
        if self.drift is not None and self.drift.target_group not in self.group_shares:
            raise ValueError(f"drift target group {self.drift.target_group!r} not in population")

    @property
    def groups(self) -> list[str]:
        return list(self.group_shares)

    @property
    def n_continuous(self) -> int:
        return len(next(iter(self.group_distributions.values())).mean)

    @property
    def n_indicators(self) -> int:
        return len(next(iter(self.group_distributions.values())).indicator_rates)

    @property
    def n_features(self) -> int:
        return len(self.groups) + 1 + self.n_continuous + self.n_indicators

    @property
    def feature_names(self) -> list[str]:
        names = [f"grp_{g}" for g in self.groups]
        names.append("gender")
        names += [f"c{i}" for i in range(self.n_continuous)]
        names += [f"b{i}" for i in range(self.n_indicators)]
        return names

    @property
    def protected_columns(self) -> np.ndarray:
        """Column indices of the protected block: group one-hots plus gender."""
        return np.arange(len(self.groups) + 1)


def default_population_spec(
    seed: int = 0,
    group_shares: dict[str, float] | None = None,
    n_continuous: int = 20,
    n_indicators: int = 5,
    group_mean_spread: float | dict[str, float] = 0.4,
    indicator_base_rate: float = 0.3,
    indicator_rate_spread: float = 0.1,
    female_share: float = 0.332,
    theta_intercept: float = -2.6,
    theta_continuous_scale: float = 0.5,
    theta_indicator_scale: float = 0.3,
    theta_protected: float = 0.0,
    group_quality_offsets: dict[str, float] | None = None,
    indicator_rate_overrides: dict[str, list[float]] | None = None,
    round_size: int = 100,
    unobservable_weight: float = 0.0,
) -> PopulationSpec:
    """Build a population spec with seeded group-level covariate shifts.

    Group shares default to the four-category applicant-pool mix used
    throughout the package (A 0.581, B 0.087, C 0.042, D 0.290). The
    potential-outcome model puts ``theta_protected`` (default 0) on every
    protected indicator, so group membership has no direct effect on quality
    unless ``group_quality_offsets`` sets per-group shifts.
    """
    if group_shares is None:
        group_shares = {"A": 0.581, "B": 0.087, "C": 0.042, "D": 0.290}
    rng = child_rng(seed, 7)
    dists = {}
    for g in group_shares:
        spread = (
            group_mean_spread.get(g, 0.4)
            if isinstance(group_mean_spread, dict)
            else group_mean_spread
        )
        mean = rng.normal(0.0, spread, n_continuous)
        rates = np.clip(
            indicator_base_rate + rng.normal(0.0, indicator_rate_spread, n_indicators),
            0.02,
            0.98,
        )
        if indicator_rate_overrides and g in indicator_rate_overrides:
            override = np.asarray(indicator_rate_overrides[g], dtype=float)
            if len(override) != n_indicators:
                raise ValueError(f"indicator override for group {g!r} must have length {n_indicators}")
            rates = np.clip(override, 0.0, 1.0)
        fem = float(np.clip(female_share + rng.normal(0.0, 0.03), 0.05, 0.95))
        dists[g] = GroupDistribution(
            mean=mean, cov=np.eye(n_continuous), indicator_rates=rates, female_rate=fem
        )
    n_groups = len(group_shares)
    group_coefs = np.full(n_groups, theta_protected)
    if group_quality_offsets:
        for i, g in enumerate(group_shares):
            group_coefs[i] += float(group_quality_offsets.get(g, 0.0))
    theta = np.concatenate(
        [
            [theta_intercept],
            group_coefs,
            [theta_protected],
            rng.normal(0.0, theta_continuous_scale, n_continuous),
            rng.normal(0.0, theta_indicator_scale, n_indicators),
        ]
    )
    return PopulationSpec(
        group_shares=dict(group_shares),
        group_distributions=dists,
        true_theta=theta,
        round_size=round_size,
        seed=seed,
        unobservable_weight=unobservable_weight,
    )


@dataclass(frozen=True)
class Applicant:
    """Single-applicant view; bulk work uses the columnar Population."""

    id: int
    features: np.ndarray
    group: str
    gender: int
    potential_outcome: int
    human_interviewed: int
    screener_id: int
    arrival_round: int


@dataclass
class Population:
    """Columnar container for a generated population.

    Immutable by convention once generated: operations that change state
    (human screening, drift) return a new Population.
    """

    spec: PopulationSpec
    ids: np.ndarray
    features: np.ndarray
    group: np.ndarray            # str labels
    gender: np.ndarray           # 0/1
    potential_outcome: np.ndarray  # 0/1
    round: np.ndarray
    interviewed: np.ndarray      # 0/1, -1 before screening
    screener_id: np.ndarray      # -1 before screening
    latent_quality: np.ndarray   # unobservable u ~ N(0,1)
    human_propensity: np.ndarray | None = None   # true P(I=1 | x, u), once screened
    screener_leniency: np.ndarray | None = None  # per-screener latent shift delta_k
    feature_names: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_rounds(self) -> int:
        return int(self.round.max()) + 1 if self.n else 0

    @property
    def protected_columns(self) -> np.ndarray:
        return self.spec.protected_columns

    def round_mask(self, t: int) -> np.ndarray:
        return self.round == t

    def applicant(self, i: int) -> Applicant:
        return Applicant(
            id=int(self.ids[i]),
            features=self.features[i].copy(),
            group=str(self.group[i]),
            gender=int(self.gender[i]),
            potential_outcome=int(self.potential_outcome[i]),
            human_interviewed=int(self.interviewed[i]),
            screener_id=int(self.screener_id[i]),
            arrival_round=int(self.round[i]),
        )

    def __iter__(self):
        return (self.applicant(i) for i in range(self.n))

    def subset(self, mask: np.ndarray) -> "Population":
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask)
        return Population(
            spec=self.spec,
            ids=self.ids[idx],
            features=self.features[idx],
            group=self.group[idx],
            gender=self.gender[idx],
            potential_outcome=self.potential_outcome[idx],
            round=self.round[idx],
            interviewed=self.interviewed[idx],
            screener_id=self.screener_id[idx],
            latent_quality=self.latent_quality[idx],
            human_propensity=None if self.human_propensity is None else self.human_propensity[idx],
            screener_leniency=self.screener_leniency,
            feature_names=self.feature_names,
        )

    def group_shares(self) -> dict[str, float]:
        return {g: float(np.mean(self.group == g)) for g in self.spec.groups}

    def to_frame(self) -> pd.DataFrame:
        cols = {
            "id": self.ids,
            "round": self.round,
            "group": self.group,
            "gender": self.gender,
            "I": self.interviewed,
            "screener_id": self.screener_id,
            "Y": self.potential_outcome,
        }
        for j in range(self.n_features):
            cols[f"f{j}"] = self.features[:, j]
        return pd.DataFrame(cols)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @staticmethod
    def from_csv(path, spec: PopulationSpec | None = None) -> "Population":
        """Load a serialized population; spec-level metadata is optional.

        Without a spec, protected-column bookkeeping is unavailable and the
        population is suitable for evaluation/IV work only.
        """
        df = pd.read_csv(path, float_precision="round_trip")
        for col in POPULATION_COLUMNS:
            if col not in df.columns:
                raise ValueError(f"population file missing column {col!r}")
        feat_cols = [c for c in df.columns if c.startswith("f") and c[1:].isdigit()]
        feat_cols.sort(key=lambda c: int(c[1:]))
        feats = df[feat_cols].to_numpy(dtype=float)
        if spec is None:
            spec = _bare_spec_for(df, feats.shape[1])
        return Population(
            spec=spec,
            ids=df["id"].to_numpy(dtype=int),
            features=feats,
            group=df["group"].to_numpy(dtype=object).astype(str),
            gender=df["gender"].to_numpy(dtype=int),
            potential_outcome=df["Y"].to_numpy(dtype=int),
            round=df["round"].to_numpy(dtype=int),
            interviewed=df["I"].to_numpy(dtype=int),
            screener_id=df["screener_id"].to_numpy(dtype=int),
            latent_quality=np.zeros(len(df)),
            feature_names=feat_cols,
        )


def _bare_spec_for(df: pd.DataFrame, d: int) -> PopulationSpec:
    # Minimal spec reconstructed from a CSV: shares from the data, flat theta.
    groups = sorted(df["group"].astype(str).unique())
    shares = {g: float(np.mean(df["group"].astype(str) == g)) for g in groups}
    total = sum(shares.values())
    shares = {g: s / total for g, s in shares.items()}
    nc = d - len(groups) - 1
    if nc < 0:
        raise ValueError("feature block narrower than the protected block")
    dists = {
        g: GroupDistribution(
            mean=np.zeros(nc), cov=np.eye(max(nc, 1))[:nc, :nc],
            indicator_rates=np.zeros(0), female_rate=0.5,
        )
        for g in groups
    }
    round_size = int(np.bincount(df["round"].to_numpy(dtype=int)).max())
    return PopulationSpec(
        group_shares=shares,
        group_distributions=dists,
        true_theta=np.zeros(d + 1),
        round_size=max(round_size, 1),
        seed=0,
    )


def generate_population(spec: PopulationSpec, n: int) -> Population:
    """Draw a population of ``n`` applicants from the spec.

    Deterministic given ``spec.seed``. Applicants are assigned to rounds of
    ``spec.round_size`` in arrival order. Continuous features are standardized
    to pooled mean 0 / sd 1 before the outcome draw, so ``true_theta`` acts on
    exactly the features policies will see.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    groups = spec.groups
    shares = np.array([spec.group_shares[g] for g in groups])

    rng_assign = child_rng(spec.seed, _SALT_ASSIGN)
    rng_cov = child_rng(spec.seed, _SALT_COVARIATES)
    rng_out = child_rng(spec.seed, _SALT_OUTCOME)

    gidx = rng_assign.choice(len(groups), size=n, p=shares)
    group = np.array([groups[i] for i in gidx], dtype=object).astype(str)

    nc, ni = spec.n_continuous, spec.n_indicators
    gender = np.zeros(n, dtype=int)
    cont = np.zeros((n, nc))
    indic = np.zeros((n, ni))
    for k, g in enumerate(groups):
        mask = gidx == k
        m = int(mask.sum())
        if m == 0:
            continue
        dist = spec.group_distributions[g]
        gender[mask] = (rng_cov.random(m) < dist.female_rate).astype(int)
        if nc:
            L = np.linalg.cholesky(
                np.asarray(dist.cov, dtype=float) + 1e-12 * np.eye(nc)
            )
            cont[mask] = dist.mean + rng_cov.standard_normal((m, nc)) @ L.T
        if ni:
            indic[mask] = (rng_cov.random((m, ni)) < dist.indicator_rates).astype(float)

    if nc:
        mu = cont.mean(axis=0)
        sd = cont.std(axis=0)
        sd[sd == 0] = 1.0
        cont = (cont - mu) / sd

    onehot = np.zeros((n, len(groups)))
    onehot[np.arange(n), gidx] = 1.0
    features = np.hstack([onehot, gender.reshape(-1, 1).astype(float), cont, indic])

    u = rng_out.standard_normal(n)
    index = spec.true_theta[0] + features @ spec.true_theta[1:]
    if spec.unobservable_weight:
        index = index + spec.unobservable_weight * u
    y = (rng_out.random(n) < expit(index)).astype(int)

    rounds = np.arange(n) // spec.round_size
    return Population(
        spec=spec,
        ids=np.arange(n),
        features=features,
        group=group,
        gender=gender,
        potential_outcome=y,
        round=rounds,
        interviewed=np.full(n, -1, dtype=int),
        screener_id=np.full(n, -1, dtype=int),
        latent_quality=u,
        feature_names=spec.feature_names,
    )


def simulate_human_screening(
    population: Population,
    human_theta: np.ndarray,
    screeners: int,
    leniency_sd: float,
    interview_rate: float,
    seed: int,
    noise_scale: float = 0.25,
    lenient_unobservable_weight: float = 0.0,
) -> Population:
    """Fill interview decisions and screener assignments.

    Each applicant is assigned uniformly at random to one of ``screeners``
    screeners; screener k carries a latent leniency shift delta_k ~
    Normal(0, leniency_sd). An applicant is interviewed iff

        logistic(x'human_theta) + delta_k + eps   >   threshold

    where eps is logistic noise with scale ``noise_scale`` and the threshold
    is the empirical quantile that realizes the target aggregate
    ``interview_rate``. Assignment is independent of covariates.

    ``lenient_unobservable_weight`` adds a term on the latent quality u for
    above-median-leniency screeners only, so those screeners partially select
    on quality the covariates cannot see; nonzero values plant a violation of
    the screener-monotonicity assumption for diagnostic testing.
    """
    if screeners < 2:
        raise ValueError("need at least 2 screeners")
    if not 0.0 < interview_rate < 1.0:
        raise ValueError("interview_rate must lie in (0, 1)")
    theta = check_vector(human_theta, population.n_features + 1, "human_theta")

    rng = child_rng(seed, _SALT_SCREENING)
    n = population.n
    sid = rng.integers(0, screeners, size=n)
    delta = rng.normal(0.0, leniency_sd, size=screeners) if leniency_sd > 0 else np.zeros(screeners)
    eps = rng.logistic(0.0, noise_scale, size=n)

    base = expit(theta[0] + population.features @ theta[1:])
    latent = base + delta[sid] + eps
    lenient_ids = np.array([], dtype=int)
    if lenient_unobservable_weight:
        lenient_ids = np.flatnonzero(delta >= np.median(delta))
        lenient_mask = np.isin(sid, lenient_ids)
        latent = latent + lenient_unobservable_weight * population.latent_quality * lenient_mask

    threshold = float(np.quantile(latent, 1.0 - interview_rate))
    interviewed = (latent > threshold).astype(int)

    # True assignment-marginal propensity P(I=1 | x, u): average the logistic
    # noise tail over the known screener shifts.
    shifts = base[:, None] + delta[None, :]
    if lenient_unobservable_weight and lenient_ids.size:
        shifts = shifts.copy()
        shifts[:, lenient_ids] += lenient_unobservable_weight * population.latent_quality[:, None]
    propensity = expit((shifts - threshold) / noise_scale).mean(axis=1)
    propensity = np.clip(propensity, 1e-12, 1 - 1e-12)

    return replace(
        population,
        interviewed=interviewed,
        screener_id=sid,
        human_propensity=propensity,
        screener_leniency=delta,
    )


def apply_drift(population: Population, schedule: DriftSchedule, seed: int) -> Population:
    """Redraw potential outcomes for one group's arrivals during a drift window.

    For target-group applicants arriving in rounds [start_round, end_round],
    Y is redrawn Bernoulli(m_t) where m_t interpolates linearly from the
    group's baseline mean to ``terminal_mean``. Applies to all such applicants
    regardless of interview status; applicants outside the group or window are
    untouched.
    """
    rng = child_rng(seed, _SALT_DRIFT)
    y = population.potential_outcome.copy()
    in_group = population.group == schedule.target_group

    pre = in_group & (population.round < schedule.start_round)
    if pre.any():
        baseline = float(population.potential_outcome[pre].mean())
    else:
        baseline = float(population.potential_outcome[in_group].mean())

    span = schedule.end_round - schedule.start_round
    last_round = population.n_rounds - 1 if schedule.hold_after else schedule.end_round
    for t in range(schedule.start_round, last_round + 1):
        frac = min((t - schedule.start_round) / span, 1.0)
        m_t = baseline + (schedule.terminal_mean - baseline) * frac
        mask = in_group & (population.round == t)
        k = int(mask.sum())
        if k:
            y[mask] = (rng.random(k) < m_t).astype(int)
    return replace(population, potential_outcome=y)


class TrainingSet:
    """Append-only labeled rows available to a policy.

    Rows carry a provenance tag: "initial" for the pre-analysis training data,
    "feasible-update" or "live-update" for rows appended during rounds.
    """

    PROVENANCE = ("initial", "feasible-update", "live-update")

    def __init__(self):
        self._blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray, str]] = []
        self._cache: tuple | None = None

    @classmethod
    def from_arrays(cls, X, y, ids, provenance: str = "initial") -> "TrainingSet":
        ts = cls()
        ts.append(X, y, ids, provenance)
        return ts

    def append(self, X, y, ids, provenance: str) -> None:
        if provenance not in self.PROVENANCE:
            raise ValueError(f"unknown provenance {provenance!r}")
        X = check_feature_matrix(X)
        y = np.asarray(y, dtype=int)
        ids = np.asarray(ids, dtype=int)
        if not (len(X) == len(y) == len(ids)):
            raise ValueError("X, y, ids must agree in length")
        if len(X) == 0:
            return
        if np.any((y != 0) & (y != 1)):
            raise ValueError("labels must be binary")
        self._blocks.append((X, y, ids, provenance))
        self._cache = None

    def _materialize(self):
        if self._cache is None:
            if not self._blocks:
                raise ValueError("training set is empty")
            X = np.vstack([b[0] for b in self._blocks])
            y = np.concatenate([b[1] for b in self._blocks])
            ids = np.concatenate([b[2] for b in self._blocks])
            prov = np.concatenate(
                [np.full(len(b[1]), b[3], dtype=object) for b in self._blocks]
            )
            self._cache = (X, y, ids, prov)
        return self._cache

    @property
    def X(self) -> np.ndarray:
        return self._materialize()[0]

    @property
    def y(self) -> np.ndarray:
        return self._materialize()[1]

    @property
    def ids(self) -> np.ndarray:
        return self._materialize()[2]

    @property
    def provenance(self) -> np.ndarray:
        return self._materialize()[3]

    @property
    def n_rows(self) -> int:
        return sum(len(b[1]) for b in self._blocks)

    def label_counts(self) -> tuple[int, int]:
        y = self.y
        pos = int(y.sum())
        return len(y) - pos, pos

    def copy(self) -> "TrainingSet":
        ts = TrainingSet()
        ts._blocks = list(self._blocks)
        return ts


@dataclass(frozen=True)
class RoundConfig:
    """Per-round sizing: arrivals per round and selections per round.

    ``capacity=None`` matches each round's realized human interview count
    (clamped to at least 1). ``outcome_label`` names what Y stands for; it is
    recorded in logs and changes no code path.
    """

    round_size: int = 100
    capacity: int | None = None
    outcome_label: str = "hired"

    def __post_init__(self):
        if self.round_size <= 0:
            raise ValueError("round_size must be positive")
        if self.capacity is not None:
            if self.capacity <= 0:
                raise ValueError("capacity must be positive")
            if self.capacity > self.round_size:
                raise ValueError("capacity cannot exceed round_size")
        if self.outcome_label not in ("hired", "offered"):
            raise ValueError("outcome_label must be 'hired' or 'offered'")
