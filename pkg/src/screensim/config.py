"""Declarative run configuration: JSON schema, validation, and builders.

Configs are plain JSON. Unknown keys are hard errors so silent
misconfiguration is impossible, and a seed is required so no run carries
implicit randomness. ``config_hash`` fingerprints the normalized config and
is stamped on every output.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

from ._validation import child_rng
from .engine import GLMOptions, PolicySpecification
from .population import (
    DriftSchedule,
    Population,
    PopulationSpec,
    RoundConfig,
    default_population_spec,
    generate_population,
    simulate_human_screening,
)

_SALT_HUMAN_THETA = 41


class ConfigError(ValueError):
    """Configuration file failed validation."""


_POPULATION_KEYS = {
    "n": None,
    "round_size": 100,
    "groups": None,
    "n_continuous": 20,
    "n_indicators": 5,
    "group_mean_spread": 0.4,
    "indicator_base_rate": 0.3,
    "indicator_rate_spread": 0.1,
    "female_share": 0.332,
    "theta_intercept": -2.6,
    "theta_continuous_scale": 0.5,
    "theta_indicator_scale": 0.3,
    "theta_protected": 0.0,
    "group_quality_offsets": None,
    "indicator_rate_overrides": None,
    "unobservable_weight": 0.0,
}

_SCREENING_KEYS = {
    "screeners": 40,
    "leniency_sd": 0.1,
    "interview_rate": 0.08,
    "noise_scale": 0.45,
    "human_alignment": 0.25,
    "human_noise_scale": 0.3,
    "lenient_unobservable_weight": 0.0,
}

_ROUNDS_KEYS = {
    "capacity": None,
    "outcome_label": "hired",
    "train_fraction": 0.5,
}

_POLICY_KEYS = {
    "name": None,
    "kind": None,
    "alpha": 1.96,
    "blinded": False,
    "quota_targets": None,
    "quota_window": None,
}

_DRIFT_KEYS = {
    "target_group": None,
    "direction": None,
    "start_round": None,
    "end_round": None,
    "terminal_mean": None,
    "hold_after": True,
}

_GLM_KEYS = {
    "penalty_grid": None,
    "folds": 4,
    "retune_every": 0,
    "ridge": None,
}

_EVALUATION_KEYS = {
    "normalization": "hajek",
    "clip": 0.01,
    "quantiles": [0.25, 0.5, 0.75],
    "rolling_window": 10,
    "propensity_source": "human_model",
}

_IV_KEYS = {
    "min_caseload": 50,
    "score_source": "sl_model",
    "threshold": None,
}

_TOP_KEYS = {
    "seed": None,
    "population": None,
    "screening": dict,
    "rounds": dict,
    "policies": None,
    "update_mode": "feasible",
    "drift": None,
    "cohort_rounds": 0,
    "cohort_k": None,
    "glm": dict,
    "evaluation": dict,
    "iv": dict,
}


def _check_keys(section: dict, allowed: dict, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    out = {}
    for key, default in allowed.items():
        if key in section:
            out[key] = section[key]
        elif default is None or default is dict:
            out[key] = {} if default is dict else None
        else:
            out[key] = json.loads(json.dumps(default))  # deep copy of default
    return out


def validate_config(raw: dict) -> dict:
    """Normalize a raw config dict, filling defaults and rejecting junk."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _check_keys(raw, _TOP_KEYS, "top level")

    if cfg["seed"] is None:
        raise ConfigError("seed is required (no implicit randomness)")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")

    if not isinstance(cfg["population"], dict):
        raise ConfigError("population section is required")
    pop = _check_keys(cfg["population"], _POPULATION_KEYS, "population")
    if pop["n"] is None or not isinstance(pop["n"], int) or pop["n"] <= 0:
        raise ConfigError("population.n must be a positive integer")
    if not isinstance(pop["groups"], dict) or not pop["groups"]:
        raise ConfigError("population.groups must map group names to shares")
    total = sum(float(v) for v in pop["groups"].values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"population.groups shares must sum to 1 (got {total})")
    cfg["population"] = pop

    cfg["screening"] = _check_keys(cfg["screening"], _SCREENING_KEYS, "screening")
    rounds = _check_keys(cfg["rounds"], _ROUNDS_KEYS, "rounds")
    if rounds["capacity"] is not None:
        if not isinstance(rounds["capacity"], int) or rounds["capacity"] <= 0:
            raise ConfigError("rounds.capacity must be a positive integer or null")
    if not 0.0 < float(rounds["train_fraction"]) < 1.0:
        raise ConfigError("rounds.train_fraction must lie in (0, 1)")
    cfg["rounds"] = rounds

    if not isinstance(cfg["policies"], list) or not cfg["policies"]:
        raise ConfigError("policies must be a non-empty list")
    policies = []
    for i, p in enumerate(cfg["policies"]):
        pol = _check_keys(p, _POLICY_KEYS, f"policies[{i}]")
        if not pol["name"] or not pol["kind"]:
            raise ConfigError(f"policies[{i}] needs both name and kind")
        if pol["kind"] not in ("sl", "ucb", "human"):
            raise ConfigError(f"policies[{i}].kind must be sl, ucb, or human")
        if pol["quota_targets"] is not None and pol["quota_targets"] != "pool":
            if not isinstance(pol["quota_targets"], dict):
                raise ConfigError(f"policies[{i}].quota_targets must be a mapping or 'pool'")
        policies.append(pol)
    names = [p["name"] for p in policies]
    if len(set(names)) != len(names):
        raise ConfigError("policy names must be unique")
    cfg["policies"] = policies

    if cfg["update_mode"] not in ("feasible", "live"):
        raise ConfigError("update_mode must be 'feasible' or 'live'")

    if cfg["drift"] is not None:
        drift = _check_keys(cfg["drift"], _DRIFT_KEYS, "drift")
        if drift["target_group"] not in cfg["population"]["groups"]:
            raise ConfigError("drift.target_group must be one of the population groups")
        if drift["direction"] not in ("increase", "decrease"):
            raise ConfigError("drift.direction must be 'increase' or 'decrease'")
        cfg["drift"] = drift

    if not isinstance(cfg["cohort_rounds"], int) or cfg["cohort_rounds"] < 0:
        raise ConfigError("cohort_rounds must be a nonnegative integer")

    cfg["glm"] = _check_keys(cfg["glm"], _GLM_KEYS, "glm")
    ev = _check_keys(cfg["evaluation"], _EVALUATION_KEYS, "evaluation")
    if ev["normalization"] not in ("hajek", "horvitz-thompson"):
        raise ConfigError("evaluation.normalization must be hajek or horvitz-thompson")
    if ev["propensity_source"] not in ("human_model", "true"):
        raise ConfigError("evaluation.propensity_source must be human_model or true")
    cfg["evaluation"] = ev
    iv = _check_keys(cfg["iv"], _IV_KEYS, "iv")
    if iv["score_source"] not in ("sl_model", "true_index"):
        raise ConfigError("iv.score_source must be sl_model or true_index")
    cfg["iv"] = iv
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# builders

def build_population_spec(cfg: dict, seed: int | None = None) -> PopulationSpec:
    pop = cfg["population"]
    spec = default_population_spec(
        seed=cfg["seed"] if seed is None else seed,
        group_shares={str(g): float(s) for g, s in pop["groups"].items()},
        n_continuous=int(pop["n_continuous"]),
        n_indicators=int(pop["n_indicators"]),
        group_mean_spread=(
            {str(g): float(v) for g, v in pop["group_mean_spread"].items()}
            if isinstance(pop["group_mean_spread"], dict)
            else float(pop["group_mean_spread"])
        ),
        indicator_base_rate=float(pop["indicator_base_rate"]),
        indicator_rate_spread=float(pop["indicator_rate_spread"]),
        female_share=float(pop["female_share"]),
        theta_intercept=float(pop["theta_intercept"]),
        theta_continuous_scale=float(pop["theta_continuous_scale"]),
        theta_indicator_scale=float(pop["theta_indicator_scale"]),
        theta_protected=float(pop["theta_protected"]),
        group_quality_offsets=None if pop["group_quality_offsets"] is None else {
            str(g): float(v) for g, v in pop["group_quality_offsets"].items()
        },
        indicator_rate_overrides=None if pop["indicator_rate_overrides"] is None else {
            str(g): [float(x) for x in v] for g, v in pop["indicator_rate_overrides"].items()
        },
        round_size=int(pop["round_size"]),
        unobservable_weight=float(pop["unobservable_weight"]),
    )
    return spec


def build_human_theta(spec: PopulationSpec, cfg: dict, seed: int) -> np.ndarray:
    """Human scorer: a noisy, partially aligned version of the true model."""
    scr = cfg["screening"]
    rng = child_rng(seed, _SALT_HUMAN_THETA)
    theta = np.zeros(spec.n_features + 1)
    theta[1:] = (
        float(scr["human_alignment"]) * spec.true_theta[1:]
        + rng.normal(0.0, float(scr["human_noise_scale"]), spec.n_features)
    )
    return theta


def build_population(cfg: dict, seed: int | None = None,
                     with_drift: bool = True) -> tuple[Population, np.ndarray]:
    """Generate, screen, and (optionally) drift a population per the config.

    Returns the population and the human scorer coefficients used.
    """
    seed = cfg["seed"] if seed is None else seed
    spec = build_population_spec(cfg, seed=seed)
    population = generate_population(spec, int(cfg["population"]["n"]))
    human_theta = build_human_theta(spec, cfg, seed)
    scr = cfg["screening"]
    population = simulate_human_screening(
        population,
        human_theta=human_theta,
        screeners=int(scr["screeners"]),
        leniency_sd=float(scr["leniency_sd"]),
        interview_rate=float(scr["interview_rate"]),
        seed=seed,
        noise_scale=float(scr["noise_scale"]),
        lenient_unobservable_weight=float(scr["lenient_unobservable_weight"]),
    )
    if with_drift and cfg["drift"] is not None:
        population = population.subset(np.arange(population.n))  # defensive copy
        from .population import apply_drift

        population = apply_drift(population, build_drift_schedule(cfg, population), seed)
    return population, human_theta


def build_drift_schedule(cfg: dict, population: Population) -> DriftSchedule:
    d = cfg["drift"]
    n_rounds = population.n_rounds
    start = d["start_round"]
    end = d["end_round"]
    if start is None:
        start = int(np.floor(n_rounds * float(cfg["rounds"]["train_fraction"])))
    if end is None:
        end = max(n_rounds - int(cfg["cohort_rounds"]) - 1, start + 1)
    terminal = d["terminal_mean"]
    if terminal is None:
        terminal = 1.0 if d["direction"] == "increase" else 0.0
    return DriftSchedule(
        target_group=str(d["target_group"]),
        direction=str(d["direction"]),
        start_round=int(start),
        end_round=int(end),
        terminal_mean=float(terminal),
        hold_after=bool(d["hold_after"]),
    )


def build_policy_specs(cfg: dict) -> list[PolicySpecification]:
    shares = {str(g): float(s) for g, s in cfg["population"]["groups"].items()}
    specs = []
    for p in cfg["policies"]:
        targets = p["quota_targets"]
        if targets == "pool":
            targets = shares
        elif isinstance(targets, dict):
            targets = {str(g): float(s) for g, s in targets.items()}
        specs.append(
            PolicySpecification(
                name=str(p["name"]),
                kind=str(p["kind"]),
                alpha=float(p["alpha"]),
                blinded=bool(p["blinded"]),
                quota_targets=targets,
                quota_window=None if p["quota_window"] is None else int(p["quota_window"]),
            )
        )
    return specs


def build_round_config(cfg: dict) -> RoundConfig:
    r = cfg["rounds"]
    return RoundConfig(
        round_size=int(cfg["population"]["round_size"]),
        capacity=r["capacity"],
        outcome_label=str(r["outcome_label"]),
    )


def build_glm_options(cfg: dict) -> GLMOptions:
    g = cfg["glm"]
    return GLMOptions(
        penalty_grid=None if g["penalty_grid"] is None else tuple(float(x) for x in g["penalty_grid"]),
        folds=int(g["folds"]),
        retune_every=int(g["retune_every"]),
        ridge=None if g["ridge"] is None else float(g["ridge"]),
    )


def default_config(**overrides: Any) -> dict:
    """The package's reference configuration (small enough for a laptop run)."""
    cfg = {
        "seed": 20240501,
        "population": {
            "n": 40000,
            "round_size": 100,
            "groups": {"A": 0.581, "B": 0.087, "C": 0.042, "D": 0.290},
            "n_continuous": 20,
            "n_indicators": 5,
        },
        "screening": {},
        "rounds": {},
        "policies": [
            {"name": "sl", "kind": "sl"},
            {"name": "ucb", "kind": "ucb", "alpha": 1.96},
            {"name": "human", "kind": "human"},
        ],
        "update_mode": "feasible",
        "glm": {"penalty_grid": [0.003], "retune_every": 0},
        "evaluation": {},
    }
    cfg.update(overrides)
    return validate_config(cfg)
