"""Command-line experiment runner.

Subcommands: generate, run, evaluate, iv, drift, report. Every command takes
a JSON config (--config) and an output directory (--out); outputs are
reproducible byte-for-byte from (config, seed) and are never overwritten.
Errors exit nonzero with a single-line ``error: ...`` message on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import (
    ConfigError,
    build_drift_schedule,
    build_glm_options,
    build_policy_specs,
    build_population,
    build_population_spec,
    build_round_config,
    config_hash,
    load_config,
    validate_config,
)
from .engine import (
    HUMAN_ACTUAL,
    ExperimentLog,
    RoundRecord,
    cohort_rows_frame,
    policy_state_from_keyvalue,
    policy_state_to_keyvalue,
    run_experiment,
    score_evaluation_cohort,
)
from .evaluation import (
    agreement_frame,
    agreement_table,
    common_support,
    composition_report,
    ipw_yield,
    yield_time_series,
)
from .iv import build_instrument, complier_outcomes, monotonicity_suite, ols_on_scalar
from .population import Population

log = logging.getLogger("screensim")


# ---------------------------------------------------------------------------
# output plumbing

def _prepare_out(path: str | Path) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} exists and is not empty; refusing to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _manifest(cfg: dict, command: str, seeds: list[int], extra: dict | None = None) -> dict:
    payload = {
        "package": "screensim",
        "version": __version__,
        "command": command,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
    }
    if extra:
        payload.update(extra)
    return payload


def _parse_seeds(arg: str | None, cfg: dict) -> list[int]:
    if not arg:
        return [int(cfg["seed"])]
    try:
        seeds = [int(s) for s in arg.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {arg!r}")
    if not seeds:
        raise ConfigError("--seeds produced an empty seed list")
    return seeds


# ---------------------------------------------------------------------------
# generate

def cmd_generate(cfg: dict, out: Path) -> None:
    population, _ = build_population(cfg)
    population.to_csv(out / "population.csv")
    _write_json(out / "config.json", cfg)
    _write_json(out / "manifest.json", _manifest(cfg, "generate", [cfg["seed"]], {
        "n": population.n, "d": population.n_features,
        "n_rounds": population.n_rounds,
        "groups": list(population.spec.groups),
    }))
    log.info("wrote population of %d applicants to %s", population.n, out)


# ---------------------------------------------------------------------------
# run

def _run_one(cfg: dict, seed: int, out: Path) -> tuple[ExperimentLog, Population]:
    population, _ = build_population(cfg, seed=seed)
    specs = build_policy_specs(cfg)
    round_config = build_round_config(cfg)
    glm_options = build_glm_options(cfg)
    n_rounds = population.n_rounds
    end_round = n_rounds - int(cfg["cohort_rounds"])
    experiment = run_experiment(
        population, specs, round_config,
        update_mode=cfg["update_mode"], seed=seed,
        glm_options=glm_options,
        train_fraction=float(cfg["rounds"]["train_fraction"]),
        end_round=end_round,
    )
    _write_run_dir(cfg, seed, out, experiment, population)
    return experiment, population


def _write_run_dir(cfg: dict, seed: int, out: Path,
                   experiment: ExperimentLog, population: Population) -> None:
    population.to_csv(out / "population.csv")
    experiment.summary_frame().to_csv(out / "summary.csv", index=False)
    _write_json(out / "config.json", cfg)
    _write_json(out / "manifest.json", _manifest(cfg, "run", [seed], {
        "n": population.n, "d": population.n_features,
        "n_rounds": population.n_rounds,
        "start_round": experiment.start_round,
        "end_round": experiment.end_round,
        "update_mode": experiment.update_mode,
        "outcome_label": experiment.outcome_label,
        "policies": experiment.policy_names,
        "groups": experiment.group_names,
    }))

    scores_dir = out / "scores"
    scores_dir.mkdir()
    for rec in experiment.rounds:
        rows = []
        for pol in experiment.policy_names:
            table = rec.scores.get(pol)
            if table is None:
                continue
            chosen = set(int(i) for i in rec.selected[pol])
            for i in range(len(table)):
                rows.append({
                    "applicant_id": int(table.ids[i]),
                    "policy": pol,
                    "belief": float(table.belief[i]),
                    "bonus": float(table.bonus[i]),
                    "score": float(table.score[i]),
                    "selected": int(int(table.ids[i]) in chosen),
                })
        pd.DataFrame(rows).to_csv(scores_dir / f"round_{rec.round_index:04d}.csv", index=False)

    ckpt_dir = out / "checkpoints"
    for pol in experiment.policy_names:
        pol_dir = ckpt_dir / pol
        pol_dir.mkdir(parents=True)
        states = experiment.checkpoints[pol]
        kinds = {st.kind for st in states.values()}
        if kinds == {"human"}:
            first = states[min(states)]
            (pol_dir / "static.tsv").write_text(policy_state_to_keyvalue(first))
        else:
            for t, st in sorted(states.items()):
                (pol_dir / f"round_{t:04d}.tsv").write_text(policy_state_to_keyvalue(st))


def _seed_job(cfg_json: str, seed: int, out_str: str):
    cfg = validate_config(json.loads(cfg_json))
    out = Path(out_str)
    out.mkdir(parents=True, exist_ok=True)
    experiment, population = _run_one(cfg, seed, out)
    ts = yield_time_series(experiment, population)
    final = ts[ts["round"] == ts["round"].max()].copy()
    final.insert(0, "seed", seed)
    return final.to_json(orient="records")


def cmd_run(cfg: dict, out: Path, seeds: list[int]) -> None:
    if len(seeds) == 1:
        _run_one(cfg, seeds[0], out)
        return
    cfg_json = json.dumps(cfg)
    results: list[tuple[int, str]] = []
    with ProcessPoolExecutor() as pool:
        futures = {s: pool.submit(_seed_job, cfg_json, s, str(out / f"seed_{s}")) for s in seeds}
        for s in seeds:  # merge deterministically in seed order
            results.append((s, futures[s].result()))
    import io

    frames = [pd.read_json(io.StringIO(payload), orient="records") for _, payload in results]
    pd.concat(frames, ignore_index=True).to_csv(out / "seeds_summary.csv", index=False)
    _write_json(out / "config.json", cfg)
    _write_json(out / "manifest.json", _manifest(cfg, "run", seeds))


# ---------------------------------------------------------------------------
# evaluate

def _reconstruct_log(run_dir: Path, cfg: dict, manifest: dict,
                     population: Population) -> ExperimentLog:
    policies = manifest["policies"]
    scores_dir = run_dir / "scores"
    records: list[RoundRecord] = []
    for path in sorted(scores_dir.glob("round_*.csv")):
        t = int(path.stem.split("_")[1])
        df = pd.read_csv(path)
        mask = population.round == t
        interviewed_ids = population.ids[mask & (population.interviewed == 1)]
        selected = {}
        scores = {}
        for pol in policies:
            sub = df[df["policy"] == pol]
            selected[pol] = np.sort(sub.loc[sub["selected"] == 1, "applicant_id"].to_numpy())
        selected[HUMAN_ACTUAL] = np.sort(interviewed_ids)
        records.append(RoundRecord(
            round_index=t, capacity=len(selected[policies[0]]),
            arrival_ids=population.ids[mask], interviewed_ids=np.sort(interviewed_ids),
            selected=selected, tie_break_events={}, scores=scores, appended={},
            yield_true={}, yield_observed={}, group_shares={}, mean_bonus={},
            train_size={},
        ))
    human_state = None
    for pol in policies:
        static = run_dir / "checkpoints" / pol / "static.tsv"
        if static.exists():
            human_state = policy_state_from_keyvalue(static.read_text())
            break
    return ExperimentLog(
        seed=manifest["seeds"][0],
        update_mode=manifest["update_mode"],
        outcome_label=manifest["outcome_label"],
        policy_names=list(policies),
        group_names=list(manifest["groups"]),
        start_round=manifest["start_round"],
        end_round=manifest["end_round"],
        rounds=records,
        checkpoints={},
        initial_training_ids=np.array([], dtype=int),
        human_model_state=human_state,
    )


def _propensities_for(cfg: dict, manifest: dict, experiment: ExperimentLog,
                      population: Population) -> np.ndarray:
    source = cfg["evaluation"]["propensity_source"]
    if source == "true":
        regenerated, _ = build_population(cfg, seed=manifest["seeds"][0])
        if regenerated.n != population.n or not np.array_equal(regenerated.ids, population.ids):
            raise ConfigError("config does not regenerate the population in this run directory")
        return regenerated.human_propensity
    if experiment.human_model_state is None:
        raise ConfigError(
            "no human-kind policy in the run; set evaluation.propensity_source to 'true' "
            "or add a human policy"
        )
    table = experiment.human_model_state.score(population.features, population.ids,
                                               use_bonus=False)
    return table.belief


def cmd_evaluate(run_dir: Path, out: Path) -> None:
    cfg = load_config(run_dir / "config.json")
    with open(run_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    population = Population.from_csv(run_dir / "population.csv")
    experiment = _reconstruct_log(run_dir, cfg, manifest, population)
    propensity = _propensities_for(cfg, manifest, experiment, population)
    ev = cfg["evaluation"]

    pos_of = {int(a): i for i, a in enumerate(population.ids)}
    analysis = (population.round >= experiment.start_round) & (population.round < experiment.end_round)
    int_mask = analysis & (population.interviewed == 1)
    int_pos = np.flatnonzero(int_mask)
    y_int = population.potential_outcome[int_pos]
    p_int = propensity[int_pos]
    int_ids = set(int(i) for i in population.ids[int_pos])

    ipw_rows = []
    support_rows = []
    selections = {}
    for pol in experiment.policy_names + [HUMAN_ACTUAL]:
        sel = experiment.selected_ids(pol)
        selections[pol] = sel
        if pol == HUMAN_ACTUAL:
            realized = float(np.mean([population.potential_outcome[pos_of[int(i)]] for i in sel]))
            ipw_rows.append({"policy": pol, "estimator": "realized", "point": realized,
                             "n_interviewed": len(int_pos), "n_selected": len(sel),
                             "weight_min": np.nan, "weight_max": np.nan,
                             "ess": np.nan, "clipped": 0})
            continue
        ml_flags = np.array([int(i) in set(int(s) for s in sel) for i in population.ids[int_pos]])
        est = ipw_yield(y_int, ml_flags, p_int, counts=(len(int_pos), len(sel)),
                        normalization=ev["normalization"], clip=float(ev["clip"]))
        ipw_rows.append({"policy": pol, "estimator": est.normalization, "point": est.point,
                         "n_interviewed": est.n_interviewed, "n_selected": est.n_ml_selected,
                         "weight_min": est.weight_min, "weight_max": est.weight_max,
                         "ess": est.effective_sample_size, "clipped": est.clipped_count})
        sel_pos = np.array([pos_of[int(i)] for i in sel])
        report = common_support(propensity[sel_pos])
        for b in range(len(report.counts)):
            support_rows.append({"policy": pol, "bin_low": report.bin_edges[b],
                                 "bin_high": report.bin_edges[b + 1],
                                 "count": int(report.counts[b]),
                                 "flagged_low": report.flagged_low,
                                 "flagged_high": report.flagged_high})
    pd.DataFrame(ipw_rows).to_csv(out / "ipw.csv", index=False)
    pd.DataFrame(support_rows).to_csv(out / "common_support.csv", index=False)

    composition_report(selections, population.ids[analysis], population.group[analysis]).to_csv(
        out / "composition.csv", index=False
    )

    # pairwise agreement among interviewed applicants; each applicant carries
    # the score assigned in their arrival round
    score_frames = [pd.read_csv(p) for p in sorted((run_dir / "scores").glob("round_*.csv"))]
    if score_frames:
        all_scores = pd.concat(score_frames, ignore_index=True)
        inter = all_scores[all_scores["applicant_id"].isin(int_ids)]
        agree_rows = []
        pols = experiment.policy_names
        for i in range(len(pols)):
            for j in range(i + 1, len(pols)):
                a = inter[inter["policy"] == pols[i]].sort_values("applicant_id")
                b = inter[inter["policy"] == pols[j]].sort_values("applicant_id")
                if len(a) < 4 or len(a) != len(b):
                    continue
                labels = [population.potential_outcome[pos_of[int(x)]]
                          for x in a["applicant_id"]]
                rows = agreement_table(a["score"].to_numpy(), b["score"].to_numpy(),
                                       labels, quantiles=tuple(ev["quantiles"]))
                frame = agreement_frame(rows)
                frame.insert(0, "policy_b", pols[j])
                frame.insert(0, "policy_a", pols[i])
                agree_rows.append(frame)
        if agree_rows:
            pd.concat(agree_rows, ignore_index=True).to_csv(out / "agreement.csv", index=False)

    yield_time_series(
        experiment, population, propensity=propensity,
        window=int(ev["rolling_window"]), normalization=ev["normalization"],
        clip=float(ev["clip"]),
    ).to_csv(out / "time_series.csv", index=False)
    _write_json(out / "manifest.json", _manifest(cfg, "evaluate", manifest["seeds"]))


# ---------------------------------------------------------------------------
# iv

def cmd_iv(population_file: Path, cfg: dict, out: Path) -> None:
    population = Population.from_csv(population_file)
    ivcfg = cfg["iv"]
    instrument = build_instrument(population.screener_id, population.interviewed,
                                  min_caseload=int(ivcfg["min_caseload"]))
    pd.DataFrame({
        "id": population.ids,
        "raw": instrument.raw,
        "value": instrument.values,
        "retained": instrument.retained.astype(int),
    }).to_csv(out / "instrument.csv", index=False)

    keep = instrument.retained
    cluster = population.screener_id
    from .iv import balance_check

    balance_check(instrument, population.features, names=population.feature_names or None,
                  cluster=cluster).to_csv(out / "balance.csv", index=False)

    fs = ols_on_scalar(population.interviewed[keep].astype(float),
                       instrument.values[keep], cluster=cluster[keep])
    pd.DataFrame([{"outcome": "interviewed", "coefficient": fs.coefficient,
                   "se": fs.se, "t": fs.t, "n": fs.n}]).to_csv(
        out / "first_stage.csv", index=False)

    scores = _iv_scores(cfg, population)
    thr = ivcfg["threshold"]
    compliers = complier_outcomes(
        population.potential_outcome, population.interviewed, instrument, scores,
        threshold=None if thr is None else float(thr), cluster=cluster,
    )
    pd.DataFrame([
        {"subsample": k, "coefficient": v.coefficient, "se": v.se, "n": v.n,
         "first_stage_f": v.first_stage_f}
        for k, v in sorted(compliers.items())
    ]).to_csv(out / "compliers.csv", index=False)

    report = monotonicity_suite(population, instrument, seed=cfg["seed"],
                                train_fraction=float(cfg["rounds"]["train_fraction"]))
    report.first_stage.to_csv(out / "monotonicity_first_stage.csv", index=False)
    report.propensity_correlation.to_csv(out / "monotonicity_correlation.csv", index=False)
    report.calibration.to_csv(out / "monotonicity_calibration.csv", index=False)
    _write_json(out / "manifest.json", _manifest(cfg, "iv", [cfg["seed"]],
                                                 {"notes": report.notes}))


def _iv_scores(cfg: dict, population: Population) -> np.ndarray:
    from scipy.special import expit

    if cfg["iv"]["score_source"] == "true_index":
        spec = build_population_spec(cfg)
        if spec.n_features != population.n_features:
            raise ConfigError("config population spec does not match the population file")
        return expit(spec.true_theta[0] + population.features @ spec.true_theta[1:])
    from .glm import fit_l1_logistic, predict_probability

    n_rounds = population.n_rounds
    split = max(int(np.floor(n_rounds * float(cfg["rounds"]["train_fraction"]))), 1)
    train = (population.round < split) & (population.interviewed == 1)
    glm_options = build_glm_options(cfg)
    model = fit_l1_logistic(
        population.features[train], population.potential_outcome[train],
        penalty_grid=glm_options.penalty_grid, folds=glm_options.folds, seed=cfg["seed"],
    )
    return predict_probability(model, population.features)


# ---------------------------------------------------------------------------
# drift

def cmd_drift(cfg: dict, out: Path) -> None:
    if cfg["drift"] is None:
        raise ConfigError("drift command needs a drift section in the config")
    if cfg["cohort_rounds"] <= 0:
        raise ConfigError("drift command needs cohort_rounds > 0 to reserve an evaluation cohort")
    seed = cfg["seed"]
    population, _ = build_population(cfg, seed=seed)
    specs = build_policy_specs(cfg)
    round_config = build_round_config(cfg)
    n_rounds = population.n_rounds
    end_round = n_rounds - int(cfg["cohort_rounds"])
    experiment = run_experiment(
        population, specs, round_config, update_mode=cfg["update_mode"], seed=seed,
        glm_options=build_glm_options(cfg),
        train_fraction=float(cfg["rounds"]["train_fraction"]), end_round=end_round,
    )
    cohort = population.subset(population.round >= end_round)
    if cfg["cohort_k"] is not None:
        k = int(cfg["cohort_k"])
    else:
        mean_capacity = float(np.mean([rec.capacity for rec in experiment.rounds]))
        k = max(int(round(cohort.n * mean_capacity / round_config.round_size)), 1)
    checkpoints = [rec.round_index for rec in experiment.rounds]
    rows = score_evaluation_cohort(experiment, cohort, checkpoints, k)
    cohort_rows_frame(rows, experiment.group_names).to_csv(out / "cohort_scores.csv", index=False)
    experiment.summary_frame().to_csv(out / "summary.csv", index=False)
    _write_json(out / "config.json", cfg)
    _write_json(out / "manifest.json", _manifest(cfg, "drift", [seed], {
        "cohort_size": cohort.n, "cohort_k": k,
        "drift": cfg["drift"],
        "schedule": {
            "start_round": build_drift_schedule(cfg, population).start_round,
            "end_round": build_drift_schedule(cfg, population).end_round,
        },
    }))


# ---------------------------------------------------------------------------
# report

def cmd_report(run_dir: Path) -> None:
    with open(run_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    print(f"screensim run {manifest.get('config_hash', '?')} "
          f"(command={manifest.get('command')}, seeds={manifest.get('seeds')})")
    summary = run_dir / "summary.csv"
    if summary.exists():
        df = pd.read_csv(summary)
        last = df[df["round"] == df["round"].max()]
        print(f"rounds {df['round'].min()}..{df['round'].max()}; final-round snapshot:")
        cols = [c for c in ("policy", "capacity", "yield_true", "train_size") if c in last.columns]
        share_cols = [c for c in last.columns if c.startswith("share_")]
        print(last[cols + share_cols].to_string(index=False))
    for extra in ("ipw.csv", "compliers.csv", "cohort_scores.csv"):
        path = run_dir / extra
        if path.exists():
            print(f"\n{extra}:")
            print(pd.read_csv(path).to_string(index=False))


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="screensim",
                                     description="Seeded screening-policy experiments")
    parser.add_argument("--verbose", action="store_true", help="chatty logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate and screen a population")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run the round-by-round experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated replication seeds")

    p = sub.add_parser("evaluate", help="evaluate a finished run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="default: <run-dir>/eval")

    p = sub.add_parser("iv", help="leniency-IV diagnostics on a population file")
    p.add_argument("--population", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("drift", help="quality-drift experiment with cohort replay")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="print a digest of a run directory")
    p.add_argument("--run-dir", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "generate":
            cfg = load_config(args.config)
            cmd_generate(cfg, _prepare_out(args.out))
        elif args.command == "run":
            cfg = load_config(args.config)
            cmd_run(cfg, _prepare_out(args.out), _parse_seeds(args.seeds, cfg))
        elif args.command == "evaluate":
            run_dir = Path(args.run_dir)
            out = _prepare_out(args.out if args.out else run_dir / "eval")
            cmd_evaluate(run_dir, out)
        elif args.command == "iv":
            cfg = load_config(args.config)
            cmd_iv(Path(args.population), cfg, _prepare_out(args.out))
        elif args.command == "drift":
            cfg = load_config(args.config)
            cmd_drift(cfg, _prepare_out(args.out))
        elif args.command == "report":
            cmd_report(Path(args.run_dir))
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else exc.__class__.__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
