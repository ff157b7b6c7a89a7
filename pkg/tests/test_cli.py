import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from screensim.cli import main
from screensim.config import ConfigError, config_hash, default_config, validate_config

SMALL_CONFIG = {
    "seed": 321,
    "population": {
        "n": 2000,
        "round_size": 100,
        "groups": {"A": 0.581, "B": 0.087, "C": 0.042, "D": 0.290},
        "n_continuous": 8,
        "n_indicators": 3,
    },
    "screening": {"screeners": 10},
    "rounds": {},
    "policies": [
        {"name": "sl", "kind": "sl"},
        {"name": "ucb", "kind": "ucb", "alpha": 1.96},
        {"name": "human", "kind": "human"},
    ],
    "update_mode": "feasible",
    "glm": {"penalty_grid": [0.01]},
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    if overrides:
        for key, val in overrides.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfigValidation:
    def test_unknown_keys_rejected(self):
        cfg = json.loads(json.dumps(SMALL_CONFIG))
        cfg["mystery_knob"] = 1
        with pytest.raises(ConfigError, match="unknown key"):
            validate_config(cfg)
        cfg = json.loads(json.dumps(SMALL_CONFIG))
        cfg["population"]["spice"] = 2
        with pytest.raises(ConfigError, match="unknown key"):
            validate_config(cfg)

    def test_seed_required(self):
        cfg = json.loads(json.dumps(SMALL_CONFIG))
        del cfg["seed"]
        with pytest.raises(ConfigError, match="seed"):
            validate_config(cfg)

    def test_capacity_zero_rejected(self):
        cfg = json.loads(json.dumps(SMALL_CONFIG))
        cfg["rounds"] = {"capacity": 0}
        with pytest.raises(ConfigError, match="capacity"):
            validate_config(cfg)

    def test_hash_stable_under_key_order(self):
        a = validate_config(json.loads(json.dumps(SMALL_CONFIG)))
        shuffled = dict(reversed(list(json.loads(json.dumps(SMALL_CONFIG)).items())))
        b = validate_config(shuffled)
        assert config_hash(a) == config_hash(b)

    def test_default_config_is_valid(self):
        cfg = default_config()
        assert cfg["population"]["n"] == 40000
        assert {p["kind"] for p in cfg["policies"]} == {"sl", "ucb", "human"}


class TestGenerate:
    def test_generate_writes_population(self, tmp_path):
        cfg_path = write_config(tmp_path)
        out = tmp_path / "gen"
        assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 0
        header = (out / "population.csv").read_text().splitlines()[0]
        assert header.startswith("id,round,group,gender,I,screener_id,Y,f0")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [321]

    def test_refuses_to_overwrite(self, tmp_path):
        cfg_path = write_config(tmp_path)
        out = tmp_path / "gen"
        assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 2

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, overrides={"rounds": {"capacity": 0}})
        code = main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "x")])
        assert code == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and "\n" not in err.strip()


class TestRun:
    def test_run_twice_is_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", str(cfg_path), "--out", str(out_a)]) == 0
        assert main(["run", "--config", str(cfg_path), "--out", str(out_b)]) == 0
        assert tree_bytes(out_a) == tree_bytes(out_b)

    def test_run_dir_contents(self, tmp_path):
        cfg_path = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "summary.csv").exists()
        assert (out / "population.csv").exists()
        scores = sorted((out / "scores").glob("round_*.csv"))
        assert len(scores) == 10  # analysis rounds of a 20-round population
        assert (out / "checkpoints" / "human" / "static.tsv").exists()
        assert (out / "checkpoints" / "ucb" / f"round_{10:04d}.tsv").exists()
        df = pd.read_csv(scores[0])
        assert list(df.columns) == ["applicant_id", "policy", "belief", "bonus",
                                    "score", "selected"]

    def test_multi_seed_run_merges_in_seed_order(self, tmp_path):
        cfg_path = write_config(tmp_path)
        out = tmp_path / "multi"
        assert main(["run", "--config", str(cfg_path), "--out", str(out),
                     "--seeds", "5,3"]) == 0
        summary = pd.read_csv(out / "seeds_summary.csv")
        assert list(summary["seed"].unique()) == [5, 3]
        assert (out / "seed_5" / "summary.csv").exists()
        assert (out / "seed_3" / "summary.csv").exists()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("evalrun")
    cfg_path = write_config(tmp)
    out = tmp / "run"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


class TestEvaluate:

    def test_evaluate_produces_reports(self, run_dir, tmp_path):
        out = tmp_path / "eval"
        assert main(["evaluate", "--run-dir", str(run_dir), "--out", str(out)]) == 0
        ipw = pd.read_csv(out / "ipw.csv")
        assert {"sl", "ucb", "human_actual"} <= set(ipw["policy"])
        comp = pd.read_csv(out / "composition.csv")
        for _, sub in comp.groupby("policy"):
            assert sub["share"].sum() == pytest.approx(1.0, abs=1e-9)
        assert (out / "time_series.csv").exists()
        assert (out / "common_support.csv").exists()
        agree = pd.read_csv(out / "agreement.csv")
        assert {"policy_a", "policy_b", "agree_share"} <= set(agree.columns)

    def test_evaluate_rejects_corrupted_config(self, run_dir, tmp_path, capsys):
        import shutil

        bad = tmp_path / "bad_run"
        shutil.copytree(run_dir, bad)
        cfg = json.loads((bad / "config.json").read_text())
        cfg["rounds"]["capacity"] = 0
        (bad / "config.json").write_text(json.dumps(cfg))
        code = main(["evaluate", "--run-dir", str(bad), "--out", str(tmp_path / "e")])
        assert code == 2
        assert "capacity" in capsys.readouterr().err


class TestIVCommand:
    def test_iv_outputs(self, tmp_path):
        cfg_path = write_config(tmp_path, overrides={
            "population": {"n": 6000}, "screening": {"screeners": 8}})
        gen = tmp_path / "gen"
        assert main(["generate", "--config", str(cfg_path), "--out", str(gen)]) == 0
        out = tmp_path / "iv"
        assert main(["iv", "--population", str(gen / "population.csv"),
                     "--config", str(cfg_path), "--out", str(out)]) == 0
        fs = pd.read_csv(out / "first_stage.csv")
        assert fs.loc[0, "coefficient"] > 0
        assert (out / "balance.csv").exists()
        compliers = pd.read_csv(out / "compliers.csv")
        assert set(compliers["subsample"]) == {"high", "low"}
        assert (out / "monotonicity_correlation.csv").exists()


class TestDrift:
    def test_drift_produces_cohort_scores(self, tmp_path):
        cfg_path = write_config(tmp_path, overrides={
            "population": {"n": 3000},
            "update_mode": "live",
            "drift": {"target_group": "B", "direction": "increase"},
            "cohort_rounds": 5,
        })
        out = tmp_path / "drift"
        assert main(["drift", "--config", str(cfg_path), "--out", str(out)]) == 0
        rows = pd.read_csv(out / "cohort_scores.csv")
        assert {"sl", "ucb", "ucb_beliefs"} <= set(rows["line"])
        assert "share_B" in rows.columns

    def test_drift_requires_schedule(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        code = main(["drift", "--config", str(cfg_path), "--out", str(tmp_path / "d")])
        assert code == 2
        assert "drift" in capsys.readouterr().err


def test_report_prints_digest(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["report", "--run-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "screensim run" in text and "policy" in text


def test_default_config_end_to_end(tmp_path):
    # reference configuration (40000 applicants, 30 features, 200 analysis
    # rounds): run and evaluate must complete with healthy overlap
    cfg = default_config()
    cfg_path = tmp_path / "default.json"
    cfg_path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["evaluate", "--run-dir", str(out)]) == 0
    support = pd.read_csv(out / "eval" / "common_support.csv")
    assert support["flagged_low"].max() == 0
    assert support["flagged_high"].max() == 0
    ipw = pd.read_csv(out / "eval" / "ipw.csv").set_index("policy")
    human_realized = ipw.loc["human_actual", "point"]
    assert ipw.loc["sl", "point"] > human_realized
    assert ipw.loc["ucb", "point"] > human_realized
    summary = pd.read_csv(out / "summary.csv")
    assert summary["round"].nunique() == 200
