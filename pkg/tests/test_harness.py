import json

import numpy as np
import pytest

from rarlab import harness
from rarlab.cli import main
from rarlab.harness import ConfigError, ExperimentConfig, compare_runs, evaluate_checkpoint
from rarlab.simulator import RuleBasedEnv, SimConfig

TINY = ["--iterations", "3", "--batch", "6", "--horizon", "10", "--eval-every", "2",
        "--eval-students", "5", "--eval-steps", "0,10"]


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for name, method in (("a", "rar_a"), ("b", "reinforce"), ("rand", "random")):
        assert run_cli("train", "--method", method, "--seeds", "0,1,2,3,4",
                       "--out", root / name, *TINY) == 0
        out[name] = root / name
    return out


# train

def test_train_writes_three_files_per_seed(runs):
    for s in range(5):
        d = runs["a"] / f"seed_{s}"
        assert sorted(p.name for p in d.iterdir()) == ["checkpoint.bin", "manifest.json",
                                                        "metrics.csv"]
        rows = harness.read_metrics(d / "metrics.csv")
        assert [r["iteration"] for r in rows] == [0, 1, 2]
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["seed"] == s and manifest["config"]["method"] == "rar_a"
        assert manifest["env"]["horizon"] == 30 and "graph" in manifest["env"]
    assert (runs["rand"] / "seed_0" / "checkpoint.bin").stat().st_size > 0


def test_rerun_from_manifest_is_bitwise_identical(runs, tmp_path):
    src = runs["a"] / "seed_3"
    assert run_cli("train", "--from-manifest", src / "manifest.json", "--out", tmp_path) == 0
    for name in ("metrics.csv", "checkpoint.bin"):
        assert (tmp_path / "seed_3" / name).read_bytes() == (src / name).read_bytes()


def test_edited_manifest_is_refused(runs, tmp_path):
    manifest = json.loads((runs["a"] / "seed_0" / "manifest.json").read_text())
    manifest["config"]["lr"] = 0.5
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    assert run_cli("train", "--from-manifest", path, "--out", tmp_path / "x") == 1
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("flag,value,field", [
    ("--method", "sac", "method"),
    ("--lr", "-1", "lr"),
    ("--gamma", "1.5", "gamma"),
    ("--m", "9", "m"),
    ("--seeds", "1,1", "seeds"),
    ("--iterations", "ten", "iterations"),
    ("--horizon", "40", "horizon"),
])
def test_invalid_config_names_field_and_writes_nothing(flag, value, field, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("train", "--out", out, *TINY, flag, value) == 2
    err = capsys.readouterr().err
    assert f"invalid config field {field}:" in err
    assert not out.exists()


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("method = rar_s\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.load(cfg)
    assert info.value.field == "learning_rate"


def test_config_file_and_flags_combine(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("# comment\nmethod = rar_s\nbeta = 0.3\nseeds = 2, 5\n")
    base = ExperimentConfig.load(cfg)
    merged = ExperimentConfig.from_strings({"beta": "0.7"}, base)
    assert (merged.method, merged.beta, merged.seeds) == ("rar_s", 0.7, (2, 5))


def test_config_hash_ignores_seeds_and_out():
    a = ExperimentConfig(seeds=(0, 1), out="x")
    assert a.config_hash() == ExperimentConfig(seeds=(4,), out="y").config_hash()
    assert a.config_hash() != ExperimentConfig(beta=0.2).config_hash()


# evaluate

def test_evaluate_zero_steps_is_zero(runs):
    table = evaluate_checkpoint(runs["a"] / "seed_0", steps=(0,), seeds=range(10))
    assert table.rows[0] == (0.0, 0.0)


def test_evaluate_is_repeatable(runs, capsys):
    args = ["evaluate", runs["a"] / "seed_1", "--students", 20]
    assert run_cli(*args) == 0
    first = capsys.readouterr().out
    assert run_cli(*args) == 0
    assert capsys.readouterr().out == first
    assert "20 students" in first


def test_evaluate_mismatched_env_reports_shapes(runs, tmp_path, capsys):
    graph = tmp_path / "g.txt"
    graph.write_text("concepts 2 questions 2\nedge 0 1\nquestion 0 0\nquestion 1 1\n")
    env = tmp_path / "env.cfg"
    env.write_text(f"graph = {graph}\nk_targets = 1\n")
    assert run_cli("evaluate", runs["a"] / "seed_0", "--env", env) == 1
    err = capsys.readouterr().err
    assert "f_e.weight has shape" in err and "environment has 2" in err


def test_random_policy_within_bootstrap_band(runs):
    n = 200
    table = evaluate_checkpoint(runs["rand"] / "seed_0", steps=(30,), seeds=range(n))
    mean = table.rows[30][0]
    # oracle: 1000 independent uniform-action episodes, no learner code involved
    env = RuleBasedEnv()
    rng = np.random.default_rng(99)
    effects = []
    for seed in range(10_000, 11_000):
        student = env.reset(seed)
        for _ in range(30):
            env.step(student, int(rng.integers(env.num_questions)))
        effects.append(env.learning_effect(student))
    boot = rng.choice(effects, size=(5000, n)).mean(axis=1)
    lo, hi = np.quantile(boot, [0.0005, 0.9995])
    assert lo <= mean <= hi


# compare

def test_compare_run_with_itself(runs):
    comp = compare_runs([runs["a"], runs["a"]], t=10)
    assert list(comp.wins.values()) == [(0, 0)]
    assert "tied" in comp.format()


def test_compare_lists_every_seed(runs, tmp_path, capsys):
    report = tmp_path / "report.txt"
    assert run_cli("compare", runs["b"], runs["a"], runs["rand"], "--t", 10,
                   "--out", report) == 0
    text = report.read_text()
    seed_rows = [ln for ln in text.splitlines() if ln.split() and ln.split()[0].isdigit()]
    assert len(seed_rows) == 5
    assert "a vs b:" in text and "rand vs b:" in text
    assert capsys.readouterr().out == text


def test_compare_is_regenerated_from_csvs(runs, tmp_path):
    import shutil
    copy = tmp_path / "a"
    shutil.copytree(runs["a"], copy)
    before = compare_runs([runs["b"], copy], t=10)
    for s in range(5):
        (copy / f"seed_{s}" / "checkpoint.bin").unlink()
    assert compare_runs([runs["b"], copy], t=10).format() == before.format()
    rows = harness.read_metrics(copy / "seed_0" / "metrics.csv")
    rows[-1]["eval_delta_t10"] = 0.987654
    harness.write_metrics(copy / "seed_0" / "metrics.csv", rows)
    assert "0.987654" in compare_runs([runs["b"], copy], t=10).format()


def test_compare_rejects_mismatched_env(runs, tmp_path):
    env = tmp_path / "env.cfg"
    env.write_text("gain = 0.25\n")
    other = tmp_path / "other"
    assert run_cli("train", "--method", "reinforce", "--seeds", "0,1,2,3,4", "--env", env,
                   "--out", other, *TINY) == 0
    with pytest.raises(ValueError, match="different environment"):
        compare_runs([runs["b"], other], t=10)


def test_compare_rejects_different_seeds(runs, tmp_path):
    other = tmp_path / "other"
    assert run_cli("train", "--method", "reinforce", "--seeds", "0,1", "--out", other,
                   *TINY) == 0
    with pytest.raises(ValueError, match="different seeds"):
        compare_runs([runs["b"], other], t=10)


def test_metrics_csv_round_trip(tmp_path):
    rows = [dict(iteration=0, mean_reward=0.1, L_p=1 / 3, L_k=2.0, L_r=0.0, total=1e-17,
                 eval_delta_t10=None, eval_delta_t30=0.25)]
    harness.write_metrics(tmp_path / "m.csv", rows)
    assert harness.read_metrics(tmp_path / "m.csv") == rows


def test_parallel_workers_match_serial(tmp_path):
    args = ["train", "--method", "reinforce", "--seeds", "0,1", *TINY]
    assert run_cli(*args, "--out", tmp_path / "serial") == 0
    assert run_cli(*args, "--out", tmp_path / "par", "--workers", 2) == 0
    for s in (0, 1):
        for name in ("metrics.csv", "checkpoint.bin"):
            assert ((tmp_path / "serial" / f"seed_{s}" / name).read_bytes() ==
                    (tmp_path / "par" / f"seed_{s}" / name).read_bytes())
