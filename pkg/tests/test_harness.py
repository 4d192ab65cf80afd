import csv
import hashlib
import json
import re
from pathlib import Path

import pytest

from rdpp.errors import ConfigError, MalformedCsv, MissingCheckpoint
from rdpp.harness import commands, load_config, parse_config
from rdpp.harness.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from rdpp.harness.config import validate
from rdpp.harness.plots import bar_chart, line_chart

SMALL = """\
[experiment]
name = small
map = grid15
agents = honest, am
observer = boltzmann
K = 4
n_seeds = 2
snapshots = 2, 4
out = {out}

[agent]
clone_epochs = 20

[pirate]
n_trials = 5
"""


def write_config(tmp_path, text=SMALL, **subs):
    path = tmp_path / "exp.ini"
    path.write_text(text.format(out=tmp_path / "runs", **subs))
    return path


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree(root: Path, skip=("manifest.json",)) -> dict:
    return {str(p.relative_to(root)): digest(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


# ---------------------------------------------------------------- config

def test_defaults():
    cfg = parse_config("[experiment]\n")
    assert cfg.K == 100 and cfg.n_seeds == 10 and cfg.agent.M == 2
    assert (cfg.agent.alpha_lr, cfg.agent.beta_lr) == (0.001, 0.0001)
    assert (cfg.prefix_low, cfg.prefix_high) == (0.4, 0.6)
    assert cfg.run_id("demp") == "rdpp-demp"


def test_digest_follows_bytes():
    a = parse_config("[experiment]\nK = 500\n")
    b = parse_config("[experiment]\nK = 500\n")
    c = parse_config("[experiment]\nK  = 500\n")
    assert a.digest == b.digest != c.digest


def test_out_root_precedence(monkeypatch, tmp_path):
    monkeypatch.delenv("RDPP_OUT", raising=False)
    assert parse_config("[experiment]\n").out_root == Path("runs")
    monkeypatch.setenv("RDPP_OUT", str(tmp_path))
    assert parse_config("[experiment]\n").out_root == tmp_path
    assert parse_config(f"[experiment]\nout = {tmp_path / 'x'}\n").out_root == tmp_path / "x"


@pytest.mark.parametrize("text, line", [
    ("[experiment]\nK = 0\n", 2),
    ("[experiment]\nname = a\nK = ten\n", 3),
    ("[experiment]\nagents = honest, sneaky\n", 2),
    ("[experiment]\n\nprefix_low = 0.7\nprefix_high = 0.6\n", 3),
    ("[experiment]\nK = 10\nsnapshots = 5, 20\n", 3),
    ("[experiment]\nmap = nowhere\n", 2),
    ("[experiment]\ncolour = red\n", 2),
    ("[experiment]\n[agent]\nM = 0\n", 3),
    ("[experiment]\n[agent]\ngamma = 1.5\n", 3),
    ("[experiment]\n[observer]\neta = -1\n", 3),
    ("[experiment]\n[pretrain]\nn_trajectories = 5\n", 3),
    ("[experiment]\n[pirate]\nn_trials = -2\n", 3),
    ("[experiment]\ntrue_goal = 7\n", 2),
    ("[experiment]\n[teleport]\nx = 1\n", 2),
])
def test_config_errors_name_line(text, line):
    with pytest.raises(ConfigError, match=rf"exp\.ini:{line}:"):
        cfg = parse_config(text, "exp.ini")
        validate(cfg, text)


def test_load_config_resolves_map_path(tmp_path):
    (tmp_path / "tiny.txt").write_text("S.0\n..1\n")
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nmap = tiny.txt\n[pretrain]\nn_trajectories = 20\n")
    cfg = load_config(path)
    assert cfg.load_grid().n_goals == 2


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


# ---------------------------------------------------------------- run

@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = load_config(write_config(root))
    manifests = commands.cmd_run(cfg, jobs=1)
    return root, cfg, manifests


def test_run_layout(small_run):
    root, cfg, manifests = small_run
    assert set(manifests) == {"honest", "am"}
    for agent in manifests:
        run_dir = cfg.run_dir(agent)
        for seed in (0, 1):
            d = run_dir / f"seed{seed}"
            for name in ("metrics.csv", "features.csv", "belief.csv", "ep2.obs", "ep4.obs"):
                assert (d / name).is_file()
            assert len(list(d.glob("heatmap_*.svg"))) == 4
        with open(run_dir / "summary.csv") as fh:
            assert len(list(csv.DictReader(fh))) == cfg.K


def test_manifest_indexes_every_output(small_run):
    root, cfg, manifests = small_run
    run_dir = cfg.run_dir("am")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    produced = {str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                if p.is_file() and p.name != "manifest.json"}
    assert set(manifest["files"]) == produced
    assert all(manifest["files"][f] == digest(run_dir / f) for f in produced)
    assert manifest["config_sha256"] == cfg.digest
    assert [s["status"] for s in manifest["seeds"]] == ["ok", "ok"]
    assert manifest["seeds"][0]["streams"]["rollout"] == [0, 5]


def test_run_is_byte_deterministic(small_run, tmp_path):
    root, cfg, _ = small_run
    again = load_config(write_config(tmp_path))
    again.out = str(root / "runs")
    first = tree(cfg.run_dir("am"))
    commands.cmd_run(again, jobs=1, agents=["am"])
    assert tree(cfg.run_dir("am")) == first


def test_single_episode_run(tmp_path):
    text = SMALL.replace("K = 4", "K = 1").replace("n_seeds = 2", "n_seeds = 1").replace(
        "snapshots = 2, 4", "snapshots = 1").replace("agents = honest, am", "agents = honest")
    cfg = load_config(write_config(tmp_path, text))
    commands.cmd_run(cfg)
    with open(cfg.run_dir("honest") / "seed0" / "metrics.csv") as fh:
        rows = [r for r in fh if not r.startswith("#")]
    assert len(rows) == 2


def test_pirate_table(small_run):
    root, cfg, _ = small_run
    rows = commands.cmd_pirate(cfg)
    assert [(r["agent"], r["snapshot_episode"]) for r in rows] == [
        ("honest", 2), ("honest", 4), ("am", 2), ("am", 4)]
    assert all(0 <= r["rate"] <= 1 and r["trials"] == 10 for r in rows)
    text = (cfg.out_root / cfg.name / "pirate.csv").read_text()
    assert text.splitlines()[0] == "agent,snapshot_episode,trials,captures,rate"


def test_pirate_zero_trials_header_only(small_run, tmp_path):
    root, cfg, _ = small_run
    zero = load_config(write_config(tmp_path, SMALL.replace("n_trials = 5", "n_trials = 0")))
    zero.out = cfg.out
    zero.name = "zero"
    assert commands.cmd_pirate(zero) == []
    assert (cfg.out_root / "zero" / "pirate.csv").read_text() == "agent,snapshot_episode,trials,captures,rate\n"


def test_pirate_missing_snapshots(tmp_path):
    cfg = load_config(write_config(tmp_path))
    with pytest.raises(MissingCheckpoint):
        commands.cmd_pirate(cfg)


# ---------------------------------------------------------------- report

def test_report_structure_and_determinism(small_run, tmp_path):
    root, cfg, _ = small_run
    runs = [cfg.run_dir("honest"), cfg.run_dir("am")]
    paths = commands.cmd_report(runs, tmp_path / "a")
    names = sorted(Path(p).name for p in paths)
    assert names == ["belief.svg", "cost_ratio.svg", "deceptiveness.svg", "steps_after_ldp.svg"]
    curve = (tmp_path / "a" / "deceptiveness.svg").read_text()
    assert curve.count("<polyline") == 2
    commands.cmd_report(runs, tmp_path / "b")
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_report_empty_metrics(tmp_path):
    seed = tmp_path / "run" / "seed0"
    seed.mkdir(parents=True)
    (seed / "metrics.csv").write_text("run_id,seed,agent,episode,p_true,cost_ratio,"
                                      "steps_after_ldp,reached_goal,traj_len\n")
    commands.cmd_report([tmp_path / "run"], tmp_path / "out")
    svg = (tmp_path / "out" / "deceptiveness.svg").read_text()
    assert "<line" in svg and "<polyline" not in svg


def test_report_malformed_metrics(tmp_path):
    seed = tmp_path / "run" / "seed0"
    seed.mkdir(parents=True)
    (seed / "metrics.csv").write_text("run_id,seed,agent,episode,p_true,cost_ratio,"
                                      "steps_after_ldp,reached_goal,traj_len\nr,0,am,1,2.0,1,0,1,3\n")
    with pytest.raises(MalformedCsv, match="line 2"):
        commands.cmd_report([tmp_path / "run"], tmp_path / "out")


def test_report_missing_dir(tmp_path):
    with pytest.raises(MissingCheckpoint):
        commands.cmd_report([tmp_path / "absent"], tmp_path / "out")


def test_charts_handle_empty_input():
    for svg in (line_chart({}, "t", "x", "y"), bar_chart({}, None, "t", "y")):
        assert svg.startswith("<svg") and "<polyline" not in svg and "<line" in svg


def test_line_chart_one_polyline_per_series():
    svg = line_chart({"a": ([1, 2], [0.1, 0.2]), "b": ([1, 2], [0.3, 0.1]), "c": ([1], [0.5])},
                     "t", "x", "y")
    assert svg.count("<polyline") == 3
    assert len(re.findall(r"<title>[abc]</title>", svg)) == 3


# ---------------------------------------------------------------- pretrain

def test_pretrain_deterministic(tmp_path):
    text = SMALL.replace("observer = boltzmann", "observer = learnable") + (
        "\n[pretrain]\nn_trajectories = 30\nepochs = 1\n\n[observer]\nhidden = 8\nlayers = 1\n")
    cfg = load_config(write_config(tmp_path, text))
    report = commands.cmd_pretrain(cfg)
    assert 0.0 <= report["accuracy"] <= 1.0
    first = digest(cfg.observer_checkpoint)
    commands.cmd_pretrain(cfg)
    assert digest(cfg.observer_checkpoint) == first
    assert json.loads(cfg.observer_checkpoint.with_suffix(".json").read_text())["accuracy"] == report["accuracy"]


# ---------------------------------------------------------------- CLI

def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["run", "-c", str(cfg), "--jobs", "1", "--seeds", "1", "--agent", "honest"]) == EXIT_OK
    assert main(["pirate", "-c", str(cfg), "--seeds", "1"]) == EXIT_RUNTIME  # am snapshots missing
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nK = -1\n")
    assert main(["run", "-c", str(bad)]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG
    assert main(["report", str(tmp_path / "absent"), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME
    run_dir = tmp_path / "runs" / "small-honest"
    assert main(["report", str(run_dir), "--out", str(tmp_path / "r")]) == EXIT_OK


def test_cli_fails_when_every_seed_fails(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)

    def boom(*args, **kw):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(commands, "run_seed", boom)
    assert main(["run", "-c", str(cfg), "--jobs", "1", "--agent", "honest"]) == EXIT_RUNTIME
    manifest = json.loads((tmp_path / "runs" / "small-honest" / "manifest.json").read_text())
    assert all(s["status"] == "failed" and "diverged" in s["error"] for s in manifest["seeds"])
