"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The experiment-backed criteria share one session-scoped run of the full
pipeline (pretrain, run, pirate) on the bundled 15x15 map with K=100 and ten
seeds.  On one core this takes roughly twenty minutes.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import fd_gradient, open_map, rel_error
from rdpp import agents as ag
from rdpp import autodiff as ad
from rdpp import demp
from rdpp.gridworld import shortest_path, trajectory_from_cells
from rdpp.harness import commands, load_config
from rdpp.metrics import read_metrics
from rdpp.observers import BoltzmannObserver

EXPERIMENT = """\
[experiment]
name = {name}
map = grid15
agents = {agents}
observer = learnable
K = 100
n_seeds = 10
snapshots = 25, 50, 100
out = {out}

[agent]
M = {M}

[observer]
checkpoint = {out}/observer.obs

[pirate]
n_trials = 10
"""


def sign_test(wins: int, losses: int) -> float:
    """One-sided binomial sign test p-value for ``wins`` out of ``wins + losses`` (ties dropped)."""
    n = wins + losses
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n if n else 1.0


def announce(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def seed_rows(run_dir: Path) -> dict:
    out = {}
    for seed_dir in sorted(run_dir.glob("seed*")):
        with open(seed_dir / "metrics.csv") as fh:
            out[int(seed_dir.name[4:])] = read_metrics(fh)
    return out


def tail_mean(rows, name, n=10, head=False):
    v = [getattr(r, name) for r in rows]
    return float(np.mean(v[:n] if head else v[-n:]))


def write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    out = root / "runs"
    main = load_config(write(root / "main.ini", EXPERIMENT.format(
        name="main", agents="honest, am, naive, demp", M=2, out=out)))
    single = load_config(write(root / "m1.ini", EXPERIMENT.format(name="m1", agents="demp", M=1, out=out)))
    t0 = time.time()
    report = commands.cmd_pretrain(main)
    t_pretrain = time.time() - t0
    commands.cmd_run(main, jobs=1)
    commands.cmd_run(single, jobs=1)
    pirate = commands.cmd_pirate(main)
    return dict(root=root, main=main, single=single, pretrain=report, t_pretrain=t_pretrain,
                pirate=pirate, rows={a: seed_rows(main.run_dir(a)) for a in main.agents},
                m1=seed_rows(single.run_dir("demp")))


# ---------------------------------------------------------------- 1

def test_criterion_1_autodiff(capsys):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    errors = []
    for trial in range(3):
        spec = ad.LayerSpec((6, 10, 10, 3))
        theta = spec.init(rng)
        x, y = rng.normal(size=(5, 6)), rng.normal(size=(5, 3))
        f = lambda p: ad.vsum(ad.tanh(ad.mlp_forward(p, spec, x)) * y)
        tape = ad.Tape()
        v = tape.variable(theta)
        errors.append(rel_error(ad.grad(f(v), v).value, fd_gradient(lambda z: f(ad.Var(z)).item(), theta, h=1e-3, order=4)))

        rspec = ad.RecurrentSpec(4, 5, 2, 3)
        phi = rspec.init(rng)
        seq = rng.normal(size=(4, 4))
        g = lambda p: -ad.log_softmax(ad.rnn_forward(p, rspec, seq))[trial % 3]
        tape = ad.Tape()
        v = tape.variable(phi)
        errors.append(rel_error(ad.grad(g(v), v).value, fd_gradient(lambda z: g(ad.Var(z)).item(), phi, h=1e-3, order=4)))
    hvp_err = 0.0
    for n in range(1, 9):
        B = rng.normal(size=(n, n))
        A = B + B.T
        p0, vec = rng.normal(size=n), rng.normal(size=n)
        tape = ad.Tape(higher_order=True)
        p = tape.variable(p0)
        loss = 0.5 * ad.vsum(p * ad.matmul(ad.const(A), p.reshape((n, 1))).reshape((n,)))
        hvp_err = max(hvp_err, float(np.max(np.abs(ad.grad_of_grad(loss, p, vec).value - A @ vec))))
    elapsed = time.time() - t0
    ok = max(errors) < 1e-4 and hvp_err < 1e-10 and elapsed < 10
    announce(capsys, 1, ok, f"max FD rel err {max(errors):.2e}, HVP err {hvp_err:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_bilevel_oracle(capsys):
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = ratio_err = 0.0
    for _ in range(20):
        c, d, theta0 = rng.normal(size=3)
        alpha = rng.uniform(0.05, 0.9)
        p = demp.QuadraticBilevel([c], [d])
        _, trace, exact = demp.meta_step([theta0], p, demp.MetaConfig(M=1, alpha_lr=alpha))
        _, _, first = demp.meta_step([theta0], p, demp.MetaConfig(M=1, alpha_lr=alpha, first_order=True))
        theta1 = theta0 - alpha * (theta0 - c)
        worst = max(worst, abs(exact[0] - (1 - alpha) * (theta1 - d)))
        ratio_err = max(ratio_err, abs(exact[0] - (1 - alpha) * first[0]))
    p = demp.QuadraticBilevel([1.0, -2.0, 0.5], [3.0, 0.0, -1.0])
    cfg = demp.MetaConfig(M=1, alpha_lr=0.1, beta_lr=1.0)
    theta = np.zeros(3)
    target = p.optimum(0.1)
    steps = 0
    while steps < 500 and np.max(np.abs(theta - target)) >= 1e-4:
        theta, _, _ = demp.meta_step(theta, p, cfg)
        steps += 1
    gap = float(np.max(np.abs(theta - target)))
    elapsed = time.time() - t0
    ok = worst < 1e-10 and ratio_err < 1e-10 and gap < 1e-4 and elapsed < 5
    announce(capsys, 2, ok, f"closed-form err {worst:.1e}, (1-a) factor err {ratio_err:.1e}, "
                            f"optimum gap {gap:.1e} after {steps} steps, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_surrogate(capsys):
    t0 = time.time()
    rng = np.random.default_rng(3)
    ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        q = rng.dirichlet(np.ones(n))
        a, b = np.sort(rng.uniform(0, 1, 2))
        if b > a:
            ok &= ag.deceptive_reward(a, 100.0) > ag.deceptive_reward(b, 100.0)
        ok &= ag.kl_to_uniform(q) >= 0 and ag.kl_to_uniform(q) > 1e-9
        ok &= ag.kl_to_uniform(np.full(n, 1.0 / n)) < 1e-9
    grid = np.linspace(0, 1, 1001)
    ok &= bool(np.all(np.diff([ag.deceptive_reward(p, 100.0) for p in grid]) < 0))
    elapsed = time.time() - t0
    ok &= elapsed < 1
    announce(capsys, 3, ok, f"1000 posteriors, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_observer_sanity(capsys, experiment):
    g = open_map(9, 9, (4, 8), [(0, 0), (8, 0)]).with_true_goal(1)
    cells = [(4, 8)] + [(4, y) for y in range(7, 3, -1)] + shortest_path(g, (4, 4), (8, 0))[1:]
    traj = trajectory_from_cells(cells, goal=(8, 0))
    steps = BoltzmannObserver(g).predict_steps(traj)
    diverged = next(t for t, a in enumerate(traj.actions) if a == 3)
    boltzmann_ok = bool(np.all(np.argmax(steps[diverged:], axis=1) == 1)) and np.allclose(steps[:diverged], 0.5)
    acc = experiment["pretrain"]["accuracy"]
    ok = boltzmann_ok and acc > 0.8 and experiment["t_pretrain"] < 180
    announce(capsys, 4, ok, f"Boltzmann fixture {'ok' if boltzmann_ok else 'wrong'}, "
                            f"held-out accuracy {acc:.3f}, pretrain {experiment['t_pretrain']:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_static_deception_degrades(capsys, experiment):
    runs = experiment["rows"]["am"]
    first = [tail_mean(r, "p_true", head=True) for r in runs.values()]
    last = [tail_mean(r, "p_true") for r in runs.values()]
    wins = sum(b > a for a, b in zip(first, last))
    losses = sum(b < a for a, b in zip(first, last))
    p = sign_test(wins, losses)
    ok = np.mean(last) > np.mean(first) and p < 0.05 and len(runs) == 10
    announce(capsys, 5, ok, f"AM p_true first10 {np.mean(first):.3f} -> last10 {np.mean(last):.3f}, "
                            f"{wins}/{len(runs)} seeds up, sign p={p:.4f}")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_demp_beats_naive(capsys, experiment):
    d, n = experiment["rows"]["demp"], experiment["rows"]["naive"]
    dl = {s: tail_mean(r, "p_true") for s, r in d.items()}
    nl = {s: tail_mean(r, "p_true") for s, r in n.items()}
    wins = sum(dl[s] < nl[s] for s in dl)
    losses = sum(dl[s] > nl[s] for s in dl)
    p = sign_test(wins, losses)
    cost = {k: np.mean([tail_mean(r, "cost_ratio") for r in v.values()]) for k, v in (("demp", d), ("naive", n))}
    reach = {k: np.mean([tail_mean(r, "reached_goal") for r in v.values()]) for k, v in (("demp", d), ("naive", n))}
    ok = np.mean(list(dl.values())) < np.mean(list(nl.values())) and p < 0.05
    announce(capsys, 6, ok, f"last10 p_true DeMP {np.mean(list(dl.values())):.3f} vs naive "
                            f"{np.mean(list(nl.values())):.3f}, DeMP lower on {wins}/{len(dl)} seeds, "
                            f"sign p={p:.4f}; cost ratio {cost['demp']:.2f} vs {cost['naive']:.2f}, "
                            f"reach {reach['demp']:.2f} vs {reach['naive']:.2f}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_steps_after_ldp(capsys, experiment):
    mean = {a: np.mean([r.steps_after_ldp for rows in experiment["rows"][a].values() for r in rows])
            for a in ("demp", "honest")}
    ok = mean["demp"] > mean["honest"]
    announce(capsys, 7, ok, f"mean steps after LDP DeMP {mean['demp']:.2f} vs honest {mean['honest']:.2f}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_inner_steps_ablation(capsys, experiment):
    last = lambda runs: float(np.mean([tail_mean(r, "p_true") for r in runs.values()]))
    m1, m2, naive = last(experiment["m1"]), last(experiment["rows"]["demp"]), last(experiment["rows"]["naive"])
    ok = abs(m1 - naive) <= 0.05 and m2 < m1
    announce(capsys, 8, ok, f"last10 p_true M=1 {m1:.3f}, naive {naive:.3f} (gap {abs(m1 - naive):.3f}), "
                            f"M=2 {m2:.3f}")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_pirate(capsys, experiment):
    rate = {(r["agent"], r["snapshot_episode"]): r for r in experiment["pirate"]}
    honest, demp_ = rate[("honest", 100)], rate[("demp", 100)]
    am = [rate[("am", k)]["rate"] for k in (25, 50, 100)]
    ok = (honest["trials"] == demp_["trials"] == 100 and honest["rate"] >= demp_["rate"]
          and all(b >= a for a, b in zip(am, am[1:])))
    announce(capsys, 9, ok, f"ep100 capture honest {honest['rate']:.2f} vs DeMP {demp_['rate']:.2f} "
                            f"({honest['trials']} trials); AM at 25/50/100: "
                            + "/".join(f"{r:.2f}" for r in am))
    assert ok


# ---------------------------------------------------------------- 10

def _digests(run_dir: Path, seed: int) -> dict:
    d = run_dir / f"seed{seed}"
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.iterdir()) if p.suffix in (".csv", ".obs", ".pol", ".svg")}


def test_criterion_10_determinism(capsys, experiment, tmp_path):
    main = experiment["main"]
    text = EXPERIMENT.format(name="main", agents="am", M=2, out=tmp_path / "again")
    text = text.replace("n_seeds = 10", "n_seeds = 1").replace(
        f"checkpoint = {tmp_path / 'again'}/observer.obs", f"checkpoint = {main.observer_checkpoint}")
    again = load_config(write(tmp_path / "again.ini", text))
    commands.cmd_run(again, jobs=1)
    before, after = _digests(main.run_dir("am"), 0), _digests(again.run_dir("am"), 0)
    reports = [commands.cmd_report([main.run_dir("am"), main.run_dir("demp")], tmp_path / f"r{i}")
               for i in range(2)]
    svgs = [[hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in rep] for rep in reports]
    ok = before == after and len(before) >= 5 and svgs[0] == svgs[1]
    announce(capsys, 10, ok, f"{len(before)} per-seed files and {len(svgs[0])} report SVGs byte-identical"
             if ok else "outputs differ on rerun")
    assert ok
