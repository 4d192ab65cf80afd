"""Experiment commands: pretrain an observer, run seeds, pirate evaluation, reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from .. import autodiff as ad
from .. import metrics as mt
from ..agents import POLICY
from ..errors import ConfigError, MissingCheckpoint
from ..observers import LearnableObserver, pretrain
from ..protocol import RdppConfig, run_pirate_eval, run_rdpp
from ..rng import Stream, describe, stream
from . import plots
from .config import ExperimentConfig

log = logging.getLogger("rdpp")

PIRATE_FIELDS = ("agent", "snapshot_episode", "trials", "captures", "rate")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------- pretrain

def cmd_pretrain(cfg: ExperimentConfig) -> dict:
    """Train the learnable observer offline; writes the checkpoint and a JSON report."""
    grid = cfg.load_grid()
    p, o = cfg.pretrain, cfg.observer_spec
    observer = LearnableObserver(grid, hidden=o.hidden, layers=o.layers,
                                 seed=stream(p.seed, Stream.OBSERVER_INIT), online_loss=o.online_loss)
    log.info("pretraining observer on %s (%d trajectories, %d epochs)", grid.name, p.n_trajectories, p.epochs)
    report = pretrain(observer, grid, n_trajectories=p.n_trajectories, epochs=p.epochs,
                      seed=stream(p.seed, Stream.PRETRAIN), rule=cfg.prefix_rule,
                      batch_size=p.batch_size, lr=p.lr, optimizer=p.optimizer,
                      full_fraction=p.full_fraction)
    path = cfg.observer_checkpoint
    path.parent.mkdir(parents=True, exist_ok=True)
    observer.save(path)
    report.update(map=grid.name, checkpoint=str(path), seed=p.seed, version=__version__)
    path.with_suffix(".json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("observer prefix accuracy %.3f -> %s", report["accuracy"], path)
    return report


def _load_observer(cfg: ExperimentConfig, pretrain_missing: bool):
    if cfg.observer == "boltzmann":
        return None
    path = cfg.observer_checkpoint
    if not path.exists():
        if not pretrain_missing:
            raise MissingCheckpoint(f"no observer checkpoint at {path}; run `rdpp pretrain` first")
        cmd_pretrain(cfg)
    return LearnableObserver.load(path, cfg.load_grid(), eta=cfg.observer_spec.eta,
                                  online_loss=cfg.observer_spec.online_loss)


# ---------------------------------------------------------------- run

def rdpp_config(cfg: ExperimentConfig, agent: str, seed: int) -> RdppConfig:
    return RdppConfig(grid=cfg.load_grid(), K=cfg.K, agent=agent, observer=cfg.observer, seed=seed,
                      prefix_rule=cfg.prefix_rule, settings=cfg.agent,
                      observer_eta=cfg.observer_spec.eta, observer_clip=cfg.observer_spec.clip_norm)


def run_seed(cfg: ExperimentConfig, agent: str, seed: int, observer) -> dict:
    """Play one seed and write its artifacts under ``{run_dir}/seed{seed}``."""
    rc = rdpp_config(cfg, agent, seed)
    grid = rc.grid
    out = cfg.run_dir(agent) / f"seed{seed}"
    out.mkdir(parents=True, exist_ok=True)
    snapshots = set(cfg.snapshots) | set(cfg.pirate.snapshot_episodes)

    def on_record(record, env):
        k = record.episode_index
        if k in snapshots:
            env.observer.save(out / f"ep{k}.obs")
            theta = record.extra.get("theta")
            if theta is not None:
                ad.save_flat(out / f"ep{k}.pol", POLICY.sizes, theta)

    records = run_rdpp(rc, observer=observer, on_record=on_record)
    run_id = cfg.run_id(agent)
    rows = mt.metric_rows(records, grid, run_id, seed, agent, cfg.ldp_rule)
    with open(out / "metrics.csv", "w", newline="") as fh:
        mt.write_metrics(rows, fh)
    with open(out / "features.csv", "w", newline="") as fh:
        mt.write_features(mt.feature_rows(records, grid, run_id, seed, cfg.n_waypoints), fh, cfg.n_waypoints)
    with open(out / "belief.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "t", "p_true"])
        for r in (records[0], records[-1]):
            for t, p in enumerate(np.asarray(r.step_posteriors)[:, grid.true_goal_index], start=1):
                w.writerow([r.episode_index, t, repr(float(p))])
    for lo, hi in mt.quarter_windows(cfg.K):
        heat = mt.visit_heatmap(records, grid, (lo, hi))
        (out / f"heatmap_{lo}-{hi}.svg").write_text(mt.heatmap_svg(heat, grid))
    return {"seed": seed, "status": "ok", "episodes": len(records)}


def _run_seed_safely(args) -> dict:
    cfg, agent, seed, observer = args
    started = _now()
    try:
        result = run_seed(cfg, agent, seed, observer)
    except Exception as err:  # one failing seed must not take down the others
        episode = getattr(err, "episode", None)
        result = {"seed": seed, "status": "failed", "error": f"{type(err).__name__}: {err}",
                  "episode": episode, "traceback": traceback.format_exc()}
    result.update(started=started, finished=_now(), streams=describe(seed))
    return result


def _file_index(run_dir: Path) -> dict:
    return {str(p.relative_to(run_dir)): _sha256(p) for p in sorted(run_dir.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def _write_summary(run_dir: Path, seeds: list) -> None:
    rows = []
    for seed in seeds:
        path = run_dir / f"seed{seed}" / "metrics.csv"
        if path.exists():
            with open(path) as fh:
                rows += mt.read_metrics(fh)
    summary = mt.summarize(rows)
    if not summary:
        return
    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]), lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_run(cfg: ExperimentConfig, jobs: int = 1, agents=None, pretrain_missing: bool = True) -> dict:
    """Run every configured agent over every seed; returns ``{agent: manifest}``."""
    agents = tuple(agents or cfg.agents)
    for a in agents:
        if a not in cfg.agents:
            raise ConfigError(f"agent {a!r} is not listed in the configuration")
    observer = _load_observer(cfg, pretrain_missing)
    manifests = {}
    for agent in agents:
        run_dir = cfg.run_dir(agent)
        run_dir.mkdir(parents=True, exist_ok=True)
        started = _now()
        tasks = [(cfg, agent, seed, observer) for seed in cfg.seeds]
        log.info("running %s: %d seeds x %d episodes", cfg.run_id(agent), len(tasks), cfg.K)
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_seed_safely, tasks))
        else:
            results = [_run_seed_safely(t) for t in tasks]
        for r in results:
            if r["status"] == "ok":
                log.info("%s seed %d done", cfg.run_id(agent), r["seed"])
            else:
                log.error("%s seed %d failed at episode %s: %s", cfg.run_id(agent), r["seed"],
                          r.get("episode"), r["error"])
        _write_summary(run_dir, cfg.seeds)
        manifest = {
            "run_id": cfg.run_id(agent),
            "agent": agent,
            "version": __version__,
            "config": cfg.source,
            "config_sha256": cfg.digest,
            "observer_checkpoint": None if observer is None else str(cfg.observer_checkpoint),
            "observer_sha256": None if observer is None else _sha256(cfg.observer_checkpoint),
            "started": started,
            "finished": _now(),
            "seeds": results,
            "files": _file_index(run_dir),
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        manifests[agent] = manifest
    return manifests


def failed_seeds(manifests: dict) -> list:
    return [(a, r["seed"]) for a, m in manifests.items() for r in m["seeds"] if r["status"] != "ok"]


def failed_runs(manifests: dict) -> list:
    """Agents whose every seed failed; a run with any surviving seed still succeeds."""
    return [a for a, m in manifests.items() if all(r["status"] != "ok" for r in m["seeds"])]


# ---------------------------------------------------------------- pirate

def cmd_pirate(cfg: ExperimentConfig) -> list:
    """Capture rates pooled over every seed; writes ``{out}/{name}/pirate.csv``."""
    grid = cfg.load_grid()
    cfg.pirate.validate(cfg.K)
    pooled: dict = {}
    for agent in cfg.agents if cfg.pirate.n_trials else ():
        for seed in cfg.seeds:
            seed_dir = cfg.run_dir(agent) / f"seed{seed}"
            if not seed_dir.is_dir():
                raise MissingCheckpoint(f"no run output at {seed_dir}; run `rdpp run` first")
            for row in run_pirate_eval(cfg.pirate, {agent: seed_dir}, grid, cfg.agent):
                cell = pooled.setdefault((agent, row["snapshot_episode"]), [0, 0])
                cell[0] += row["trials"]
                cell[1] += row["captures"]
    rows = [{"agent": a, "snapshot_episode": k, "trials": n, "captures": c,
             "rate": c / n if n else float("nan")} for (a, k), (n, c) in pooled.items()]
    path = cfg.out_root / cfg.name / "pirate.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PIRATE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "rate": repr(float(row["rate"]))})
    log.info("pirate capture rates -> %s", path)
    return rows


# ---------------------------------------------------------------- report

def _read_run(run_dir: Path) -> tuple[list, dict]:
    rows, beliefs = [], {}
    for seed_dir in sorted(run_dir.glob("seed*")):
        path = seed_dir / "metrics.csv"
        if not path.exists():
            continue
        with open(path) as fh:
            rows += mt.read_metrics(fh)
        belief = seed_dir / "belief.csv"
        if belief.exists() and not beliefs:
            with open(belief) as fh:
                for r in csv.DictReader(fh):
                    beliefs.setdefault(int(r["episode"]), []).append(float(r["p_true"]))
    return rows, beliefs


def cmd_report(run_dirs, out, window: int = 10, tail: int = 10) -> list:
    """Comparison charts over run directories; returns the written paths.

    Curves average the ``window``-episode trailing mean of ``P(G*)`` across
    seeds.  Bars show the mean (and across-seed spread) of the last ``tail``
    episodes.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    curves, belief_lines, bars = {}, {}, {"cost_ratio": ({}, {}), "steps_after_ldp": ({}, {})}
    for run_dir in map(Path, run_dirs):
        if not run_dir.is_dir():
            raise MissingCheckpoint(f"no run directory {run_dir}")
        rows, beliefs = _read_run(run_dir)
        if not rows:
            log.warning("no metric rows under %s", run_dir)
            continue
        label = rows[0].agent if len({r.run_id for r in rows}) == 1 else run_dir.name
        label = label if label not in curves else run_dir.name
        by_seed: dict = {}
        for r in rows:
            by_seed.setdefault(r.seed, []).append(r)
        K = min(len(v) for v in by_seed.values())
        p = np.array([[r.p_true for r in sorted(v, key=lambda r: r.episode)[:K]] for v in by_seed.values()])
        curves[label] = (np.arange(1, K + 1), np.mean([mt.windowed_mean(s, window) for s in p], axis=0))
        for name, (means, errs) in bars.items():
            per_seed = [np.mean([getattr(r, name) for r in sorted(v, key=lambda r: r.episode)[K - tail:K]])
                        for v in by_seed.values()]
            means[label], errs[label] = float(np.mean(per_seed)), float(np.std(per_seed))
        if beliefs:
            last = max(beliefs)
            belief_lines[label] = (np.arange(1, len(beliefs[last]) + 1), beliefs[last])
    written = []

    def emit(name, svg):
        path = out / name
        path.write_text(svg)
        written.append(path)

    emit("deceptiveness.svg", plots.line_chart(curves, f"P(true goal), {window}-episode mean",
                                               "episode", "P(G*)", (0.0, 1.0)))
    emit("cost_ratio.svg", plots.bar_chart(*bars["cost_ratio"], f"cost ratio, last {tail} episodes",
                                           "path length / optimal"))
    emit("steps_after_ldp.svg", plots.bar_chart(*bars["steps_after_ldp"],
                                                f"steps after last deceptive point, last {tail} episodes",
                                                "steps"))
    if belief_lines:
        emit("belief.svg", plots.line_chart(belief_lines, "P(true goal) along the final path",
                                            "step", "P(G*)", (0.0, 1.0)))
    return written
