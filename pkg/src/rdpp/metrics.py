"""Evaluation metrics and exports: deceptiveness, path cost, steps after the
last deceptive point, visit heatmaps and waypoint features.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import EmptyWindow, MalformedCsv
from .gridworld import GridMap, Trajectory, optimal_length

METRIC_FIELDS = ("run_id", "seed", "agent", "episode", "p_true", "cost_ratio",
                 "steps_after_ldp", "reached_goal", "traj_len")


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    seed: int
    agent: str
    episode: int
    p_true: float
    cost_ratio: float
    steps_after_ldp: int
    reached_goal: bool
    traj_len: int

    def __post_init__(self):
        if not 0.0 <= self.p_true <= 1.0:
            raise ValueError(f"p_true out of range: {self.p_true}")
        if self.reached_goal and self.cost_ratio < 1.0:
            raise ValueError(f"cost ratio {self.cost_ratio} below 1 on a completed path")
        if not 0 <= self.steps_after_ldp <= self.traj_len:
            raise ValueError("steps_after_ldp must lie in [0, T]")


def cost_ratio(traj: Trajectory, grid: GridMap) -> float:
    return len(traj) / optimal_length(grid)


def last_deceptive_point(step_posteriors, true_goal: int, rule: str = "argmax") -> int:
    """Index ``t`` in ``1..T`` of the last posterior that does not single out the true goal.

    ``step_posteriors[t - 1]`` is the posterior after ``t`` steps.  With
    ``rule="argmax"`` a step is deceptive when the true goal is not the
    argmax (ties go to the lowest index); with ``rule="dominance"`` it is
    deceptive unless the true goal is strictly more probable than every
    other goal.  Returns 0 when no step is deceptive.
    """
    p = np.asarray(step_posteriors, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected a (T, n_goals) posterior array")
    if rule == "argmax":
        deceptive = np.argmax(p, axis=1) != true_goal
    elif rule == "dominance":
        others = np.delete(p, true_goal, axis=1)
        deceptive = ~(p[:, true_goal] > others.max(axis=1))
    else:
        raise ValueError(f"unknown LDP rule {rule!r}")
    idx = np.flatnonzero(deceptive)
    return int(idx[-1]) + 1 if idx.size else 0


def steps_after_ldp(step_posteriors, true_goal: int, rule: str = "argmax") -> int:
    """``T - t_LDP``: T when the true goal always leads, 0 when it never does at the end."""
    return len(step_posteriors) - last_deceptive_point(step_posteriors, true_goal, rule)


def belief_along_path(traj: Trajectory, observer, true_goal: int) -> np.ndarray:
    """``P(G* | tau_{0:t})`` for ``t = 1..T``."""
    return np.asarray(observer.predict_steps(traj))[:, true_goal]


def windowed_mean(series, window: int = 10) -> np.ndarray:
    """Trailing mean over at most ``window`` points."""
    x = np.asarray(series, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def deceptiveness_curve(records, window: int = 10) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("no records")
    p = np.array([r.p_true for r in records])
    return p, windowed_mean(p, window)


def metric_rows(records, grid: GridMap, run_id: str, seed: int, agent: str,
                ldp_rule: str = "argmax") -> list:
    rows = []
    for r in records:
        traj = r.trajectory
        rows.append(MetricRow(
            run_id=run_id, seed=seed, agent=agent, episode=r.episode_index,
            p_true=float(min(max(r.p_true, 0.0), 1.0)),
            cost_ratio=cost_ratio(traj, grid),
            steps_after_ldp=steps_after_ldp(r.step_posteriors, grid.true_goal_index, ldp_rule),
            reached_goal=bool(r.reached_goal),
            traj_len=len(traj),
        ))
    return rows


# ---------------------------------------------------------------- heatmaps

@dataclass
class VisitHeatmap:
    counts: np.ndarray
    window: tuple
    final_path: list

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> set:
        ys, xs = np.nonzero(self.counts)
        return set(zip(xs.tolist(), ys.tolist()))


def visit_heatmap(records, grid: GridMap, window: tuple) -> VisitHeatmap:
    """Counts of visited cells (one per step, terminal cell excluded) for episodes ``lo..hi``."""
    lo, hi = window
    chosen = [r for r in records if lo <= r.episode_index <= hi]
    if lo > hi or not chosen:
        raise EmptyWindow(f"no episodes in window {window}")
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    for r in chosen:
        for (x, y), _ in r.trajectory.steps:
            counts[y, x] += 1
    return VisitHeatmap(counts, (lo, hi), chosen[-1].trajectory.cells)


def quarter_windows(K: int) -> list:
    edges = np.linspace(0, K, 5).round().astype(int)
    return [(int(a) + 1, int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def heatmap_svg(heat: VisitHeatmap, grid: GridMap, cell: int = 12) -> str:
    """Grayscale heatmap (black = unvisited, white = most visited), obstacles hatched red."""
    w, h = grid.width * cell, grid.height * cell
    peak = max(int(heat.counts.max()), 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    for y in range(grid.height):
        for x in range(grid.width):
            if (x, y) in grid.blocked:
                fill = "#7a1f1f"
            else:
                v = int(round(255 * np.sqrt(heat.counts[y, x] / peak)))
                fill = f"#{v:02x}{v:02x}{v:02x}"
            out.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" fill="{fill}"/>')
    for i, (gx, gy) in enumerate(grid.goals):
        colour = "#e6a400" if i == grid.true_goal_index else "#3d7fd9"
        out.append(f'<circle cx="{gx * cell + cell / 2}" cy="{gy * cell + cell / 2}" r="{cell / 2.5}" fill="{colour}"/>')
    pts = " ".join(f"{x * cell + cell / 2},{y * cell + cell / 2}" for x, y in heat.final_path)
    out.append(f'<polyline points="{pts}" fill="none" stroke="#00c8ff" stroke-width="2" stroke-dasharray="4 3"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- features

def path_features(traj: Trajectory, n_waypoints: int, grid: GridMap) -> np.ndarray:
    """Positions at ``n`` equally spaced fractions of the path, normalized by grid size.

    On a 4-connected grid every step has unit length, so arc-length
    fractions are step fractions; positions between cells are interpolated.
    """
    if n_waypoints < 2:
        raise ValueError("need at least 2 waypoints")
    cells = np.array(traj.cells, dtype=np.float64)
    if len(cells) == 0:
        raise ValueError("empty trajectory")
    s = np.linspace(0.0, len(cells) - 1, n_waypoints)
    xs = np.interp(s, np.arange(len(cells)), cells[:, 0]) / grid.width
    ys = np.interp(s, np.arange(len(cells)), cells[:, 1]) / grid.height
    return np.column_stack([xs, ys]).ravel()


def feature_rows(records, grid: GridMap, run_id: str, seed: int, n_waypoints: int = 8) -> list:
    return [(run_id, seed, r.episode_index, *path_features(r.trajectory, n_waypoints, grid))
            for r in records]


# ---------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows, fh) -> None:
    fh.write("# steps_after_ldp = T - (last step where the true goal is not the argmax); "
             "T if it always leads, 0 if it never leads at the end\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])


def metrics_to_string(rows) -> str:
    buf = io.StringIO()
    write_metrics(rows, buf)
    return buf.getvalue()


_CASTS = {f.name: f.type for f in fields(MetricRow)}


def _cast(name: str, text: str):
    kind = _CASTS[name]
    if kind == "bool":
        if text not in ("0", "1"):
            raise ValueError(f"bad flag {text!r}")
        return text == "1"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def read_metrics(fh) -> list:
    """Parse a metrics CSV; raises ``MalformedCsv`` naming the offending line."""
    rows = []
    header = None
    for lineno, line in enumerate(fh, start=1):
        if line.startswith("#") or not line.strip():
            continue
        cells = next(csv.reader([line.rstrip("\n")]))
        if header is None:
            if tuple(cells) != METRIC_FIELDS:
                raise MalformedCsv(f"line {lineno}: unexpected header {cells}")
            header = cells
            continue
        if len(cells) != len(METRIC_FIELDS):
            raise MalformedCsv(f"line {lineno}: expected {len(METRIC_FIELDS)} fields, got {len(cells)}")
        try:
            rows.append(MetricRow(**{k: _cast(k, v) for k, v in zip(METRIC_FIELDS, cells)}))
        except ValueError as err:
            raise MalformedCsv(f"line {lineno}: {err}") from None
    if header is None:
        raise MalformedCsv("line 1: missing header")
    return rows


def write_features(rows, fh, n_waypoints: int) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["run_id", "seed", "episode", *(f"f{i}" for i in range(2 * n_waypoints))])
    for row in rows:
        w.writerow([_fmt(v) if not isinstance(v, np.floating) else repr(float(v)) for v in row])


def summarize(rows) -> list:
    """Per-episode mean and std of each metric across seeds, for each (run_id, agent)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.run_id, r.agent, r.episode), []).append(r)
    out = []
    for (run_id, agent, episode), rs in sorted(groups.items()):
        entry = {"run_id": run_id, "agent": agent, "episode": episode, "n_seeds": len(rs)}
        for name in ("p_true", "cost_ratio", "steps_after_ldp", "traj_len"):
            v = np.array([getattr(r, name) for r in rs], dtype=np.float64)
            entry[f"{name}_mean"] = float(v.mean())
            entry[f"{name}_std"] = float(v.std())
        entry["reached_goal_mean"] = float(np.mean([r.reached_goal for r in rs]))
        out.append(entry)
    return out


def row_dict(row: MetricRow) -> dict:
    return asdict(row)
