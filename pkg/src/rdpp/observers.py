"""Goal-recognition observers.

``BoltzmannObserver`` scores goals by cumulative Q-differences (cost-based
plan recognition).  ``LearnableObserver`` is a stacked LSTM over per-step
features that is pretrained on optimal trajectories and then fine-tuned
online with one gradient step per episode.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import (
    DegeneratePrior,
    EmptyPrefix,
    InsufficientData,
    NonFinite,
)
from .gridworld import (
    N_ACTIONS,
    GridMap,
    Trajectory,
    action_regret,
    optimal_q_tables,
    trajectory_from_cells,
)


@dataclass(frozen=True)
class GoalPosterior:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("posterior must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a distribution: {p}")
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __getitem__(self, i):
        return float(self.probs[i])

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    @classmethod
    def uniform(cls, n: int) -> "GoalPosterior":
        return cls(np.full(n, 1.0 / n))


@dataclass(frozen=True)
class PrefixRule:
    low: float = 0.4
    high: float = 0.6

    def __post_init__(self):
        if not (0 < self.low <= self.high <= 1):
            raise ValueError(f"prefix fractions must satisfy 0 < low <= high <= 1, got {self.low}, {self.high}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.low == self.high:
            return self.low
        return float(rng.uniform(self.low, self.high))


def prefix_length(n_steps: int, ratio: float) -> int:
    return max(1, int(math.floor(ratio * n_steps + 1e-9)))


def sample_prefix(traj: Trajectory, rule: PrefixRule, rng: np.random.Generator) -> Trajectory:
    """First ``max(1, floor(ratio * T))`` steps with ratio drawn from ``rule``."""
    if len(traj) == 0:
        raise EmptyPrefix("cannot take a prefix of an empty trajectory")
    return traj.prefix(prefix_length(len(traj), rule.sample(rng)))


# ---------------------------------------------------------------- cost-based

def q_difference(traj: Trajectory, q_table: np.ndarray) -> float:
    """Sum of ``Q(s, a) - max_a' Q(s, a')`` along the trajectory (always <= 0)."""
    total = 0.0
    for (x, y), a in traj.steps:
        row = q_table[y, x]
        total += row[a] - row.max()
    return float(total)


def boltzmann_posterior(deltas, priors=None) -> GoalPosterior:
    """``P(g) proportional to exp(delta_g) * prior_g``, renormalised."""
    deltas = np.asarray(deltas, dtype=np.float64)
    priors = np.ones_like(deltas) if priors is None else np.asarray(priors, dtype=np.float64)
    if priors.shape != deltas.shape:
        raise ValueError("deltas and priors differ in length")
    if np.any(priors < 0):
        raise ValueError("priors must be non-negative")
    if not priors.sum() > 0:
        raise DegeneratePrior("all priors are zero")
    with np.errstate(divide="ignore"):
        logw = deltas + np.log(priors)
    logw = logw - logw[np.isfinite(logw)].max()
    w = np.exp(logw)
    return GoalPosterior(w / w.sum())


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


class BoltzmannObserver:
    """Static cost-based recognizer; has no learnable parameters."""

    kind = "boltzmann"

    def __init__(self, grid: GridMap, priors=None, q_tables=None):
        self.grid = grid
        self.q_tables = optimal_q_tables(grid) if q_tables is None else q_tables
        self.priors = np.ones(grid.n_goals) if priors is None else np.asarray(priors, dtype=np.float64)
        # per-cell regret of each action under each goal, (G, H, W, 4)
        self._regret = action_regret(self.q_tables)

    def step_deltas(self, traj: Trajectory) -> np.ndarray:
        """``(T, G)`` cumulative Q-differences after each step."""
        if len(traj) == 0:
            return np.zeros((0, self.grid.n_goals))
        xs = np.array([c[0] for c, _ in traj.steps])
        ys = np.array([c[1] for c, _ in traj.steps])
        acts = np.array(traj.actions)
        per_step = self._regret[:, ys, xs, acts].T
        return np.cumsum(per_step, axis=0)

    def predict(self, prefix: Trajectory) -> GoalPosterior:
        deltas = np.array([q_difference(prefix, self.q_tables[i]) for i in range(self.grid.n_goals)])
        return boltzmann_posterior(deltas, self.priors)

    def predict_steps(self, traj: Trajectory) -> np.ndarray:
        if len(traj) == 0:
            raise EmptyPrefix("empty trajectory")
        out = []
        for d in self.step_deltas(traj):
            out.append(boltzmann_posterior(d, self.priors).probs)
        return np.array(out)

    def online_update(self, traj: Trajectory, true_goal: int) -> float:
        p = self.predict(traj)
        return float(-math.log(max(p[true_goal], ad.LOG_FLOOR)))

    def snapshot(self) -> "BoltzmannObserver":
        return self

    def save(self, path) -> None:
        ad.save_flat(path, (self.grid.n_goals,), self.priors)


# ---------------------------------------------------------------- learnable

FEATURES = 2 + N_ACTIONS


def encode_steps(traj: Trajectory, width: int, height: int) -> np.ndarray:
    """Per step: ``(x / width, y / height, one-hot action)``."""
    out = np.zeros((len(traj), FEATURES))
    for t, ((x, y), a) in enumerate(traj.steps):
        out[t, 0] = x / width
        out[t, 1] = y / height
        out[t, 2 + a] = 1.0
    return out


def _pad(batch: list) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in batch])
    out = np.zeros((len(batch), lengths.max(), FEATURES))
    for i, s in enumerate(batch):
        out[i, :len(s)] = s
    return out, lengths


class LearnableObserver:
    """Two-layer LSTM recognizer with a linear head over candidate goals."""

    kind = "learnable"

    def __init__(self, grid: GridMap, hidden: int = 64, layers: int = 2, eta: float = 0.01,
                 seed: int | np.random.Generator = 0, online_loss: str = "prefix_mean",
                 clip_norm: float | None = None):
        if online_loss not in ("prefix_mean", "final"):
            raise ValueError(f"unknown online_loss {online_loss!r}")
        self.width, self.height = grid.width, grid.height
        self.n_goals = grid.n_goals
        self.spec = ad.RecurrentSpec(FEATURES, hidden, layers, grid.n_goals)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.phi = self.spec.init(rng)
        self.eta = float(eta)
        self.online_loss = online_loss
        self.clip_norm = clip_norm
        self.pretrained = False

    # -- inference
    def encode(self, traj: Trajectory) -> np.ndarray:
        return encode_steps(traj, self.width, self.height)

    def predict(self, prefix: Trajectory) -> GoalPosterior:
        if len(prefix) == 0:
            raise EmptyPrefix("observer needs at least one step")
        logits = ad.rnn_forward(self.phi, self.spec, self.encode(prefix)).value
        return GoalPosterior(ad.np_softmax(logits))

    def predict_steps(self, traj: Trajectory) -> np.ndarray:
        """``(T, G)`` posteriors after each prefix length 1..T."""
        if len(traj) == 0:
            raise EmptyPrefix("observer needs at least one step")
        logits = ad.rnn_forward(self.phi, self.spec, self.encode(traj), all_steps=True).value
        return ad.np_softmax(logits, axis=-1)

    def predict_batch(self, trajs: list) -> np.ndarray:
        seq, lengths = _pad([self.encode(t) for t in trajs])
        logits = ad.rnn_forward(self.phi, self.spec, seq, lengths=lengths).value
        return ad.np_softmax(logits, axis=-1)

    # -- learning
    def _online_objective(self, phi: ad.Var, traj: Trajectory, goal: int) -> ad.Var:
        x = self.encode(traj)
        if self.online_loss == "final":
            return -ad.log_softmax(ad.rnn_forward(phi, self.spec, x))[goal]
        logits = ad.rnn_forward(phi, self.spec, x, all_steps=True)
        return -ad.mean(ad.log_softmax(logits, axis=-1)[:, goal])

    def online_update(self, traj: Trajectory, true_goal: int) -> float:
        """One gradient step on the NLL of the true goal; returns the pre-update loss."""
        if len(traj) == 0:
            raise EmptyPrefix("cannot learn from an empty trajectory")
        tape = ad.Tape()
        phi = tape.variable(self.phi)
        loss = self._online_objective(phi, traj, true_goal)
        g = ad.grad(loss, phi).value
        if self.clip_norm is not None:
            norm = float(np.linalg.norm(g))
            if norm > self.clip_norm:
                g = g * (self.clip_norm / norm)
        new = self.phi - self.eta * g
        if not np.all(np.isfinite(new)):
            raise NonFinite("observer update produced non-finite parameters")
        self.phi = new
        return loss.item()

    def objective(self, traj: Trajectory, true_goal: int) -> float:
        return self._online_objective(ad.Var(self.phi), traj, true_goal).item()

    def snapshot(self) -> "LearnableObserver":
        return copy.deepcopy(self)

    # -- persistence
    def save(self, path) -> None:
        ad.save_flat(path, self.spec.sizes, self.phi)

    @classmethod
    def load(cls, path, grid: GridMap, eta: float = 0.01, online_loss: str = "prefix_mean") -> "LearnableObserver":
        sizes, values = ad.load_flat(path)
        if sizes[-1] != grid.n_goals or sizes[0] != FEATURES:
            raise ValueError(f"checkpoint layout {sizes} does not fit a {grid.n_goals}-goal map")
        obs = cls(grid, hidden=sizes[1], layers=len(sizes) - 2, eta=eta, online_loss=online_loss)
        if values.size != obs.spec.n_params:
            raise ValueError("checkpoint length does not match its header")
        obs.phi = values
        obs.pretrained = True
        return obs


def random_optimal_path(grid: GridMap, start, goal_index: int, rng: np.random.Generator) -> list:
    """A shortest path with ties between optimal moves broken uniformly at random."""
    dist = grid.goal_distances[goal_index]
    cell = tuple(start)
    path = [cell]
    goal = grid.goals[goal_index]
    while cell != goal:
        here = dist[cell[1], cell[0]]
        options = []
        for a in range(N_ACTIONS):
            nxt = grid.next_cell(cell, a)
            if dist[nxt[1], nxt[0]] == here - 1:
                options.append(nxt)
        cell = options[int(rng.integers(len(options)))]
        path.append(cell)
    return path


def optimal_corpus(grid: GridMap, n: int, rng: np.random.Generator) -> list:
    """``n`` (trajectory, goal) pairs: random free start, random goal, optimal path."""
    free = [c for c in grid.free_cells if c not in grid.goals]
    corpus = []
    while len(corpus) < n:
        start = free[int(rng.integers(len(free)))]
        gi = int(rng.integers(grid.n_goals))
        if grid.goal_distances[gi][start[1], start[0]] < 2:
            continue
        traj = trajectory_from_cells(random_optimal_path(grid, start, gi, rng), goal=grid.goals[gi])
        corpus.append((traj, gi))
    return corpus


def accuracy(observer: LearnableObserver, examples: list) -> float:
    if not examples:
        return float("nan")
    probs = observer.predict_batch([t for t, _ in examples])
    hits = np.argmax(probs, axis=1) == np.array([g for _, g in examples])
    return float(hits.mean())


def pretrain(observer: LearnableObserver, grid: GridMap, n_trajectories: int = 600, epochs: int = 30,
             seed: int | np.random.Generator = 0, rule: PrefixRule = PrefixRule(),
             batch_size: int = 16, lr: float = 0.01, optimizer: str = "adam",
             holdout: float = 0.2, target: str = "prefix", full_fraction: float = 0.5) -> dict:
    """Offline NLL training on optimal trajectories.

    ``target="prefix"`` redraws a prefix ratio per trajectory each epoch and
    supervises its last step; a ``full_fraction`` share of the batch keeps the
    whole trajectory instead, so complete paths are recognized too.
    ``target="all_steps"`` supervises the posterior after every step of the
    full trajectory.
    Returns held-out top-1 accuracy on rule-drawn prefixes, overall and by
    fixed prefix ratio.
    """
    if target not in ("all_steps", "prefix"):
        raise ValueError(f"unknown pretraining target {target!r}")
    if n_trajectories < grid.n_goals * 10:
        raise InsufficientData(f"need at least {grid.n_goals * 10} trajectories, got {n_trajectories}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    corpus = optimal_corpus(grid, n_trajectories, rng)
    n_test = max(grid.n_goals, int(round(holdout * n_trajectories)))
    train, test = corpus[n_test:], corpus[:n_test]
    test_prefixes = [(sample_prefix(t, rule, rng), g) for t, g in test]

    opt = ad.Adam(observer.phi.size, lr=lr) if optimizer == "adam" else None
    losses = []
    for epoch in range(epochs):
        if opt is not None:
            opt.lr = lr * (1.0 - epoch / epochs)
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for lo in range(0, len(order), batch_size):
            batch = [train[i] for i in order[lo:lo + batch_size]]
            goals = np.array([g for _, g in batch])
            tape = ad.Tape()
            phi = tape.variable(observer.phi)
            if target == "prefix":
                keep = rng.random(len(batch)) < full_fraction
                x, lengths = _pad([observer.encode(t if k else sample_prefix(t, rule, rng))
                                   for (t, _), k in zip(batch, keep)])
                logp = ad.log_softmax(ad.rnn_forward(phi, observer.spec, x, lengths=lengths), axis=-1)
                loss = -ad.mean(logp[np.arange(len(batch)), goals])
            else:
                x, lengths = _pad([observer.encode(t) for t, _ in batch])
                logp = ad.log_softmax(ad.rnn_forward(phi, observer.spec, x, lengths=lengths,
                                                     all_steps=True), axis=-1)
                T = x.shape[1]
                picked = logp[:, np.arange(len(batch)), goals]  # (T, B)
                mask = (np.arange(T)[:, None] < lengths[None, :]) / lengths.sum()
                loss = -ad.vsum(picked * mask)
            g = ad.grad(loss, phi).value
            step = opt.step(g) if opt is not None else lr * g
            observer.phi = observer.phi - step
            epoch_loss += loss.item() * len(batch)
        losses.append(epoch_loss / max(len(train), 1))
    observer.pretrained = True

    buckets = {}
    for ratio in (0.2, 0.4, 0.5, 0.6, 0.8, 1.0):
        fixed = [(t.prefix(prefix_length(len(t), ratio)), g) for t, g in test]
        buckets[f"{ratio:.1f}"] = accuracy(observer, fixed)
    return {
        "accuracy": accuracy(observer, test_prefixes),
        "accuracy_by_ratio": buckets,
        "train_loss": losses,
        "n_train": len(train),
        "n_test": len(test),
        "epochs": epochs,
        "optimizer": optimizer,
        "lr": lr,
        "target": target,
        "full_fraction": full_fraction,
    }
