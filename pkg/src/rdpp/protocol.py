"""The repeated interaction loop between an agent and a learning observer,
and the pirate pursuit evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import agents as ag
from . import autodiff as ad
from . import demp
from .errors import MissingCheckpoint, RdppError, Unreachable
from .gridworld import GridMap, Trajectory, optimal_q_tables, shortest_path
from .observers import BoltzmannObserver, GoalPosterior, LearnableObserver, PrefixRule, sample_prefix
from .rng import Stream, stream

AGENTS = ("honest", "am", "naive", "demp")
OBSERVERS = ("boltzmann", "learnable")
STATIC_AGENTS = ("honest", "am")


@dataclass
class AgentSettings:
    gamma: float = 0.99
    alpha_lr: float = 0.001
    beta_lr: float = 0.0001
    M: int = 2
    first_order: bool = False
    carry: bool = True
    clip_norm: float | None = 100.0
    lam: float = 0.5
    entropy_temp: float = 0.05
    critic_lr: float = 0.01
    reward_scale: float = 1.0
    clone_epochs: int = 300
    clone_lr: float = 0.01
    am_slack: float = 0.25

    def meta(self) -> demp.MetaConfig:
        return demp.MetaConfig(self.M, self.alpha_lr, self.beta_lr, self.first_order, self.lam,
                               self.carry, self.clip_norm)


@dataclass
class RdppConfig:
    grid: GridMap
    K: int = 100
    agent: str = "demp"
    observer: str = "learnable"
    seed: int = 0
    prefix_rule: PrefixRule = field(default_factory=PrefixRule)
    settings: AgentSettings = field(default_factory=AgentSettings)
    observer_eta: float = 0.01
    observer_clip: float | None = 0.5

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.agent not in AGENTS:
            raise ValueError(f"agent must be one of {AGENTS}, got {self.agent!r}")
        if self.observer not in OBSERVERS:
            raise ValueError(f"observer must be one of {OBSERVERS}, got {self.observer!r}")
        self.settings.meta()  # validates M and the rates

    @property
    def true_goal_index(self) -> int:
        return self.grid.true_goal_index


def initial_policy(grid: GridMap, settings: AgentSettings, seed: int) -> np.ndarray:
    """Policy cloned from the ambiguity agent's rollout on ``grid``."""
    theta = ag.POLICY.init(stream(seed, Stream.POLICY_INIT))
    demo = ag.am_rollout(grid, optimal_q_tables(grid), slack=settings.am_slack)
    return ag.clone_policy(theta, [demo], grid, epochs=settings.clone_epochs, lr=settings.clone_lr)


class RdppEnvironment:
    """One seed's world: map, observer, critic and random streams.

    Doubles as the inner problem of the meta optimizer.  The agent side only
    ever receives the per-episode posterior; the observer only receives the
    trajectory and the true goal.
    """

    def __init__(self, config: RdppConfig, observer, psi: np.ndarray | None = None,
                 on_record: Callable | None = None):
        self.config = config
        self.grid = config.grid
        self.observer = observer
        s = config.settings
        self.params = ag.AgentParams(
            theta=np.zeros(ag.POLICY.n_params),
            psi=ag.CRITIC.init(stream(config.seed, Stream.POLICY_INIT)) if psi is None else psi,
            gamma=s.gamma, alpha_lr=s.alpha_lr, entropy_temp=s.entropy_temp,
            critic_lr=s.critic_lr, reward_scale=s.reward_scale, lam=s.lam,
        )
        self.rollout_rng = stream(config.seed, Stream.ROLLOUT)
        self.prefix_rng = stream(config.seed, Stream.PREFIX)
        self.eval_rng = stream(config.seed, Stream.EVALUATION)
        self.records: list = []
        self.on_record = on_record

    @property
    def psi(self) -> np.ndarray:
        return self.params.psi

    def observe(self, traj: Trajectory, prefix_rng=None) -> ag.EpisodeRecord:
        """Posterior on a sampled prefix, plus per-step posteriors along the whole path."""
        rng = self.prefix_rng if prefix_rng is None else prefix_rng
        prefix = sample_prefix(traj, self.config.prefix_rule, rng)
        steps = self.observer.predict_steps(traj)
        posterior = GoalPosterior(steps[len(prefix) - 1] / steps[len(prefix) - 1].sum())
        return ag.make_record(self.grid, traj, prefix, posterior, len(self.records) + 1, steps)

    # -- meta problem interface
    def episode(self, theta: np.ndarray, k: int = 0) -> ag.EpisodeRecord:
        traj = ag.policy_rollout(theta, self.grid, self.rollout_rng, explore=True,
                                 episode_index=len(self.records) + 1)
        record = self.observe(traj)
        record.extra["theta"] = theta
        return record

    def loss(self, theta: ad.Var, record: ag.EpisodeRecord) -> ad.Var:
        loss = ag.episode_loss(record, theta, self.psi, record.posterior, self.params.lam,
                               self.grid, self.params)
        if record.episode_loss != record.episode_loss:  # first evaluation fills it in
            record.episode_loss = loss.item()
        return loss

    def after_episode(self, record: ag.EpisodeRecord, learn_critic: bool = True) -> None:
        self.observer.online_update(record.trajectory, self.grid.true_goal_index)
        if learn_critic:
            self.params.psi = ag.critic_update(self.psi, self.grid, record, self.params)
        self.records.append(record)
        if self.on_record is not None:
            self.on_record(record, self)
        record.extra.pop("theta", None)

    def evaluation(self, theta: np.ndarray) -> ag.EpisodeRecord:
        traj = ag.policy_rollout(theta, self.grid, self.eval_rng, explore=True,
                                 episode_index=len(self.records) + 1)
        return self.observe(traj, prefix_rng=self.eval_rng)


def make_observer(config: RdppConfig, observer=None):
    if observer is not None:
        if getattr(observer, "kind", None) != config.observer:
            raise ValueError(f"config expects a {config.observer} observer")
        if config.observer == "boltzmann":
            return observer
        observer = observer.snapshot()
        observer.eta = config.observer_eta
        observer.clip_norm = config.observer_clip
        return observer
    if config.observer == "boltzmann":
        return BoltzmannObserver(config.grid)
    raise MissingCheckpoint("a learnable observer must be pretrained and passed in")


def run_rdpp(config: RdppConfig, observer=None, theta0: np.ndarray | None = None,
             on_record: Callable | None = None) -> list:
    """Play ``config.K`` episodes and return their records (indices 1..K).

    ``observer`` is copied, never mutated.  ``on_record(record, env)`` runs
    after each episode's updates; ``record.extra["theta"]`` then holds the
    policy that acted in it (learning agents only).
    """
    grid = config.grid
    env = RdppEnvironment(config, make_observer(config, observer), on_record=on_record)
    s = config.settings
    kind = config.agent
    try:
        if kind in STATIC_AGENTS:
            if kind == "honest":
                traj = ag.honest_rollout(grid)
            else:
                traj = ag.am_rollout(grid, optimal_q_tables(grid), slack=s.am_slack)
            for k in range(1, config.K + 1):
                t = Trajectory(list(traj.steps), traj.terminal_cell, k, traj.reached_goal)
                env.after_episode(env.observe(t), learn_critic=False)
            return env.records
        theta = initial_policy(grid, s, config.seed) if theta0 is None else np.array(theta0, dtype=np.float64)
        if kind == "naive":
            for _ in range(config.K):
                record = env.episode(theta)
                tape = ad.Tape()
                th = tape.variable(theta)
                g = ad.clip_by_norm(ad.grad(env.loss(th, record), th).value, s.clip_norm)
                theta = ad.sgd_step(ad.Var(theta), g, s.alpha_lr).value
                env.after_episode(record)
            return env.records
        demp.run_meta(theta, env, s.meta(), config.K)
        return env.records
    except RdppError as err:
        err.episode = len(env.records) + 1
        raise


# ---------------------------------------------------------------- pirate

@dataclass
class PirateConfig:
    n_trials: int = 100
    snapshot_episodes: tuple = (25, 50, 100)
    seed: int = 0
    max_resamples: int = 1000

    def __post_init__(self):
        if self.n_trials < 0:
            raise ValueError("n_trials must be non-negative")
        self.snapshot_episodes = tuple(int(k) for k in self.snapshot_episodes)
        if any(k < 1 for k in self.snapshot_episodes):
            raise ValueError("snapshot episodes start at 1")

    def validate(self, K: int) -> None:
        if any(k > K for k in self.snapshot_episodes):
            raise ValueError(f"snapshot episodes {self.snapshot_episodes} exceed K={K}")


def agent_path(grid: GridMap, agent: str, theta=None, settings: AgentSettings | None = None) -> Trajectory:
    """The deterministic path an agent snapshot walks during a pirate trial."""
    settings = settings or AgentSettings()
    if agent == "honest":
        return ag.honest_rollout(grid)
    if agent == "am":
        return ag.am_rollout(grid, optimal_q_tables(grid), slack=settings.am_slack)
    if theta is None:
        raise MissingCheckpoint(f"{agent} snapshot has no policy parameters")
    return ag.policy_rollout(theta, grid, explore=False)


def spawn_pirate(grid: GridMap, rng: np.random.Generator, max_resamples: int = 1000):
    """Uniform free cell that can reach some goal; returns ``(cell, resamples)``."""
    free = grid.free_cells
    for n in range(max_resamples + 1):
        cell = free[int(rng.integers(len(free)))]
        if np.any(grid.goal_distances[:, cell[1], cell[0]] >= 0):
            return cell, n
    raise Unreachable("could not spawn a pirate that reaches any goal")


def pirate_trial(path: Trajectory, observer, grid: GridMap, rng: np.random.Generator,
                 spawn=None, max_resamples: int = 1000):
    """Simulate one pursuit; returns ``(captured, steps, resamples)``.

    Each tick the agent takes its next step, the observer's posterior is
    recomputed on the path so far, and the pirate moves one step along a
    shortest path toward the argmax goal.  Capture means sharing a cell
    after a tick or swapping cells during it; reaching the goal first, or
    running out of horizon, is an escape.
    """
    resamples = 0
    if spawn is None:
        spawn, resamples = spawn_pirate(grid, rng, max_resamples)
    pirate = tuple(spawn)
    cells = path.cells
    if pirate == cells[0]:
        return True, 0, resamples
    posteriors = observer.predict_steps(path) if len(path) else np.zeros((0, grid.n_goals))
    horizon = min(len(path), grid.horizon)
    for t in range(1, horizon + 1):
        agent_prev, agent = cells[t - 1], cells[t]
        target = grid.goals[int(np.argmax(posteriors[t - 1]))]
        before = pirate
        if pirate != target and grid.goal_distances[grid.goals.index(target)][pirate[1], pirate[0]] >= 0:
            pirate = shortest_path(grid, pirate, target)[1]
        if pirate == agent or (pirate == agent_prev and before == agent):
            return True, t, resamples
    return False, horizon, resamples


def pirate_rates(path: Trajectory, observer, grid: GridMap, config: PirateConfig) -> dict:
    captures = resamples = 0
    for i in range(config.n_trials):
        rng = stream(config.seed, Stream.PIRATE + i)
        captured, _, r = pirate_trial(path, observer, grid, rng, max_resamples=config.max_resamples)
        captures += int(captured)
        resamples += r
    rate = captures / config.n_trials if config.n_trials else float("nan")
    return {"trials": config.n_trials, "captures": captures, "rate": rate, "resamples": resamples}


def load_snapshot(run_dir, episode: int, agent: str, grid: GridMap, settings: AgentSettings | None = None):
    """Read ``ep{k}.obs`` (and ``ep{k}.pol`` for learning agents) from ``run_dir``."""
    run_dir = Path(run_dir)
    obs_path = run_dir / f"ep{episode}.obs"
    if not obs_path.exists():
        raise MissingCheckpoint(f"missing observer checkpoint {obs_path}")
    sizes, values = ad.load_flat(obs_path)
    if len(sizes) == 1:  # a static observer stores only its goal priors
        observer = BoltzmannObserver(grid, priors=values)
    else:
        observer = LearnableObserver.load(obs_path, grid)
    theta = None
    if agent not in STATIC_AGENTS:
        pol_path = run_dir / f"ep{episode}.pol"
        if not pol_path.exists():
            raise MissingCheckpoint(f"missing policy checkpoint {pol_path}")
        _, theta = ad.load_flat(pol_path)
    return agent_path(grid, agent, theta, settings), observer


def run_pirate_eval(config: PirateConfig, runs: dict, grid: GridMap,
                    settings: AgentSettings | None = None) -> list:
    """Capture-rate table over ``runs`` (agent kind -> run directory).

    Rows are ``{"agent", "snapshot_episode", "trials", "captures", "rate"}``
    in agent then snapshot order.  Trials share spawn streams across cells.
    """
    rows = []
    if config.n_trials == 0:
        return rows
    for agent, run_dir in runs.items():
        for k in config.snapshot_episodes:
            path, observer = load_snapshot(run_dir, k, agent, grid, settings)
            cell = pirate_rates(path, observer, grid, config)
            rows.append({"agent": agent, "snapshot_episode": k, **cell})
    return rows
