"""Agents: honest shortest path, the ambiguity (AM) rollout, behaviour
cloning, and the per-episode soft actor-critic learner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import HorizonExceeded, InsufficientData, NonFinite, PosteriorMismatch
from .gridworld import (
    N_ACTIONS,
    GridMap,
    Trajectory,
    action_regret,
    shortest_path,
    trajectory_from_cells,
)
from .observers import GoalPosterior, boltzmann_posterior, entropy

HIDDEN = 64
STATE_FEATURES = 5
POLICY = ad.LayerSpec((STATE_FEATURES, HIDDEN, HIDDEN, N_ACTIONS))
CRITIC = ad.LayerSpec((STATE_FEATURES, HIDDEN, HIDDEN, 1))


def encode_state(grid: GridMap, cell, t: int) -> np.ndarray:
    gx, gy = grid.true_goal
    return np.array([cell[0] / grid.width, cell[1] / grid.height,
                     gx / grid.width, gy / grid.height, t / grid.horizon])


def encode_trajectory(grid: GridMap, traj: Trajectory) -> np.ndarray:
    if len(traj) == 0:
        return np.zeros((0, STATE_FEATURES))
    return np.stack([encode_state(grid, c, t) for t, (c, _) in enumerate(traj.steps)])


@dataclass
class AgentParams:
    theta: np.ndarray
    psi: np.ndarray
    gamma: float = 0.99
    alpha_lr: float = 0.001
    entropy_temp: float = 0.05
    critic_lr: float = 0.01
    reward_scale: float = 0.01
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha_lr < 0:
            raise ValueError("alpha_lr must be non-negative")

    @classmethod
    def initial(cls, rng: np.random.Generator, **kw) -> "AgentParams":
        return cls(POLICY.init(rng), CRITIC.init(rng), **kw)


@dataclass
class EpisodeRecord:
    trajectory: Trajectory
    prefix: Trajectory
    posterior: GoalPosterior
    env_return: float
    deceptive_reward: float
    episode_loss: float
    episode_index: int
    reached_goal: bool
    p_true: float
    kl: float
    prediction: int
    step_posteriors: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------- baselines

def honest_rollout(grid: GridMap, episode_index: int = 0) -> Trajectory:
    return trajectory_from_cells(shortest_path(grid, grid.start, grid.true_goal),
                                 episode_index, goal=grid.true_goal)


def am_rollout(grid: GridMap, q_tables: np.ndarray, rng: np.random.Generator | None = None,
               slack: float = 0.25, episode_index: int = 0) -> Trajectory:
    """Greedy ambiguity rollout against the cost-based recognizer.

    Each step picks, among moves that are optimal for at least one candidate
    goal, lead to an unvisited cell and keep ``t + 1 + dist(next, G*) <=
    H - slack * H``, the one whose resulting Boltzmann posterior has the
    highest entropy.  Ties prefer progress toward the true goal, then the
    fixed action order.  When no such move exists the agent takes a
    shortest-path step.
    """
    H = grid.horizon
    budget = H - int(math.floor(slack * H))
    dist_true = grid.goal_distances[grid.true_goal_index]
    regret = action_regret(q_tables)
    cell = grid.start
    deltas = np.zeros(grid.n_goals)
    visited = {cell}
    cells = [cell]
    t = 0
    while cell != grid.true_goal:
        if t >= H:
            raise HorizonExceeded(f"AM rollout did not reach the goal within {H} steps")
        here = dist_true[cell[1], cell[0]]
        best = None
        for a in range(N_ACTIONS):
            nxt = grid.next_cell(cell, a)
            if nxt == cell or nxt in visited:
                continue
            if t + 1 + dist_true[nxt[1], nxt[0]] > budget:
                continue
            r = regret[:, cell[1], cell[0], a]
            if not np.any(r == 0):
                continue
            h = entropy(boltzmann_posterior(deltas + r).probs)
            progress = dist_true[nxt[1], nxt[0]] < here
            key = (round(h, 12), progress, -a)
            if best is None or key > best[0]:
                best = (key, a, nxt, r)
        if best is None:
            for a in range(N_ACTIONS):
                nxt = grid.next_cell(cell, a)
                if dist_true[nxt[1], nxt[0]] == here - 1:
                    best = (None, a, nxt, regret[:, cell[1], cell[0], a])
                    break
        _, a, cell, r = best
        deltas = deltas + r
        visited.add(cell)
        cells.append(cell)
        t += 1
    return trajectory_from_cells(cells, episode_index, goal=grid.true_goal)


# ---------------------------------------------------------------- policy

def action_probs(theta, grid: GridMap, cell, t: int) -> np.ndarray:
    logits = ad.mlp_forward(theta, POLICY, encode_state(grid, cell, t)).value
    return ad.np_softmax(logits)


def policy_rollout(theta: np.ndarray, grid: GridMap, rng: np.random.Generator | None = None,
                   explore: bool = True, episode_index: int = 0) -> Trajectory:
    """Run the policy until the true goal or the horizon (truncated runs are returned)."""
    if explore and rng is None:
        raise ValueError("exploring rollouts need an rng")
    theta = ad.Var(np.asarray(theta, dtype=np.float64))
    cell = grid.start
    steps = []
    for t in range(grid.horizon):
        p = action_probs(theta, grid, cell, t)
        if explore:
            a = int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), N_ACTIONS - 1))
        else:
            a = int(np.argmax(p))
        steps.append((cell, a))
        cell = grid.next_cell(cell, a)
        if cell == grid.true_goal:
            return Trajectory(steps, cell, episode_index, True)
    return Trajectory(steps, cell, episode_index, False)


def clone_policy(theta: np.ndarray, demos: list, grid: GridMap, epochs: int = 300,
                 lr: float = 0.01) -> np.ndarray:
    """Behaviour cloning: cross-entropy of demo actions given encoded states (Adam, full batch)."""
    if not demos or all(len(d) == 0 for d in demos):
        raise InsufficientData("behaviour cloning needs at least one non-empty demo")
    X = np.concatenate([encode_trajectory(grid, d) for d in demos if len(d)])
    A = np.concatenate([np.array(d.actions) for d in demos if len(d)])
    theta = np.array(theta, dtype=np.float64)
    opt = ad.Adam(theta.size, lr=lr)
    rows = np.arange(len(A))
    for _ in range(epochs):
        tape = ad.Tape()
        th = tape.variable(theta)
        logp = ad.log_softmax(ad.mlp_forward(th, POLICY, X), axis=-1)
        loss = -ad.mean(logp[rows, A])
        theta = theta - opt.step(ad.grad(loss, th).value)
    return theta


def demo_nll(theta: np.ndarray, demos: list, grid: GridMap) -> float:
    X = np.concatenate([encode_trajectory(grid, d) for d in demos])
    A = np.concatenate([np.array(d.actions) for d in demos])
    logp = ad.log_softmax(ad.mlp_forward(theta, POLICY, X), axis=-1).value
    return float(-logp[np.arange(len(A)), A].mean())


# ---------------------------------------------------------------- losses

def deceptive_reward(p_true: float, goal_reward: float, reached: bool = True) -> float:
    """``(1 - P(G*)) * r(G*)``, paid only when the goal is reached."""
    if not 0.0 <= p_true <= 1.0 + 1e-12:
        raise ValueError(f"probability out of range: {p_true}")
    return (1.0 - min(p_true, 1.0)) * goal_reward if reached else 0.0


def kl_to_uniform(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    n = p.size
    nz = p[p > 0]
    return float(max((nz * np.log(nz * n)).sum(), 0.0))


def shaped_rewards(grid: GridMap, traj: Trajectory, posterior: GoalPosterior, lam: float) -> np.ndarray:
    """Per-step environment rewards with the deceptive bonus and KL shaping on the last step."""
    r = grid.rewards
    T = len(traj)
    rewards = np.full(T, r.step_cost)
    if T == 0:
        return rewards
    p_true = posterior[grid.true_goal_index]
    if traj.reached_goal:
        rewards[-1] += r.goal_reward
    rewards[-1] += deceptive_reward(p_true, r.goal_reward, traj.reached_goal)
    rewards[-1] -= lam * kl_to_uniform(posterior.probs) * r.goal_reward
    return rewards


def discounted_returns(rewards: np.ndarray, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    out = np.zeros_like(rewards)
    acc = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def critic_values(psi: np.ndarray, X: np.ndarray) -> np.ndarray:
    if len(X) == 0:
        return np.zeros(0)
    return ad.mlp_forward(psi, CRITIC, X).value[:, 0]


def _check_posterior(grid: GridMap, posterior: GoalPosterior) -> None:
    if len(posterior) != grid.n_goals:
        raise PosteriorMismatch(f"posterior has {len(posterior)} entries for {grid.n_goals} goals")


def advantages(grid: GridMap, traj: Trajectory, posterior: GoalPosterior, psi: np.ndarray,
               params: AgentParams) -> np.ndarray:
    X = encode_trajectory(grid, traj)
    rewards = shaped_rewards(grid, traj, posterior, params.lam) * params.reward_scale
    boot = 0.0
    if not traj.reached_goal and len(traj):
        boot = critic_values(psi, encode_state(grid, traj.terminal_cell, len(traj))[None])[0]
    return discounted_returns(rewards, params.gamma, boot) - critic_values(psi, X)


def episode_loss(record: EpisodeRecord, theta: ad.Var, psi: np.ndarray, posterior: GoalPosterior,
                 lam: float, grid: GridMap, params: AgentParams) -> ad.Var:
    """Entropy-regularised policy-gradient surrogate plus ``lam * KL(posterior || uniform)``.

    The KL term and the deceptive bonus reach the policy through the
    terminal reward; the added KL value itself is constant in ``theta``.
    """
    _check_posterior(grid, posterior)
    traj = record.trajectory
    kl = kl_to_uniform(posterior.probs)
    if len(traj) == 0:
        return ad.add(ad.mul(theta, 0.0).sum(), lam * kl)
    shaped = AgentParams(**{**params.__dict__, "lam": lam})
    adv = advantages(grid, traj, posterior, psi, shaped)
    X = encode_trajectory(grid, traj)
    logp = ad.log_softmax(ad.mlp_forward(theta, POLICY, X), axis=-1)
    rows = np.arange(len(traj))
    chosen = logp[rows, np.array(traj.actions)]
    ent = -ad.vsum(ad.exp(logp) * logp)
    surrogate = -ad.vsum(chosen * adv) - params.entropy_temp * ent
    return surrogate + lam * kl


def critic_update(psi: np.ndarray, grid: GridMap, record: EpisodeRecord, params: AgentParams) -> np.ndarray:
    """One TD(0) regression step for the critic."""
    traj = record.trajectory
    if len(traj) == 0:
        return psi
    X = encode_trajectory(grid, traj)
    rewards = shaped_rewards(grid, traj, record.posterior, params.lam) * params.reward_scale
    nxt = np.vstack([X[1:], encode_state(grid, traj.terminal_cell, len(traj))[None]])
    v_next = critic_values(psi, nxt)
    if traj.reached_goal:
        v_next[-1] = 0.0
    targets = rewards + params.gamma * v_next
    tape = ad.Tape()
    p = tape.variable(psi)
    v = ad.mlp_forward(p, CRITIC, X)[:, 0]
    loss = 0.5 * ad.mean((v - targets) ** 2)
    g = ad.grad(loss, p).value
    new = psi - params.critic_lr * g
    if not np.all(np.isfinite(new)):
        raise NonFinite("critic update produced non-finite parameters")
    return new


def naive_update(theta: np.ndarray, psi: np.ndarray, record: EpisodeRecord, posterior: GoalPosterior,
                 alpha_lr: float, lam: float, grid: GridMap, params: AgentParams,
                 clip_norm: float | None = None):
    """One policy-gradient step on ``episode_loss`` and one critic TD step."""
    tape = ad.Tape()
    th = tape.variable(theta)
    loss = episode_loss(record, th, psi, posterior, lam, grid, params)
    g = ad.clip_by_norm(ad.grad(loss, th).value, clip_norm)
    new_theta = ad.sgd_step(ad.Var(np.asarray(theta, dtype=np.float64)), g, alpha_lr).value
    new_psi = critic_update(psi, grid, record, params)
    return new_theta, new_psi


def make_record(grid: GridMap, traj: Trajectory, prefix: Trajectory, posterior: GoalPosterior,
                episode_index: int, step_posteriors=None, loss: float = float("nan")) -> EpisodeRecord:
    _check_posterior(grid, posterior)
    r = grid.rewards
    p_true = posterior[grid.true_goal_index]
    env_return = len(traj) * r.step_cost + (r.goal_reward if traj.reached_goal else 0.0)
    return EpisodeRecord(
        trajectory=traj,
        prefix=prefix,
        posterior=posterior,
        env_return=env_return,
        deceptive_reward=deceptive_reward(p_true, r.goal_reward, traj.reached_goal),
        episode_loss=loss,
        episode_index=episode_index,
        reached_goal=traj.reached_goal,
        p_true=p_true,
        kl=kl_to_uniform(posterior.probs),
        prediction=posterior.argmax,
        step_posteriors=step_posteriors,
    )
