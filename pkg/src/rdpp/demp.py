"""Two-level meta planning: M tape-recorded inner adaptation episodes, a meta
loss at the adapted parameters, its gradient with respect to the block's
initial parameters, and the update of that initialization.

Problems plug in through a small duck-typed interface:

``episode(theta, k)``
    run inner episode ``k`` with numeric parameters and return a record.
``loss(theta_var, record)``
    the inner objective as a tape ``Var`` in ``theta_var``.
``after_episode(record)``
    side effects between episodes (observer learning, critic steps).
``evaluation(theta)``
    a fresh record for the meta objective; must not change problem state.
``meta_objective(theta_var, record)``
    the outer objective; defaults to ``loss`` when absent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import HigherOrderUnavailable, NonFinite

MAX_INNER = 8


@dataclass(frozen=True)
class MetaConfig:
    M: int = 2
    alpha_lr: float = 0.001
    beta_lr: float = 0.0001
    first_order: bool = False
    lam: float = 0.5
    carry: bool = True
    clip_norm: float | None = None

    def __post_init__(self):
        if not 1 <= int(self.M) <= MAX_INNER:
            raise ValueError(f"M must lie in 1..{MAX_INNER}, got {self.M}")
        if self.alpha_lr < 0 or self.beta_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not (np.isfinite(self.alpha_lr) and np.isfinite(self.beta_lr)):
            raise ValueError("learning rates must be finite")


@dataclass
class InnerTrace:
    tape: ad.Tape
    theta_seq: list
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    meta_loss: ad.Var | None = None
    meta_record: object = None

    @property
    def theta0(self) -> ad.Var:
        return self.theta_seq[0]

    @property
    def adapted(self) -> ad.Var:
        return self.theta_seq[-1]


def inner_block(theta0, problem, config: MetaConfig, n_episodes: int | None = None) -> InnerTrace:
    """Run ``n_episodes`` (default ``config.M``) adaptation episodes on one tape.

    Each update ``theta_{k+1} = theta_k - alpha * grad L_k(theta_k)`` (with
    the gradient norm clipped when ``config.clip_norm`` is set) is recorded, so in exact mode ``theta_M`` stays differentiable in
    ``theta_0``.  Trajectories are fixed once drawn.  If an update turns
    non-finite the partial trace is attached to the raised error.
    """
    n = config.M if n_episodes is None else int(n_episodes)
    tape = ad.Tape(higher_order=not config.first_order)
    theta = tape.variable(np.asarray(theta0, dtype=np.float64))
    trace = InnerTrace(tape, [theta])
    for k in range(n):
        record = problem.episode(theta.value.copy(), k)
        trace.records.append(record)
        try:
            loss = problem.loss(theta, record)
            trace.losses.append(loss)
            g = ad.grad(loss, theta, create_graph=not config.first_order)
            if config.first_order:
                g = g.detach()
            g = ad.clip_by_norm(g, config.clip_norm)
            theta = theta - config.alpha_lr * g
            if not np.all(np.isfinite(theta.value)):
                raise NonFinite("inner update produced non-finite parameters")
        except NonFinite as err:
            err.trace = trace
            raise
        trace.theta_seq.append(theta)
        problem.after_episode(record)
    return trace


def meta_loss(trace: InnerTrace, problem) -> ad.Var:
    """Outer objective at the adapted parameters, evaluated on a fresh episode."""
    record = problem.evaluation(trace.adapted.value.copy())
    objective = getattr(problem, "meta_objective", problem.loss)
    loss = objective(trace.adapted, record)
    trace.meta_loss, trace.meta_record = loss, record
    trace.losses.append(loss)
    return loss


def meta_gradient(loss: ad.Var, theta0: ad.Var, config: MetaConfig) -> np.ndarray:
    """Gradient of the outer loss with respect to the block's initial parameters.

    In exact mode this differentiates through the recorded inner updates.
    In first-order mode the inner gradients were detached, so the Jacobian
    of the adapted parameters is the identity.
    """
    tape = theta0.tape
    if not config.first_order and tape is not None and not tape.higher_order:
        raise HigherOrderUnavailable("exact meta-gradient needs a higher-order inner trace")
    return ad.grad(loss, theta0).value


def meta_update(theta0, meta_grad, beta_lr: float) -> np.ndarray:
    theta0 = np.asarray(theta0.value if isinstance(theta0, ad.Var) else theta0, dtype=np.float64)
    meta_grad = np.asarray(meta_grad, dtype=np.float64)
    if meta_grad.shape != theta0.shape:
        raise ValueError(f"gradient shape {meta_grad.shape} does not match {theta0.shape}")
    if not np.all(np.isfinite(meta_grad)):
        raise NonFinite("refusing meta update with a non-finite gradient")
    return theta0 - beta_lr * meta_grad


def meta_step(theta0, problem, config: MetaConfig, n_episodes: int | None = None):
    """One block: inner episodes, meta loss, meta-gradient and update.

    Returns ``(new_theta0, trace, meta_grad)``.
    """
    trace = inner_block(theta0, problem, config, n_episodes)
    loss = meta_loss(trace, problem)
    g = meta_gradient(loss, trace.theta0, config)
    return meta_update(trace.theta0, g, config.beta_lr), trace, g


def run_meta(theta0, problem, config: MetaConfig, n_episodes: int, on_block=None) -> np.ndarray:
    """Alternate blocks until ``n_episodes`` inner episodes have run.

    With ``config.carry`` the next block starts from the adapted parameters
    shifted by the meta step, ``theta_M - beta * g``, so episode-level
    learning accumulates and the meta-gradient acts on top of it.  Without
    it every block restarts from ``theta_0 - beta * g``.  A final block may
    be shorter than ``M``.  ``on_block(theta0, trace)`` runs after every
    meta update.
    """
    theta0 = np.asarray(theta0, dtype=np.float64).copy()
    done = 0
    while done < n_episodes:
        n = min(config.M, n_episodes - done)
        trace = inner_block(theta0, problem, config, n)
        g = ad.clip_by_norm(meta_gradient(meta_loss(trace, problem), trace.theta0, config),
                            config.clip_norm)
        base = trace.adapted if config.carry else trace.theta0
        theta0 = meta_update(base, g, config.beta_lr)
        done += n
        if on_block is not None:
            on_block(theta0, trace)
    return theta0


@dataclass
class QuadraticBilevel:
    """Synthetic problem with inner ``1/2 |theta - c|^2`` and outer ``1/2 |theta - d|^2``."""

    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=np.float64))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=np.float64))

    def episode(self, theta, k):
        return k

    def loss(self, theta: ad.Var, record) -> ad.Var:
        return 0.5 * ad.vsum((theta - self.c) ** 2)

    def after_episode(self, record) -> None:
        pass

    def evaluation(self, theta):
        return None

    def meta_objective(self, theta: ad.Var, record) -> ad.Var:
        return 0.5 * ad.vsum((theta - self.d) ** 2)

    # closed forms
    def adapted(self, theta0, alpha: float, M: int) -> np.ndarray:
        keep = (1.0 - alpha) ** M
        return keep * np.asarray(theta0, dtype=np.float64) + (1.0 - keep) * self.c

    def composed(self, theta0, alpha: float, M: int) -> float:
        return float(0.5 * np.sum((self.adapted(theta0, alpha, M) - self.d) ** 2))

    def exact_gradient(self, theta0, alpha: float, M: int) -> np.ndarray:
        return (1.0 - alpha) ** M * (self.adapted(theta0, alpha, M) - self.d)

    def optimum(self, alpha: float, M: int = 1) -> np.ndarray:
        keep = (1.0 - alpha) ** M
        if keep == 0:
            raise ValueError("alpha = 1 makes the initialization irrelevant")
        return (self.d - (1.0 - keep) * self.c) / keep
