"""Experiment configuration files.

INI syntax (``configparser``): ``[section]`` headers, ``key = value`` lines,
``;`` or ``#`` comments.  Lists are comma separated.  Recognized sections
and keys, with defaults:

    [experiment]
    name = rdpp            ; run ids are "{name}-{agent}"
    map = grid15           ; bundled map name or path to a map file
    true_goal = 0
    agents = honest, am, naive, demp
    observer = learnable   ; learnable | boltzmann
    K = 100
    n_seeds = 10
    seed = 0               ; first seed; seeds are seed .. seed + n_seeds - 1
    prefix_low = 0.4
    prefix_high = 0.6
    snapshots = 25, 50, 100
    ldp_rule = argmax      ; argmax | dominance
    n_waypoints = 8
    out =                  ; output root (default: $RDPP_OUT, else ./runs)

    [agent]
    M = 2
    alpha_lr = 0.001
    beta_lr = 0.0001
    lambda = 0.5
    first_order = false
    carry = true
    gamma = 0.99
    entropy_temp = 0.05
    critic_lr = 0.01
    reward_scale = 1.0
    clip_norm = 100        ; "none" disables clipping
    clone_epochs = 300
    clone_lr = 0.01
    am_slack = 0.25

    [observer]
    eta = 0.01
    clip_norm = 0.5
    online_loss = prefix_mean   ; prefix_mean | final
    hidden = 64
    layers = 2
    checkpoint =           ; default {out}/{name}/observer.obs

    [pretrain]
    n_trajectories = 600
    epochs = 30
    seed = 0
    batch_size = 16
    lr = 0.01
    optimizer = adam       ; adam | sgd
    full_fraction = 0.5

    [pirate]
    n_trials = 100
    snapshots =            ; default: [experiment] snapshots
    seed = 0
"""

from __future__ import annotations

import configparser
import math
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError
from ..demp import MAX_INNER
from ..gridworld import BUNDLED, GridMap, load_map_file
from ..observers import PrefixRule
from ..protocol import AGENTS, OBSERVERS, AgentSettings, PirateConfig

LDP_RULES = ("argmax", "dominance")


@dataclass
class PretrainSpec:
    n_trajectories: int = 600
    epochs: int = 30
    seed: int = 0
    batch_size: int = 16
    lr: float = 0.01
    optimizer: str = "adam"
    full_fraction: float = 0.5


@dataclass
class ObserverSpec:
    eta: float = 0.01
    clip_norm: float | None = 0.5
    online_loss: str = "prefix_mean"
    hidden: int = 64
    layers: int = 2
    checkpoint: str = ""


@dataclass
class ExperimentConfig:
    name: str = "rdpp"
    map: str = "grid15"
    true_goal: int = 0
    agents: tuple = AGENTS
    observer: str = "learnable"
    K: int = 100
    n_seeds: int = 10
    seed: int = 0
    prefix_low: float = 0.4
    prefix_high: float = 0.6
    snapshots: tuple = (25, 50, 100)
    ldp_rule: str = "argmax"
    n_waypoints: int = 8
    out: str = ""
    agent: AgentSettings = field(default_factory=AgentSettings)
    observer_spec: ObserverSpec = field(default_factory=ObserverSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    pirate: PirateConfig = field(default_factory=PirateConfig)
    source: str = ""
    digest: str = ""

    @property
    def out_root(self) -> Path:
        return Path(self.out or os.environ.get("RDPP_OUT") or "runs")

    @property
    def seeds(self) -> list:
        return list(range(self.seed, self.seed + self.n_seeds))

    @property
    def prefix_rule(self) -> PrefixRule:
        return PrefixRule(self.prefix_low, self.prefix_high)

    @property
    def observer_checkpoint(self) -> Path:
        if self.observer_spec.checkpoint:
            return Path(self.observer_spec.checkpoint)
        return self.out_root / self.name / "observer.obs"

    def run_id(self, agent: str) -> str:
        return f"{self.name}-{agent}"

    def run_dir(self, agent: str) -> Path:
        return self.out_root / self.run_id(agent)

    def load_grid(self) -> GridMap:
        try:
            return load_map_file(self.map, self.true_goal)
        except (OSError, IndexError) as err:
            raise ConfigError(f"{self.source}: map {self.map!r}: {err}") from None


def _split(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("none", "") else float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_EXPERIMENT_KEYS = {
    "name": str, "map": str, "true_goal": int, "agents": lambda s: tuple(_split(s)),
    "observer": str, "k": int, "n_seeds": int, "seed": int, "prefix_low": float,
    "prefix_high": float, "snapshots": lambda s: tuple(int(x) for x in _split(s)),
    "ldp_rule": str, "n_waypoints": int, "out": str,
}
_AGENT_KEYS = {
    "m": ("M", int), "alpha_lr": ("alpha_lr", float), "beta_lr": ("beta_lr", float),
    "lambda": ("lam", float), "first_order": ("first_order", _bool), "carry": ("carry", _bool),
    "gamma": ("gamma", float), "entropy_temp": ("entropy_temp", float),
    "critic_lr": ("critic_lr", float), "reward_scale": ("reward_scale", float),
    "clip_norm": ("clip_norm", _optional_float), "clone_epochs": ("clone_epochs", int),
    "clone_lr": ("clone_lr", float), "am_slack": ("am_slack", float),
}
_OBSERVER_KEYS = {
    "eta": float, "clip_norm": _optional_float, "online_loss": str, "hidden": int,
    "layers": int, "checkpoint": str,
}
_PRETRAIN_KEYS = {f.name: f.type for f in fields(PretrainSpec)}
_PIRATE_KEYS = {"n_trials": int, "snapshots": lambda s: tuple(int(x) for x in _split(s)), "seed": int}


def _line_of(text: str, section: str, key: str) -> int:
    """Line of ``key`` in ``section``; an empty ``key`` finds the section header."""
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip().lower()
            if current == section and not key:
                return n
        elif current == section and "=" in s and s.split("=", 1)[0].strip().lower() == key:
            return n
    return 0


def parse_config(text: str, source: str = "<config>", base_dir=None) -> ExperimentConfig:
    """Parse and validate; every problem raises ``ConfigError`` with file and line.

    A relative map path is looked up in ``base_dir`` first when given.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    known = {"experiment", "agent", "observer", "pretrain", "pirate"}
    for sec in parser.sections():
        if sec.lower() not in known:
            raise ConfigError(f"{source}:{_line_of(text, sec.lower(), '') or '?'}: unknown section [{sec}]")

    def convert(section, key, value, fn):
        try:
            return fn(value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{source}:{_line_of(text, section, key)}: [{section}] {key}: {err}") from None

    def unknown(section, key):
        raise ConfigError(f"{source}:{_line_of(text, section, key)}: unknown key {key!r} in [{section}]")

    cfg = ExperimentConfig(source=source, digest=hashlib.sha256(text.encode("utf-8")).hexdigest())
    pirate_snapshots = None
    pirate_kw = {}
    agent_kw = {}
    for sec in parser.sections():
        low = sec.lower()
        for key, value in parser.items(sec):
            if low == "experiment":
                if key not in _EXPERIMENT_KEYS:
                    unknown(low, key)
                setattr(cfg, "K" if key == "k" else key, convert(low, key, value, _EXPERIMENT_KEYS[key]))
            elif low == "agent":
                if key not in _AGENT_KEYS:
                    unknown(low, key)
                attr, fn = _AGENT_KEYS[key]
                agent_kw[attr] = convert(low, key, value, fn)
            elif low == "observer":
                if key not in _OBSERVER_KEYS:
                    unknown(low, key)
                setattr(cfg.observer_spec, key, convert(low, key, value, _OBSERVER_KEYS[key]))
            elif low == "pretrain":
                if key not in _PRETRAIN_KEYS:
                    unknown(low, key)
                fn = {"int": int, "float": float, "str": str}[_PRETRAIN_KEYS[key]]
                setattr(cfg.pretrain, key, convert(low, key, value, fn))
            else:
                if key not in _PIRATE_KEYS:
                    unknown(low, key)
                v = convert(low, key, value, _PIRATE_KEYS[key])
                if key == "snapshots":
                    pirate_snapshots = v
                else:
                    pirate_kw[key] = v
    cfg.agent = AgentSettings(**agent_kw)
    try:
        cfg.pirate = PirateConfig(snapshot_episodes=pirate_snapshots or cfg.snapshots, **pirate_kw)
    except ValueError as err:
        key = "n_trials" if pirate_kw.get("n_trials", 0) < 0 else "snapshots"
        raise ConfigError(f"{source}:{_line_of(text, 'pirate', key) or '?'}: [pirate] {key}: {err}") from None
    if base_dir is not None and cfg.map not in BUNDLED and not Path(cfg.map).is_absolute():
        candidate = Path(base_dir) / cfg.map
        if candidate.is_file():
            cfg.map = str(candidate)
    validate(cfg, text)
    return cfg


def validate(cfg: ExperimentConfig, text: str = "") -> None:
    src = cfg.source

    def fail(section, key, msg):
        line = _line_of(text, section, key) if text else 0
        raise ConfigError(f"{src}:{line or '?'}: [{section}] {key}: {msg}")

    if not cfg.agents:
        fail("experiment", "agents", "no agents listed")
    for a in cfg.agents:
        if a not in AGENTS:
            fail("experiment", "agents", f"unknown agent {a!r}; choose from {AGENTS}")
    if cfg.observer not in OBSERVERS:
        fail("experiment", "observer", f"unknown observer {cfg.observer!r}")
    if cfg.K < 1:
        fail("experiment", "k", "K must be at least 1")
    if cfg.n_seeds < 1:
        fail("experiment", "n_seeds", "need at least one seed")
    if cfg.seed < 0:
        fail("experiment", "seed", "seed must be non-negative")
    if not 0 < cfg.prefix_low <= cfg.prefix_high <= 1:
        fail("experiment", "prefix_low", "need 0 < prefix_low <= prefix_high <= 1")
    if any(k < 1 or k > cfg.K for k in cfg.snapshots):
        fail("experiment", "snapshots", f"snapshot episodes must lie in 1..{cfg.K}")
    if cfg.ldp_rule not in LDP_RULES:
        fail("experiment", "ldp_rule", f"choose from {LDP_RULES}")
    if cfg.n_waypoints < 2:
        fail("experiment", "n_waypoints", "need at least 2 waypoints")
    if cfg.map not in BUNDLED and not Path(cfg.map).is_file():
        fail("experiment", "map", f"no bundled map or file named {cfg.map!r}")
    a = cfg.agent
    if not 1 <= a.M <= MAX_INNER:
        fail("agent", "m", f"M must lie in 1..{MAX_INNER}")
    for key in ("alpha_lr", "beta_lr", "lambda", "critic_lr", "clone_lr", "entropy_temp", "reward_scale",
                "am_slack"):
        v = getattr(a, "lam" if key == "lambda" else key)
        if not (math.isfinite(v) and v >= 0):
            fail("agent", key, "must be finite and non-negative")
    if not 0 < a.gamma < 1:
        fail("agent", "gamma", "must lie in (0, 1)")
    if a.clip_norm is not None and a.clip_norm <= 0:
        fail("agent", "clip_norm", "must be positive")
    if a.clone_epochs < 0:
        fail("agent", "clone_epochs", "must be non-negative")
    o = cfg.observer_spec
    if o.eta < 0:
        fail("observer", "eta", "must be non-negative")
    if o.online_loss not in ("prefix_mean", "final"):
        fail("observer", "online_loss", "choose prefix_mean or final")
    if o.clip_norm is not None and o.clip_norm <= 0:
        fail("observer", "clip_norm", "must be positive")
    if o.hidden < 1 or o.layers < 1:
        fail("observer", "hidden", "hidden width and layer count must be positive")
    p = cfg.pretrain
    if p.optimizer not in ("adam", "sgd"):
        fail("pretrain", "optimizer", "choose adam or sgd")
    if p.epochs < 0 or p.batch_size < 1 or p.lr <= 0:
        fail("pretrain", "epochs", "epochs >= 0, batch_size >= 1 and lr > 0 required")
    if not 0 <= p.full_fraction <= 1:
        fail("pretrain", "full_fraction", "must lie in [0, 1]")
    if any(k > cfg.K for k in cfg.pirate.snapshot_episodes):
        fail("pirate", "snapshots", f"snapshot episodes exceed K={cfg.K}")
    try:
        grid = load_map_file(cfg.map)
    except (OSError, ValueError) as err:
        fail("experiment", "map", str(err))
    if not 0 <= cfg.true_goal < grid.n_goals:
        fail("experiment", "true_goal", f"map has {grid.n_goals} goals")
    if p.n_trajectories < 10 * grid.n_goals:
        fail("pretrain", "n_trajectories", f"need at least {10 * grid.n_goals}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"{path}: {err.strerror or err}") from None
    return parse_config(text, source=str(path), base_dir=path.parent)
