"""Repeated deceptive path planning: grid worlds, goal-recognition observers,
baseline agents and the two-level meta-gradient planner."""

__version__ = "0.1.0"
