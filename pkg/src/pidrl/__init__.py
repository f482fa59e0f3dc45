"""Reinforcement-learning tuning of a PID level controller on a simulated two-tank rig."""

from .pid import PidGains, init_from_kp
from .plant import PlantParams

__all__ = ["PidGains", "PlantParams", "init_from_kp"]
