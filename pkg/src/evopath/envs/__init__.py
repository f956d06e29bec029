"""Parameterized MDP families, registered by string id."""
from __future__ import annotations

from .base import Trajectory, evaluate_success, register, make_family, FAMILIES
from .landscape import LandscapeConfig, LandscapeFamily
from .reacher import ReacherConfig, GraspReacherFamily

register("landscape", LandscapeFamily, LandscapeConfig)
register("grasp-reacher", GraspReacherFamily, ReacherConfig)

__all__ = [
    "Trajectory",
    "evaluate_success",
    "make_family",
    "FAMILIES",
    "LandscapeConfig",
    "LandscapeFamily",
    "ReacherConfig",
    "GraspReacherFamily",
]
