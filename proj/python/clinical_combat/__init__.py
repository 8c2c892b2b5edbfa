"""Harmonization of diffusion MRI metrics between a reference and a moving site."""

from ._core import (
    CCombatError,
    Model,
    bhattacharyya_distance,
    fit,
    simulate_moving,
    simulate_reference,
)

__all__ = [
    "CCombatError",
    "Model",
    "bhattacharyya_distance",
    "fit",
    "simulate_moving",
    "simulate_reference",
]
