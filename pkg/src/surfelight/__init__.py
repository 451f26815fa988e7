"""Relightable outdoor scenes from 2D Gaussian surfels and SH lighting."""
from .errors import ContractViolation, InputDataError, LossUndefinedError, StaleFragmentsError
from .scene import Camera, LightModel, Scene, Surfels

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ContractViolation",
    "InputDataError",
    "LightModel",
    "LossUndefinedError",
    "Scene",
    "StaleFragmentsError",
    "Surfels",
]
