"""Microscopic simulation and control of automated vehicles on lane-free roundabouts."""

from .dynamics import VehicleState, ControlInput, VehicleShape
from .geometry import (RoundaboutGeometry, Branch, PolarPose, SkewedPose,
                       Corridor, default_geometry, build_corridor)
from .engine import Scenario, World, Demand, PresetVehicle, Vehicle

__all__ = [
    "VehicleState", "ControlInput", "VehicleShape",
    "RoundaboutGeometry", "Branch", "PolarPose", "SkewedPose", "Corridor",
    "default_geometry", "build_corridor",
    "Scenario", "World", "Demand", "PresetVehicle", "Vehicle",
]

__version__ = "0.1.0"
