"""Synthetic worlds with known ground truth."""
from .topology import ScenarioConfig
from .world import SynthWorld, generate_world, write_world

__all__ = ["ScenarioConfig", "SynthWorld", "generate_world", "write_world"]
