"""Named scenario presets used by the demos and the acceptance suite."""
from __future__ import annotations

from dataclasses import replace

from .sim import ObstacleSpec, ScenarioConfig


def default_scenario() -> ScenarioConfig:
    """Half-scale dynamic arena: 10 x 10 x 3 m, 20 moving cylinders, 5 rings."""
    return ScenarioConfig()


def low_wall_scenario(energy_weight: float = 1.0) -> ScenarioConfig:
    """A 0.4 m wall across most of a 6 x 6 m arena with ground gaps at both
    ends, plus a few slow cylinders.  Flying over is shorter; driving around
    avoids the aerial surcharge, so the energy weight decides."""
    wall = ((2.8, 1.3, 0.0), (3.2, 4.7, 0.4))
    cfg = ScenarioConfig(arena=(6.0, 6.0, 3.0), start=(0.8, 3.0, 0.0), goal=(5.2, 3.0, 0.0),
                         obstacles=ObstacleSpec(cylinders=3, rings=0, cyl_speed=(0.0, 0.2),
                                                boxes=(wall,)),
                         timeout=25.0)
    return replace(cfg, weights=replace(cfg.weights, energy_weight=energy_weight))


def occlusion_scenario(completion: str = "oracle", noise_p: float = 0.0) -> ScenarioConfig:
    """Tall random boxes that hide what is behind them, with slow cylinders
    moving in their shadows."""
    return ScenarioConfig(completion=completion, noise_p=noise_p,
                          obstacles=ObstacleSpec(cylinders=12, rings=0, random_boxes=10,
                                                 box_height=(1.5, 2.5), cyl_speed=(0.0, 0.3)))
