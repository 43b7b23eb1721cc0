"""blockwind: tangible block-scene pose tracking coupled to a desk-scale
lattice-Boltzmann wind solver, with synthetic benchmarks and rendering.

The pieces, bottom up:

- :mod:`blockwind.se3` -- frame-tagged rigid transforms and anchor transfer.
- :mod:`blockwind.camera` -- pinhole projection and depth from box size.
- :mod:`blockwind.cloud` -- PLY ingest, crop, unit-sphere normalization.
- :mod:`blockwind.scene` -- blocks, scenes, observations, trajectories.
- :mod:`blockwind.tracking` -- the multi-pass tracking loop and occlusion rules.
- :mod:`blockwind.synth` -- ground-truth synthesis, metrics, amplification study.
- :mod:`blockwind.wind` -- the D2Q9 lattice-Boltzmann slice solver.
- :mod:`blockwind.render` -- deterministic wireframe/overlay rendering.
- :mod:`blockwind.service` -- the local HTTP + event-stream design-loop service.
- :mod:`blockwind.cli` -- batch subcommands and experiment reproductions.
"""

from .camera import BoundingBox, CameraIntrinsics
from .scene import Block, ColorTag, Observation, Provenance, Scene, TrackedTrajectory
from .se3 import Pose, Rotation, anchor_transfer, compose, inverse, rotation_angle_between

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CameraIntrinsics",
    "Block",
    "ColorTag",
    "Observation",
    "Provenance",
    "Scene",
    "TrackedTrajectory",
    "Pose",
    "Rotation",
    "anchor_transfer",
    "compose",
    "inverse",
    "rotation_angle_between",
    "__version__",
]
