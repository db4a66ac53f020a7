"""Two-view pointmap reconstruction toolkit.

Library layout:

* :mod:`pointmaps.geometry` -- pointmap/depth/pose types and frame algebra
* :mod:`pointmaps.fileio` -- PLY, raw depth, JSON camera files, checkpoints
* :mod:`pointmaps.conditioning` -- encoding of optional camera priors
* :mod:`pointmaps.losses` -- normalized regression and confidence losses
* :mod:`pointmaps.solvers` -- focal, relative-pose and PnP recovery
* :mod:`pointmaps.stitching` -- tiled inference over large images
* :mod:`pointmaps.alignment` -- multi-view global alignment
* :mod:`pointmaps.metrics` -- depth/focal/pose evaluation metrics
* :mod:`pointmaps.nn` -- from-scratch autodiff tape, toy network, training
* :mod:`pointmaps.benchmarks` -- reproducible evaluation suites
* :mod:`pointmaps.cli` -- command line entry points
"""

from .geometry import (
    CameraIntrinsics,
    ConfidenceMap,
    DegenerateGeometryError,
    DepthMap,
    DivergenceError,
    PairPrediction,
    PointMap,
    RigidPose,
    ValidationError,
    compose_relative,
    project,
    swap_frame,
    unproject,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "ConfidenceMap",
    "DegenerateGeometryError",
    "DepthMap",
    "DivergenceError",
    "PairPrediction",
    "PointMap",
    "RigidPose",
    "ValidationError",
    "compose_relative",
    "project",
    "swap_frame",
    "unproject",
    "__version__",
]
