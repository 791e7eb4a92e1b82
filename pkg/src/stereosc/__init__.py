"""Task-oriented semantic communication for stereo image pairs."""

from stereosc.data import (
    BBox2D,
    DataError,
    DetectionSet,
    DifficultyRegime,
    SceneSpec,
    StereoPair,
    classify_difficulty,
    load_kitti_stereo,
    synth_stereo,
)

__version__ = "0.1.0"

__all__ = [
    "BBox2D",
    "DataError",
    "DetectionSet",
    "DifficultyRegime",
    "SceneSpec",
    "StereoPair",
    "classify_difficulty",
    "load_kitti_stereo",
    "synth_stereo",
]
