"""Online multi-view stereo depth prediction on posed video.

Plane-sweep cost volumes scored with feature correlation feed a small
encoder-decoder that regresses inverse depth; a convolutional recurrent
cell at the bottleneck fuses information over time, with the hidden
state geometrically warped between viewpoints.
"""

from .errors import ContractError, DatasetError, TrainingDiverged
from .geometry import CameraIntrinsics, DepthMap, Frame, Pose

__all__ = [
    "CameraIntrinsics",
    "ContractError",
    "DatasetError",
    "DepthMap",
    "Frame",
    "Pose",
    "TrainingDiverged",
]
