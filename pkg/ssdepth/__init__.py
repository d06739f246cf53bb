from ssdepth.measures import *
from ssdepth.errors import SsdError
from ssdepth.camgeom import Intrinsics, Pose
from ssdepth.nets import DepthNet, PoseNet
from ssdepth.synthscene import Dataset, SampleTriplet, SceneConfig
from ssdepth.trainer import Checkpoint, TrainConfig

__all__ = [
    'Checkpoint',
    'Dataset',
    'DepthNet',
    'Intrinsics',
    'Pose',
    'PoseNet',
    'SampleTriplet',
    'SceneConfig',
    'SsdError',
    'TrainConfig',
    'parse_measure',
    'parse_range',
]
