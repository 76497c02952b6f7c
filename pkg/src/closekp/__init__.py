"""Close-proximity human keypoint tooling.

Dataset cropping, OKS-based 2D evaluation, RGB-D keypoint lifting, rigid
registration to a MoCap frame, 3D evaluation and a synthetic scene renderer.
"""
from .layouts import KeypointLayout, get_layout
from .annotations import Dataset, DetectionRecord, PersonAnnotation, load_dataset, load_detections
from .oks import OksParams, evaluate, load_oks_params
from .geometry import CameraIntrinsics, Point3, RigidTransform
from .lift import NeighborhoodSpec, lift_keypoint, lift_person
from .registration import CorrespondenceSet, estimate_rigid

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CorrespondenceSet", "Dataset", "DetectionRecord", "KeypointLayout",
    "NeighborhoodSpec", "OksParams", "PersonAnnotation", "Point3", "RigidTransform",
    "estimate_rigid", "evaluate", "get_layout", "lift_keypoint", "lift_person",
    "load_dataset", "load_detections", "load_oks_params",
]
