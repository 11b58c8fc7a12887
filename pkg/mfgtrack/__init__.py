__version__ = "0.1.0"

from .box import BoundingBox
from .config import Settings, load_config
from .datanet import AttentionMap, ClipInput, DaTANet
from .evaluate import EvalResult, evaluate, evaluate_pr, evaluate_sr
from .experiment import Report, run_experiment
from .frame import FramePair, ImageTensor, Modality
from .mfgnet import DynamicFilterSet, MFGNet
from .sequence import SequenceRecord, load_sequence, save_sequence
from .synth import SyntheticSpec, generate_sequence
from .tracker import MFGTrackNet, Tracker, TrackerState

__all__ = [
    "BoundingBox",
    "Settings",
    "load_config",
    "AttentionMap",
    "ClipInput",
    "DaTANet",
    "EvalResult",
    "evaluate",
    "evaluate_pr",
    "evaluate_sr",
    "Report",
    "run_experiment",
    "FramePair",
    "ImageTensor",
    "Modality",
    "DynamicFilterSet",
    "MFGNet",
    "SequenceRecord",
    "load_sequence",
    "save_sequence",
    "SyntheticSpec",
    "generate_sequence",
    "MFGTrackNet",
    "Tracker",
    "TrackerState",
]
