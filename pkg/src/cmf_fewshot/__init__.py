"""Few-shot image classification with FiLM-adapted frozen backbones and
canonical mean filtering of the task prior."""
from .backbone import BackboneConfig, BackboneWeights, FiLMParams, backbone_forward, pretrain_backbone
from .deploy import DeployModel, StoredAdaptation, equivalence_check, precompute, strip
from .encoder import EncoderConfig, MeanPrior, encode_mean
from .episodes import Dataset, Episode, FixedSupport, desk_benchmark, load_dataset, make_fixed_support, sample_episode
from .estimator import FewShotClassifier, PCAProjector
from .evaluation import EvalSettings, run_protocol, sweep_matrix
from .model import CNAPModel, ModelConfig
from .training import RunLog, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "BackboneWeights",
    "CNAPModel",
    "Dataset",
    "DeployModel",
    "EncoderConfig",
    "Episode",
    "EvalSettings",
    "FewShotClassifier",
    "FiLMParams",
    "FixedSupport",
    "MeanPrior",
    "PCAProjector",
    "ModelConfig",
    "RunLog",
    "StoredAdaptation",
    "TrainConfig",
    "backbone_forward",
    "desk_benchmark",
    "encode_mean",
    "equivalence_check",
    "load_dataset",
    "make_fixed_support",
    "precompute",
    "pretrain_backbone",
    "run_protocol",
    "sample_episode",
    "strip",
    "sweep_matrix",
    "train",
]
