"""
Domain types shared by the services
"""
from app.schemas.detection import (
    Alert,
    DetectorConfig,
    DistanceKind,
    EmbeddingSource,
    Pipeline,
    SessionStats,
    StatFeatureVector,
    WindowVerdict,
)
from app.schemas.evaluation import Counts, EvalReport, TimingSummary
from app.schemas.prioritization import DecisionTree, Label, PriorityEntry, PriorityList, TreeNode, ZScoreFeature
from app.schemas.simulation import (
    ClusterSpec,
    CorpusEntry,
    CorpusManifest,
    CorpusSplit,
    EffectKind,
    FaultProfile,
    FaultRecord,
    GroundTruth,
    LabeledTask,
    Perturbation,
    Waveform,
    WaveformKind,
)
from app.schemas.traces import AlignedTensor, RawTraceSet, SampleStream, TaskTensors, TraceFormat, Window
from app.schemas.vae import Reconstruction, VaeHyperparams, VaeModel

__all__ = [
    "Alert",
    "DetectorConfig",
    "DistanceKind",
    "EmbeddingSource",
    "Pipeline",
    "SessionStats",
    "StatFeatureVector",
    "WindowVerdict",
    "Counts",
    "EvalReport",
    "TimingSummary",
    "DecisionTree",
    "Label",
    "PriorityEntry",
    "PriorityList",
    "TreeNode",
    "ZScoreFeature",
    "ClusterSpec",
    "CorpusEntry",
    "CorpusManifest",
    "CorpusSplit",
    "EffectKind",
    "FaultProfile",
    "FaultRecord",
    "GroundTruth",
    "LabeledTask",
    "Perturbation",
    "Waveform",
    "WaveformKind",
    "AlignedTensor",
    "RawTraceSet",
    "SampleStream",
    "TaskTensors",
    "TraceFormat",
    "Window",
    "Reconstruction",
    "VaeHyperparams",
    "VaeModel",
]
