"""Cascading uncertainty flags for sensor-window classifiers.

Train a masked autoencoder and a frozen-encoder classifier over
multi-channel sensor windows, calibrate three uncertainty detectors
(reconstruction loss, nearest-centroid distance, MC-dropout variance) at
a quantile threshold, and attach a green/red confidence flag to every
prediction via a short-circuiting cascade.
"""

from .bundle import Bundle, BundleError, ChecksumError, build_detectors, build_head, build_mae
from .cascade import (
    Cascade,
    CascadeVerdict,
    EvaluationReport,
    UAReport,
    evaluate_scenarios,
    timing_report,
    uncertainty_accuracy,
)
from .classifier import ClassifierHead, Prediction, predict, predict_stochastic, train_head
from .config import (
    ConfigError,
    DetectorConfig,
    HeadConfig,
    Paths,
    RunConfig,
    Seeds,
    TrainConfig,
    config_checksum,
    default_config_text,
    load_config,
    save_config,
)
from .data import (
    CsvFormatError,
    CsvSchema,
    EmptyFileError,
    GeneratorConfig,
    MissingColumnError,
    NonMonotoneTimestampError,
    ScenarioSet,
    SensorWindow,
    SplitSpec,
    build_scenarios,
    ingest_csv,
    synth_generate,
    write_csv,
)
from .detectors import (
    CentroidSet,
    DetectorVerdict,
    DistanceDetector,
    McDropoutDetector,
    NotCalibratedError,
    QuantileThreshold,
    ReconstructionDetector,
    distance_score,
    kmeans_fit,
    mc_variance_score,
    mcd_score,
    quantile,
)
from .mae import (
    DivergenceError,
    MaeConfig,
    MaeModel,
    encode,
    mae_forward_loss,
    pretrain,
    reconstruction_score,
    split_frames,
)
from .nn.rng import RngState

__version__ = "0.1.0"
