"""querycat: dominant-category classification of search queries.

Pipeline: click-log ingestion and labeling (ingest), query normalization
and integer encoding (textprep), a from-scratch convolutional classifier
with hand-derived backprop (nncore, models), an HTTP prediction service
(serve), and a CLI tying it together (cli).
"""

from . import errors
from .ingest import (
    ClickEvent,
    NoisePolicy,
    QueryRecord,
    SynthSpec,
    aggregate,
    filter_noise,
    generate_synthetic_log,
    label,
    label_all,
    parse_click_log,
)
from .models import (
    CnnConfig,
    EvalResult,
    MetricsCurve,
    MetricsRow,
    MlpConfig,
    TrainConfig,
    build_cnn,
    build_mlp,
    evaluate,
    predict,
    train,
)
from .nncore import (
    CnnModel,
    MlpModel,
    OptimizerConfig,
    OptimizerState,
    grad_check,
    load_model,
    optimizer_step,
    save_model,
)
from .serve import ModelSnapshot, PredictionService, ServiceConfig
from .textprep import (
    Dataset,
    Vocabulary,
    build_vocab,
    encode,
    encode_dataset,
    load_dataset,
    normalize,
    persist_dataset,
    split,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "ClickEvent",
    "NoisePolicy",
    "QueryRecord",
    "SynthSpec",
    "aggregate",
    "filter_noise",
    "generate_synthetic_log",
    "label",
    "label_all",
    "parse_click_log",
    "CnnConfig",
    "EvalResult",
    "MetricsCurve",
    "MetricsRow",
    "MlpConfig",
    "TrainConfig",
    "build_cnn",
    "build_mlp",
    "evaluate",
    "predict",
    "train",
    "CnnModel",
    "MlpModel",
    "OptimizerConfig",
    "OptimizerState",
    "grad_check",
    "load_model",
    "optimizer_step",
    "save_model",
    "ModelSnapshot",
    "PredictionService",
    "ServiceConfig",
    "Dataset",
    "Vocabulary",
    "build_vocab",
    "encode",
    "encode_dataset",
    "load_dataset",
    "normalize",
    "persist_dataset",
    "split",
    "__version__",
]
