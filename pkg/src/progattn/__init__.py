# Version file is written by hatch-vcs at build time
try:
    from .version import __version__
except ImportError:
    __version__ = "0.0.0+unknown"

from .data_ingest import (
    Dataset,
    Sample,
    compute_de,
    load_manifest,
    split,
    synth_generate,
    write_dataset,
)
from .errors import (
    ProgAttnError,
    ConfigError,
    ContractError,
    LoadError,
    NumericalError,
    ShapeError,
    TrainingError,
)
from .graph_spectral import AdjacencyRule, EegGraph, build_adjacency, load_montage
from .pipeline import (
    ModelState,
    TrainConfig,
    evaluate,
    load_checkpoint,
    progressive_forward,
    save_checkpoint,
    train,
)
from .tensor_core import DiffRecord, Tensor
