"""Probabilistic graph neural networks for spatiotemporal demand."""

from .autodiff import Tensor, backward, check_parameters, gradient_check
from .data import (
    DemandPanel,
    FeaturePanel,
    SplitPanels,
    SyntheticSpec,
    export_csv,
    generate,
    ingest_csv,
    load_directory,
    make_splits,
    normalize,
)
from .distributions import (
    FAMILIES,
    DistParams,
    cdf,
    decompose_uncertainty,
    ensemble,
    log_density,
    nll,
    point_prediction,
    quantile,
    sample,
)
from .errors import DivergedLoss, ProbGnnError, RuntimeFailure
from .evaluation import MetricsReport, calibration, evaluate, interval_metrics, point_metrics, shift_report
from .graphs import AdjacencySet, StationTable, build_adjacency, morans_histogram, morans_i
from .model import ModelConfig, ProbGnn, load_checkpoint, mc_dropout_predict, save_checkpoint
from .training import Ensemble, TrainReport, TrainSpec, grid_search, train, train_ensemble

__version__ = "0.1.0"
