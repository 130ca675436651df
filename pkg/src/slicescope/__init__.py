"""Error slice discovery with a kNN-graph coherence term."""

__version__ = "0.1.0"

from .coherence import (
    CoherenceReport,
    EmptySliceError,
    coherence_report,
    euclidean_dispersion,
    manifold_compactness,
    rescale_compactness,
    subsampled_compactness,
)
from .dataset_io import (
    CsvSchema,
    DatasetBundle,
    DatasetError,
    FormatError,
    load_binary,
    load_csv,
    load_dataset,
    save_binary,
    save_csv,
    split,
)
from .evaluation import (
    EvalConfig,
    SliceReport,
    average_precision,
    evaluate_slice,
    precision_at_k,
    project_2d,
)
from .knn_graph import GraphBuildConfig, KnnGraph, build_knn_graph, cached_knn_graph, load_graph, save_graph
from .slicer import SlicerModel, TrainConfig, predict_proba, select_test_slice, train_slicer
from .solver import (
    InfeasibleError,
    QpProblem,
    SolverConfig,
    SolverResult,
    brute_force_oracle,
    discover_slices,
    extract_slice,
    objective_gradient,
    objective_value,
    separability_objective,
    solve,
)
from .synth import (
    GeneratorParams,
    SyntheticSetting,
    TuneResult,
    generate_nested_setting,
    generate_setting,
    run_benchmark,
    tune_lambda,
)
