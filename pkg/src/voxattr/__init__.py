"""Voxel attribution, RoI-importance aggregation, and outlier mining for 3D
segmentation models."""

from .aggregate import (
    ExplanationMatrix,
    ImportanceGraph,
    SignMode,
    context_fraction,
    global_matrix,
    local_matrix,
    roi_importance,
    topk_graph,
)
from .attribution import (
    AttributionField,
    AttributionMethod,
    AttributionRun,
    ShapleyEstimate,
    SupervoxelPartition,
    attribute_all_classes,
    integrated_gradients,
    kernelshap,
    partition_cubes,
    partition_semantic,
    smoothgrad,
    vanilla_gradient,
)
from .metrics import (
    MethodConfig,
    MetricReport,
    NormalizedAttribution,
    complexity,
    default_method_suite,
    efficiency,
    faithfulness,
    normalize,
    run_benchmark,
    sensitivity,
)
from .models import (
    GradientUnavailableError,
    ProxyValue,
    SyntheticModel,
    SyntheticModelSpec,
    aggregated_score,
    finite_difference_gradient,
    proxy_gradient,
    proxy_value,
    random_volume,
)
from .outliers import (
    FeatureRow,
    IsolationForestModel,
    OutlierResult,
    RankTestResult,
    dice,
    if_score,
    if_train,
    outlier_pipeline,
    spearman_test,
)
from .rng import RngSpec
from .volume import (
    ClassMask,
    LogitField,
    MaskOp,
    RoISet,
    RoISource,
    Volume,
    argmax_masks,
    mask_algebra,
    preprocess,
)
from .wire import ModelTransportError, RemoteModel, serve

__version__ = "0.1.0"

__all__ = [
    "AttributionField",
    "AttributionMethod",
    "AttributionRun",
    "ClassMask",
    "ExplanationMatrix",
    "FeatureRow",
    "GradientUnavailableError",
    "ImportanceGraph",
    "IsolationForestModel",
    "LogitField",
    "MaskOp",
    "MethodConfig",
    "MetricReport",
    "ModelTransportError",
    "NormalizedAttribution",
    "OutlierResult",
    "ProxyValue",
    "RankTestResult",
    "RemoteModel",
    "RngSpec",
    "RoISet",
    "RoISource",
    "ShapleyEstimate",
    "SignMode",
    "SupervoxelPartition",
    "SyntheticModel",
    "SyntheticModelSpec",
    "Volume",
    "aggregated_score",
    "argmax_masks",
    "attribute_all_classes",
    "complexity",
    "context_fraction",
    "default_method_suite",
    "dice",
    "efficiency",
    "faithfulness",
    "finite_difference_gradient",
    "global_matrix",
    "if_score",
    "if_train",
    "integrated_gradients",
    "kernelshap",
    "local_matrix",
    "mask_algebra",
    "normalize",
    "outlier_pipeline",
    "partition_cubes",
    "partition_semantic",
    "preprocess",
    "proxy_gradient",
    "proxy_value",
    "random_volume",
    "roi_importance",
    "run_benchmark",
    "sensitivity",
    "serve",
    "smoothgrad",
    "spearman_test",
    "topk_graph",
    "vanilla_gradient",
]
