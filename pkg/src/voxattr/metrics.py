"""Attribution-quality metrics and the benchmark runner.

Four scores per (method, input, class) record: faithfulness (does removing
high-attribution voxels drop the class score?), sensitivity (do similar
inputs get similar attributions?), complexity (how many voxels carry
non-negligible attribution?), and efficiency (wall-clock seconds per
attribution). Attributions are range-normalized to [0, 1] before scoring so
methods with different output scales compare fairly.

Degenerate cases never raise or return NaN from a metric: a constant
attribution normalizes to all zeros with a flag, and a zero-variance
correlation scores 0 with a flag, so benchmark aggregation keeps every
record.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attribution import (
    IG_DEFAULT_N,
    KSHAP_CUBES_DEFAULT_SAMPLES,
    KSHAP_DEFAULT_LAMBDA,
    KSHAP_SEMANTIC_DEFAULT_SAMPLES,
    SG_DEFAULT_N,
    AttributionField,
    AttributionMethod,
    integrated_gradients,
    kernelshap,
    partition_cubes,
    partition_semantic,
    smoothgrad,
    vanilla_gradient,
)
from .models import aggregated_score
from .rng import RngSpec
from .volume import ClassMask, LogitField, Volume, argmax_masks

FAITHFULNESS_DEFAULT_N = 100
FAITHFULNESS_SUBSET_CAP = 224 * 224
SENSITIVITY_DEFAULT_N = 3
SENSITIVITY_DEFAULT_RADIUS = 0.1
COMPLEXITY_DEFAULT_THETA = 0.1


@dataclass(frozen=True)
class NormalizedAttribution:
    """Attribution rescaled to [0, 1]; constant inputs become all zeros."""

    data: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("normalized attribution must lie in [0, 1]")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


def normalize(e: AttributionField) -> NormalizedAttribution:
    lo = float(e.data.min())
    hi = float(e.data.max())
    if hi == lo:
        return NormalizedAttribution(data=np.zeros_like(e.data), degenerate=True)
    return NormalizedAttribution(data=(e.data - lo) / (hi - lo))


@dataclass(frozen=True)
class MetricValue:
    """Metric score plus a flag for degenerate inputs (score pinned to 0)."""

    value: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def default_subset_size(num_voxels: int) -> int:
    return max(1, min(FAITHFULNESS_SUBSET_CAP, num_voxels // 2))


def _pearson(a: np.ndarray, b: np.ndarray) -> MetricValue:
    a = a - a.mean()
    b = b - b.mean()
    sa = float(np.sqrt((a * a).sum()))
    sb = float(np.sqrt((b * b).sum()))
    if sa == 0.0 or sb == 0.0:
        return MetricValue(0.0, degenerate=True)
    r = float((a * b).sum() / (sa * sb))
    return MetricValue(max(-1.0, min(1.0, r)))


def faithfulness(g_field: NormalizedAttribution, model, x: Volume, c: int, mask: ClassMask,
                 n: int = FAITHFULNESS_DEFAULT_N, m: int | None = None,
                 rng: RngSpec = RngSpec(0)) -> MetricValue:
    """Correlation between subset attribution mass and score drop on removal.

    Draws n voxel subsets of size m (default: half the volume, capped at
    224*224). For each subset, pairs the summed attribution inside it with
    f(x) - f(x with the subset zeroed); returns the Pearson correlation of
    the n pairs. Either series constant -> 0 with the degenerate flag.
    """
    p = x.num_voxels
    if m is None:
        m = default_subset_size(p)
    if not 1 <= m <= p:
        raise ValueError(f"subset size m={m} out of range [1, {p}]")
    if n < 3:
        raise ValueError(f"n must be >= 3 for a meaningful correlation, got {n}")
    gen = rng.generator()
    full_value = aggregated_score(model.forward(x), c, mask)
    flat = x.data.reshape(-1)
    masses = np.empty(n, dtype=np.float64)
    drops = np.empty(n, dtype=np.float64)
    for i in range(n):
        subset = gen.choice(p, size=m, replace=False)
        masses[i] = float(g_field.data[subset].sum())
        ablated = flat.copy()
        ablated[subset] = 0.0
        vol = Volume(dims=x.dims, data=ablated.reshape(x.data.shape), spacing=x.spacing)
        drops[i] = full_value - aggregated_score(model.forward(vol), c, mask)
    return _pearson(masses, drops)


AttributeFn = Callable[..., AttributionField]


def sensitivity(attribute_fn: AttributeFn, model, x: Volume, c: int, mask: ClassMask,
                n: int = SENSITIVITY_DEFAULT_N, radius: float = SENSITIVITY_DEFAULT_RADIUS,
                rng: RngSpec = RngSpec(0)) -> MetricValue:
    """Mean relative change of the normalized attribution under input noise.

    Each of the n probes re-runs the attribution on x + N(0, radius^2) and
    measures ||g' - g||_2 / ||g||_2 on normalized fields. A base attribution
    with zero norm falls back to the absolute distance.

    ``attribute_fn(model, volume, c, mask, rng)`` must return an
    AttributionField; randomized methods receive a fresh child stream per
    probe so probes stay independent.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    base = normalize(attribute_fn(model, x, c, mask, rng.child("attr", "base")))
    base_norm = float(np.linalg.norm(base.data))
    grid = x.data.astype(np.float64)
    total = 0.0
    for i in range(n):
        noise = rng.child("noise", i).generator().normal(0.0, radius, size=grid.shape)
        perturbed = Volume(dims=x.dims, data=grid + noise, spacing=x.spacing)
        probe = normalize(attribute_fn(model, perturbed, c, mask, rng.child("attr", i)))
        dist = float(np.linalg.norm(probe.data - base.data))
        total += dist / base_norm if base_norm > 0 else dist
    return MetricValue(total / n, degenerate=base.degenerate)


def complexity(g_field: NormalizedAttribution, theta: float = COMPLEXITY_DEFAULT_THETA) -> MetricValue:
    """Fraction of voxels whose normalized attribution exceeds theta."""
    if not 0 <= theta < 1:
        raise ValueError(f"theta must be in [0, 1), got {theta}")
    p = g_field.data.size
    return MetricValue(float((g_field.data > theta).sum()) / p, degenerate=g_field.degenerate)


def efficiency(attribute_fn: AttributeFn, model, x: Volume, c: int, mask: ClassMask,
               rng: RngSpec = RngSpec(0)) -> tuple[float, AttributionField]:
    """Wall-clock seconds for one attribution, plus the field it produced."""
    start = time.perf_counter()
    result = attribute_fn(model, x, c, mask, rng)
    return time.perf_counter() - start, result


@dataclass(frozen=True)
class MethodConfig:
    """A named, fully parameterized attribution method for benchmarking."""

    method: AttributionMethod
    name: str | None = None
    sg_n: int = SG_DEFAULT_N
    sg_sigma: float | None = None
    ig_n: int = IG_DEFAULT_N
    cube_edge: int = 4
    n_samples: int | None = None
    ridge_lambda: float = KSHAP_DEFAULT_LAMBDA

    def __post_init__(self):
        if self.name is None:
            object.__setattr__(self, "name", self.method.value)

    def attribute(self, model, x: Volume, c: int, mask: ClassMask, rng: RngSpec,
                  logits: LogitField | None = None) -> AttributionField:
        if self.method is AttributionMethod.VG:
            return vanilla_gradient(model, x, c, mask)
        if self.method is AttributionMethod.SG:
            return smoothgrad(model, x, c, mask, n=self.sg_n, sigma=self.sg_sigma, rng=rng)
        if self.method is AttributionMethod.IG:
            return integrated_gradients(model, x, c, mask, n=self.ig_n)
        if self.method is AttributionMethod.KSHAP_CUBES:
            partition = partition_cubes(x.dims, self.cube_edge)
            budget = KSHAP_CUBES_DEFAULT_SAMPLES if self.n_samples is None else self.n_samples
            return kernelshap(model, x, c, mask, partition, budget, self.ridge_lambda, rng)[0]
        if self.method is AttributionMethod.KSHAP_SEMANTIC:
            partition = partition_semantic(model.forward(x) if logits is None else logits)
            budget = KSHAP_SEMANTIC_DEFAULT_SAMPLES if self.n_samples is None else self.n_samples
            return kernelshap(model, x, c, mask, partition, budget, self.ridge_lambda, rng)[0]
        raise ValueError(f"unknown method {self.method!r}")  # pragma: no cover


def default_method_suite() -> list[MethodConfig]:
    return [
        MethodConfig(AttributionMethod.VG),
        MethodConfig(AttributionMethod.SG),
        MethodConfig(AttributionMethod.IG),
        MethodConfig(AttributionMethod.KSHAP_CUBES),
        MethodConfig(AttributionMethod.KSHAP_SEMANTIC),
    ]


@dataclass(frozen=True)
class MetricRecord:
    method: str
    input_id: str
    class_id: int
    faithfulness: float
    sensitivity: float
    complexity: float
    efficiency_s: float
    faithfulness_degenerate: bool = False
    normalization_degenerate: bool = False


METRIC_COLUMNS = ("faithfulness", "sensitivity", "complexity", "efficiency_s")


@dataclass(frozen=True)
class MetricReport:
    dataset: str
    records: tuple[MetricRecord, ...]
    errors: tuple[str, ...] = field(default_factory=tuple)

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        """Per-method mean and population std of each metric."""
        out: dict[str, dict[str, tuple[float, float]]] = {}
        methods = sorted({r.method for r in self.records})
        for name in methods:
            rows = [r for r in self.records if r.method == name]
            stats = {}
            for column in METRIC_COLUMNS:
                vals = np.array([getattr(r, column) for r in rows], dtype=np.float64)
                stats[column] = (float(vals.mean()), float(vals.std()))
            out[name] = stats
        return out

    def to_csv(self, include_efficiency: bool = True) -> str:
        """Per-record table. Timing is the one nondeterministic column, so
        callers that need byte-stable output can leave it out."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["method", "input_id", "class", "faithfulness", "sensitivity", "complexity"]
        if include_efficiency:
            header.append("efficiency_s")
        writer.writerow(header)
        for r in self.records:
            row = [r.method, r.input_id, str(r.class_id),
                   repr(r.faithfulness), repr(r.sensitivity), repr(r.complexity)]
            if include_efficiency:
                row.append(repr(r.efficiency_s))
            writer.writerow(row)
        return buf.getvalue()

    def summary_csv(self) -> str:
        """Aggregate table, one row per method: mean and std per metric."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["method"]
        for column in METRIC_COLUMNS:
            header += [f"{column}_mean", f"{column}_std"]
        writer.writerow(header)
        for name, stats in self.aggregate().items():
            row = [name]
            for column in METRIC_COLUMNS:
                mean, std = stats[column]
                row += [repr(mean), repr(std)]
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "dataset": self.dataset,
            "errors": list(self.errors),
            "aggregate": {
                name: {column: {"mean": stats[column][0], "std": stats[column][1]}
                       for column in METRIC_COLUMNS}
                for name, stats in self.aggregate().items()
            },
            "num_records": len(self.records),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def run_benchmark(model, inputs: Sequence[tuple[str, Volume]], methods: Sequence[MethodConfig],
                  class_subset: Sequence[int] | None = None, rng: RngSpec = RngSpec(0),
                  dataset: str = "synthetic",
                  faithfulness_n: int = FAITHFULNESS_DEFAULT_N, faithfulness_m: int | None = None,
                  sensitivity_n: int = SENSITIVITY_DEFAULT_N,
                  sensitivity_radius: float = SENSITIVITY_DEFAULT_RADIUS,
                  theta: float = COMPLEXITY_DEFAULT_THETA) -> MetricReport:
    """Score every (method, input, predicted class) combination.

    Classes outside ``class_subset`` (or with empty predicted masks) are
    skipped. A record that fails is logged in ``errors`` and the run
    continues. Scores other than the timing column are deterministic for a
    fixed ``rng``.
    """
    if not inputs or not methods:
        raise ValueError("need at least one input and one method")
    records: list[MetricRecord] = []
    errors: list[str] = []
    for input_id, x in inputs:
        logits = model.forward(x)
        masks = argmax_masks(logits)
        classes = range(logits.num_classes) if class_subset is None else class_subset
        for config in methods:
            def attribute_fn(m_, x_, c_, mask_, rng_, _config=config):
                return _config.attribute(m_, x_, c_, mask_, rng_)

            for c in classes:
                mask = masks[c]
                if mask.is_empty():
                    continue
                key = (config.name, input_id, c)
                try:
                    seconds, field_ = efficiency(attribute_fn, model, x, c, mask,
                                                 rng.child(config.name, input_id, c, "attr"))
                    g = normalize(field_)
                    faith = faithfulness(g, model, x, c, mask, n=faithfulness_n,
                                         m=faithfulness_m, rng=rng.child(config.name, input_id, c, "faith"))
                    sens = sensitivity(attribute_fn, model, x, c, mask, n=sensitivity_n,
                                       radius=sensitivity_radius,
                                       rng=rng.child(config.name, input_id, c, "sens"))
                    comp = complexity(g, theta=theta)
                except Exception as exc:  # noqa: BLE001 - the report must survive bad records
                    errors.append(f"{key}: {exc}")
                    continue
                records.append(MetricRecord(
                    method=config.name, input_id=input_id, class_id=c,
                    faithfulness=faith.value, sensitivity=sens.value,
                    complexity=comp.value, efficiency_s=seconds,
                    faithfulness_degenerate=faith.degenerate,
                    normalization_degenerate=g.degenerate,
                ))
    return MetricReport(dataset=dataset, records=tuple(records), errors=tuple(errors))
