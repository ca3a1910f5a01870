"""Voxel attribution methods for masked class scores.

All methods explain the same scalar: the mask-aggregated logit sum of one
class. Gradient methods (vanilla, smoothed, path-integrated) return per-voxel
values directly; KernelSHAP explains supervoxel regions and broadcasts each
region value, unscaled, to its member voxels.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .models import aggregated_score
from .rng import RngSpec
from .volume import ClassMask, Dims, LogitField, Volume

SG_DEFAULT_N = 20
SG_DEFAULT_SIGMA_FRACTION = 0.1
IG_DEFAULT_N = 20
KSHAP_DEFAULT_LAMBDA = 1e-6
KSHAP_CUBES_DEFAULT_SAMPLES = 1000
KSHAP_SEMANTIC_DEFAULT_SAMPLES = 200
KSHAP_ANCHOR_WEIGHT = 1e6


class AttributionMethod(Enum):
    VG = "vg"
    SG = "sg"
    IG = "ig"
    KSHAP_CUBES = "kshap_cubes"
    KSHAP_SEMANTIC = "kshap_semantic"


class SingularSystemError(RuntimeError):
    """The KernelSHAP regression system is numerically singular."""


@dataclass(frozen=True)
class AttributionField:
    """Per-voxel attribution of one class score; ``data`` is flat, length p."""

    dims: Dims
    class_id: int
    method: AttributionMethod
    data: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        w, h, d = self.dims
        arr = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if arr.size != w * h * d:
            raise ValueError(f"attribution has {arr.size} values, dims imply {w * h * d}")
        if not np.isfinite(arr).all():
            idx = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise ValueError(f"non-finite attribution at voxel {idx}")
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def grid(self) -> np.ndarray:
        w, h, d = self.dims
        return self.data.reshape((d, h, w))


@dataclass(frozen=True)
class SupervoxelPartition:
    """Assignment of every voxel to one of ``num_regions`` contiguous ids."""

    dims: Dims
    labels: np.ndarray
    num_regions: int
    scheme: str
    region_classes: tuple[int, ...] | None = None

    def __post_init__(self):
        w, h, d = self.dims
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size != w * h * d:
            raise ValueError(f"labels has {labels.size} entries, dims imply {w * h * d}")
        present = np.unique(labels)
        if present[0] != 0 or present[-1] != self.num_regions - 1 or present.size != self.num_regions:
            raise ValueError("labels must use every region id in [0, num_regions) at least once")
        labels = np.array(labels, copy=True)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class ShapleyEstimate:
    values: np.ndarray
    num_samples: int
    base_value: float
    full_value: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise ValueError("non-finite Shapley value")
        values = np.array(values, copy=True)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def vanilla_gradient(model, x: Volume, c: int, mask: ClassMask) -> AttributionField:
    grad = model.gradient(x, c, mask)
    return AttributionField(dims=x.dims, class_id=c, method=AttributionMethod.VG, data=grad)


def default_sg_sigma(x: Volume) -> float:
    lo = float(x.data.min())
    hi = float(x.data.max())
    return SG_DEFAULT_SIGMA_FRACTION * (hi - lo)


def smoothgrad(model, x: Volume, c: int, mask: ClassMask, n: int = SG_DEFAULT_N,
               sigma: float | None = None, rng: RngSpec = RngSpec(0)) -> AttributionField:
    """Mean gradient over n Gaussian perturbations of x (noise scale sigma).

    sigma defaults to a tenth of the volume's value range. Noise is not
    clamped back into the volume's range.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if sigma is None:
        sigma = default_sg_sigma(x)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    meta = {"n": n, "sigma": sigma, "seed": rng.seed, "stream_id": rng.stream_id}
    if sigma == 0.0:
        # Zero noise degenerates to the plain gradient; return it bit-for-bit
        # rather than averaging n identical fields.
        grad = model.gradient(x, c, mask)
        return AttributionField(dims=x.dims, class_id=c, method=AttributionMethod.SG, data=grad, meta=meta)
    gen = rng.generator()
    base = x.data.astype(np.float64)
    total = np.zeros(x.num_voxels, dtype=np.float64)
    for _ in range(n):
        noisy = base + gen.normal(0.0, sigma, size=base.shape)
        total += model.gradient(Volume(dims=x.dims, data=noisy, spacing=x.spacing), c, mask)
    return AttributionField(dims=x.dims, class_id=c, method=AttributionMethod.SG, data=total / n, meta=meta)


def integrated_gradients(model, x: Volume, c: int, mask: ClassMask, n: int = IG_DEFAULT_N,
                         baseline: Volume | None = None) -> AttributionField:
    """Right Riemann sum of gradients along the straight path baseline -> x,
    scaled by (x - baseline) / n. Baseline defaults to the zero volume.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    base = np.zeros_like(x.data, dtype=np.float64) if baseline is None else baseline.data.astype(np.float64)
    if baseline is not None and baseline.dims != x.dims:
        raise ValueError(f"baseline dims {baseline.dims} != volume dims {x.dims}")
    target = x.data.astype(np.float64)
    delta = target - base
    total = np.zeros(x.num_voxels, dtype=np.float64)
    for i in range(1, n + 1):
        point = base + (i / n) * delta
        total += model.gradient(Volume(dims=x.dims, data=point, spacing=x.spacing), c, mask)
    data = delta.reshape(-1) / n * total
    meta = {"n": n, "baseline": "zero" if baseline is None else "custom"}
    return AttributionField(dims=x.dims, class_id=c, method=AttributionMethod.IG, data=data, meta=meta)


def partition_cubes(dims: Dims, cube_edge: int) -> SupervoxelPartition:
    """Axis-aligned cube partition; boundary cubes shrink when dims do not divide."""
    if cube_edge < 1:
        raise ValueError(f"cube_edge must be >= 1, got {cube_edge}")
    w, h, d = dims
    nx = -(-w // cube_edge)
    ny = -(-h // cube_edge)
    nz = -(-d // cube_edge)
    zs, ys, xs = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    # Cube ids count x-fastest, matching the voxel order convention.
    labels = (xs // cube_edge) + nx * ((ys // cube_edge) + ny * (zs // cube_edge))
    return SupervoxelPartition(dims=dims, labels=labels.reshape(-1), num_regions=nx * ny * nz, scheme="cubes")


def partition_semantic(logits: LogitField) -> SupervoxelPartition:
    """One region per class present in the argmax prediction.

    Absent classes are compacted away so region ids stay dense;
    region_classes maps region id back to the class it represents.
    """
    winner = np.argmax(logits.data, axis=-1).reshape(-1)
    present = np.unique(winner)
    remap = np.full(logits.num_classes, -1, dtype=np.int64)
    remap[present] = np.arange(present.size)
    return SupervoxelPartition(
        dims=logits.dims,
        labels=remap[winner],
        num_regions=int(present.size),
        scheme="semantic",
        region_classes=tuple(int(c) for c in present),
    )


def _shapley_kernel_size_mass(r: int) -> np.ndarray:
    """Total kernel weight of each coalition size s in 1..r-1: (r-1)/(s(r-s))."""
    sizes = np.arange(1, r)
    return (r - 1) / (sizes * (r - sizes))


def _allocate_by_size(r: int, budget: int) -> np.ndarray:
    """Split ``budget`` coalitions across sizes 1..r-1 by kernel mass.

    Largest-remainder rounding, capped at the number of distinct subsets per
    size; overflow is redistributed over the uncapped sizes.
    """
    mass = _shapley_kernel_size_mass(r)
    caps = np.array([math.comb(r, s) for s in range(1, r)], dtype=np.int64)
    counts = np.zeros(r - 1, dtype=np.int64)
    remaining = budget
    active = np.ones(r - 1, dtype=bool)
    while remaining > 0 and active.any():
        share = mass * active
        quota = remaining * share / share.sum()
        floors = np.floor(quota).astype(np.int64)
        leftover = remaining - int(floors.sum())
        order = np.argsort(-(quota - floors), kind="stable")
        extra = np.zeros(r - 1, dtype=np.int64)
        extra[order[:leftover]] = 1
        proposal = counts + floors + extra
        counts = np.minimum(proposal, caps)
        remaining = int(np.maximum(proposal - caps, 0).sum())
        active = counts < caps
    return counts


def _sample_coalitions(r: int, n_samples: int, gen: np.random.Generator) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Distinct-subset coalition sample with per-size weight mass preserved.

    Each coalition of size s gets weight mass(s) / n_s so the total weight of
    a size class equals its exact Shapley kernel mass regardless of how many
    subsets were drawn.
    """
    counts = _allocate_by_size(r, n_samples)
    mass = _shapley_kernel_size_mass(r)
    coalitions: list[tuple[int, ...]] = []
    weights: list[float] = []
    for s_idx, n_s in enumerate(counts):
        if n_s == 0:
            continue
        s = s_idx + 1
        total = math.comb(r, s)
        chosen: set[tuple[int, ...]] = set()
        if n_s == total:
            chosen = {tuple(combo) for combo in itertools.combinations(range(r), s)}
        else:
            while len(chosen) < n_s:
                pick = tuple(sorted(gen.choice(r, size=s, replace=False).tolist()))
                chosen.add(pick)
        w_each = mass[s_idx] / n_s
        for combo in sorted(chosen):
            coalitions.append(combo)
            weights.append(w_each)
    return coalitions, np.asarray(weights, dtype=np.float64)


def _enumerate_coalitions(r: int) -> tuple[list[tuple[int, ...]], np.ndarray]:
    coalitions: list[tuple[int, ...]] = []
    weights: list[float] = []
    for s in range(1, r):
        pi = (r - 1) / (math.comb(r, s) * s * (r - s))
        for combo in itertools.combinations(range(r), s):
            coalitions.append(combo)
            weights.append(pi)
    return coalitions, np.asarray(weights, dtype=np.float64)


def _masked_input(x: Volume, partition: SupervoxelPartition, keep: np.ndarray) -> Volume:
    """Input with every voxel of the dropped regions replaced by zero."""
    keep_voxel = keep[partition.labels]
    flat = x.data.reshape(-1) * keep_voxel
    return Volume(dims=x.dims, data=flat.reshape(x.data.shape), spacing=x.spacing)


def _solve_anchored_wls(z: np.ndarray, weights: np.ndarray, values: np.ndarray,
                        base_value: float, full_value: float, ridge_lambda: float) -> np.ndarray:
    """Weighted ridge regression with the empty and full coalitions exact.

    The two anchor rows carry the infinite-weight limit of the kernel:
    the intercept is pinned to the base value and the coefficients sum to
    full - base. Eliminating the intercept and the last coefficient under
    those constraints leaves an (r-1)-variable system; the anchors then hold
    to machine precision instead of 1/weight.
    """
    n, r = z.shape
    span = full_value - base_value
    if r == 1:
        return np.array([span], dtype=np.float64)
    # phi_last = span - sum(phi_others); substitute into the design.
    a = z[:, :-1] - z[:, -1:]
    t = values - base_value - z[:, -1] * span
    aw = a * weights[:, None]
    g = a.T @ aw
    rhs = a.T @ (weights * t)
    if ridge_lambda > 0:
        # Penalty lambda * ||phi||^2 over all r coefficients, with phi_last
        # substituted, adds lambda * (I + 11^T) and lambda * span * 1.
        g = g + ridge_lambda * (np.eye(r - 1) + np.ones((r - 1, r - 1)))
        rhs = rhs + ridge_lambda * span
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystemError(f"coalition system is singular (condition estimate {cond:.3e})")
    head = np.linalg.solve(g, rhs)
    return np.concatenate([head, [span - head.sum()]])


def kernelshap(model, x: Volume, c: int, mask: ClassMask, partition: SupervoxelPartition,
               n_samples: int, ridge_lambda: float = KSHAP_DEFAULT_LAMBDA,
               rng: RngSpec = RngSpec(0)) -> tuple[AttributionField, ShapleyEstimate]:
    """Supervoxel Shapley values by weighted ridge regression over coalitions.

    Coalition budgets covering every subset switch to exact enumeration.
    The all-zeros and all-ones coalitions are always present (anchor weight
    1e6) and the solver additionally enforces them exactly, so the estimate
    satisfies efficiency: sum(values) = full_value - base_value.
    """
    r = partition.num_regions
    if partition.dims != x.dims:
        raise ValueError(f"partition dims {partition.dims} != volume dims {x.dims}")
    if r < 1:
        raise ValueError("partition has no regions")

    base_value = aggregated_score(model.forward(_masked_input(x, partition, np.zeros(r))), c, mask)
    full_value = aggregated_score(model.forward(x), c, mask)
    scheme = AttributionMethod.KSHAP_CUBES if partition.scheme == "cubes" else AttributionMethod.KSHAP_SEMANTIC

    if r == 1:
        values = np.array([full_value - base_value])
        estimate = ShapleyEstimate(values=values, num_samples=2, base_value=base_value, full_value=full_value)
        field_data = values[partition.labels]
        meta = {"n_samples": 2, "ridge_lambda": ridge_lambda, "num_regions": 1, "scheme": partition.scheme}
        return AttributionField(dims=x.dims, class_id=c, method=scheme, data=field_data, meta=meta), estimate

    full_budget = 2 ** r - 2 if r <= 62 else None
    enumerate_all = full_budget is not None and n_samples >= full_budget
    if enumerate_all:
        coalitions, weights = _enumerate_coalitions(r)
    else:
        if n_samples < r + 2:
            raise ValueError(f"n_samples must be >= r + 2 = {r + 2} (or cover all 2^r coalitions), got {n_samples}")
        coalitions, weights = _sample_coalitions(r, n_samples, rng.generator())

    z = np.zeros((len(coalitions) + 2, r), dtype=np.float64)
    for row, combo in enumerate(coalitions):
        z[row, list(combo)] = 1.0
    z[-2, :] = 0.0
    z[-1, :] = 1.0
    weights = np.concatenate([weights, [KSHAP_ANCHOR_WEIGHT, KSHAP_ANCHOR_WEIGHT]])

    values = np.empty(len(coalitions) + 2, dtype=np.float64)
    for row, combo in enumerate(coalitions):
        keep = np.zeros(r)
        keep[list(combo)] = 1.0
        values[row] = aggregated_score(model.forward(_masked_input(x, partition, keep)), c, mask)
    values[-2] = base_value
    values[-1] = full_value

    phi = _solve_anchored_wls(z, weights, values, base_value, full_value, ridge_lambda)
    estimate = ShapleyEstimate(values=phi, num_samples=len(coalitions) + 2,
                               base_value=base_value, full_value=full_value)
    meta = {
        "n_samples": len(coalitions) + 2,
        "ridge_lambda": ridge_lambda,
        "num_regions": r,
        "scheme": partition.scheme,
        "enumerated": enumerate_all,
        "seed": rng.seed,
        "stream_id": rng.stream_id,
    }
    field_data = phi[partition.labels]
    return AttributionField(dims=x.dims, class_id=c, method=scheme, data=field_data, meta=meta), estimate


@dataclass(frozen=True)
class AttributionRun:
    """attribute_all_classes result: fields for predicted classes, skip notes."""

    fields: tuple[AttributionField, ...]
    skipped: tuple[int, ...]


def attribute_all_classes(model, x: Volume, method: AttributionMethod,
                          rng: RngSpec = RngSpec(0), *, masks: list[ClassMask] | None = None,
                          logits: LogitField | None = None,
                          sg_n: int = SG_DEFAULT_N, sg_sigma: float | None = None,
                          ig_n: int = IG_DEFAULT_N,
                          cube_edge: int = 4, n_samples: int | None = None,
                          ridge_lambda: float = KSHAP_DEFAULT_LAMBDA) -> AttributionRun:
    """One attribution field per class with a non-empty predicted mask.

    Classes whose predicted mask is empty are skipped and listed in the
    result. Randomized methods draw from a per-class child stream of ``rng``
    so adding or removing classes never shifts another class's draws.
    """
    from .volume import argmax_masks

    if logits is None:
        logits = model.forward(x)
    if masks is None:
        masks = argmax_masks(logits)

    fields: list[AttributionField] = []
    skipped: list[int] = []
    for c, mask in enumerate(masks):
        if mask.is_empty():
            skipped.append(c)
            continue
        class_rng = rng.child("class", c)
        if method is AttributionMethod.VG:
            fields.append(vanilla_gradient(model, x, c, mask))
        elif method is AttributionMethod.SG:
            fields.append(smoothgrad(model, x, c, mask, n=sg_n, sigma=sg_sigma, rng=class_rng))
        elif method is AttributionMethod.IG:
            fields.append(integrated_gradients(model, x, c, mask, n=ig_n))
        elif method is AttributionMethod.KSHAP_CUBES:
            partition = partition_cubes(x.dims, cube_edge)
            budget = KSHAP_CUBES_DEFAULT_SAMPLES if n_samples is None else n_samples
            fields.append(kernelshap(model, x, c, mask, partition, budget, ridge_lambda, class_rng)[0])
        elif method is AttributionMethod.KSHAP_SEMANTIC:
            partition = partition_semantic(logits)
            budget = KSHAP_SEMANTIC_DEFAULT_SAMPLES if n_samples is None else n_samples
            fields.append(kernelshap(model, x, c, mask, partition, budget, ridge_lambda, class_rng)[0])
        else:  # pragma: no cover
            raise ValueError(f"unknown method {method!r}")
    return AttributionRun(fields=tuple(fields), skipped=tuple(skipped))
