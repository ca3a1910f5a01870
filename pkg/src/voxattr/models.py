"""Synthetic segmentation models with closed-form gradients.

The model family is deliberately simple but non-trivially coupled: the logit
of class c at voxel i is

    logit(i, c) = nl( w_c[i] * x[i] + coupling_c * nbrmean(x)[i] + b_c )

where nbrmean is the mean over the 6-connected axis neighbourhood (in-bounds
neighbours only) and nl is identity or tanh. The neighbour term makes every
logit depend on adjacent voxels, so attribution methods cannot be validated
against a purely diagonal Jacobian by accident.

Forward passes and gradients are computed in float64; callers that persist or
transmit results downcast at the edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngSpec
from .volume import ClassMask, Dims, LogitField, Volume

# "smooth_saturating" is an alias for tanh: the one smooth, bounded
# activation offered, with derivative 1 - tanh^2 available in closed form.
NONLINEARITIES = ("identity", "tanh", "smooth_saturating")


def _axis_shifts(field: np.ndarray) -> list[np.ndarray]:
    """In-bounds 6-neighbour contributions of ``field`` (grid shape (D,H,W))."""
    out = []
    for axis in range(3):
        for sign in (1, -1):
            shifted = np.zeros_like(field)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if sign == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(None, -1)
            else:
                src[axis] = slice(None, -1)
                dst[axis] = slice(1, None)
            shifted[tuple(dst)] = field[tuple(src)]
            out.append(shifted)
    return out


def neighbor_sum(field: np.ndarray) -> np.ndarray:
    """Sum of each voxel's in-bounds 6-neighbours."""
    total = np.zeros_like(field)
    for contribution in _axis_shifts(field):
        total += contribution
    return total


def neighbor_degree(dims: Dims) -> np.ndarray:
    w, h, d = dims
    ones = np.ones((d, h, w), dtype=np.float64)
    return neighbor_sum(ones)


@dataclass(frozen=True)
class SyntheticModelSpec:
    """Everything needed to reconstruct a model exactly."""

    dims: Dims
    num_classes: int
    seed: int
    nonlinearity: str = "tanh"
    coupling: tuple[float, ...] | float = 0.3
    name: str = "synthetic"

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        coupling = self.coupling
        if isinstance(coupling, (int, float)):
            coupling = (float(coupling),) * self.num_classes
        else:
            coupling = tuple(float(c) for c in coupling)
        if len(coupling) != self.num_classes:
            raise ValueError(f"coupling needs one value per class, got {len(coupling)} for {self.num_classes}")
        object.__setattr__(self, "coupling", coupling)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


class SyntheticModel:
    """Instantiated synthetic model; satisfies the model-handle interface."""

    has_gradient = True

    def __init__(self, spec: SyntheticModelSpec):
        self.spec = spec
        self.dims = spec.dims
        self.num_classes = spec.num_classes
        self.name = spec.name
        w, h, d = spec.dims
        gen = RngSpec(spec.seed).generator()
        # (l, D, H, W) per-class weight grids plus per-class biases.
        self._weights = gen.uniform(-1.0, 1.0, size=(spec.num_classes, d, h, w))
        self._biases = gen.uniform(-0.5, 0.5, size=spec.num_classes)
        self._coupling = np.asarray(spec.coupling, dtype=np.float64)
        degree = neighbor_degree(spec.dims)
        # A 1x1x1 grid has no neighbours; its coupling term is defined as zero.
        self._inv_degree = np.where(degree > 0, 1.0 / np.maximum(degree, 1.0), 0.0)

    def _preactivation(self, x: np.ndarray) -> np.ndarray:
        """(l, D, H, W) pre-nonlinearity scores for grid input x."""
        nbr_mean = neighbor_sum(x) * self._inv_degree
        return (
            self._weights * x[None]
            + self._coupling[:, None, None, None] * nbr_mean[None]
            + self._biases[:, None, None, None]
        )

    def forward(self, vol: Volume) -> LogitField:
        if vol.dims != self.dims:
            raise ValueError(f"volume dims {vol.dims} != model dims {self.dims}")
        s = self._preactivation(vol.data.astype(np.float64))
        logits = s if self.spec.nonlinearity == "identity" else np.tanh(s)
        # (l, D, H, W) -> (D, H, W, l)
        return LogitField(dims=self.dims, num_classes=self.num_classes, data=np.moveaxis(logits, 0, -1))

    def gradient(self, vol: Volume, class_index: int, mask: ClassMask) -> np.ndarray:
        """Flat float64 gradient of sum(logit(:, class_index) * mask) w.r.t. x.

        With t = mask * nl'(s_c), the chain rule gives
        grad[k] = t[k] * w_c[k] + coupling_c * sum_{i in N(k)} t[i] / deg[i];
        the neighbour sum is its own adjoint because adjacency is symmetric.
        """
        if vol.dims != self.dims:
            raise ValueError(f"volume dims {vol.dims} != model dims {self.dims}")
        if mask.dims != self.dims:
            raise ValueError(f"mask dims {mask.dims} != model dims {self.dims}")
        if not 0 <= class_index < self.num_classes:
            raise ValueError(f"class index {class_index} out of range [0, {self.num_classes})")
        x = vol.data.astype(np.float64)
        nbr_mean = neighbor_sum(x) * self._inv_degree
        s = self._weights[class_index] * x + self.spec.coupling[class_index] * nbr_mean + self._biases[class_index]
        if self.spec.nonlinearity == "identity":
            dnl = np.ones_like(s)
        else:
            dnl = 1.0 - np.tanh(s) ** 2
        t = mask.data.astype(np.float64) * dnl
        grad = t * self._weights[class_index] + self.spec.coupling[class_index] * neighbor_sum(t * self._inv_degree)
        return grad.reshape(-1)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def aggregated_score(logits: LogitField, class_index: int, mask: ClassMask) -> float:
    """Scalar proxy for class c: the mask-weighted sum of its logits."""
    if logits.dims != mask.dims:
        raise ValueError(f"logits dims {logits.dims} != mask dims {mask.dims}")
    plane = logits.class_plane(class_index).astype(np.float64)
    return float(np.sum(plane * mask.data))


@dataclass(frozen=True)
class ProxyValue:
    """The scalar being explained, with a flag for the empty-mask degenerate
    case (value 0 by definition, but downstream consumers must know)."""

    class_id: int
    value: float
    empty_mask: bool = False


class GradientUnavailableError(RuntimeError):
    """The model handle cannot compute gradients."""


def proxy_value(model, x: Volume, class_index: int, mask: ClassMask) -> ProxyValue:
    """Mask-aggregated class score of one forward pass."""
    value = aggregated_score(model.forward(x), class_index, mask)
    return ProxyValue(class_id=class_index, value=value, empty_mask=mask.is_empty())


def proxy_gradient(model, x: Volume, class_index: int, mask: ClassMask) -> Volume:
    """Gradient of the mask-aggregated class score, as a volume."""
    if not getattr(model, "has_gradient", True):
        raise GradientUnavailableError(f"model {getattr(model, 'name', '?')!r} exposes no gradient")
    grad = np.asarray(model.gradient(x, class_index, mask), dtype=np.float64)
    return Volume(dims=x.dims, data=grad, spacing=x.spacing)


def finite_difference_gradient(model, x: Volume, class_index: int, mask: ClassMask,
                               h: float = 1e-3) -> Volume:
    """Central-difference gradient of the proxy; 2p forward passes.

    The step default balances truncation against round-off for [0,1]-scaled
    inputs accumulated in float64.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    flat = x.data.reshape(-1).astype(np.float64)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        f_up = aggregated_score(model.forward(Volume(dims=x.dims, data=up.reshape(x.data.shape))),
                                class_index, mask)
        f_dn = aggregated_score(model.forward(Volume(dims=x.dims, data=dn.reshape(x.data.shape))),
                                class_index, mask)
        grad[i] = (f_up - f_dn) / (2.0 * h)
    return Volume(dims=x.dims, data=grad, spacing=x.spacing)


def random_volume(dims: Dims, rng: RngSpec, spacing=None) -> Volume:
    """Uniform [0, 1) float64 test volume."""
    w, h, d = dims
    data = rng.generator().random((d, h, w), dtype=np.float64)
    return Volume(dims=tuple(dims), data=data, spacing=spacing)


def make_default_model(dims: Dims = (8, 8, 8), num_classes: int = 3, seed: int = 7,
                       nonlinearity: str = "tanh") -> SyntheticModel:
    return SyntheticModel(SyntheticModelSpec(dims=tuple(dims), num_classes=num_classes,
                                             seed=seed, nonlinearity=nonlinearity))
