"""RoI-level aggregation of voxel attributions.

The central quantity is mass importance: the share of an attribution field's
L1 mass that falls inside a region of interest. Local matrices collect these
shares for one input (rows = explained classes, columns = RoIs), global
matrices average local ones cell-wise, and the Top-k graph keeps each row's
strongest incoming contributions.

Undefined cells are NaN throughout: a class that was never predicted has no
attribution field, and a field with zero mass (for the chosen sign) has no
meaningful shares. Global averaging skips NaNs and tracks a per-cell support
count instead of guessing a fill value.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .attribution import AttributionField
from .volume import ClassMask, DimsMismatchError, RoISet, RoISource


class SignMode(Enum):
    ABSOLUTE = "absolute"
    POSITIVE_ONLY = "positive_only"
    NEGATIVE_ONLY = "negative_only"


def _signed_mass(values: np.ndarray, sign_mode: SignMode) -> np.ndarray:
    if sign_mode is SignMode.ABSOLUTE:
        return np.abs(values)
    if sign_mode is SignMode.POSITIVE_ONLY:
        return np.maximum(values, 0.0)
    return np.maximum(-values, 0.0)


def roi_importance(e: AttributionField, roi: ClassMask, sign_mode: SignMode = SignMode.ABSOLUTE) -> float:
    """Share of the field's mass (per sign_mode) that lies inside ``roi``.

    The denominator is the same-signed mass over the whole field, so the
    positive and negative shares of one RoI need not sum to the absolute
    share. Zero total mass makes the share undefined and returns NaN.
    """
    if e.dims != roi.dims:
        raise DimsMismatchError(f"attribution dims {e.dims} != roi dims {roi.dims}")
    mass = _signed_mass(e.data, sign_mode)
    total = float(mass.sum())
    if total == 0.0:
        return math.nan
    inside = float((mass * roi.flat()).sum())
    return inside / total


def context_fraction(e: AttributionField, own_mask: ClassMask) -> float:
    """Absolute mass share inside the explained class's own predicted mask.

    One minus this value is the share the model drew from surrounding
    context.
    """
    return roi_importance(e, own_mask, SignMode.ABSOLUTE)


@dataclass(frozen=True)
class ExplanationMatrix:
    """RoI importance shares; rows are explained classes, columns are RoIs."""

    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    values: np.ndarray
    scope: str  # "local" or "global"
    sign_mode: SignMode
    support: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.row_labels), len(self.col_labels)):
            raise ValueError(f"values shape {values.shape} != labels "
                             f"({len(self.row_labels)}, {len(self.col_labels)})")
        if self.scope not in ("local", "global"):
            raise ValueError(f"scope must be local or global, got {self.scope!r}")
        values = np.array(values, copy=True)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_labels", tuple(self.row_labels))
        object.__setattr__(self, "col_labels", tuple(self.col_labels))
        if self.support is not None:
            support = np.array(np.asarray(self.support, dtype=np.int64), copy=True)
            if support.shape != values.shape:
                raise ValueError(f"support shape {support.shape} != values shape {values.shape}")
            support.flags.writeable = False
            object.__setattr__(self, "support", support)

    def cell(self, row: str, col: str) -> float:
        return float(self.values[self.row_labels.index(row), self.col_labels.index(col)])

    def to_csv(self) -> str:
        """Delimited table: row label first, one column per RoI, NaN as empty."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class"] + list(self.col_labels))
        for i, name in enumerate(self.row_labels):
            row = [name]
            for v in self.values[i]:
                row.append("" if math.isnan(v) else repr(float(v)))
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "rows": list(self.row_labels),
            "cols": list(self.col_labels),
            "values": [[None if math.isnan(v) else float(v) for v in row] for row in self.values],
            "support": None if self.support is None else [[int(s) for s in row] for row in self.support],
            "sign_mode": self.sign_mode.value,
            "scope": self.scope,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ExplanationMatrix":
        payload = json.loads(text)
        values = np.array(
            [[math.nan if v is None else float(v) for v in row] for row in payload["values"]],
            dtype=np.float64,
        ).reshape(len(payload["rows"]), len(payload["cols"]))
        support = payload.get("support")
        return cls(
            row_labels=tuple(payload["rows"]),
            col_labels=tuple(payload["cols"]),
            values=values,
            scope=payload["scope"],
            sign_mode=SignMode(payload["sign_mode"]),
            support=None if support is None else np.asarray(support, dtype=np.int64),
        )


def _row_labels_for(fields: Sequence[AttributionField], rois: RoISet,
                    class_names: Sequence[str] | None) -> tuple[str, ...]:
    if class_names is not None:
        return tuple(class_names)
    if rois.source is RoISource.PREDICTED:
        return tuple(rois.names)
    top = max((f.class_id for f in fields), default=-1)
    return tuple(f"class_{c}" for c in range(top + 1))


def local_matrix(fields: Sequence[AttributionField], rois: RoISet,
                 sign_mode: SignMode = SignMode.ABSOLUTE,
                 class_names: Sequence[str] | None = None) -> ExplanationMatrix:
    """Importance matrix for one input.

    Rows cover every class name; classes without a field (not predicted, so
    never attributed) get NaN rows. When ``class_names`` is omitted and the
    RoIs are the predicted masks, the RoI names double as the class names.
    """
    row_labels = _row_labels_for(fields, rois, class_names)
    by_class = {f.class_id: f for f in fields}
    values = np.full((len(row_labels), len(rois)), np.nan, dtype=np.float64)
    for a in range(len(row_labels)):
        e = by_class.get(a)
        if e is None:
            continue
        for b, mask in enumerate(rois.masks):
            values[a, b] = roi_importance(e, mask, sign_mode)
    return ExplanationMatrix(row_labels=row_labels, col_labels=tuple(rois.names),
                             values=values, scope="local", sign_mode=sign_mode)


def global_matrix(locals_: Sequence[ExplanationMatrix]) -> ExplanationMatrix:
    """Cell-wise NaN-skipping mean of local matrices with support counts."""
    if not locals_:
        raise ValueError("need at least one local matrix")
    first = locals_[0]
    for m in locals_[1:]:
        if m.row_labels != first.row_labels or m.col_labels != first.col_labels:
            raise ValueError("local matrices carry different label sets")
        if m.sign_mode is not first.sign_mode:
            raise ValueError("local matrices carry different sign modes")
    for m in locals_:
        if m.scope != "local":
            raise ValueError(f"expected local matrices, got scope {m.scope!r}")
    stack = np.stack([m.values for m in locals_])
    defined = ~np.isnan(stack)
    support = defined.sum(axis=0)
    totals = np.where(defined, stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        means = np.where(support > 0, totals / np.maximum(support, 1), np.nan)
    return ExplanationMatrix(row_labels=first.row_labels, col_labels=first.col_labels,
                             values=means, scope="global", sign_mode=first.sign_mode,
                             support=support)


@dataclass(frozen=True)
class GraphEdge:
    source: str  # RoI column b
    target: str  # explained class row a
    weight: float
    rank: int  # 1-based rank among the target's kept edges


@dataclass(frozen=True)
class ImportanceGraph:
    nodes: tuple[tuple[str, str], ...]  # (name, group)
    edges: tuple[GraphEdge, ...]
    k: int

    def to_dot(self) -> str:
        lines = ["digraph importance {"]
        for name, group in self.nodes:
            lines.append(f'  "{name}" [group="{group}"];')
        for edge in self.edges:
            lines.append(f'  "{edge.source}" -> "{edge.target}" [weight="{edge.weight:.4f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "nodes": [{"group": group, "name": name} for name, group in self.nodes],
            "edges": [
                {"from": e.source, "rank": e.rank, "to": e.target, "weight": e.weight}
                for e in self.edges
            ],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def topk_graph(m: ExplanationMatrix, k: int = 3,
               groups: Mapping[str, str] | None = None) -> ImportanceGraph:
    """Keep each row's k strongest defined cells as in-edges of that row's node.

    Ties break toward the earlier column. Edge weights are the matrix cells
    verbatim. Nodes carry a group tag from ``groups`` (default "other").
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    groups = dict(groups or {})
    names: list[str] = []
    for name in list(m.row_labels) + list(m.col_labels):
        if name not in names:
            names.append(name)
    nodes = tuple((name, groups.get(name, "other")) for name in names)
    edges: list[GraphEdge] = []
    for a, row_name in enumerate(m.row_labels):
        row = m.values[a]
        defined = [b for b in range(row.size) if not math.isnan(row[b])]
        # Stable sort on descending value keeps column order among ties.
        defined.sort(key=lambda b: -row[b])
        for rank, b in enumerate(defined[:k], start=1):
            edges.append(GraphEdge(source=m.col_labels[b], target=row_name,
                                   weight=float(row[b]), rank=rank))
    return ImportanceGraph(nodes=nodes, edges=tuple(edges), k=k)
