"""Outlier mining on RoI-importance rows.

Each explained class contributes one feature row per input: its row of the
local explanation matrix. A per-class Isolation Forest learns what normal
rows look like; inputs whose rows isolate quickly get anomaly scores near 1.
When segmentation quality (Dice) is known, Spearman rank tests quantify how
well the anomaly score predicts bad segmentations.

The forest is the classic formulation: random trees over subsamples, uniform
split feature and split value, path lengths corrected at leaves by the
average unsuccessful-search depth c(m) = 2*H(m-1) - 2*(m-1)/m with exact
harmonic numbers, anomaly score 2^(-E[h]/c(subsample)).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .aggregate import ExplanationMatrix
from .rng import RngSpec, fnv1a64
from .volume import ClassMask, DimsMismatchError

IF_DEFAULT_TREES = 100
IF_DEFAULT_SUBSAMPLE = 256


@dataclass(frozen=True)
class FeatureRow:
    input_id: str
    class_id: int | str
    features: np.ndarray

    def __post_init__(self):
        arr = np.array(np.asarray(self.features, dtype=np.float64).reshape(-1), copy=True)
        if np.isinf(arr).any():
            raise ValueError("features must be finite or NaN")
        arr.flags.writeable = False
        object.__setattr__(self, "features", arr)

    def all_nan(self) -> bool:
        return bool(np.isnan(self.features).all())


def _harmonic_table(n: int) -> np.ndarray:
    table = np.zeros(n + 1, dtype=np.float64)
    for k in range(1, n + 1):
        table[k] = table[k - 1] + 1.0 / k
    return table


def average_path_length(m: int, harmonics: np.ndarray) -> float:
    """Expected unsuccessful-search depth in a BST of m points."""
    if m <= 1:
        return 0.0
    if m == 2:
        return 1.0
    return 2.0 * harmonics[m - 1] - 2.0 * (m - 1) / m


@dataclass(frozen=True)
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    size: int = 0  # leaf only


def _grow_tree(data: np.ndarray, depth: int, max_depth: int, gen: np.random.Generator) -> _TreeNode:
    n = data.shape[0]
    if n <= 1 or depth >= max_depth:
        return _TreeNode(size=n)
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    splittable = np.flatnonzero(hi > lo)
    if splittable.size == 0:
        return _TreeNode(size=n)
    feature = int(splittable[gen.integers(splittable.size)])
    threshold = float(gen.uniform(lo[feature], hi[feature]))
    goes_left = data[:, feature] < threshold
    if not goes_left.any() or goes_left.all():
        return _TreeNode(size=n)
    return _TreeNode(
        feature=feature,
        threshold=threshold,
        left=_grow_tree(data[goes_left], depth + 1, max_depth, gen),
        right=_grow_tree(data[~goes_left], depth + 1, max_depth, gen),
    )


def _path_length(node: _TreeNode, row: np.ndarray, harmonics: np.ndarray, depth: int = 0) -> float:
    while node.left is not None:
        node = node.left if row[node.feature] < node.threshold else node.right  # type: ignore[assignment]
        depth += 1
    return depth + average_path_length(node.size, harmonics)


@dataclass(frozen=True)
class IsolationForestModel:
    trees: tuple[_TreeNode, ...]
    num_trees: int
    subsample_size: int
    dim: int
    seed: int
    feature_means: np.ndarray
    excluded_rows: int

    def __post_init__(self):
        means = np.array(np.asarray(self.feature_means, dtype=np.float64), copy=True)
        means.flags.writeable = False
        object.__setattr__(self, "feature_means", means)


def _impute(features: np.ndarray, means: np.ndarray) -> np.ndarray:
    out = features.astype(np.float64, copy=True)
    missing = np.isnan(out)
    out[missing] = means[missing]
    return out


def if_train(rows: Sequence[FeatureRow], num_trees: int = IF_DEFAULT_TREES,
             subsample_size: int = IF_DEFAULT_SUBSAMPLE, seed: int = 0) -> IsolationForestModel:
    """Train an Isolation Forest on the defined feature rows.

    All-NaN rows are dropped (count recorded on the model); remaining NaN
    cells are imputed with per-feature training means. A feature column with
    no defined value at all cannot be imputed and is an error.
    """
    valid = [row for row in rows if not row.all_nan()]
    excluded = len(rows) - len(valid)
    if len(valid) < 2:
        raise ValueError(f"need at least 2 usable rows, got {len(valid)}")
    dims = {row.features.size for row in valid}
    if len(dims) != 1:
        raise ValueError(f"feature rows carry mixed dimensions: {sorted(dims)}")
    dim = dims.pop()
    data = np.stack([row.features for row in valid])
    defined = ~np.isnan(data)
    empty_cols = np.flatnonzero(~defined.any(axis=0))
    if empty_cols.size:
        raise ValueError(f"feature column(s) {empty_cols.tolist()} are NaN in every training row")
    means = np.where(defined, data, 0.0).sum(axis=0) / defined.sum(axis=0)
    filled = np.where(defined, data, means)

    n = filled.shape[0]
    actual_subsample = min(subsample_size, n)
    max_depth = math.ceil(math.log2(actual_subsample)) if actual_subsample > 1 else 0
    root = RngSpec(seed)
    trees = []
    for t in range(num_trees):
        gen = root.child("tree", t).generator()
        idx = gen.choice(n, size=actual_subsample, replace=False)
        trees.append(_grow_tree(filled[idx], 0, max_depth, gen))
    return IsolationForestModel(trees=tuple(trees), num_trees=num_trees,
                                subsample_size=actual_subsample, dim=dim, seed=seed,
                                feature_means=means, excluded_rows=excluded)


def if_score(model: IsolationForestModel, row: FeatureRow,
              harmonics: np.ndarray | None = None) -> float:
    """Anomaly score in (0, 1]; higher means easier to isolate."""
    if row.features.size != model.dim:
        raise ValueError(f"row has {row.features.size} features, model expects {model.dim}")
    if harmonics is None:
        harmonics = _harmonic_table(model.subsample_size)
    features = _impute(row.features, model.feature_means)
    mean_path = sum(_path_length(tree, features, harmonics) for tree in model.trees) / len(model.trees)
    return float(2.0 ** (-mean_path / average_path_length(model.subsample_size, harmonics)))


def dice(pred: ClassMask, truth: ClassMask) -> float:
    """Dice similarity 2|A&B|/(|A|+|B|); two empty masks agree perfectly (1.0)."""
    if pred.dims != truth.dims:
        raise DimsMismatchError(f"mask dims differ: {pred.dims} vs {truth.dims}")
    a = pred.count()
    b = truth.count()
    if a + b == 0:
        return 1.0
    overlap = int((pred.data & truth.data).sum())
    return 2.0 * overlap / (a + b)


@dataclass(frozen=True)
class RankTestResult:
    rho: float
    p_value: float
    n: int

    def is_defined(self) -> bool:
        return not math.isnan(self.rho)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        # Tied block [i, j] shares the mean of ranks i+1 .. j+1.
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            return h
    raise RuntimeError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to about 1e-10 absolute."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


def spearman_test(a: Sequence[float], b: Sequence[float]) -> RankTestResult:
    """Spearman rank correlation with a two-sided t-approximated p-value.

    Ties get average ranks. A constant series has no rank ordering, so the
    result is NaN/NaN with the same n. |rho| = 1 pins the p-value to 0.
    """
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.size != bv.size:
        raise ValueError(f"length mismatch: {av.size} vs {bv.size}")
    n = int(av.size)
    if n < 3:
        raise ValueError(f"need at least 3 pairs, got {n}")
    ra = _average_ranks(av)
    rb = _average_ranks(bv)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    ssa = float((ra * ra).sum())
    ssb = float((rb * rb).sum())
    if ssa == 0.0 or ssb == 0.0:
        return RankTestResult(rho=math.nan, p_value=math.nan, n=n)
    # One sqrt of the product, not a product of sqrts: rank sums are exact
    # integers (or .5 halves), so rationals like 8/10 come out bit-exact.
    rho = float((ra * rb).sum() / math.sqrt(ssa * ssb))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return RankTestResult(rho=rho, p_value=0.0, n=n)
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return RankTestResult(rho=rho, p_value=student_t_two_sided_p(t, n - 2), n=n)


@dataclass(frozen=True)
class ScoreRecord:
    input_id: str
    class_label: str
    anomaly_score: float
    dice: float | None = None


@dataclass(frozen=True)
class OutlierResult:
    scores: tuple[ScoreRecord, ...]
    rank_tests: tuple[tuple[str, RankTestResult], ...]
    averaged_test: RankTestResult | None
    failures: tuple[str, ...] = field(default_factory=tuple)

    def score_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        with_dice = any(r.dice is not None for r in self.scores)
        header = ["input_id", "class", "anomaly_score"]
        if with_dice:
            header.append("dice")
        writer.writerow(header)
        for r in self.scores:
            row = [r.input_id, r.class_label, repr(r.anomaly_score)]
            if with_dice:
                row.append("" if r.dice is None else repr(r.dice))
            writer.writerow(row)
        return buf.getvalue()

    def rank_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "p_value", "spearman_correlation"])
        for label, result in self.rank_tests:
            writer.writerow([label, repr(result.p_value), repr(result.rho)])
        if self.averaged_test is not None:
            writer.writerow(["averaged", repr(self.averaged_test.p_value), repr(self.averaged_test.rho)])
        return buf.getvalue()


def _matrix_rows(pairs: Sequence[tuple[str, ExplanationMatrix]], class_label: str) -> list[FeatureRow]:
    rows = []
    for input_id, matrix in pairs:
        a = matrix.row_labels.index(class_label)
        rows.append(FeatureRow(input_id=input_id, class_id=class_label, features=matrix.values[a]))
    return rows


def outlier_pipeline(train: Sequence[tuple[str, ExplanationMatrix]],
                     eval_: Sequence[tuple[str, ExplanationMatrix]],
                     dice_scores: Mapping[tuple[str, str], float] | None = None,
                     num_trees: int = IF_DEFAULT_TREES,
                     subsample_size: int = IF_DEFAULT_SUBSAMPLE,
                     seed: int = 0) -> OutlierResult:
    """Train one forest per class on train-set rows, score the eval set.

    With ``dice_scores`` (keyed by (input_id, class label)) the result also
    carries a per-class Spearman table between anomaly and Dice scores plus
    one test on per-input averages. Per-class failures (too few usable rows)
    are recorded and skipped.
    """
    if not train or not eval_:
        raise ValueError("need at least one training and one evaluation matrix")
    ref = train[0][1]
    for input_id, matrix in list(train) + list(eval_):
        if matrix.row_labels != ref.row_labels or matrix.col_labels != ref.col_labels:
            raise ValueError(f"matrix for {input_id!r} carries a different label set")

    scores: list[ScoreRecord] = []
    rank_tests: list[tuple[str, RankTestResult]] = []
    failures: list[str] = []
    per_input_scores: dict[str, list[float]] = {}
    per_input_dice: dict[str, list[float]] = {}

    for class_label in ref.row_labels:
        train_rows = _matrix_rows(train, class_label)
        eval_rows = _matrix_rows(eval_, class_label)
        try:
            model = if_train(train_rows, num_trees=num_trees,
                             subsample_size=subsample_size,
                             seed=fnv1a64(f"{seed}/class/{class_label}"))
        except ValueError as exc:
            failures.append(f"{class_label}: {exc}")
            continue
        harmonics = _harmonic_table(model.subsample_size)
        class_scores: list[float] = []
        class_dice: list[float] = []
        for row in eval_rows:
            if row.all_nan():
                continue
            s = if_score(model, row, harmonics)
            d = None if dice_scores is None else dice_scores.get((row.input_id, class_label))
            scores.append(ScoreRecord(input_id=row.input_id, class_label=class_label,
                                      anomaly_score=s, dice=d))
            per_input_scores.setdefault(row.input_id, []).append(s)
            if d is not None:
                class_scores.append(s)
                class_dice.append(d)
                per_input_dice.setdefault(row.input_id, []).append(d)
        if dice_scores is not None:
            if len(class_scores) >= 3:
                rank_tests.append((class_label, spearman_test(class_scores, class_dice)))
            else:
                failures.append(f"{class_label}: only {len(class_scores)} scored pairs, rank test needs 3")

    averaged: RankTestResult | None = None
    if dice_scores is not None:
        ids = [i for i in per_input_dice if i in per_input_scores]
        if len(ids) >= 3:
            mean_scores = [float(np.mean(per_input_scores[i])) for i in ids]
            mean_dice = [float(np.mean(per_input_dice[i])) for i in ids]
            averaged = spearman_test(mean_scores, mean_dice)
    return OutlierResult(scores=tuple(scores), rank_tests=tuple(rank_tests),
                         averaged_test=averaged, failures=tuple(failures))
