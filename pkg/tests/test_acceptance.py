"""End-to-end acceptance checks for the numerical contracts of the toolkit.

One test per contract. Each prints a single verdict line with the measured
margin next to its pinned tolerance, then asserts, so `pytest -v` reads as a
checklist. Time budgets are part of the contract and asserted too.
"""

import io
import json
import os
import shutil
import struct
import time

import numpy as np
import pytest

from oracles import (
    SPEARMAN_HAND_P,
    SPEARMAN_HAND_RHO,
    GameModel,
    brute_force_shapley,
    fd_gradient,
    masked_game,
    max_rel_err,
    random_game,
)
from voxattr import containers, wire
from voxattr.aggregate import global_matrix, local_matrix
from voxattr.attribution import (
    AttributionField,
    AttributionMethod,
    attribute_all_classes,
    integrated_gradients,
    kernelshap,
    partition_cubes,
    smoothgrad,
    vanilla_gradient,
)
from voxattr.cli import main as cli_main
from voxattr.metrics import (
    MethodConfig,
    NormalizedAttribution,
    complexity,
    faithfulness,
    normalize,
    run_benchmark,
    sensitivity,
)
from voxattr.models import (
    SyntheticModel,
    SyntheticModelSpec,
    aggregated_score,
    proxy_gradient,
    random_volume,
)
from voxattr.outliers import FeatureRow, _harmonic_table, if_score, if_train, spearman_test
from voxattr.rng import RngSpec
from voxattr.volume import ClassMask, LogitField, RoISet, argmax_masks


def _verdict(name: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def _predicted_class(model, x):
    masks = argmax_masks(model.forward(x))
    c = max(range(len(masks)), key=lambda k: masks[k].count())
    return c, masks[c]


def test_gradient_matches_central_finite_differences():
    budget = 10.0
    start = time.perf_counter()
    worst = 0.0
    gen = RngSpec(4242).generator()
    for k in range(20):
        edge = int(gen.integers(3, 9))
        num_classes = int(gen.integers(2, 5))
        model = SyntheticModel(SyntheticModelSpec(
            dims=(edge, edge, edge), num_classes=num_classes, seed=1000 + k,
            nonlinearity="tanh", coupling=float(gen.uniform(0.0, 0.5))))
        x = random_volume(model.dims, RngSpec(2000 + k))
        c, mask = _predicted_class(model, x)
        analytic = proxy_gradient(model, x, c, mask).flat()
        _, numeric = fd_gradient(model, x, c, mask, h=1e-3)
        worst = max(worst, max_rel_err(analytic, numeric))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < budget
    assert _verdict("gradient-vs-finite-differences", ok,
                    f"worst rel err {worst:.3e} (tol 1e-4) over 20 triples in {elapsed:.1f}s")


def test_smoothgrad_degenerates_to_vanilla_gradient():
    budget = 5.0
    start = time.perf_counter()
    smooth = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7))
    linear = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7,
                                               nonlinearity="identity"))
    x = random_volume((5, 5, 5), RngSpec(42))

    c, mask = _predicted_class(smooth, x)
    vg = vanilla_gradient(smooth, x, c, mask)
    bitwise = all(
        np.array_equal(smoothgrad(smooth, x, c, mask, n=n, sigma=0.0, rng=RngSpec(n)).data, vg.data)
        for n in (1, 5, 20)
    )

    cl, mask_l = _predicted_class(linear, x)
    vgl = vanilla_gradient(linear, x, cl, mask_l)
    # Constant gradient: the n-draw mean only differs by float summation of
    # identical terms, a few ulps at most.
    worst = max(
        max_rel_err(smoothgrad(linear, x, cl, mask_l, n=20, sigma=s, rng=RngSpec(5)).data, vgl.data)
        for s in (0.05, 0.1, 0.5)
    )
    elapsed = time.perf_counter() - start
    ok = bitwise and worst <= 1e-12 and elapsed < budget
    assert _verdict("smoothgrad-degeneracy", ok,
                    f"sigma=0 bitwise={bitwise}, linear-model worst rel err {worst:.2e} "
                    f"(tol 1e-12) in {elapsed:.1f}s")


def test_integrated_gradients_closed_form_and_completeness():
    budget = 30.0
    start = time.perf_counter()
    linear = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7,
                                               nonlinearity="identity"))
    x = random_volume((5, 5, 5), RngSpec(42))
    c, mask = _predicted_class(linear, x)
    w = vanilla_gradient(linear, x, c, mask).data
    expected = x.flat() * w
    exact_n1 = np.array_equal(integrated_gradients(linear, x, c, mask, n=1).data, expected)
    err_n20 = max_rel_err(integrated_gradients(linear, x, c, mask, n=20).data, expected)

    smooth = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7))
    cs, mask_s = _predicted_class(smooth, x)
    field = integrated_gradients(smooth, x, cs, mask_s, n=512)
    zero = x.with_data(np.zeros_like(x.data))
    span = aggregated_score(smooth.forward(x), cs, mask_s) - aggregated_score(
        smooth.forward(zero), cs, mask_s)
    gap = abs(field.data.sum() - span) / abs(span)
    elapsed = time.perf_counter() - start
    ok = exact_n1 and err_n20 <= 1e-12 and gap <= 0.01 and elapsed < budget
    assert _verdict("integrated-gradients", ok,
                    f"n=1 bitwise={exact_n1}, n=20 rel err {err_n20:.2e} (tol 1e-12), "
                    f"completeness gap {gap:.2%} (tol 1%) in {elapsed:.1f}s")


def test_kernelshap_matches_shapley_oracle():
    budget = 120.0
    start = time.perf_counter()

    worst_region = 0.0
    worst_eff = 0.0
    sizes = [2, 3, 4, 5, 6, 7, 8, 9, 10, 10]
    for k, r in enumerate(sizes):
        game = random_game(r, RngSpec(3000 + k).generator())
        oracle = brute_force_shapley(game, r)
        adapter = GameModel(game, r)
        x, mask = adapter.everything()
        part = partition_cubes(adapter.dims, 1)
        _, est = kernelshap(adapter, x, 0, mask, part, n_samples=2 ** r, ridge_lambda=0.0)
        worst_region = max(worst_region, float(np.abs(est.values - oracle).max()))
        worst_eff = max(worst_eff, abs(est.values.sum() - (est.full_value - est.base_value)))

    model = SyntheticModel(SyntheticModelSpec(dims=(16, 1, 1), num_classes=2, seed=3,
                                              nonlinearity="tanh", coupling=0.25))
    x16 = random_volume((16, 1, 1), RngSpec(60))
    c, mask16 = _predicted_class(model, x16)
    part16 = partition_cubes((16, 1, 1), 1)
    oracle16 = brute_force_shapley(masked_game(model, x16, c, mask16, part16), 16)
    _, sampled = kernelshap(model, x16, c, mask16, part16, n_samples=1000, rng=RngSpec(7))
    sampled_err = float(np.abs(sampled.values - oracle16).max())
    worst_eff = max(worst_eff, abs(sampled.values.sum() - (sampled.full_value - sampled.base_value)))

    elapsed = time.perf_counter() - start
    ok = worst_region <= 1e-6 and worst_eff <= 1e-6 and sampled_err <= 0.05 and elapsed < budget
    assert _verdict("kernelshap-vs-oracle", ok,
                    f"enumeration worst {worst_region:.2e} (tol 1e-6) over 10 games, "
                    f"efficiency gap {worst_eff:.2e} (tol 1e-6), "
                    f"sampled r=16 worst {sampled_err:.3f} (tol 0.05) in {elapsed:.1f}s")


def test_importance_matrix_invariants():
    budget = 30.0
    start = time.perf_counter()
    gen = RngSpec(777).generator()

    worst_row = 0.0
    worst_mass = 0.0
    checked_rows = 0
    for k in range(50):
        edge = int(gen.integers(3, 7))
        num_classes = int(gen.integers(2, 5))
        model = SyntheticModel(SyntheticModelSpec(dims=(edge, edge, edge),
                                                  num_classes=num_classes, seed=5000 + k))
        x = random_volume(model.dims, RngSpec(6000 + k))
        logits = model.forward(x)
        masks = argmax_masks(logits)
        run = attribute_all_classes(model, x, AttributionMethod.VG, masks=list(masks),
                                    logits=logits)
        matrix = local_matrix(run.fields, RoISet.from_predicted(masks))
        for row in matrix.values:
            if np.isnan(row).all():
                continue
            worst_row = max(worst_row, abs(float(row.sum()) - 1.0))
            checked_rows += 1
        for field in run.fields:
            e = field.data
            lhs = float(np.maximum(e, 0).sum() + np.maximum(-e, 0).sum())
            rhs = float(np.abs(e).sum())
            worst_mass = max(worst_mass, abs(lhs - rhs) / max(rhs, 1e-12))

    # Global matrix = arithmetic mean of locals, on a fixed-shape group.
    model = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7))
    locals_ = []
    for k in range(10):
        x = random_volume((5, 5, 5), RngSpec(9000 + k))
        logits = model.forward(x)
        masks = argmax_masks(logits)
        run = attribute_all_classes(model, x, AttributionMethod.VG, masks=list(masks),
                                    logits=logits)
        locals_.append(local_matrix(run.fields, RoISet.from_predicted(masks)))
    g = global_matrix(locals_)
    stack = np.stack([m.values for m in locals_])
    with np.errstate(invalid="ignore"):
        expected = np.nanmean(stack, axis=0)
    both_nan = np.isnan(g.values) & np.isnan(expected)
    mean_gap = float(np.nanmax(np.where(both_nan, 0.0, np.abs(g.values - expected))))

    elapsed = time.perf_counter() - start
    ok = (worst_row <= 1e-6 and worst_mass <= 1e-6 and mean_gap <= 1e-12
          and checked_rows > 0 and elapsed < budget)
    assert _verdict("importance-matrix-invariants", ok,
                    f"worst row-sum gap {worst_row:.2e} over {checked_rows} rows (tol 1e-6), "
                    f"signed-mass gap {worst_mass:.2e} (tol 1e-6), "
                    f"global-vs-mean gap {mean_gap:.2e} in {elapsed:.1f}s")


def test_metric_sanity_on_the_linear_model():
    budget = 60.0
    start = time.perf_counter()
    linear = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7,
                                               nonlinearity="identity"))
    x = random_volume((5, 5, 5), RngSpec(42))
    c, mask = _predicted_class(linear, x)
    w = vanilla_gradient(linear, x, c, mask).data
    exact = AttributionField(dims=(5, 5, 5), class_id=c, method=AttributionMethod.VG,
                             data=w * x.flat())
    negated = AttributionField(dims=(5, 5, 5), class_id=c, method=AttributionMethod.VG,
                               data=-(w * x.flat()))
    faith_pos = faithfulness(normalize(exact), linear, x, c, mask, n=100, rng=RngSpec(3)).value
    faith_neg = faithfulness(normalize(negated), linear, x, c, mask, n=100, rng=RngSpec(3)).value

    config = MethodConfig(AttributionMethod.VG)

    def attribute_fn(m_, x_, c_, mask_, rng_):
        return config.attribute(m_, x_, c_, mask_, rng_)

    sens = sensitivity(attribute_fn, linear, x, c, mask, n=3, rng=RngSpec(2)).value

    grid = np.linspace(0.0, 0.95, 20)
    g = NormalizedAttribution(data=RngSpec(5).generator().uniform(size=400))
    curve = [complexity(g, theta=t).value for t in grid]
    monotone = all(a >= b for a, b in zip(curve, curve[1:]))

    elapsed = time.perf_counter() - start
    ok = (faith_pos >= 0.99 and faith_neg <= -0.99 and sens == 0.0 and monotone
          and elapsed < budget)
    assert _verdict("metric-sanity", ok,
                    f"faithfulness {faith_pos:.4f} (>=0.99) / negated {faith_neg:.4f} (<=-0.99), "
                    f"linear-model sensitivity {sens} (=0), complexity monotone={monotone} "
                    f"in {elapsed:.1f}s")


def test_benchmark_sensitivity_ordering_and_layout():
    budget = 120.0
    start = time.perf_counter()
    model = SyntheticModel(SyntheticModelSpec(dims=(5, 5, 5), num_classes=3, seed=7))
    inputs = [(f"case{k}", random_volume((5, 5, 5), RngSpec(8000 + k))) for k in range(3)]
    # Matched radius: the SG smoothing scale equals the sensitivity probe
    # scale. The probe must be wide enough for the gradient field to curve
    # across it, otherwise both methods see a locally linear field and the
    # comparison measures only sampling noise.
    radius = 0.5
    methods = [MethodConfig(AttributionMethod.VG),
               MethodConfig(AttributionMethod.SG, sg_n=100, sg_sigma=radius)]
    report = run_benchmark(model, inputs, methods, rng=RngSpec(1), faithfulness_n=20,
                           sensitivity_radius=radius)
    stats = report.aggregate()
    sg_sens = stats["sg"]["sensitivity"][0]
    vg_sens = stats["vg"]["sensitivity"][0]

    lines = report.summary_csv().splitlines()
    layout_ok = (lines[0] == "method,faithfulness_mean,faithfulness_std,sensitivity_mean,"
                             "sensitivity_std,complexity_mean,complexity_std,"
                             "efficiency_s_mean,efficiency_s_std"
                 and len(lines) == 3)

    elapsed = time.perf_counter() - start
    ok = sg_sens <= vg_sens and layout_ok and not report.errors and elapsed < budget
    assert _verdict("benchmark-ordering", ok,
                    f"sensitivity SG {sg_sens:.3f} <= VG {vg_sens:.3f} at matched radius, "
                    f"summary layout ok={layout_ok} in {elapsed:.1f}s")


def test_planted_outlier_and_rank_statistics():
    budget = 60.0
    start = time.perf_counter()
    wins = 0
    for seed in range(100):
        gen = RngSpec(seed).generator()
        inliers = gen.normal(size=(100, 17))
        planted = gen.normal(size=17) + 3.5
        rows = [FeatureRow(f"in{i}", 0, r) for i, r in enumerate(inliers)]
        rows.append(FeatureRow("planted", 0, planted))
        forest = if_train(rows, num_trees=50, seed=seed)
        harmonics = _harmonic_table(forest.subsample_size)
        scores = [if_score(forest, row, harmonics) for row in rows]
        if int(np.argmax(scores)) == 100:
            wins += 1

    result = spearman_test([1, 2, 3, 4, 5], [1, 3, 2, 5, 4])
    rho_exact = result.rho == SPEARMAN_HAND_RHO
    p_gap = abs(result.p_value - SPEARMAN_HAND_P)

    elapsed = time.perf_counter() - start
    ok = wins >= 95 and rho_exact and p_gap <= 1e-3 and elapsed < budget
    assert _verdict("outlier-mining", ok,
                    f"planted row top score in {wins}/100 seeds (need >=95), "
                    f"rho==0.8 exact={rho_exact}, p gap {p_gap:.2e} (tol 1e-3) in {elapsed:.1f}s")


def test_round_trips_and_rerun_determinism(tmp_path):
    budget = 30.0
    start = time.perf_counter()

    vol = random_volume((4, 4, 4), RngSpec(1))
    f32 = vol.with_data(vol.data.astype(np.float32).astype(np.float64))
    containers.write_volume(str(tmp_path / "v.a2x"), f32, meta={"k": 1})
    back = containers.read_volume(str(tmp_path / "v.a2x"))
    vol_ok = np.array_equal(back.data, f32.data)

    bits = (RngSpec(2).generator().random((4, 4, 4)) > 0.5).astype(np.uint8)
    containers.write_mask(str(tmp_path / "m.a2x"), ClassMask(dims=(4, 4, 4), data=bits))
    mask_ok = np.array_equal(containers.read_mask(str(tmp_path / "m.a2x")).data, bits)

    logits_data = RngSpec(3).generator().random((4, 4, 4, 3)).astype(np.float32).astype(np.float64)
    containers.write_logits(str(tmp_path / "l.a2x"),
                            LogitField(dims=(4, 4, 4), num_classes=3, data=logits_data))
    logits_ok = np.array_equal(containers.read_logits(str(tmp_path / "l.a2x")).data, logits_data)

    errors_ok = True
    raw = (tmp_path / "v.a2x").read_bytes()
    (tmp_path / "bad_magic.a2x").write_bytes(b"XXXXXXXX" + raw[8:])
    try:
        containers.read_volume(str(tmp_path / "bad_magic.a2x"))
        errors_ok = False
    except containers.BadMagicError:
        pass
    (tmp_path / "cut_header.a2x").write_bytes(raw[:10])
    try:
        containers.read_volume(str(tmp_path / "cut_header.a2x"))
        errors_ok = False
    except containers.TruncatedPayloadError:
        pass
    (tmp_path / "cut_payload.a2x").write_bytes(raw[:-4])
    try:
        containers.read_volume(str(tmp_path / "cut_payload.a2x"))
        errors_ok = False
    except containers.SizeMismatchError:
        pass

    payload = b"frame-payload"
    buf = io.BytesIO()
    wire.write_frame(buf, wire.MsgType.FORWARD, payload)
    buf.seek(0)
    msg_type, back_payload = wire.read_frame(buf)
    frame_ok = msg_type == wire.MsgType.FORWARD and back_payload == payload
    try:
        wire.read_frame(io.BytesIO(b"NOPE" + struct.pack("<BQ", 1, 0)))
        errors_ok = False
    except wire.ModelTransportError:
        pass
    try:
        wire.read_frame(io.BytesIO(buf.getvalue()[:7]))
        errors_ok = False
    except wire.ModelTransportError:
        pass

    cfg = {
        "model": {"kind": "synthetic", "dims": [4, 4, 4], "num_classes": 3, "seed": 7},
        "inputs": {"kind": "synthetic", "count": 2, "seed": 11},
        "method": "sg",
        "params": {"sg_n": 2, "sg_sigma": 0.1},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    timing_files = {"timings.json", "timings.csv", "summary.csv", "report.json"}

    def run_pipeline(tag):
        attr = tmp_path / f"attr_{tag}"
        agg = tmp_path / f"agg_{tag}"
        mined = tmp_path / f"mined_{tag}"
        assert cli_main(["attribute", "--config", str(cfg_path), "--out", str(attr),
                         "--seed", "5"]) == 0
        assert cli_main(["aggregate", "--attr-dir", str(attr), "--out", str(agg),
                         "--graph"]) == 0
        assert cli_main(["outliers", "--train-dir", str(agg), "--eval-dir", str(agg),
                         "--out", str(mined), "--seed", "2", "--trees", "10"]) == 0
        out = {}
        for d in (attr, agg, mined):
            for name in sorted(os.listdir(d)):
                if name in timing_files:
                    continue
                out[f"{d.name.rsplit('_', 1)[0]}/{name}"] = (d / name).read_bytes()
        return out

    cli_ok = run_pipeline("a") == run_pipeline("b")

    elapsed = time.perf_counter() - start
    ok = vol_ok and mask_ok and logits_ok and frame_ok and errors_ok and cli_ok and elapsed < budget
    assert _verdict("round-trips-and-determinism", ok,
                    f"containers bit-exact={vol_ok and mask_ok and logits_ok}, "
                    f"frames bit-exact={frame_ok}, declared errors={errors_ok}, "
                    f"CLI rerun byte-identical={cli_ok} in {elapsed:.1f}s")


# --- served-model conformance (runs only once the server package is built) ---

SERVER_DIST = os.path.join(os.path.dirname(__file__), os.pardir, "modelserver", "dist", "main.js")


def _tiny_weights(num_voxels: int, num_classes: int) -> np.ndarray:
    """Closed form of the server's built-in test model: per-class weights
    ((i*31 + c*17) % 13 - 6.5) / 8 and biases (c - 1) / 4, logits w*x + b."""
    i = np.arange(num_voxels)[None, :]
    c = np.arange(num_classes)[:, None]
    return ((i * 31 + c * 17) % 13 - 6.5) / 8.0


def test_served_model_conformance():
    if not os.path.exists(SERVER_DIST):
        pytest.skip("model server not built")
    if shutil.which("node") is None:
        pytest.skip("node not available")
    budget = 60.0
    start = time.perf_counter()
    model = wire.RemoteModel.spawn(["node", SERVER_DIST, "--tiny-test-model"])
    try:
        probe_ok = (model.dims == (4, 4, 4) and model.num_classes == 3 and model.has_gradient)

        p = 64
        weights = _tiny_weights(p, 3)
        biases = (np.arange(3) - 1.0) / 4.0
        x = random_volume((4, 4, 4), RngSpec(31))
        x32 = x.with_data(x.data.astype(np.float32).astype(np.float64))
        logits = model.forward(x32)
        expected = (weights * x32.flat()[None, :] + biases[:, None]).T.astype(np.float32)
        forward_err = float(np.abs(logits.data.reshape(p, 3) - expected).max())

        masks = argmax_masks(logits)
        c = max(range(3), key=lambda k: masks[k].count())
        served = np.asarray(model.gradient(x32, c, masks[c]), dtype=np.float64)
        h = 1e-2
        flat = x32.flat()
        numeric = np.empty(p)
        for i in range(p):
            up = flat.copy()
            up[i] += h
            dn = flat.copy()
            dn[i] -= h
            f_up = aggregated_score(model.forward(x32.with_data(up.reshape(4, 4, 4))), c, masks[c])
            f_dn = aggregated_score(model.forward(x32.with_data(dn.reshape(4, 4, 4))), c, masks[c])
            numeric[i] = (f_up - f_dn) / (2 * h)
        grad_err = max_rel_err(served, numeric, floor=1e-4)
    finally:
        model.close()

    elapsed = time.perf_counter() - start
    ok = probe_ok and forward_err <= 1e-6 and grad_err <= 1e-3 and elapsed < budget
    assert _verdict("served-model-conformance", ok,
                    f"probe ok={probe_ok}, forward err {forward_err:.2e} (tol 1e-6), "
                    f"gradient rel err {grad_err:.2e} (tol 1e-3) in {elapsed:.1f}s")
