import json

import numpy as np
import pytest

from voxattr.attribution import AttributionField, AttributionMethod
from voxattr.metrics import (
    MethodConfig,
    MetricValue,
    NormalizedAttribution,
    complexity,
    default_method_suite,
    default_subset_size,
    efficiency,
    faithfulness,
    normalize,
    run_benchmark,
    sensitivity,
)
from voxattr.models import random_volume
from voxattr.rng import RngSpec
from voxattr.volume import argmax_masks

from conftest import nonempty_class


def _field(values, dims=(3, 1, 1)):
    return AttributionField(dims=dims, class_id=0, method=AttributionMethod.VG,
                            data=np.asarray(values, dtype=np.float64))


def test_normalize_hand_case():
    g = normalize(_field([-1.0, 0.0, 1.0]))
    assert g.data.tolist() == [0.0, 0.5, 1.0]
    assert not g.degenerate


def test_normalize_constant_flags_degenerate():
    g = normalize(_field([0.7, 0.7, 0.7]))
    assert g.data.tolist() == [0.0, 0.0, 0.0]
    assert g.degenerate


def test_normalized_attribution_rejects_out_of_range():
    with pytest.raises(ValueError):
        NormalizedAttribution(data=np.array([0.0, 1.5]))


def test_metric_value_floats():
    assert float(MetricValue(0.25)) == 0.25


def test_default_subset_size():
    assert default_subset_size(10) == 5
    assert default_subset_size(1) == 1
    # Large volumes cap at the fixed subset budget.
    assert default_subset_size(2 * 224 * 224 + 10) == 224 * 224


def test_faithfulness_exact_additive_attribution_is_one(linear_model, volume_555):
    # Affine score: the drop from zeroing subset S is exactly the sum of
    # g_i x_i over S, so correlating that attribution with drops gives 1.
    logits = linear_model.forward(volume_555)
    c, mask = nonempty_class(argmax_masks(logits))
    from voxattr.attribution import vanilla_gradient

    g = vanilla_gradient(linear_model, volume_555, c, mask).data
    exact = _field(g * volume_555.flat(), dims=(5, 5, 5))
    faith = faithfulness(normalize(exact), linear_model, volume_555, c, mask,
                         n=50, rng=RngSpec(3))
    assert faith.value >= 0.99
    assert not faith.degenerate


def test_faithfulness_negated_attribution_is_minus_one(linear_model, volume_555):
    logits = linear_model.forward(volume_555)
    c, mask = nonempty_class(argmax_masks(logits))
    from voxattr.attribution import vanilla_gradient

    g = vanilla_gradient(linear_model, volume_555, c, mask).data
    negated = _field(-(g * volume_555.flat()), dims=(5, 5, 5))
    faith = faithfulness(normalize(negated), linear_model, volume_555, c, mask,
                         n=50, rng=RngSpec(3))
    assert faith.value <= -0.99


def test_faithfulness_constant_attribution_is_degenerate_zero(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)
    flat = normalize(_field(np.ones(125), dims=(5, 5, 5)))
    faith = faithfulness(flat, smooth_model, volume_555, c, mask, n=10, rng=RngSpec(1))
    assert faith.value == 0.0
    assert faith.degenerate


def test_faithfulness_deterministic_under_fixed_stream(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)
    g = normalize(_field(np.linspace(-1, 1, 125), dims=(5, 5, 5)))
    a = faithfulness(g, smooth_model, volume_555, c, mask, n=10, rng=RngSpec(9, 3))
    b = faithfulness(g, smooth_model, volume_555, c, mask, n=10, rng=RngSpec(9, 3))
    assert a.value == b.value


def test_faithfulness_validation(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)
    g = normalize(_field(np.linspace(0, 1, 125), dims=(5, 5, 5)))
    with pytest.raises(ValueError, match="n must be"):
        faithfulness(g, smooth_model, volume_555, c, mask, n=2)
    with pytest.raises(ValueError, match="subset size"):
        faithfulness(g, smooth_model, volume_555, c, mask, m=300)


def test_sensitivity_vg_on_linear_model_is_zero(linear_model, volume_555):
    # Constant gradient: every probe reproduces the base field exactly.
    logits = linear_model.forward(volume_555)
    c, mask = nonempty_class(argmax_masks(logits))
    config = MethodConfig(AttributionMethod.VG)

    def attribute_fn(m_, x_, c_, mask_, rng_):
        return config.attribute(m_, x_, c_, mask_, rng_)

    sens = sensitivity(attribute_fn, linear_model, volume_555, c, mask, n=3, rng=RngSpec(2))
    assert sens.value == 0.0


def test_sensitivity_positive_on_smooth_model(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)
    config = MethodConfig(AttributionMethod.VG)

    def attribute_fn(m_, x_, c_, mask_, rng_):
        return config.attribute(m_, x_, c_, mask_, rng_)

    sens = sensitivity(attribute_fn, smooth_model, volume_555, c, mask, n=3, rng=RngSpec(2))
    assert sens.value > 0.0
    assert not sens.degenerate


def test_sensitivity_constant_attribution_falls_back_to_absolute(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)

    def constant_fn(m_, x_, c_, mask_, rng_):
        return _field(np.ones(125), dims=(5, 5, 5))

    sens = sensitivity(constant_fn, smooth_model, volume_555, c, mask, n=2, rng=RngSpec(2))
    # Base normalizes to all zeros (norm 0), probes too: absolute distance 0.
    assert sens.value == 0.0
    assert sens.degenerate


def test_sensitivity_validation(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)

    def fn(m_, x_, c_, mask_, rng_):
        return _field(np.ones(125), dims=(5, 5, 5))

    with pytest.raises(ValueError):
        sensitivity(fn, smooth_model, volume_555, c, mask, n=0)
    with pytest.raises(ValueError):
        sensitivity(fn, smooth_model, volume_555, c, mask, radius=0.0)


def test_complexity_hand_case():
    g = NormalizedAttribution(data=np.array([0.0, 0.2, 0.6, 1.0]))
    assert complexity(g, theta=0.1).value == 0.75
    # Threshold is strict: values exactly at theta do not count.
    g2 = NormalizedAttribution(data=np.array([0.1, 0.1, 0.5, 1.0]))
    assert complexity(g2, theta=0.1).value == 0.5


def test_complexity_monotone_in_theta():
    gen = np.random.default_rng(5)
    g = NormalizedAttribution(data=gen.uniform(size=200))
    values = [complexity(g, theta=t).value for t in np.linspace(0.0, 0.95, 20)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_complexity_validation():
    g = NormalizedAttribution(data=np.array([0.5]))
    with pytest.raises(ValueError):
        complexity(g, theta=1.0)
    with pytest.raises(ValueError):
        complexity(g, theta=-0.1)


def test_efficiency_returns_time_and_field(smooth_model, volume_555, predicted):
    _, masks = predicted
    c, mask = nonempty_class(masks)
    config = MethodConfig(AttributionMethod.VG)

    def attribute_fn(m_, x_, c_, mask_, rng_):
        return config.attribute(m_, x_, c_, mask_, rng_)

    seconds, field = efficiency(attribute_fn, smooth_model, volume_555, c, mask, RngSpec(0))
    assert seconds >= 0.0
    assert isinstance(field, AttributionField)


def test_default_method_suite_names():
    names = [c.name for c in default_method_suite()]
    assert names == ["vg", "sg", "ig", "kshap_cubes", "kshap_semantic"]


def _tiny_benchmark(smooth_model, volume_555, seed=0):
    other = random_volume((5, 5, 5), RngSpec(17))
    methods = [MethodConfig(AttributionMethod.VG),
               MethodConfig(AttributionMethod.SG, sg_n=2, sg_sigma=0.1)]
    return run_benchmark(smooth_model, [("a", volume_555), ("b", other)], methods,
                         rng=RngSpec(seed), faithfulness_n=10, sensitivity_n=1)


def test_run_benchmark_record_layout(smooth_model, volume_555):
    report = _tiny_benchmark(smooth_model, volume_555)
    assert not report.errors
    # One record per (method, input, predicted class).
    predicted_count = 0
    for vol in (volume_555, random_volume((5, 5, 5), RngSpec(17))):
        masks = argmax_masks(smooth_model.forward(vol))
        predicted_count += sum(1 for m in masks if not m.is_empty())
    assert len(report.records) == 2 * predicted_count
    methods = {r.method for r in report.records}
    assert methods == {"vg", "sg"}


def test_run_benchmark_deterministic_apart_from_timing(smooth_model, volume_555):
    a = _tiny_benchmark(smooth_model, volume_555, seed=4)
    b = _tiny_benchmark(smooth_model, volume_555, seed=4)
    assert a.to_csv(include_efficiency=False) == b.to_csv(include_efficiency=False)


def test_run_benchmark_errors_do_not_stop_the_run(smooth_model, volume_555):
    # 125 cube regions with a 5-coalition budget is below the solver's
    # minimum, so every record of that config fails and is logged.
    bad = MethodConfig(AttributionMethod.KSHAP_CUBES, name="kshap_tiny",
                       cube_edge=1, n_samples=5)
    good = MethodConfig(AttributionMethod.VG)
    report = run_benchmark(smooth_model, [("a", volume_555)], [bad, good],
                           rng=RngSpec(0), faithfulness_n=10, sensitivity_n=1)
    assert report.errors
    assert all("kshap_tiny" in err for err in report.errors)
    assert {r.method for r in report.records} == {"vg"}


def test_run_benchmark_validation(smooth_model, volume_555):
    with pytest.raises(ValueError):
        run_benchmark(smooth_model, [], [MethodConfig(AttributionMethod.VG)])
    with pytest.raises(ValueError):
        run_benchmark(smooth_model, [("a", volume_555)], [])


def test_report_csv_layout(smooth_model, volume_555):
    report = _tiny_benchmark(smooth_model, volume_555)
    lines = report.to_csv().splitlines()
    assert lines[0] == "method,input_id,class,faithfulness,sensitivity,complexity,efficiency_s"
    assert len(lines) == 1 + len(report.records)
    without = report.to_csv(include_efficiency=False).splitlines()
    assert without[0] == "method,input_id,class,faithfulness,sensitivity,complexity"


def test_report_summary_layout(smooth_model, volume_555):
    report = _tiny_benchmark(smooth_model, volume_555)
    lines = report.summary_csv().splitlines()
    assert lines[0] == ("method,faithfulness_mean,faithfulness_std,sensitivity_mean,"
                        "sensitivity_std,complexity_mean,complexity_std,"
                        "efficiency_s_mean,efficiency_s_std")
    # One row per method, sorted by name.
    assert [line.split(",")[0] for line in lines[1:]] == ["sg", "vg"]


def test_report_aggregate_matches_manual_mean(smooth_model, volume_555):
    report = _tiny_benchmark(smooth_model, volume_555)
    stats = report.aggregate()
    vg_rows = [r for r in report.records if r.method == "vg"]
    manual = float(np.mean([r.faithfulness for r in vg_rows]))
    assert stats["vg"]["faithfulness"][0] == pytest.approx(manual, rel=1e-12)
    manual_std = float(np.std([r.faithfulness for r in vg_rows]))
    assert stats["vg"]["faithfulness"][1] == pytest.approx(manual_std, rel=1e-12)


def test_report_json_shape(smooth_model, volume_555):
    report = _tiny_benchmark(smooth_model, volume_555)
    payload = json.loads(report.to_json())
    assert payload["num_records"] == len(report.records)
    assert set(payload["aggregate"]) == {"vg", "sg"}
    assert set(payload["aggregate"]["vg"]["faithfulness"]) == {"mean", "std"}
