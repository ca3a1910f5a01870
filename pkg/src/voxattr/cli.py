"""Batch command-line driver.

Subcommands: attribute (voxel attributions to container files), aggregate
(importance matrices and the Top-k graph from an attribute run), benchmark
(metric report over a method suite), outliers (per-class forests over saved
matrices), probe (handshake check against a model server).

Configuration comes from a JSON file (--config); the flags --seed, --out,
--method, --classes, and --jobs override it. Every run derives all draws from
one root seed, split per (command, input id, class) through named child
streams, so reruns with the same config and seed write the same bytes. The
only exception is measured wall-clock time, which is confined to dedicated
timing artifacts (timings.json, timings.csv, summary.csv, report.json)
rather than mixed into the deterministic ones.

Exit codes: 0 success, 1 configuration error, 2 model or transport error,
3 data inconsistency. Fatal errors print one JSON object on stderr:
{"error": {"code": ..., "kind": ..., "message": ...}}.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Sequence

import numpy as np

from . import containers
from .aggregate import ExplanationMatrix, SignMode, global_matrix, local_matrix, topk_graph
from .attribution import AttributionField, AttributionMethod
from .metrics import MethodConfig, default_method_suite, run_benchmark
from .models import SyntheticModel, SyntheticModelSpec, random_volume
from .outliers import outlier_pipeline
from .rng import RngSpec
from .volume import ClassMask, RoISet, RoISource, Volume, argmax_masks
from .wire import ModelTransportError, RemoteModel

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_TRANSPORT = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _fail(kind: str, code: int, message: str) -> int:
    payload = {"error": {"code": code, "kind": kind, "message": message}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc


def _open_model(model_cfg: Any):
    """Model handle from a config object or an endpoint string.

    Accepted forms: {"kind": "synthetic", ...}, {"kind": "tcp", ...},
    {"kind": "command", "argv": [...]}, "tcp://host:port", "cmd:prog arg ...",
    "synthetic".
    """
    if isinstance(model_cfg, str):
        if model_cfg.startswith("tcp://"):
            rest = model_cfg[len("tcp://"):]
            host, _, port = rest.rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError(f"malformed tcp endpoint {model_cfg!r}")
            return RemoteModel.connect_tcp(host, int(port))
        if model_cfg.startswith("cmd:"):
            argv = model_cfg[len("cmd:"):].split()
            if not argv:
                raise ConfigError("empty command endpoint")
            return RemoteModel.spawn(argv)
        if model_cfg == "synthetic":
            return SyntheticModel(SyntheticModelSpec(dims=(8, 8, 8), num_classes=3, seed=7))
        raise ConfigError(f"unrecognized model endpoint {model_cfg!r}")
    if not isinstance(model_cfg, dict):
        raise ConfigError("model config must be an object or endpoint string")
    kind = model_cfg.get("kind", "synthetic")
    if kind == "synthetic":
        try:
            spec = SyntheticModelSpec(
                dims=tuple(model_cfg.get("dims", (8, 8, 8))),
                num_classes=int(model_cfg.get("num_classes", 3)),
                seed=int(model_cfg.get("seed", 7)),
                nonlinearity=model_cfg.get("nonlinearity", "tanh"),
                coupling=model_cfg.get("coupling", 0.3),
                name=model_cfg.get("name", "synthetic"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad synthetic model config: {exc}") from exc
        return SyntheticModel(spec)
    if kind == "tcp":
        return RemoteModel.connect_tcp(str(model_cfg["host"]), int(model_cfg["port"]))
    if kind == "command":
        return RemoteModel.spawn([str(a) for a in model_cfg["argv"]])
    raise ConfigError(f"unknown model kind {kind!r}")


def _load_inputs(cfg: dict[str, Any], model) -> list[tuple[str, Volume]]:
    inputs_cfg = cfg.get("inputs", {"kind": "synthetic", "count": 1, "seed": 11})
    if isinstance(inputs_cfg, list):
        inputs_cfg = {"kind": "files", "paths": inputs_cfg}
    kind = inputs_cfg.get("kind")
    if kind == "files":
        out = []
        for path in inputs_cfg["paths"]:
            input_id = os.path.splitext(os.path.basename(path))[0]
            try:
                vol = containers.read_volume(path)
            except FileNotFoundError as exc:
                raise ConfigError(f"input volume not found: {path}") from exc
            except containers.ContainerError as exc:
                raise DataError(str(exc)) from exc
            if vol.dims != model.dims:
                raise DataError(f"{path}: volume dims {vol.dims} != model dims {model.dims}")
            out.append((input_id, vol))
        if not out:
            raise ConfigError("inputs.paths is empty")
        return out
    if kind == "synthetic":
        count = int(inputs_cfg.get("count", 1))
        seed = int(inputs_cfg.get("seed", 11))
        if count < 1:
            raise ConfigError(f"inputs.count must be >= 1, got {count}")
        width = max(3, len(str(count - 1)))
        return [
            (f"syn{i:0{width}d}", random_volume(model.dims, RngSpec(seed).child("input", i)))
            for i in range(count)
        ]
    raise ConfigError(f"unknown inputs kind {kind!r}")


def _parse_method(name: str) -> AttributionMethod:
    try:
        return AttributionMethod(name)
    except ValueError as exc:
        valid = ", ".join(m.value for m in AttributionMethod)
        raise ConfigError(f"unknown method {name!r} (valid: {valid})") from exc


def _method_config(cfg: dict[str, Any], method: AttributionMethod) -> MethodConfig:
    params = cfg.get("params", {})
    try:
        return MethodConfig(
            method=method,
            sg_n=int(params.get("sg_n", 20)),
            sg_sigma=params.get("sg_sigma"),
            ig_n=int(params.get("ig_n", 20)),
            cube_edge=int(params.get("cube_edge", 4)),
            n_samples=params.get("n_samples"),
            ridge_lambda=float(params.get("ridge_lambda", 1e-6)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad method params: {exc}") from exc


def _parse_classes(text: str | None, cfg: dict[str, Any]) -> list[int] | None:
    if text is not None:
        try:
            return [int(part) for part in text.split(",") if part != ""]
        except ValueError as exc:
            raise ConfigError(f"--classes must be comma-separated integers, got {text!r}") from exc
    classes = cfg.get("classes")
    if classes is None:
        return None
    return [int(c) for c in classes]


def _write_json(path: str, payload: Any) -> None:
    containers.atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def cmd_attribute(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    out_dir = args.out or cfg.get("out")
    if not out_dir:
        raise ConfigError("an output directory is required (--out or config 'out')")
    method = _parse_method(args.method or cfg.get("method", "vg"))
    config = _method_config(cfg, method)
    classes = _parse_classes(args.classes, cfg)
    jobs = max(1, int(args.jobs if args.jobs is not None else cfg.get("jobs", 1)))

    os.makedirs(out_dir, exist_ok=True)
    model = _open_model(cfg.get("model", {"kind": "synthetic"}))
    try:
        inputs = _load_inputs(cfg, model)
        manifest_inputs = []
        timings: dict[str, float] = {}
        for input_id, vol in inputs:
            started = time.perf_counter()
            logits = model.forward(vol)
            masks = argmax_masks(logits)
            wanted = range(logits.num_classes) if classes is None else classes
            for c in wanted:
                if not 0 <= c < logits.num_classes:
                    raise ConfigError(f"class {c} out of range [0, {logits.num_classes})")
            entries: dict[str, Any] = {"id": input_id, "dims": list(vol.dims),
                                       "classes": [], "skipped": [], "files": {}}

            def _one_class(c: int, _vol=vol, _masks=masks, _logits=logits, _id=input_id):
                field = config.attribute(model, _vol, c, _masks[c],
                                         RngSpec(seed).child("attribute", _id, c), logits=_logits)
                return c, field

            targets = [c for c in wanted if not masks[c].is_empty()]
            entries["skipped"] = [c for c in wanted if masks[c].is_empty()]
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    results = list(pool.map(_one_class, targets))
            else:
                results = [_one_class(c) for c in targets]
            for c, field in sorted(results):
                attr_name = f"{input_id}_c{c}_{method.value}.a2x"
                mask_name = f"{input_id}_mask_c{c}.a2x"
                meta = {"class_id": c, "method": method.value,
                        "params": {k: v for k, v in field.meta.items()}}
                containers.write_volume(os.path.join(out_dir, attr_name),
                                        Volume(dims=vol.dims, data=field.grid()), meta=meta)
                containers.write_mask(os.path.join(out_dir, mask_name), masks[c],
                                      meta={"class_id": c})
                entries["classes"].append(c)
                entries["files"][str(c)] = {"attribution": attr_name, "mask": mask_name}
            timings[input_id] = time.perf_counter() - started
            manifest_inputs.append(entries)
        manifest = {
            "command": "attribute",
            "method": method.value,
            "num_classes": model.num_classes,
            "seed": seed,
            "inputs": manifest_inputs,
            "version": 1,
        }
        _write_json(os.path.join(out_dir, "manifest.json"), manifest)
        _write_json(os.path.join(out_dir, "timings.json"), {"seconds_per_input": timings})
    finally:
        model.close()
    print(f"attribute: wrote {sum(len(e['classes']) for e in manifest_inputs)} fields to {out_dir}")
    return EXIT_OK


def _load_attribute_run(attr_dir: str) -> tuple[dict[str, Any], list[tuple[str, list[AttributionField], RoISet]]]:
    manifest_path = os.path.join(attr_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"no manifest.json in {attr_dir}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: {exc}") from exc
    runs = []
    method = AttributionMethod(manifest["method"])
    num_classes = int(manifest["num_classes"])
    for entry in manifest["inputs"]:
        input_id = entry["id"]
        fields: list[AttributionField] = []
        masks: list[ClassMask | None] = [None] * num_classes
        for c_str, files in entry["files"].items():
            c = int(c_str)
            vol, meta = containers.read_any(os.path.join(attr_dir, files["attribution"]))
            mask = containers.read_mask(os.path.join(attr_dir, files["mask"]))
            fields.append(AttributionField(dims=vol.dims, class_id=c, method=method,
                                           data=vol.flat(), meta=meta.get("params", {}) if meta else {}))
            masks[c] = mask
        # Every class needs an RoI column even when unpredicted (empty mask).
        dims = tuple(entry["dims"])
        full = [m if m is not None else ClassMask(dims=dims, data=np.zeros((dims[2], dims[1], dims[0]), dtype=np.uint8))
                for m in masks]
        rois = RoISet.from_predicted(full)
        runs.append((input_id, fields, rois))
    if not runs:
        raise DataError(f"{manifest_path}: empty input list")
    return manifest, runs


def cmd_aggregate(args: argparse.Namespace) -> int:
    out_dir = args.out or args.attr_dir
    os.makedirs(out_dir, exist_ok=True)
    sign_mode = SignMode(args.sign_mode)
    manifest, runs = _load_attribute_run(args.attr_dir)

    external: list[tuple[str, ClassMask]] = []
    for spec in args.roi or []:
        name, _, path = spec.partition("=")
        if not name or not path:
            raise ConfigError(f"--roi expects name=path, got {spec!r}")
        try:
            external.append((name, containers.read_mask(path)))
        except FileNotFoundError as exc:
            raise ConfigError(f"RoI mask not found: {path}") from exc
        except containers.ContainerError as exc:
            raise DataError(str(exc)) from exc

    locals_: list[ExplanationMatrix] = []
    for input_id, fields, rois in runs:
        for name, mask in external:
            if mask.dims != rois.masks[0].dims:
                raise DataError(f"external RoI {name!r} dims {mask.dims} != volume dims {rois.masks[0].dims}")
            rois.add(name, mask)
        class_names = [f"class_{c}" for c in range(int(manifest["num_classes"]))]
        matrix = local_matrix(fields, rois, sign_mode, class_names=class_names)
        locals_.append(matrix)
        containers.atomic_write_text(os.path.join(out_dir, f"local_{input_id}.csv"), matrix.to_csv())
        containers.atomic_write_text(os.path.join(out_dir, f"local_{input_id}.json"), matrix.to_json() + "\n")
    global_ = global_matrix(locals_)
    containers.atomic_write_text(os.path.join(out_dir, "global.csv"), global_.to_csv())
    containers.atomic_write_text(os.path.join(out_dir, "global.json"), global_.to_json() + "\n")
    if args.graph:
        graph = topk_graph(global_, k=args.k)
        containers.atomic_write_text(os.path.join(out_dir, "graph.dot"), graph.to_dot())
        containers.atomic_write_text(os.path.join(out_dir, "graph.json"), graph.to_json() + "\n")
    if args.figures:
        from .figures import matrix_heatmap
        matrix_heatmap(global_, os.path.join(out_dir, "global_heatmap.png"))
    print(f"aggregate: {len(locals_)} local matrices + global matrix in {out_dir}")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    out_dir = args.out or cfg.get("out")
    if not out_dir:
        raise ConfigError("an output directory is required (--out or config 'out')")
    os.makedirs(out_dir, exist_ok=True)
    bench_cfg = cfg.get("benchmark", {})
    method_names = bench_cfg.get("methods")
    if args.method:
        method_names = [args.method]
    if method_names is None:
        methods = default_method_suite()
    else:
        methods = [_method_config(cfg, _parse_method(name)) for name in method_names]
    classes = _parse_classes(args.classes, cfg)

    model = _open_model(cfg.get("model", {"kind": "synthetic"}))
    try:
        inputs = _load_inputs(cfg, model)
        report = run_benchmark(
            model, inputs, methods, class_subset=classes,
            rng=RngSpec(seed).child("benchmark"),
            dataset=cfg.get("dataset", "synthetic"),
            faithfulness_n=int(bench_cfg.get("faithfulness_n", 100)),
            faithfulness_m=bench_cfg.get("faithfulness_m"),
            sensitivity_n=int(bench_cfg.get("sensitivity_n", 3)),
            sensitivity_radius=float(bench_cfg.get("sensitivity_radius", 0.1)),
            theta=float(bench_cfg.get("theta", 0.1)),
        )
    finally:
        model.close()
    # records.csv is deterministic; wall-clock goes to the timing files.
    containers.atomic_write_text(os.path.join(out_dir, "records.csv"),
                                 report.to_csv(include_efficiency=False))
    timing_rows = ["method,input_id,class,efficiency_s"]
    timing_rows += [f"{r.method},{r.input_id},{r.class_id},{r.efficiency_s!r}" for r in report.records]
    containers.atomic_write_text(os.path.join(out_dir, "timings.csv"), "\n".join(timing_rows) + "\n")
    containers.atomic_write_text(os.path.join(out_dir, "summary.csv"), report.summary_csv())
    containers.atomic_write_text(os.path.join(out_dir, "report.json"), report.to_json() + "\n")
    if args.figures:
        from .figures import benchmark_bars
        benchmark_bars(report, os.path.join(out_dir, "summary_bars.png"))
    if report.errors:
        print(f"benchmark: {len(report.errors)} record(s) failed", file=sys.stderr)
    print(f"benchmark: {len(report.records)} records in {out_dir}")
    return EXIT_OK


def _load_matrix_dir(path: str) -> list[tuple[str, ExplanationMatrix]]:
    pattern = os.path.join(path, "local_*.json")
    files = sorted(glob.glob(pattern))
    if not files:
        raise ConfigError(f"no local_*.json matrices under {path}")
    out = []
    for file_path in files:
        input_id = os.path.basename(file_path)[len("local_"):-len(".json")]
        with open(file_path, "r", encoding="utf-8") as f:
            out.append((input_id, ExplanationMatrix.from_json(f.read())))
    return out


def cmd_outliers(args: argparse.Namespace) -> int:
    train = _load_matrix_dir(args.train_dir)
    eval_ = _load_matrix_dir(args.eval_dir)
    dice_scores = None
    if args.dice:
        try:
            with open(args.dice, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"dice file not found: {args.dice}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.dice}: {exc}") from exc
        dice_scores = {(input_id, label): float(v)
                       for input_id, by_label in raw.items()
                       for label, v in by_label.items()}
    try:
        result = outlier_pipeline(train, eval_, dice_scores=dice_scores,
                                  num_trees=args.trees, subsample_size=args.subsample,
                                  seed=args.seed if args.seed is not None else 0)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out_dir = args.out or args.eval_dir
    os.makedirs(out_dir, exist_ok=True)
    containers.atomic_write_text(os.path.join(out_dir, "scores.csv"), result.score_csv())
    if dice_scores is not None:
        containers.atomic_write_text(os.path.join(out_dir, "rank_tests.csv"), result.rank_csv())
    summary = {
        "failures": list(result.failures),
        "num_scores": len(result.scores),
        "averaged_test": None if result.averaged_test is None else {
            "rho": result.averaged_test.rho,
            "p_value": result.averaged_test.p_value,
            "n": result.averaged_test.n,
        },
    }
    _write_json(os.path.join(out_dir, "outliers.json"), summary)
    if args.figures:
        from .figures import score_histogram
        score_histogram(result, os.path.join(out_dir, "score_hist.png"))
    print(f"outliers: {len(result.scores)} scores in {out_dir}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    endpoint = args.model or cfg.get("model")
    if endpoint is None:
        raise ConfigError("probe needs --model or a config with a model entry")
    model = _open_model(endpoint)
    try:
        info = {
            "dims": list(model.dims),
            "has_gradient": bool(getattr(model, "has_gradient", True)),
            "name": model.name,
            "num_classes": model.num_classes,
        }
    finally:
        model.close()
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxattr",
                                     description="Voxel attribution and RoI-importance toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_attr = sub.add_parser("attribute", help="compute attribution fields to container files")
    p_attr.add_argument("--config", help="JSON run configuration")
    p_attr.add_argument("--seed", type=int, help="root seed (overrides config)")
    p_attr.add_argument("--out", help="output directory (overrides config)")
    p_attr.add_argument("--method", help="attribution method (vg, sg, ig, kshap_cubes, kshap_semantic)")
    p_attr.add_argument("--classes", help="comma-separated class ids to explain")
    p_attr.add_argument("--jobs", type=int, help="worker threads over classes")
    p_attr.set_defaults(func=cmd_attribute)

    p_agg = sub.add_parser("aggregate", help="importance matrices and graph from an attribute run")
    p_agg.add_argument("--attr-dir", required=True, help="directory written by `attribute`")
    p_agg.add_argument("--out", help="output directory (default: attr dir)")
    p_agg.add_argument("--roi", action="append", help="external RoI as name=mask-container-path")
    p_agg.add_argument("--sign-mode", default="absolute",
                       choices=[m.value for m in SignMode])
    p_agg.add_argument("--graph", action="store_true", help="also write the Top-k importance graph")
    p_agg.add_argument("--k", type=int, default=3, help="in-edges kept per node (default 3)")
    p_agg.add_argument("--figures", action="store_true", help="render heatmap PNGs")
    p_agg.set_defaults(func=cmd_aggregate)

    p_bench = sub.add_parser("benchmark", help="attribution-quality metric report")
    p_bench.add_argument("--config", help="JSON run configuration")
    p_bench.add_argument("--seed", type=int)
    p_bench.add_argument("--out")
    p_bench.add_argument("--method", help="restrict to a single method")
    p_bench.add_argument("--classes")
    p_bench.add_argument("--jobs", type=int)
    p_bench.add_argument("--figures", action="store_true", help="render metric bar charts")
    p_bench.set_defaults(func=cmd_benchmark)

    p_out = sub.add_parser("outliers", help="isolation-forest mining over saved matrices")
    p_out.add_argument("--train-dir", required=True, help="directory of local_*.json (normal runs)")
    p_out.add_argument("--eval-dir", required=True, help="directory of local_*.json to score")
    p_out.add_argument("--dice", help="JSON {input_id: {class_label: dice}} for rank tests")
    p_out.add_argument("--out", help="output directory (default: eval dir)")
    p_out.add_argument("--seed", type=int)
    p_out.add_argument("--trees", type=int, default=100)
    p_out.add_argument("--subsample", type=int, default=256)
    p_out.add_argument("--figures", action="store_true", help="render score histogram PNG")
    p_out.set_defaults(func=cmd_outliers)

    p_probe = sub.add_parser("probe", help="handshake check against a model endpoint")
    p_probe.add_argument("--model", help="tcp://host:port, cmd:argv..., or synthetic")
    p_probe.add_argument("--config", help="JSON config carrying a model entry")
    p_probe.set_defaults(func=cmd_probe)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, str(exc))
    except ModelTransportError as exc:
        return _fail("transport", EXIT_TRANSPORT, str(exc))
    except (DataError, containers.ContainerError) as exc:
        return _fail("data", EXIT_DATA, str(exc))
    except ValueError as exc:
        return _fail("data", EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
