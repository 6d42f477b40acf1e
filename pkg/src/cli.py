"""Command-line entry point: python -m src <command> [options]

Exit codes: 0 success, 1 domain error (JSON error document on stderr),
2 usage error.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from .app import serve
from .config import DEFAULT_ETA, ETA_GRID, HOST, LOG_LEVEL, PORT, load_document
from .data_loader import (features_from_records, load_detection_records, load_detections,
                          load_features, save_detections)
from .errors import BBWError, ConfigError
from .features import FeatureMatrix
from .geometry import Clamp, Pattern, PoisoningPolicy
from .poisoner import BackendSpec, FeatureSource, ProxyConfig, poison_response
from .simulator import ExperimentConfig, run_experiment, sweep
from .trigger import (ClusterSearchParams, load_trigger_model, random_trigger_select,
                      save_trigger_model, trigger_cluster_search)
from .verification import (Metric, Population, Suspect, eta_sensitivity, inconsistency_histogram,
                           key_set_flags, pair_objects, response_vs_clean, verify)
from .visualization import project_features

logger = logging.getLogger(__name__)

SEEDED = ("random-trigger", "simulate", "sweep")


def _needs_magnitude(args) -> bool:
    """The scale metric inverts the owner's magnitude; it has no usable default."""
    if args.command == "verify":
        scaled = Metric(args.metric) is Metric.SCALE
    elif args.command == "histogram":
        scaled = args.quantity == "d_scale"
    else:
        return False
    if not scaled or args.delta is not None:
        return False
    return args.delta_w is None or args.delta_h is None


def _floats(value: str) -> List[float]:
    try:
        return [float(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}")


def _suspect(value: str) -> Dict[str, str]:
    """NAME=PATH,label=benign|extracted|baseline"""
    head, *rest = value.split(",")
    if "=" not in head:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH[,label=...], got {value!r}")
    name, path = head.split("=", 1)
    spec = {"name": name, "path": path, "label": Population.EXTRACTED.value}
    for item in rest:
        key, _, val = item.partition("=")
        if key != "label" or val not in {p.value for p in Population}:
            raise argparse.ArgumentTypeError(f"bad suspect option {item!r}")
        spec["label"] = val
    return spec


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=float, help="set delta_w and delta_h together")
    p.add_argument("--delta-w", type=float)
    p.add_argument("--delta-h", type=float)
    p.add_argument("--pattern", choices=[x.value for x in Pattern])
    p.add_argument("--shift-sx", type=float)
    p.add_argument("--shift-sy", type=float)
    p.add_argument("--clamp", choices=[x.value for x in Clamp])


def _policy(args, base: Optional[Dict[str, Any]] = None) -> PoisoningPolicy:
    doc = dict(base or {})
    if args.delta is not None:
        doc["delta_w"] = doc["delta_h"] = args.delta
        doc.pop("delta", None)
    for flag, key in (("delta_w", "delta_w"), ("delta_h", "delta_h"), ("pattern", "pattern"),
                      ("shift_sx", "shift_sx"), ("shift_sy", "shift_sy"), ("clamp", "clamp")):
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    return PoisoningPolicy.from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--format", choices=["csv", "json"], default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="python -m src", description="Bounding-box watermarking toolkit")
    parser.add_argument("--seed", type=int, default=None, help="base seed for every random stream")
    parser.add_argument("--quiet", action="store_true", default=False)
    parser.add_argument("--format", choices=["csv", "json"], default="json", help="stdout format")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("select-trigger", parents=[common], help="compact trigger cluster search")
    p.add_argument("--features", required=True, help="training features (.csv or .bin)")
    p.add_argument("--p", type=float, required=True, help="poisoning ratio")
    p.add_argument("--t", type=int, default=None, help="search tolerance")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--min-pts", type=int, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--out", required=True, help="trigger model file")

    p = sub.add_parser("random-trigger", parents=[common], help="random trigger cluster baseline")
    p.add_argument("--features", required=True, help="training features")
    p.add_argument("--substitute", required=True, help="substitute features used to size epsilon")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("poison", parents=[common], help="poison a detection dump offline")
    p.add_argument("--detections", required=True, help="backend detections (JSON lines)")
    p.add_argument("--features", help="per-object features; default: embedded in --detections")
    p.add_argument("--trigger-model", required=True)
    _add_policy_flags(p)
    p.add_argument("--out", required=True, help="poisoned detections (JSON lines)")
    p.add_argument("--flags-out", help="CSV of per-object poisoned flags")

    p = sub.add_parser("serve", parents=[common], help="run the poisoning proxy")
    p.add_argument("--config", help="proxy config document (JSON)")
    p.add_argument("--host", default=HOST)
    p.add_argument("--port", type=int, default=PORT)
    p.add_argument("--backend", help="detection dump path or http(s) URL")
    p.add_argument("--trigger-model")
    p.add_argument("--feature-source", choices=[x.value for x in FeatureSource])
    p.add_argument("--log", help="audit log path (JSON lines)")
    _add_policy_flags(p)

    p = sub.add_parser("verify", parents=[common], help="score suspects against the target")
    p.add_argument("--target", required=True, help="f's key-set detections")
    p.add_argument("--target-features", help="f's key-set features; default: embedded in --target")
    p.add_argument("--suspect", type=_suspect, action="append", required=True,
                   help="NAME=PATH,label=benign|extracted|baseline (repeatable)")
    p.add_argument("--trigger-model", required=True)
    p.add_argument("--eta", type=float, default=DEFAULT_ETA)
    p.add_argument("--metric", choices=[x.value for x in Metric], default=Metric.SCALE.value)
    _add_policy_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="report document (JSON)")
    p.add_argument("--pairing-out", help="pairing statistics CSV")
    p.add_argument("--eta-sweep", help="write AUROC over the eta grid to this CSV")

    p = sub.add_parser("histogram", parents=[common], help="inconsistency histogram tables")
    p.add_argument("--target", required=True, help="f's detections (or API responses with --clean)")
    p.add_argument("--target-features", help="features for the trigger flags; default: embedded")
    p.add_argument("--trigger-model", required=True)
    p.add_argument("--suspect", type=_suspect, action="append", default=[])
    p.add_argument("--clean", help="clean labels; compares --target responses against them")
    p.add_argument("--quantity", choices=["area_ratio", "d_iou", "d_scale"], default="area_ratio")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--eta", type=float, default=DEFAULT_ETA)
    _add_policy_flags(p)
    p.add_argument("--out", help="histogram CSV; default stdout")

    p = sub.add_parser("simulate", parents=[common], help="run one simulated experiment")
    p.add_argument("--config", help="experiment config document (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("sweep", parents=[common], help="AUROC over a parameter grid")
    p.add_argument("--config", help="base experiment config document (JSON)")
    p.add_argument("--grid", help="grid document: {delta: [...], p: [...], lambda, alpha, recall, strategy}")
    p.add_argument("--delta", type=_floats)
    p.add_argument("--p", type=_floats)
    p.add_argument("--lambda", dest="lambda_", type=_floats)
    p.add_argument("--alpha", type=_floats)
    p.add_argument("--recall", type=_floats)
    p.add_argument("--strategy", help="comma-separated: compact,random")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="sweep CSV")

    p = sub.add_parser("project", parents=[common], help="2-D UMAP coordinates of features")
    p.add_argument("--features", required=True)
    p.add_argument("--trigger-model")
    p.add_argument("--out", required=True)
    return parser


def _emit(payload, fmt: str) -> None:
    if isinstance(payload, pd.DataFrame):
        if fmt == "csv":
            payload.to_csv(sys.stdout, index=False)
        else:
            sys.stdout.write(payload.to_json(orient="records") + "\n")
        return
    if fmt == "csv":
        flat = {k: v for k, v in payload.items() if not isinstance(v, (dict, list))}
        pd.DataFrame([flat]).to_csv(sys.stdout, index=False)
    else:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _target_features(det_path: str, features_path: Optional[str]) -> FeatureMatrix:
    if features_path:
        return load_features(features_path)
    return features_from_records(load_detection_records(det_path))


def _write_json(path: str, doc: Dict[str, Any]) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# Commands
def cmd_select_trigger(args) -> Dict[str, Any]:
    params = {"poisoning_ratio": args.p}
    for flag, key in (("t", "tolerance"), ("step", "step"), ("min_pts", "min_pts"),
                      ("max_iterations", "max_iterations")):
        if getattr(args, flag) is not None:
            params[key] = getattr(args, flag)
    model = trigger_cluster_search(load_features(args.features), ClusterSearchParams(**params))
    save_trigger_model(model, args.out)
    return {"out": args.out, "epsilon_bar": model.epsilon_bar, "size": model.size,
            "converged": model.converged, "m": model.m}


def cmd_random_trigger(args) -> Dict[str, Any]:
    model = random_trigger_select(load_features(args.features), load_features(args.substitute),
                                  args.p, args.seed)
    save_trigger_model(model, args.out)
    return {"out": args.out, "epsilon_bar": model.epsilon_bar, "size": model.size, "seed": args.seed}


def cmd_poison(args) -> Dict[str, Any]:
    detections = load_detections(args.detections)
    features = _target_features(args.detections, args.features)
    config = ProxyConfig(_policy(args), load_trigger_model(args.trigger_model),
                         BackendSpec.parse(args.detections))
    out, flags_rows, poisoned = [], [], 0
    for dets in detections:
        result = poison_response(dets, features.rows_for_image(dets.image_id, len(dets.objects)), config)
        out.append(result.detections)
        poisoned += result.n_poisoned
        flags_rows.extend({"image_id": dets.image_id, "object_index": j, "poisoned": int(flag)}
                          for j, flag in enumerate(result.flags))
    save_detections(args.out, out, features)
    if args.flags_out:
        pd.DataFrame(flags_rows, columns=["image_id", "object_index", "poisoned"]).to_csv(args.flags_out, index=False)
    total = len(flags_rows)
    return {"out": args.out, "images": len(out), "objects": total, "poisoned": poisoned,
            "poisoned_fraction": poisoned / total if total else 0.0}


def cmd_serve(args) -> Dict[str, Any]:
    doc = load_document(args.config) if args.config else {}
    base_dir = os.path.dirname(os.path.abspath(args.config)) if args.config else "."
    if args.trigger_model:
        doc["trigger_model"] = os.path.abspath(args.trigger_model)
    if args.backend:
        doc["backend"] = args.backend if args.backend.startswith(("http://", "https://")) \
            else os.path.abspath(args.backend)
    if args.feature_source:
        doc["feature_source"] = args.feature_source
    if args.log:
        doc["log_path"] = os.path.abspath(args.log)
    doc["policy"] = _policy(args, doc.get("policy")).to_dict()
    config = ProxyConfig.from_dict(doc, base_dir=base_dir)
    handle = serve(config, host=args.host, port=args.port)
    handle.wait()
    return {"status": "stopped", "url": handle.url}


def _load_suspects(specs: Sequence[Dict[str, str]]) -> List[Suspect]:
    return [Suspect(s["name"], Population(s["label"]), load_detections(s["path"])) for s in specs]


def cmd_verify(args) -> Dict[str, Any]:
    dets_f = load_detections(args.target)
    features_f = _target_features(args.target, args.target_features)
    model = load_trigger_model(args.trigger_model)
    suspects = _load_suspects(args.suspect)
    policy = _policy(args)
    report = verify(dets_f, features_f, suspects, model, eta=args.eta, metric=Metric(args.metric),
                    policy=policy, workers=args.workers)
    doc = report.to_dict()
    if args.out:
        _write_json(args.out, doc)
    if args.pairing_out:
        report.pairing_table().to_csv(args.pairing_out, index=False)
    if args.eta_sweep:
        flags = key_set_flags(dets_f, features_f, model)
        eta_sensitivity(dets_f, flags, suspects, Metric(args.metric), policy, ETA_GRID).to_csv(
            args.eta_sweep, index=False)
    if args.format == "csv":
        return report.pairing_table()
    return doc


def cmd_histogram(args):
    dets = load_detections(args.target)
    features = _target_features(args.target, args.target_features)
    model = load_trigger_model(args.trigger_model)
    flags = key_set_flags(dets, features, model)
    if args.clean:
        groups = response_vs_clean(load_detections(args.clean), dets, flags)
        table = inconsistency_histogram(groups, bins=args.bins)
    else:
        if not args.suspect:
            raise ConfigError("histogram needs --suspect files or --clean labels")
        pair_sets = [pair_objects(dets, s.detections, flags, args.eta) for s in _load_suspects(args.suspect)]
        policy = _policy(args) if args.quantity == "d_scale" else None
        table = inconsistency_histogram(pair_sets, bins=args.bins, quantity=args.quantity, policy=policy)
    if args.out:
        table.to_csv(args.out, index=False)
        return {"out": args.out, "rows": int(len(table))}
    return table


def _experiment_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_dict(load_document(args.config)) if args.config else ExperimentConfig()
    return config.with_seed(args.seed)


def cmd_simulate(args) -> Dict[str, Any]:
    config = _experiment_config(args)
    if args.workers:
        config = replace(config, workers=args.workers)
    result = run_experiment(config)
    result.write(args.out)
    return {"out": args.out, "seed": config.seed, "auroc": result.auroc,
            "verifiable": result.report.verifiable,
            "poisoned_fraction": result.document["poisoning"]["poisoned_fraction"]}


def cmd_sweep(args) -> Dict[str, Any]:
    base = _experiment_config(args)
    grid = dict(load_document(args.grid)) if args.grid else {}
    for flag, key in (("delta", "delta"), ("p", "p"), ("lambda_", "lambda"), ("alpha", "alpha"),
                      ("recall", "recall")):
        if getattr(args, flag):
            grid[key] = getattr(args, flag)
    if args.strategy:
        grid["strategy"] = [s.strip() for s in args.strategy.split(",") if s.strip()]
    if not grid:
        raise ConfigError("sweep needs a --grid document or at least one axis flag")
    table = sweep(base, grid, workers=args.workers)
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    table.to_csv(args.out, index=False)
    return {"out": args.out, "cells": int(len(table)), "failed": int((table["error"] != "").sum())}


def cmd_project(args) -> Dict[str, Any]:
    model = load_trigger_model(args.trigger_model) if args.trigger_model else None
    random_state = args.seed if args.seed is not None else 42
    table = project_features(load_features(args.features), model, args.out, random_state=random_state)
    return {"out": args.out, "rows": int(len(table))}


HANDLERS = {
    "select-trigger": cmd_select_trigger,
    "random-trigger": cmd_random_trigger,
    "poison": cmd_poison,
    "serve": cmd_serve,
    "verify": cmd_verify,
    "histogram": cmd_histogram,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "project": cmd_project,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in SEEDED and args.seed is None:
            parser.error(f"{args.command} requires --seed")
        if _needs_magnitude(args):
            parser.error("the scale metric needs --delta (or both --delta-w and --delta-h)")
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=logging.WARNING if args.quiet else LOG_LEVEL,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        payload = HANDLERS[args.command](args)
    except BBWError as e:
        sys.stderr.write(json.dumps(e.to_dict()) + "\n")
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        doc = {"error": type(e).__name__, "message": str(e), "path": e.filename}
        sys.stderr.write(json.dumps(doc) + "\n")
        return 1
    _emit(payload, args.format)
    return 0


if __name__ == "__main__":
    sys.exit(main())
