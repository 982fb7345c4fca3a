"""Command-line entry point: synth / craft / calibrate / serve / bench.

Exit codes: 0 success, 1 validation error (bad config/arguments), 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import crafting, harness, pipeline
from .config import ConfigError, PipelineConfig, config_hash, load_config
from .dataset import load_trace
from .flow_state import FlowStateConfig
from .models import BoostedTreesConfig, load_model


def _parse_depths(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v]


def _load_effective_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config.harness.seed = args.seed
    return config


def _flow_config(config: PipelineConfig) -> FlowStateConfig:
    fs = config.flow_state
    return FlowStateConfig(ttl_ms=fs.ttl_ms, q1_capacity=fs.q1_capacity,
                           q3_capacity=fs.q3_capacity, q2_capacity=fs.q2_capacity,
                           n_slow_packets=fs.n_slow_packets)


def cmd_synth(args) -> int:
    trace = harness.make_synthetic_benchmark(
        args.out, seed=args.seed or 0, n_flows=args.flows, n_classes=args.classes,
        difficulty=args.difficulty, flow_rate=args.rate)
    print(f"wrote {trace.capture} ({len(trace.labels)} labeled flows, {trace.n_classes} classes)")
    return 0


def cmd_craft(args) -> int:
    config = _load_effective_config(args)
    trace = load_trace(Path(args.dataset) / "bench.pcap" if Path(args.dataset).is_dir() else args.dataset,
                       args.labels or Path(args.dataset) / "labels.csv")
    gbt = BoostedTreesConfig(n_rounds=args.gbt_rounds, learning_rate=args.gbt_learning_rate,
                             num_leaves=args.gbt_leaves, seed=config.harness.seed)
    profiles = crafting.train_pool(
        trace, families=args.families.split(","), depths=_parse_depths(args.depths),
        seed=config.harness.seed, gbt_config=gbt, out_dir=args.out,
        metadata={"config_hash": config_hash(config)})
    front = crafting.pareto_front(profiles)
    plan = crafting.place_models(front, profiles, crafting.PlacementConfig(f1_floor=args.f1_floor))
    out = Path(args.out)
    plan_doc = plan.to_json()
    plan_doc["config_hash"] = config_hash(config)
    (out / "cascade_plan.json").write_text(json.dumps(plan_doc, indent=2))
    for profile in profiles:
        status = "FAILED " + (profile.error or "") if profile.failed else (
            f"f1={profile.f1_weighted:.4f} e2e={profile.median_e2e_latency_us:.0f}us")
        print(f"{profile.model_id}: {status}")
    print(f"pareto front: {[p.model_id for p in front]}")
    print(f"plan: fastest={plan.fastest and plan.fastest.model_id} "
          f"fast={plan.fast and plan.fast.model_id} slow={plan.slow and plan.slow.model_id}")
    for warning in plan.warnings:
        print(f"warning: {warning}")
    return 0


def cmd_calibrate(args) -> int:
    import numpy as np

    from .assignment import choose_policy
    from .dataset import extract_flows, matrix_at_depth, split_indices

    config = _load_effective_config(args)
    models_dir = Path(args.models)
    plan = json.loads((models_dir / "cascade_plan.json").read_text())
    trace = load_trace(Path(args.dataset) / "bench.pcap" if Path(args.dataset).is_dir() else args.dataset,
                       args.labels or Path(args.dataset) / "labels.csv")

    stages = {name: plan[name] for name in ("fastest", "fast", "slow") if plan.get(name)}
    models = {name: load_model(ref["path"]) for name, ref in stages.items()}
    max_depth = max(m.packet_depth for m in models.values())
    records = extract_flows(trace, max_depth)
    labeled = np.flatnonzero(records.labels >= 0)
    _, val_i, _ = (labeled[ix] for ix in split_indices(labeled.size, config.harness.seed))
    y_val = records.labels[val_i]
    matrices = {d: matrix_at_depth(records, d)[val_i] for d in {m.packet_depth for m in models.values()}}

    n_slow = models["slow"].packet_depth if "slow" in models else config.flow_state.n_slow_packets
    cascade_doc = {"n_slow_packets": n_slow, "config_hash": config_hash(config)}
    order = [name for name in ("fastest", "fast", "slow") if name in models]
    live = np.arange(len(y_val))  # each stage calibrates on what its predecessor escalates
    for i, name in enumerate(order):
        model = models[name]
        entry = {"model": str(Path(stages[name]["path"]).resolve()), "metric": config.assignment.metric}
        if i + 1 < len(order):
            downstream = models[order[i + 1]]
            points = harness.build_stage_calibration(
                model, downstream, matrices[model.packet_depth][live],
                matrices[downstream.packet_depth][live], y_val[live], config.assignment.metric)
            kind = config.assignment.stage1_kind if model.family == "decision_tree" else config.assignment.stage2_kind
            if i == 0 and args.curves and points:
                harness.sweep_assignment(points, n_classes=trace.n_classes,
                                         seed=config.harness.seed).dump_csv(args.curves)
                print(f"wrote assignment curves to {args.curves}")
            if len(points) == 0:
                from .assignment import PolicyKind, ThresholdPolicy

                entry["policy"] = ThresholdPolicy(PolicyKind.UNIVERSAL, 0.0).to_json()
            else:
                choice = choose_policy(points, config.assignment.mode, target=config.assignment.target,
                                       kind=kind, metric=config.assignment.metric,
                                       knee_tolerance=config.assignment.knee_tolerance,
                                       n_classes=trace.n_classes)
                entry["policy"] = choice.policy.to_json()
                live = live[choice.policy.escalate_mask(points)]
                print(f"{name}: {kind} policy at portion {choice.policy.portion:.3f}")
        cascade_doc[name] = entry
    pipeline.save_cascade(args.out, cascade_doc)
    print(f"wrote {args.out}")
    return 0


def cmd_serve(args) -> int:
    config = _load_effective_config(args)
    spec, n_slow = pipeline.load_cascade(args.cascade)
    flow_cfg = _flow_config(config)
    flow_cfg.n_slow_packets = n_slow
    replayer = harness.Replayer(args.pcap, speed=args.speed if args.speed > 0 else math.inf)
    result = pipeline.serve(spec, replayer.packets(), consumers=args.consumers,
                            flow_config=flow_cfg, link_type=replayer.link_type)
    pipeline.write_outcomes_csv(args.out, result.outcomes)
    histogram = {k.value: v for k, v in result.histogram().items() if v}
    print(f"served {result.admitted_flows} flows in {result.duration_s:.2f}s "
          f"({len(result.decided) / result.duration_s:.0f} flows/s): {histogram}")
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    config = _load_effective_config(args)
    spec, n_slow = pipeline.load_cascade(args.cascade)
    flow_cfg = _flow_config(config)
    flow_cfg.n_slow_packets = n_slow
    trace = load_trace(args.trace, args.labels)
    rates = [float(r) for r in args.rates.split(",")] if args.rates else [None]
    reports = []
    for rate in rates:
        replayer = harness.replay(trace, speed=config.harness.speed, target_rate=rate)
        result = pipeline.serve(spec, replayer.packets(), consumers=args.consumers,
                                flow_config=flow_cfg, link_type=replayer.link_type)
        report = harness.score(result, trace, replayer=replayer, arrival_rate=rate,
                               config_hash=config_hash(config), effective_config=config.to_json())
        reports.append(report.to_json())
        f1 = "n/a" if report.f1_weighted is None else f"{report.f1_weighted:.4f}"
        print(f"rate={rate or replayer.native_rate:.0f}/s service_rate={report.service_rate:.0f}/s "
              f"miss={report.miss_rate:.4f} f1={f1}")
    with open(args.out, "w") as fh:
        json.dump(reports if len(reports) > 1 else reports[0], fh, indent=2)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcascade",
                                     description="fast-slow cascaded flow classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled benchmark trace")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--flows", type=int, default=20000)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--difficulty", type=float, default=0.3)
    p.add_argument("--rate", type=float, default=400.0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("craft", help="train/profile the model pool and place the cascade")
    p.add_argument("--dataset", required=True, help="trace pcap or a synth output directory")
    p.add_argument("--labels", default=None)
    p.add_argument("--families", default="dt,gbt")
    p.add_argument("--depths", default="1..10")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--f1-floor", type=float, default=0.8)
    p.add_argument("--gbt-rounds", type=int, default=100)
    p.add_argument("--gbt-learning-rate", type=float, default=0.03)
    p.add_argument("--gbt-leaves", type=int, default=128)
    p.set_defaults(fn=cmd_craft)

    p = sub.add_parser("calibrate", help="calibrate stage policies and emit the cascade spec")
    p.add_argument("--models", required=True, help="craft output directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", default=None, help="optional CSV dump of assignment sweep curves")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("serve", help="replay a pcap through the cascade")
    p.add_argument("--cascade", required=True)
    p.add_argument("--pcap", required=True)
    p.add_argument("--consumers", type=int, default=1)
    p.add_argument("--speed", type=float, default=1.0, help="replay speed multiplier; 0 = offline")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("bench", help="replay at target rates and emit a run report")
    p.add_argument("--cascade", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--rates", default=None, help="comma-separated new-flow rates")
    p.add_argument("--consumers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
