"""Experiment orchestration CLI: run | compare | sweep | presets.

Configuration comes from a JSON file plus command-line overrides (flags win
over file fields, which win over defaults). Reports embed the resolved
hardware config and seed, and all outputs are byte-deterministic for a fixed
config and seed. Exit codes: 0 ok, 1 config error, 2 infeasible schedule,
3 equivalence failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from . import attention_tiling as at
from . import feature_pruning as fp
from . import pipeline
from .errors import (CapacityError, ConfigError, NoFeasiblePlanError,
                     NoFeasibleTilingError, NotFoundError, ShapeError, SimError)
from .hwmodel import CostReport, HardwareConfig
from .workload import (Attention, GELU, Linear, NetworkGraph, PRESETS,
                       attention_dims, attention_operands, build_preset,
                       graph_from_dict, init_params, reference_execute,
                       seeded_input)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
EXIT_EQUIVALENCE = 3

SCHEDULE_PRESETS = {
    "naive": ("baseline", "singleton"),
    "tiling": ("auto", "singleton"),
    "fusion": ("baseline", "auto"),
    "full": ("auto", "auto"),
}


@dataclass
class ExperimentConfig:
    model: str | dict = "toy-chain"
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    attention: str | at.AttentionTiling = "auto"
    fusion: str | dict = "auto"
    pruning: fp.PruneConfig | None = None
    seed: int = 0
    tolerance: float = 1e-6

    def resolved_dict(self) -> dict:
        sched: dict = {
            "attention": (self.attention.to_dict()
                          if isinstance(self.attention, at.AttentionTiling)
                          else self.attention),
            "fusion": self.fusion,
            "pruning": "off" if self.pruning is None else {
                "theta_attn": self.pruning.theta_attn,
                "theta_act": self.pruning.theta_act,
                "granularity": self.pruning.granularity.value,
                "cascade_enabled": self.pruning.cascade_enabled,
            },
        }
        return {"model": self.model, "hardware": self.hardware.to_dict(),
                "schedule": sched, "seed": self.seed, "tolerance": self.tolerance}


def load_config(path: str | None, args: argparse.Namespace,
                hw_overrides: dict) -> ExperimentConfig:
    raw: dict = {}
    if path:
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path!r}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path!r} is not valid JSON "
                              f"(line {e.lineno}, column {e.colno}): {e.msg}")
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")

    model = raw.get("model", "toy-chain")
    if isinstance(model, dict) and "preset" in model and "graph" in model:
        raise ConfigError("model: give exactly one of preset or graph")
    if getattr(args, "model", None):
        model = args.model

    hw_dict = dict(raw.get("hardware", {}))
    hw_dict.update(hw_overrides)
    hardware = HardwareConfig.from_dict(hw_dict)

    sched = raw.get("schedule", {})
    if not isinstance(sched, dict):
        raise ConfigError("schedule must be an object")
    attention = sched.get("attention", "auto")
    if isinstance(attention, dict):
        try:
            attention = at.AttentionTiling.from_dict(
                dict(attention, element_bytes=hardware.element_bytes))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"schedule.attention: {e}")
    elif attention not in ("auto", "baseline"):
        raise ConfigError(f"schedule.attention must be auto, baseline, or a "
                          f"tiling object, got {attention!r}")
    fusion = sched.get("fusion", "auto")
    if isinstance(fusion, list):
        raise ConfigError("schedule.fusion: fixed plans are given as "
                          '{"<chain index>": [groups...]}')
    if not (fusion in ("auto", "singleton") or isinstance(fusion, dict)):
        raise ConfigError(f"schedule.fusion must be auto, singleton, or a "
                          f"chain map, got {fusion!r}")

    pruning_raw = sched.get("pruning", "off")
    pruning: fp.PruneConfig | None
    if pruning_raw == "off" or pruning_raw is None:
        pruning = None
    elif isinstance(pruning_raw, dict):
        try:
            pruning = fp.PruneConfig(
                theta_attn=float(pruning_raw.get("theta_attn", 0.01)),
                theta_act=float(pruning_raw.get("theta_act", 0.001)),
                granularity=fp.Granularity(pruning_raw.get("granularity", "element")),
                cascade_enabled=bool(pruning_raw.get("cascade_enabled", True)),
            )
        except ValueError as e:
            raise ConfigError(f"schedule.pruning: {e}")
    else:
        raise ConfigError(f"schedule.pruning must be 'off' or an object, "
                          f"got {pruning_raw!r}")

    seed = int(raw.get("seed", 0))
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    tolerance = float(raw.get("tolerance", 1e-6))
    if getattr(args, "tolerance", None) is not None:
        tolerance = args.tolerance

    return ExperimentConfig(model=model, hardware=hardware, attention=attention,
                            fusion=fusion, pruning=pruning, seed=seed,
                            tolerance=tolerance)


def build_graph(model: str | dict) -> NetworkGraph:
    if isinstance(model, str):
        return build_preset(model)
    if "preset" in model:
        return build_preset(str(model["preset"]))
    if "graph" in model:
        return graph_from_dict(model["graph"])
    raise ConfigError("model must be a preset name or contain preset/graph")


# ---------------------------------------------------------------------------
# Experiment primitives
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> dict:
    """Full pipeline: reference + optimized execution, report, deviation."""
    graph = build_graph(cfg.model)
    params = init_params(graph, cfg.seed)
    x = seeded_input(graph, cfg.seed)
    record: dict[str, np.ndarray] = {}
    ref = reference_execute(graph, x, params, record=record)

    schedule = pipeline.plan_network(graph, cfg.hardware, cfg.attention, cfg.fusion)
    out, report = pipeline.run_schedule(graph, schedule, x, params,
                                        cfg.hardware, seed=cfg.seed)
    deviation = float(np.max(np.abs(out - ref)))

    result = {
        "config": cfg.resolved_dict(),
        "report": report.to_dict(),
        "schedule": schedule.to_dict(),
        "max_abs_deviation": deviation,
        "equivalence_ok": deviation <= cfg.tolerance,
    }
    if cfg.pruning is not None:
        pruned = pruning_analysis(graph, record, params, cfg.pruning, cfg.hardware)
        stats = pruned["aggregate_stats"]
        adjusted = fp.sparse_cost_adjust(report, stats, cfg.hardware,
                                         cfg.pruning.granularity)
        result["pruning"] = pruned["layers"]
        result["adjusted_report"] = adjusted.to_dict()
    return result


def pruning_analysis(graph: NetworkGraph, record: dict[str, np.ndarray],
                     params: dict, cfg: fp.PruneConfig, hw: HardwareConfig) -> dict:
    """Layer-level pruning sweep points: attention maps and post-GELU maps."""
    layers = []
    total_skipped = 0
    total_elided = 0
    consumers: dict[str, list[str]] = {n.id: [] for n in graph.nodes}
    for n in graph.nodes:
        for p in n.preds:
            consumers[p].append(n.id)

    for node in graph.nodes:
        if isinstance(node.op, Attention):
            xin = record[node.preds[0]] if node.preds else None
            if xin is None:
                continue
            q, k, v = attention_operands(xin, node.op, params[node.id])
            _, stats = fp.pruned_attention_execute(q, k, v, cfg)
            total_skipped += stats.skipped_macs
            total_elided += stats.elided_output_elems
            layers.append({"node": node.id, "point": "attention",
                           **stats.to_dict()})
        elif isinstance(node.op, GELU):
            nxt = consumers[node.id]
            if len(nxt) != 1:
                continue
            nxt_node = graph.node(nxt[0])
            if not isinstance(nxt_node.op, Linear):
                continue
            t = record[node.id]
            tok = t.reshape(t.shape[0], -1).T
            _, stats = fp.prune_activation_map(tok, cfg.theta_act,
                                               cfg.granularity,
                                               nxt_node.op.c_out)
            total_skipped += stats.skipped_macs
            layers.append({"node": node.id, "point": "activation",
                           **stats.to_dict()})
    agg = fp.SparsityStats(skipped_macs=total_skipped,
                           elided_output_elems=total_elided)
    return {"layers": layers, "aggregate_stats": agg}


def compare_experiments(cfg: ExperimentConfig, schedule_names: list[str]) -> list[dict]:
    rows = []
    for name in schedule_names:
        if name not in SCHEDULE_PRESETS:
            raise ConfigError(f"unknown schedule {name!r}; "
                              f"known: {sorted(SCHEDULE_PRESETS)}")
        attention, fusion = SCHEDULE_PRESETS[name]
        sub = ExperimentConfig(model=cfg.model, hardware=cfg.hardware,
                               attention=attention, fusion=fusion,
                               pruning=None, seed=cfg.seed,
                               tolerance=cfg.tolerance)
        res = run_experiment(sub)
        rows.append({"schedule": name,
                     "ema_bytes": res["report"]["ema_bytes"],
                     "cycles": res["report"]["cycles"],
                     "energy_pj": res["report"]["energy_pj"],
                     "max_abs_deviation": res["max_abs_deviation"]})
    base = rows[0]
    for row in rows:
        for key in ("ema_bytes", "cycles", "energy_pj"):
            denom = base[key]
            row[f"{key}_norm"] = row[key] / denom if denom else 1.0
    return rows


SWEEP_AXES = ("scratchpad_bytes", "theta_attn", "theta_act", "t_q")


def sweep_experiments(cfg: ExperimentConfig, axis: str, values: list) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("sweep values must be a nonempty list")
    rows = []
    for value in values:
        sub = cfg
        if axis == "scratchpad_bytes":
            hw = HardwareConfig.from_dict(
                dict(cfg.hardware.to_dict(), scratchpad_bytes=int(value)))
            sub = ExperimentConfig(cfg.model, hw, cfg.attention, cfg.fusion,
                                   cfg.pruning, cfg.seed, cfg.tolerance)
        elif axis in ("theta_attn", "theta_act"):
            # the un-swept threshold stays off unless the config enables it
            base = cfg.pruning or fp.PruneConfig(theta_attn=0.0, theta_act=0.0)
            pruning = fp.PruneConfig(
                theta_attn=float(value) if axis == "theta_attn" else base.theta_attn,
                theta_act=float(value) if axis == "theta_act" else base.theta_act,
                granularity=base.granularity,
                cascade_enabled=base.cascade_enabled)
            sub = ExperimentConfig(cfg.model, cfg.hardware, cfg.attention,
                                   cfg.fusion, pruning, cfg.seed, cfg.tolerance)
        elif axis == "t_q":
            tiling = _fixed_tq_tiling(cfg, int(value))
            sub = ExperimentConfig(cfg.model, cfg.hardware, tiling, cfg.fusion,
                                   cfg.pruning, cfg.seed, cfg.tolerance)
        res = run_experiment(sub)
        report = res["adjusted_report"] if "adjusted_report" in res else res["report"]
        row = {"axis": axis, "value": value,
               "ema_bytes": report["ema_bytes"],
               "macs": report["macs"],
               "cycles": report["cycles"],
               "energy_pj": report["energy_pj"],
               "max_abs_deviation": res["max_abs_deviation"]}
        if "pruning" in res:
            attn = [l for l in res["pruning"] if l["point"] == "attention"]
            row["granularity"] = sub.pruning.granularity.value
            row["skipped_macs"] = sum(l["skipped_macs"] for l in res["pruning"])
            row["pruned_fraction"] = (sum(l["pruned_fraction"] for l in attn)
                                      / len(attn) if attn else 0.0)
            row["max_output_mse"] = max((l["output_mse"] for l in attn),
                                        default=0.0)
            row["min_output_cosine"] = min((l["output_cosine"] for l in attn),
                                           default=1.0)
        rows.append(row)
    return rows


def _fixed_tq_tiling(cfg: ExperimentConfig, t_q: int) -> at.AttentionTiling:
    graph = build_graph(cfg.model)
    for node in graph.nodes:
        if isinstance(node.op, Attention):
            dims = attention_dims(graph, node, cfg.hardware.element_bytes)
            if dims.N % t_q != 0:
                raise ConfigError(
                    f"t_q={t_q} does not divide N={dims.N} of node {node.id}")
    # resident mode: t_k is resolved to each layer's N_r at planning time
    return at.AttentionTiling(t_q, -1, at.ResidencyMode.RESIDENT_KV,
                              cfg.hardware.element_bytes)


# ---------------------------------------------------------------------------
# Output formatting
# ---------------------------------------------------------------------------

def emit(data, fmt: str, out_path: str | None, csv_fields: list[str] | None = None):
    if fmt == "json":
        text = json.dumps(data, sort_keys=True, indent=2) + "\n"
    else:
        rows = data if isinstance(data, list) else [data]
        if csv_fields is None:
            csv_fields = sorted({k for r in rows for k in r
                                 if not isinstance(r[k], (dict, list))})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=csv_fields, extrasaction="ignore",
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
        text = buf.getvalue()
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage by default; 2 means "infeasible" here
    def error(self, message):
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


HW_FLAG = re.compile(r"^--hw\.([A-Za-z_]+)=(.+)$")


def _extract_hw_overrides(extra: list[str]) -> dict:
    overrides = {}
    for token in extra:
        m = HW_FLAG.match(token)
        if not m:
            raise ConfigError(f"unrecognized argument {token!r}")
        key, value = m.group(1), m.group(2)
        overrides[key] = value
    return overrides


def make_parser() -> _Parser:
    p = _Parser(prog="convformer-sim",
                description="Schedule optimizer and cost simulator for hybrid "
                            "CNN-Transformer accelerator workloads")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--model", help="preset name (overrides config)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--tolerance", type=float, default=None,
                        help="max-abs equivalence tolerance (default 1e-6)")
        sp.add_argument("--out", help="output path (default stdout)")
        sp.add_argument("--format", choices=("json", "csv"), default="json")

    sp = sub.add_parser("run", help="run one experiment and emit its cost report")
    common(sp)
    sp = sub.add_parser("compare", help="run several schedules, emit a table")
    common(sp)
    sp.add_argument("--schedules", default="naive,full",
                    help=f"comma list from {sorted(SCHEDULE_PRESETS)}")
    sp = sub.add_parser("sweep", help="sweep one parameter axis")
    common(sp)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", required=True,
                    help="comma-separated numeric values")
    sub.add_parser("presets", help="list embedded model presets")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        hw_overrides = _extract_hw_overrides(extra)
        if args.command == "presets":
            data = []
            for name in PRESETS:
                g = build_preset(name)
                data.append({"name": name, "layers": len(g.nodes),
                             "input_shape": list(g.input_shape.as_tuple())})
            emit(data, "json", None)
            return EXIT_OK

        cfg = load_config(args.config, args, hw_overrides)
        if args.command == "run":
            result = run_experiment(cfg)
            if args.format == "csv":
                report = result.get("adjusted_report", result["report"])
                row = {k: report[k] for k in CostReport.CSV_FIELDS}
                row["max_abs_deviation"] = result["max_abs_deviation"]
                emit([row], "csv", args.out)
            else:
                emit(result, "json", args.out)
            if cfg.pruning is None and not result["equivalence_ok"]:
                print(f"equivalence failure: deviation "
                      f"{result['max_abs_deviation']:.3e} > {cfg.tolerance:.3e}",
                      file=sys.stderr)
                return EXIT_EQUIVALENCE
            return EXIT_OK
        if args.command == "compare":
            names = [s.strip() for s in args.schedules.split(",") if s.strip()]
            if len(names) < 2:
                raise ConfigError("compare needs at least 2 schedules")
            rows = compare_experiments(cfg, names)
            emit(rows, args.format, args.out)
            return EXIT_OK
        if args.command == "sweep":
            try:
                values = [float(v) if "." in v or "e" in v.lower() else int(v)
                          for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"sweep values must be numeric, got "
                                  f"{args.values!r}")
            rows = sweep_experiments(cfg, args.axis, values)
            emit(rows, args.format, args.out)
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, NotFoundError, ShapeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CapacityError, NoFeasiblePlanError, NoFeasibleTilingError) as e:
        print(f"infeasible schedule: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SimError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"output error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
