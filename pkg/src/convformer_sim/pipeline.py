"""Whole-network scheduling and execution.

A network schedule is a sequence of units stitched at DRAM granularity:
fusable chains (scheduled by the fusion partitioner), attention barriers
(scheduled by the tiling search, with projection GEMMs modeled as plain
untiled passes), and residual adds. One ScratchpadSim instance spans the
whole execution, so its counters are the network's EMA ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention_tiling as at
from . import layer_fusion as lf
from .errors import ConfigError
from .hwmodel import CostReport, HardwareConfig, ScratchpadSim, build_report
from .workload import (Add, Attention, AttentionDims, LayerNode, NetworkGraph,
                       attention_dims, attention_operands, layer_macs,
                       layer_vector_ops)


@dataclass
class ChainUnit:
    layers: list[lf.ChainLayer]
    plan: lf.FusionPlan


@dataclass
class AttentionUnit:
    node: LayerNode
    tiling: at.AttentionTiling | None   # None -> baseline spilled-score execution
    dims: AttentionDims | None = None
    buffer_bytes: int = 0


@dataclass
class AddUnit:
    node: LayerNode


ScheduleUnit = ChainUnit | AttentionUnit | AddUnit


@dataclass
class NetworkSchedule:
    units: list[ScheduleUnit]

    def to_dict(self) -> dict:
        out = []
        for u in self.units:
            if isinstance(u, ChainUnit):
                out.append({"kind": "chain",
                            "layers": [l.node.id for l in u.layers],
                            "plan": u.plan.to_dict()})
            elif isinstance(u, AttentionUnit):
                if u.tiling is None:
                    tiling = "baseline"
                else:
                    tiling = dict(u.tiling.to_dict(),
                                  ema_bytes=at.attention_ema(u.dims, u.tiling),
                                  buffer_bytes=u.buffer_bytes)
                out.append({"kind": "attention", "node": u.node.id,
                            "tiling": tiling})
            else:
                out.append({"kind": "add", "node": u.node.id})
        return {"units": out}


def plan_network(graph: NetworkGraph, hw: HardwareConfig,
                 attention_mode: str | at.AttentionTiling = "auto",
                 fusion_mode: str | dict = "auto") -> NetworkSchedule:
    """Build the unit schedule: fusion plans per chain, tilings per attention."""
    units: list[ScheduleUnit] = []
    chain_idx = 0
    for kind, nodes in lf.split_into_segments(graph):
        if kind == "chain":
            layers = lf.chain_from_nodes(graph, [n.id for n in nodes])
            if fusion_mode == "auto":
                plan = lf.partition_chain(layers, hw)
            elif fusion_mode == "singleton":
                plan = lf.singleton_plan(layers, hw)
            elif isinstance(fusion_mode, dict):
                plan = _fixed_plan(layers, fusion_mode.get(str(chain_idx)), hw)
            else:
                raise ConfigError(f"unknown fusion mode {fusion_mode!r}")
            units.append(ChainUnit(layers, plan))
            chain_idx += 1
        else:
            node = nodes[0]
            if isinstance(node.op, Attention):
                dims = attention_dims(graph, node, hw.element_bytes)
                buffer_bytes = 0
                if attention_mode == "auto":
                    tiling = at.search_attention_tiling(dims, hw)
                    buffer_bytes = at.tiling_buffer_bytes(dims, tiling, hw)
                elif attention_mode == "baseline":
                    tiling = None
                elif isinstance(attention_mode, at.AttentionTiling):
                    tiling = attention_mode
                    if tiling.mode is at.ResidencyMode.RESIDENT_KV:
                        # resident t_k always resolves to this layer's N_r
                        tiling = at.AttentionTiling(tiling.t_q, dims.N_r,
                                                    tiling.mode, hw.element_bytes)
                    buffer_bytes = at.tiling_buffer_bytes(dims, tiling, hw)
                else:
                    raise ConfigError(f"unknown attention mode {attention_mode!r}")
                units.append(AttentionUnit(node, tiling, dims, buffer_bytes))
            elif isinstance(node.op, Add):
                units.append(AddUnit(node))
            else:
                raise ConfigError(f"node {node.id} cannot be scheduled")
    return NetworkSchedule(units)


def _fixed_plan(layers: list[lf.ChainLayer], group_spec: list | None,
                hw: HardwareConfig) -> lf.FusionPlan:
    if group_spec is None:
        return lf.singleton_plan(layers, hw)
    groups = []
    emas = []
    extras = []
    covered = 0
    for g in group_spec:
        try:
            start, end = int(g["start"]), int(g["end"])
            tile = lf.TileShape(int(g["tile"][0]), int(g["tile"][1]))
            policy = lf.HaloPolicy(g.get("policy", "recompute"))
        except (KeyError, ValueError, TypeError, IndexError) as e:
            raise ConfigError(f"schedule.fusion group {g!r}: {e}")
        if start != covered or end < start or end >= len(layers):
            raise ConfigError(f"fixed fusion groups must cover the chain; "
                              f"bad group [{start}, {end}]")
        sub = layers[start:end + 1]
        resident = True
        try:
            lf.group_buffer_bytes(sub, tile, policy, True, hw)
        except Exception:
            resident = False
            lf.group_buffer_bytes(sub, tile, policy, False, hw)
        ema, extra = lf.group_ema(sub, tile, policy, resident, hw)
        groups.append(lf.FusionGroup(start, end, tile, policy, resident))
        emas.append(ema)
        extras.append(extra)
        covered = end + 1
    if covered != len(layers):
        raise ConfigError("fixed fusion groups do not cover the whole chain")
    return lf.FusionPlan(groups, sum(emas), sum(extras), emas, extras)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _balanced_split(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _gemm_pass(sim: ScratchpadSim, tag: str, in_elems: int, w_elems: int,
               out_elems: int, eb: int):
    """Projection pass with resident weights and block-streamed activations.

    Every input and output byte moves exactly once, so total traffic equals
    in + weights + out regardless of the block count. Blocks shrink until the
    working set fits whatever scratchpad headroom remains.
    """
    sim.alloc(f"{tag}_w", w_elems * eb)
    sim.load(f"{tag}_w", w_elems * eb)
    avail = sim.capacity - sim.live_bytes
    blocks = 1
    limit = max(in_elems, out_elems, 1)
    while blocks < limit:
        ib = -(-in_elems // blocks)
        ob = -(-out_elems // blocks)
        if (ib + ob) * eb <= avail:
            break
        blocks += 1
    ib = -(-in_elems // blocks)
    ob = -(-out_elems // blocks)
    sim.alloc(f"{tag}_in", ib * eb)
    sim.alloc(f"{tag}_out", ob * eb)
    for i_n, o_n in zip(_balanced_split(in_elems, blocks),
                        _balanced_split(out_elems, blocks)):
        sim.load(f"{tag}_in", i_n * eb)
        sim.touch(f"{tag}_out", (i_n + w_elems + o_n) * eb)
        sim.store(f"{tag}_out", o_n * eb)
    sim.free(f"{tag}_out")
    sim.free(f"{tag}_in")
    sim.free(f"{tag}_w")


def attention_unit_execute(x: np.ndarray, node: LayerNode,
                           params: dict[str, np.ndarray],
                           tiling: at.AttentionTiling | None,
                           sim: ScratchpadSim, hw: HardwareConfig) -> np.ndarray:
    """Projections (Q, spatial reduction, K, V) then the attention core.

    Projection operands round-trip through DRAM; the core re-reads Q/K/V per
    its residency mode, matching the closed-form EMA model.
    """
    op = node.op
    assert isinstance(op, Attention)
    c, h, w = x.shape
    eb = hw.element_bytes
    n_tok = h * w
    q, k, v = attention_operands(x, op, params)
    n_r = k.shape[1]

    _gemm_pass(sim, "attnQ", n_tok * c, c * c, n_tok * c, eb)
    if op.sr_ratio > 1:
        _gemm_pass(sim, "attnSR", n_tok * c, c * op.sr_ratio ** 2, n_r * c, eb)
    _gemm_pass(sim, "attnK", n_r * c, c * c, n_r * c, eb)
    _gemm_pass(sim, "attnV", n_r * c, c * c, n_r * c, eb)

    if tiling is None:
        o = at.untiled_attention_execute(q, k, v, sim, element_bytes=eb)
    else:
        o = at.tiled_attention_execute(q, k, v, tiling, sim)
    merged = o.transpose(1, 0, 2).reshape(n_tok, c)
    return merged.T.reshape(c, h, w)


def attention_unit_ema(graph: NetworkGraph, node: LayerNode,
                       tiling: at.AttentionTiling | None,
                       hw: HardwareConfig) -> int:
    """Closed-form EMA of an attention unit (projections + core)."""
    op = node.op
    assert isinstance(op, Attention)
    dims = attention_dims(graph, node, hw.element_bytes)
    shp = graph.in_shape(node)
    c = shp.c
    eb = hw.element_bytes
    ema = (2 * dims.N * c + c * c) * eb                    # Q projection
    if op.sr_ratio > 1:
        ema += (dims.N * c + c * op.sr_ratio ** 2 + dims.N_r * c) * eb
    ema += 2 * (2 * dims.N_r * c + c * c) * eb             # K and V projections
    if tiling is None:
        ema += at.untiled_attention_ema(dims)
    else:
        ema += at.attention_ema(dims, tiling)
    return ema


def add_unit_execute(a: np.ndarray, b: np.ndarray, sim: ScratchpadSim,
                     hw: HardwareConfig) -> np.ndarray:
    """Residual add, block-streamed; each operand and the sum move once."""
    eb = hw.element_bytes
    elems = a.size
    avail = sim.capacity
    blocks = 1
    while blocks < elems and 2 * (-(-elems // blocks)) * eb > avail:
        blocks += 1
    blk = -(-elems // blocks)
    sim.alloc("add_a", blk * eb)
    sim.alloc("add_b", blk * eb)
    for n in _balanced_split(elems, blocks):
        sim.load("add_a", n * eb)
        sim.load("add_b", n * eb)
        sim.touch("add_a", 3 * n * eb)
        sim.store("add_a", n * eb)
    sim.free("add_b")
    sim.free("add_a")
    return a + b


def execute_network(graph: NetworkGraph, schedule: NetworkSchedule,
                    x: np.ndarray, sim: ScratchpadSim,
                    params: dict[str, dict[str, np.ndarray]],
                    hw: HardwareConfig) -> tuple[np.ndarray, list[dict]]:
    """Run the scheduled network through one simulator; returns (output, breakdown)."""
    values: dict[str, np.ndarray] = {}
    breakdown: list[dict] = []
    out = np.asarray(x, dtype=np.float64)

    def unit_input(node: LayerNode) -> np.ndarray:
        return values[node.preds[0]] if node.preds else x

    for unit in schedule.units:
        ema0 = sim.ema_bytes
        if isinstance(unit, ChainUnit):
            first = unit.layers[0].node
            xin = unit_input(first)
            out = lf.fused_execute(unit.layers, unit.plan, xin, sim, params, hw)
            values[unit.layers[-1].node.id] = out
            macs = sum(layer_macs(graph, l.node) for l in unit.layers)
            macs += unit.plan.total_extra_macs
            vops = sum(layer_vector_ops(graph, l.node) for l in unit.layers)
            label = "chain[" + ",".join(l.node.id for l in unit.layers) + "]"
        elif isinstance(unit, AttentionUnit):
            xin = unit_input(unit.node)
            out = attention_unit_execute(xin, unit.node, params[unit.node.id],
                                         unit.tiling, sim, hw)
            values[unit.node.id] = out
            macs = layer_macs(graph, unit.node)
            vops = layer_vector_ops(graph, unit.node)
            label = unit.node.id
        else:
            a = values[unit.node.preds[0]] if unit.node.preds[0] in values else x
            b = values[unit.node.preds[1]] if unit.node.preds[1] in values else x
            out = add_unit_execute(a, b, sim, hw)
            values[unit.node.id] = out
            macs = 0
            vops = layer_vector_ops(graph, unit.node)
            label = unit.node.id
        breakdown.append({"unit": label, "ema_bytes": sim.ema_bytes - ema0,
                          "macs": macs, "vector_ops": vops})
    return out, breakdown


def schedule_totals(graph: NetworkGraph, schedule: NetworkSchedule,
                    hw: HardwareConfig) -> dict:
    """Closed-form totals for a schedule, independent of execution."""
    ema = 0
    extra_macs = 0
    for unit in schedule.units:
        if isinstance(unit, ChainUnit):
            ema += unit.plan.total_ema
            extra_macs += unit.plan.total_extra_macs
        elif isinstance(unit, AttentionUnit):
            ema += attention_unit_ema(graph, unit.node, unit.tiling, hw)
        else:
            shp = graph.out_shape(unit.node.id)
            ema += 3 * shp.elements * hw.element_bytes
    macs = sum(layer_macs(graph, n) for n in graph.nodes) + extra_macs
    vops = sum(layer_vector_ops(graph, n) for n in graph.nodes)
    return {"ema_bytes": ema, "macs": macs, "vector_ops": vops,
            "extra_macs": extra_macs}


def run_schedule(graph: NetworkGraph, schedule: NetworkSchedule, x: np.ndarray,
                 params: dict[str, dict[str, np.ndarray]], hw: HardwareConfig,
                 seed: int | None = None) -> tuple[np.ndarray, CostReport]:
    """Execute a schedule and assemble its cost report from the sim counters."""
    sim = ScratchpadSim(hw.scratchpad_bytes)
    out, breakdown = execute_network(graph, schedule, x, sim, params, hw)
    totals = schedule_totals(graph, schedule, hw)
    if totals["ema_bytes"] != sim.ema_bytes:
        raise AssertionError(
            f"closed-form EMA {totals['ema_bytes']} != simulator {sim.ema_bytes}")
    report = build_report(totals["macs"], totals["vector_ops"], sim, hw,
                          breakdown=breakdown, seed=seed)
    return out, report
