"""Attention tiling: EMA model, tile search, load scheduling, tiled executor.

The mechanism modeled here keeps the attention score matrix on chip so it
never spills to DRAM. Two residency modes exist:

* ``RESIDENT_KV`` — K and V fit on chip whole; they are loaded exactly once
  (right-operand-first: the right matrix of each GEMM becomes the stationary
  operand), and Q streams through in row tiles. Softmax sees full score rows,
  so results match the dense reference bit-for-bit up to BLAS ordering.
* ``STREAMING_KV`` — K/V are streamed in column blocks once per Q tile and an
  online softmax (running max / running sum / rescaled accumulator) replaces
  the dense row softmax.

Every closed-form EMA and buffer formula in this module is byte-exact against
a replay of the emitted transaction schedule through ``ScratchpadSim``; the
test suite enforces this for the whole search grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CapacityError, NoFeasibleTilingError, ShapeError
from .hwmodel import HardwareConfig, ScratchpadSim
from .workload import AttentionDims


class ResidencyMode(str, Enum):
    RESIDENT_KV = "resident_kv"
    STREAMING_KV = "streaming_kv"


@dataclass(frozen=True)
class AttentionTiling:
    t_q: int                 # query row-tile, tokens
    t_k: int                 # key/value column-tile, tokens
    mode: ResidencyMode
    element_bytes: int = 1

    def to_dict(self) -> dict:
        return {"t_q": self.t_q, "t_k": self.t_k, "mode": self.mode.value,
                "element_bytes": self.element_bytes}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionTiling":
        return cls(int(d["t_q"]), int(d["t_k"]), ResidencyMode(d["mode"]),
                   int(d.get("element_bytes", 1)))


def _validate(dims: AttentionDims, tiling: AttentionTiling):
    if not (1 <= tiling.t_q <= dims.N):
        raise ShapeError("tiling", f"t_q={tiling.t_q} out of [1, {dims.N}]")
    if not (1 <= tiling.t_k <= dims.N_r):
        raise ShapeError("tiling", f"t_k={tiling.t_k} out of [1, {dims.N_r}]")
    if tiling.mode is ResidencyMode.RESIDENT_KV and tiling.t_k != dims.N_r:
        raise ShapeError("tiling", "resident mode requires t_k = N_r")


# ---------------------------------------------------------------------------
# Closed-form EMA and buffer requirement
# ---------------------------------------------------------------------------

def attention_ema(dims: AttentionDims, tiling: AttentionTiling,
                  hw: HardwareConfig | None = None) -> int:
    """DRAM bytes for one attention core; infeasible tilings still get a cost."""
    _validate(dims, tiling)
    eb = dims.element_bytes
    qo = 2 * dims.N * dims.d
    if tiling.mode is ResidencyMode.RESIDENT_KV:
        kv = 2 * dims.N_r * dims.d
    else:
        passes = math.ceil(dims.N / tiling.t_q)
        kv = 2 * dims.N_r * dims.d * passes
    return dims.heads * (qo + kv) * eb


def untiled_attention_ema(dims: AttentionDims) -> int:
    """Baseline with the score matrix spilled: one write and one re-read of S."""
    eb = dims.element_bytes
    per_head = 2 * dims.N * dims.d + 2 * dims.N_r * dims.d + 2 * dims.N * dims.N_r
    return dims.heads * per_head * eb


def tiling_buffer_bytes(dims: AttentionDims, tiling: AttentionTiling,
                        hw: HardwareConfig) -> int:
    """Peak live scratchpad bytes for the tiling; raises if over capacity.

    Heads are processed sequentially, so the requirement is per-head. The
    resident layout holds K, V, one score tile, and a shared Q/O tile (Q is
    dead once scores exist, so the output reuses its buffer). The streaming
    layout holds a Q tile, K/V blocks, one score block, and the online-softmax
    state (accumulator plus running max and sum vectors).
    """
    _validate(dims, tiling)
    eb = dims.element_bytes
    if tiling.mode is ResidencyMode.RESIDENT_KV:
        elems = (2 * dims.N_r * dims.d          # K, V resident
                 + tiling.t_q * dims.N_r        # score tile
                 + tiling.t_q * dims.d)         # shared Q/O tile
    else:
        elems = (2 * tiling.t_k * dims.d        # K, V blocks
                 + tiling.t_q * tiling.t_k      # score block
                 + 2 * tiling.t_q * dims.d      # Q tile + accumulator
                 + 2 * tiling.t_q)              # running max + running sum
    req = elems * eb
    if req > hw.scratchpad_bytes:
        raise CapacityError(req, hw.scratchpad_bytes, what="attention tiling")
    return req


def _divisors(n: int) -> list[int]:
    return [i for i in range(1, n + 1) if n % i == 0]


def search_attention_tiling(dims: AttentionDims, hw: HardwareConfig) -> AttentionTiling:
    """Exhaustive tile search: minimum EMA over divisors of N and N_r, both modes.

    Ties break toward larger t_q, then resident over streaming, then larger
    t_k — fewer schedule iterations at equal traffic.
    """
    eb = dims.element_bytes
    best: tuple | None = None
    best_tiling: AttentionTiling | None = None
    for t_q in _divisors(dims.N):
        candidates = [AttentionTiling(t_q, dims.N_r, ResidencyMode.RESIDENT_KV, eb)]
        candidates += [AttentionTiling(t_q, t_k, ResidencyMode.STREAMING_KV, eb)
                       for t_k in _divisors(dims.N_r)]
        for cand in candidates:
            try:
                tiling_buffer_bytes(dims, cand, hw)
            except CapacityError:
                continue
            ema = attention_ema(dims, cand)
            mode_rank = 0 if cand.mode is ResidencyMode.RESIDENT_KV else 1
            key = (ema, -cand.t_q, mode_rank, -cand.t_k)
            if best is None or key < best:
                best = key
                best_tiling = cand
    if best_tiling is None:
        raise NoFeasibleTilingError(
            f"no tiling fits {hw.scratchpad_bytes} B for dims {dims}")
    return best_tiling


# ---------------------------------------------------------------------------
# Transaction schedule (the load-order artifact) and its replay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Txn:
    action: str          # alloc | load | store | touch | free
    region: str
    nbytes: int
    head: int = -1
    tile: int = -1
    block: int = -1
    what: str = ""


def _tile_rows(total: int, step: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + step, total)) for lo in range(0, total, step)]


def schedule_attention(dims: AttentionDims, tiling: AttentionTiling) -> list[Txn]:
    """Ordered scratchpad transactions for one attention core, all heads.

    Right matrices come first: in resident mode K and V are allocated and
    loaded before any Q tile and each of their bytes is loaded exactly once
    per head; in streaming mode they are re-streamed once per Q tile.
    """
    _validate(dims, tiling)
    eb = dims.element_bytes
    txns: list[Txn] = []
    q_tiles = _tile_rows(dims.N, tiling.t_q)
    if tiling.mode is ResidencyMode.RESIDENT_KV:
        kv_bytes = dims.N_r * dims.d * eb
        for h in range(dims.heads):
            txns.append(Txn("alloc", "K", kv_bytes, h))
            txns.append(Txn("load", "K", kv_bytes, h, what="load_k"))
            txns.append(Txn("alloc", "V", kv_bytes, h))
            txns.append(Txn("load", "V", kv_bytes, h, what="load_v"))
            txns.append(Txn("alloc", "QO", tiling.t_q * dims.d * eb, h))
            txns.append(Txn("alloc", "S", tiling.t_q * dims.N_r * eb, h))
            for t, (lo, hi) in enumerate(q_tiles):
                rows = hi - lo
                txns.append(Txn("load", "QO", rows * dims.d * eb, h, t, what="load_q"))
                txns.append(Txn("touch", "S", rows * dims.N_r * eb, h, t, what="scores"))
                txns.append(Txn("touch", "S", rows * dims.N_r * eb, h, t, what="softmax"))
                txns.append(Txn("touch", "QO", rows * dims.d * eb, h, t, what="context"))
                txns.append(Txn("store", "QO", rows * dims.d * eb, h, t, what="store_o"))
            for region in ("S", "QO", "V", "K"):
                txns.append(Txn("free", region, 0, h))
    else:
        k_blocks = _tile_rows(dims.N_r, tiling.t_k)
        for h in range(dims.heads):
            txns.append(Txn("alloc", "K", tiling.t_k * dims.d * eb, h))
            txns.append(Txn("alloc", "V", tiling.t_k * dims.d * eb, h))
            txns.append(Txn("alloc", "Q", tiling.t_q * dims.d * eb, h))
            txns.append(Txn("alloc", "ACC", tiling.t_q * dims.d * eb, h))
            txns.append(Txn("alloc", "M", tiling.t_q * eb, h))
            txns.append(Txn("alloc", "L", tiling.t_q * eb, h))
            txns.append(Txn("alloc", "S", tiling.t_q * tiling.t_k * eb, h))
            for t, (lo, hi) in enumerate(q_tiles):
                rows = hi - lo
                txns.append(Txn("load", "Q", rows * dims.d * eb, h, t, what="load_q"))
                for b, (blo, bhi) in enumerate(k_blocks):
                    brows = bhi - blo
                    txns.append(Txn("load", "K", brows * dims.d * eb, h, t, b, "load_k"))
                    txns.append(Txn("load", "V", brows * dims.d * eb, h, t, b, "load_v"))
                    txns.append(Txn("touch", "S", rows * brows * eb, h, t, b, "scores"))
                    txns.append(Txn("touch", "ACC", rows * dims.d * eb, h, t, b, "online_update"))
                txns.append(Txn("touch", "ACC", rows * dims.d * eb, h, t, what="finalize"))
                txns.append(Txn("store", "ACC", rows * dims.d * eb, h, t, what="store_o"))
            for region in ("S", "L", "M", "ACC", "Q", "V", "K"):
                txns.append(Txn("free", region, 0, h))
    return txns


def schedule_untiled_attention(dims: AttentionDims) -> list[Txn]:
    """Baseline schedule: the score matrix spills to DRAM and is re-read."""
    eb = dims.element_bytes
    txns: list[Txn] = []
    qb = dims.N * dims.d * eb
    kvb = dims.N_r * dims.d * eb
    sb = dims.N * dims.N_r * eb
    for h in range(dims.heads):
        txns.append(Txn("alloc", "Q", qb, h))
        txns.append(Txn("load", "Q", qb, h, what="load_q"))
        txns.append(Txn("alloc", "K", kvb, h))
        txns.append(Txn("load", "K", kvb, h, what="load_k"))
        txns.append(Txn("alloc", "S", sb, h))
        txns.append(Txn("touch", "S", sb, h, what="scores"))
        txns.append(Txn("store", "S", sb, h, what="spill_s"))
        txns.append(Txn("free", "S", 0, h))
        txns.append(Txn("free", "K", 0, h))
        txns.append(Txn("free", "Q", 0, h))
        txns.append(Txn("alloc", "V", kvb, h))
        txns.append(Txn("load", "V", kvb, h, what="load_v"))
        txns.append(Txn("alloc", "S", sb, h))
        txns.append(Txn("load", "S", sb, h, what="reload_s"))
        txns.append(Txn("touch", "S", sb, h, what="softmax"))
        txns.append(Txn("alloc", "O", qb, h))
        txns.append(Txn("touch", "O", qb, h, what="context"))
        txns.append(Txn("store", "O", qb, h, what="store_o"))
        txns.append(Txn("free", "O", 0, h))
        txns.append(Txn("free", "S", 0, h))
        txns.append(Txn("free", "V", 0, h))
    return txns


def replay(txns: list[Txn], sim: ScratchpadSim):
    """Drive a schedule through the simulator; raises on capacity violations."""
    for t in txns:
        if t.action == "alloc":
            sim.alloc(t.region, t.nbytes)
        elif t.action == "load":
            sim.load(t.region, t.nbytes)
        elif t.action == "store":
            sim.store(t.region, t.nbytes)
        elif t.action == "touch":
            sim.touch(t.region, t.nbytes)
        elif t.action == "free":
            sim.free(t.region)
        else:
            raise ValueError(f"unknown action {t.action!r}")


# ---------------------------------------------------------------------------
# Online softmax
# ---------------------------------------------------------------------------

@dataclass
class SoftmaxState:
    m: np.ndarray    # running row max, (t_q,)
    l: np.ndarray    # running row sum of exponentials, (t_q,)
    acc: np.ndarray  # rescaled output accumulator, (t_q, d)


def init_softmax_state(rows: int, d: int) -> SoftmaxState:
    return SoftmaxState(m=np.full(rows, -np.inf), l=np.zeros(rows),
                        acc=np.zeros((rows, d)))


def online_softmax_update(state: SoftmaxState, s_block: np.ndarray,
                          v_block: np.ndarray) -> SoftmaxState:
    """One streaming-softmax step over a (rows x t_k) score block."""
    m_new = np.maximum(state.m, s_block.max(axis=1))
    scale = np.exp(state.m - m_new)  # exp(-inf) = 0 on the first block
    e = np.exp(s_block - m_new[:, None])
    l_new = state.l * scale + e.sum(axis=1)
    acc_new = state.acc * scale[:, None] + e @ v_block
    return SoftmaxState(m=m_new, l=l_new, acc=acc_new)


# ---------------------------------------------------------------------------
# Tiled execution (interprets the schedule, so traffic matches by construction)
# ---------------------------------------------------------------------------

def tiled_attention_execute(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                            tiling: AttentionTiling, sim: ScratchpadSim) -> np.ndarray:
    """Tile-by-tile softmax(QK^T/sqrt(d))V; issues all traffic through ``sim``.

    q is (heads, N, d); k, v are (heads, N_r, d). Capacity errors from the
    simulator propagate: an infeasible tiling cannot be executed.
    """
    heads, n, d = q.shape
    n_r = k.shape[1]
    dims = AttentionDims(N=n, N_r=n_r, d=d, heads=heads,
                         element_bytes=tiling.element_bytes)
    out = np.empty_like(q)
    inv_scale = 1.0 / math.sqrt(d)
    q_tiles = _tile_rows(n, tiling.t_q)
    k_blocks = _tile_rows(n_r, tiling.t_k)

    s_tile: np.ndarray | None = None
    state: SoftmaxState | None = None
    for txn in schedule_attention(dims, tiling):
        if txn.action in ("alloc", "free"):
            getattr(sim, txn.action)(txn.region, *(() if txn.action == "free"
                                                   else (txn.nbytes,)))
            continue
        if txn.action == "load":
            sim.load(txn.region, txn.nbytes)
            if txn.what == "load_q":
                lo, hi = q_tiles[txn.tile]
                if tiling.mode is ResidencyMode.STREAMING_KV:
                    state = init_softmax_state(hi - lo, d)
            continue
        if txn.action == "store":
            sim.store(txn.region, txn.nbytes)
            continue
        # touch: compute steps
        sim.touch(txn.region, txn.nbytes)
        h, lo, hi = txn.head, *q_tiles[txn.tile]
        if txn.what == "scores":
            if tiling.mode is ResidencyMode.RESIDENT_KV:
                s_tile = (q[h, lo:hi] @ k[h].T) * inv_scale
            else:
                blo, bhi = k_blocks[txn.block]
                s_tile = (q[h, lo:hi] @ k[h, blo:bhi].T) * inv_scale
        elif txn.what == "softmax":
            assert s_tile is not None
            m = s_tile.max(axis=1, keepdims=True)
            e = np.exp(s_tile - m)
            s_tile = e / e.sum(axis=1, keepdims=True)
        elif txn.what == "context":
            assert s_tile is not None
            out[h, lo:hi] = s_tile @ v[h]
        elif txn.what == "online_update":
            assert state is not None and s_tile is not None
            blo, bhi = k_blocks[txn.block]
            state = online_softmax_update(state, s_tile, v[h, blo:bhi])
        elif txn.what == "finalize":
            assert state is not None
            out[h, lo:hi] = state.acc / state.l[:, None]
    return out


def untiled_attention_execute(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                              sim: ScratchpadSim, element_bytes: int = 1) -> np.ndarray:
    """Baseline dense attention with the score matrix spilled to DRAM."""
    heads, n, d = q.shape
    n_r = k.shape[1]
    dims = AttentionDims(N=n, N_r=n_r, d=d, heads=heads, element_bytes=element_bytes)
    out = np.empty_like(q)
    inv_scale = 1.0 / math.sqrt(d)
    s: np.ndarray | None = None
    for txn in schedule_untiled_attention(dims):
        if txn.action in ("alloc", "free"):
            getattr(sim, txn.action)(txn.region, *(() if txn.action == "free"
                                                   else (txn.nbytes,)))
            continue
        if txn.action == "load":
            sim.load(txn.region, txn.nbytes)
        elif txn.action == "store":
            sim.store(txn.region, txn.nbytes)
        else:
            sim.touch(txn.region, txn.nbytes)
            h = txn.head
            if txn.what == "scores":
                s = (q[h] @ k[h].T) * inv_scale
            elif txn.what == "softmax":
                assert s is not None
                m = s.max(axis=1, keepdims=True)
                e = np.exp(s - m)
                s = e / e.sum(axis=1, keepdims=True)
            elif txn.what == "context":
                assert s is not None
                out[h] = s @ v[h]
    return out
