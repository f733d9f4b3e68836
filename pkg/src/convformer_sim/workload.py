"""ConvFormer layer graph, shape inference, presets, and the reference executor.

The reference executor runs every layer densely in float64 with standard
row-wise softmax; it is the correctness oracle against which every optimized
schedule (tiled attention, fused chains) is checked. Presets are reduced-scale
topologies: operator sequence follows the published stage patterns of the
hybrid CNN-Transformer families they are named after, with dimensions shrunk
so any tensor fits in ~1 MiB. Weights are drawn from a seeded generator,
uniform in [-0.5, 0.5]; determinism matters more than realism here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NotFoundError, NumericsError, ShapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class TensorShape:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.n, self.c, self.h, self.w) < 1:
            raise ShapeError("shape", f"all dims must be >= 1, got {self}")

    @property
    def tokens(self) -> int:
        """Sequence view: h*w tokens of dimension c."""
        return self.h * self.w

    @property
    def elements(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


# ---------------------------------------------------------------------------
# Layer kinds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    pad: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.k < 1 or self.stride < 1:
            raise ShapeError("conv2d", "k and stride must be >= 1")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ShapeError("conv2d", "groups must divide c_in and c_out")


@dataclass(frozen=True)
class Attention:
    heads: int
    d_head: int
    sr_ratio: int = 1

    def __post_init__(self):
        if self.heads < 1 or self.d_head < 1 or self.sr_ratio < 1:
            raise ShapeError("attention", "heads, d_head, sr_ratio must be >= 1")


@dataclass(frozen=True)
class Linear:
    c_in: int
    c_out: int


@dataclass(frozen=True)
class LayerNorm:
    pass


@dataclass(frozen=True)
class GELU:
    pass


@dataclass(frozen=True)
class Add:
    residual_of: str  # id of the skip-connection source


@dataclass(frozen=True)
class Downsample:
    """Patch-merging: learned k x k strided conv, channel-preserving."""
    k: int
    stride: int


LayerOp = Conv2D | Attention | Linear | LayerNorm | GELU | Add | Downsample


@dataclass(frozen=True)
class LayerNode:
    id: str
    op: LayerOp
    preds: tuple[str, ...] = ()


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    input_shape: TensorShape
    shapes: dict[str, TensorShape] = field(default_factory=dict)

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise NotFoundError(f"no node {node_id!r}")

    def out_shape(self, node_id: str) -> TensorShape:
        if node_id not in self.shapes:
            raise ShapeError(node_id, "shapes not inferred yet")
        return self.shapes[node_id]

    def in_shape(self, node: LayerNode) -> TensorShape:
        if not node.preds:
            return self.input_shape
        return self.out_shape(node.preds[0])


# ---------------------------------------------------------------------------
# Attention geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionDims:
    """Operand geometry of one attention operator (per-head core)."""
    N: int        # query tokens
    N_r: int      # key/value tokens after spatial reduction
    d: int        # per-head dimension
    heads: int
    element_bytes: int = 1

    def __post_init__(self):
        if self.N < 1 or self.N_r < 1 or self.d < 1 or self.heads < 1:
            raise ShapeError("attention", "dims must be >= 1")
        if self.N_r > self.N:
            raise ShapeError("attention", f"N_r={self.N_r} exceeds N={self.N}")


def attention_dims(graph: NetworkGraph, node: LayerNode, element_bytes: int = 1) -> AttentionDims:
    op = node.op
    assert isinstance(op, Attention)
    shp = graph.in_shape(node)
    n_tok = shp.tokens
    h_r, w_r = _sr_hw(shp.h, shp.w, op.sr_ratio)
    return AttentionDims(N=n_tok, N_r=h_r * w_r, d=op.d_head, heads=op.heads,
                         element_bytes=element_bytes)


def _sr_hw(h: int, w: int, sr: int) -> tuple[int, int]:
    if sr == 1:
        return h, w
    return (h - sr) // sr + 1, (w - sr) // sr + 1


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------

def conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(graph: NetworkGraph) -> NetworkGraph:
    """Annotate every node with its output shape; idempotent."""
    shapes: dict[str, TensorShape] = {}

    def shape_of(pred: str) -> TensorShape:
        return shapes[pred]

    seen: set[str] = set()
    for node in graph.nodes:
        for p in node.preds:
            if p not in seen:
                raise ShapeError(node.id, f"predecessor {p!r} not defined earlier "
                                          "(graph must be topologically ordered)")
        ins = graph.input_shape if not node.preds else shape_of(node.preds[0])
        op = node.op
        if isinstance(op, Conv2D):
            if ins.c != op.c_in:
                raise ShapeError(node.id, f"expects c_in={op.c_in}, got {ins.c}")
            h = conv_out_dim(ins.h, op.k, op.stride, op.pad)
            w = conv_out_dim(ins.w, op.k, op.stride, op.pad)
            if h < 1 or w < 1:
                raise ShapeError(node.id, "kernel larger than padded input")
            out = TensorShape(ins.n, op.c_out, h, w)
        elif isinstance(op, Downsample):
            h = conv_out_dim(ins.h, op.k, op.stride, 0)
            w = conv_out_dim(ins.w, op.k, op.stride, 0)
            if h < 1 or w < 1:
                raise ShapeError(node.id, "patch larger than input")
            out = TensorShape(ins.n, ins.c, h, w)
        elif isinstance(op, Attention):
            if op.heads * op.d_head != ins.c:
                raise ShapeError(node.id,
                                 f"heads*d_head = {op.heads * op.d_head} != c = {ins.c}")
            out = ins
        elif isinstance(op, Linear):
            if ins.c != op.c_in:
                raise ShapeError(node.id, f"expects c_in={op.c_in}, got {ins.c}")
            out = TensorShape(ins.n, op.c_out, ins.h, ins.w)
        elif isinstance(op, (LayerNorm, GELU)):
            out = ins
        elif isinstance(op, Add):
            if len(node.preds) != 2:
                raise ShapeError(node.id, "Add needs exactly 2 predecessors")
            a, b = shape_of(node.preds[0]), shape_of(node.preds[1])
            if a != b:
                raise ShapeError(node.id, f"mismatched operands {a} vs {b}")
            if op.residual_of not in node.preds:
                raise ShapeError(node.id, f"residual source {op.residual_of!r} "
                                          "is not a predecessor")
            out = a
        else:
            raise ShapeError(node.id, f"unknown op {op!r}")
        shapes[node.id] = out
        seen.add(node.id)
    return replace(graph, shapes=shapes)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _draw(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-0.5, 0.5, size=shape)


def init_params(graph: NetworkGraph, seed: int = 0) -> dict[str, dict[str, np.ndarray]]:
    """Seeded per-node parameters; stable across runs for a given graph."""
    params: dict[str, dict[str, np.ndarray]] = {}
    for idx, node in enumerate(graph.nodes):
        rng = np.random.default_rng([seed, idx])
        op = node.op
        p: dict[str, np.ndarray] = {}
        if isinstance(op, Conv2D):
            p["w"] = _draw(rng, op.c_out, op.c_in // op.groups, op.k, op.k)
            p["b"] = _draw(rng, op.c_out)
        elif isinstance(op, Downsample):
            c = graph.in_shape(node).c if graph.shapes else None
            if c is None:
                raise ShapeError(node.id, "infer shapes before init_params")
            p["w"] = _draw(rng, c, c, op.k, op.k)
            p["b"] = _draw(rng, c)
        elif isinstance(op, Linear):
            p["w"] = _draw(rng, op.c_in, op.c_out)
            p["b"] = _draw(rng, op.c_out)
        elif isinstance(op, Attention):
            c = op.heads * op.d_head
            p["wq"] = _draw(rng, c, c)
            p["wk"] = _draw(rng, c, c)
            p["wv"] = _draw(rng, c, c)
            if op.sr_ratio > 1:
                # depthwise patch reduction: keeps the weight footprint at
                # c*sr^2 so the pass stays schedulable on small scratchpads
                p["w_sr"] = _draw(rng, c, 1, op.sr_ratio, op.sr_ratio)
        # LayerNorm runs with gamma=1, beta=0 so zero rows stay zero rows;
        # GELU and Add carry no parameters.
        params[node.id] = p
    return params


def weight_elems(node: LayerNode) -> int:
    op = node.op
    if isinstance(op, Conv2D):
        return op.c_out * (op.c_in // op.groups) * op.k * op.k + op.c_out
    if isinstance(op, Downsample):
        return 0  # filled by weight_elems_with_shape when channels are known
    if isinstance(op, Linear):
        return op.c_in * op.c_out + op.c_out
    return 0


def weight_elems_with_shape(node: LayerNode, in_shape: TensorShape) -> int:
    op = node.op
    if isinstance(op, Downsample):
        return in_shape.c * in_shape.c * op.k * op.k + in_shape.c
    return weight_elems(node)


# ---------------------------------------------------------------------------
# Dense kernels (shared by reference and fused executors)
# ---------------------------------------------------------------------------

def conv2d_region(x: np.ndarray, op: Conv2D | Downsample, w: np.ndarray,
                  b: np.ndarray, rows: tuple[int, int], cols: tuple[int, int],
                  origin: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Compute conv output pixels for out rows [r0,r1) x cols [c0,c1).

    ``x`` is a (c, h', w') array whose [0,0] pixel sits at absolute position
    ``origin``; positions outside it are zero padding. The reference executor
    passes the full tensor at origin (0,0); the fused executor passes a tile
    region. Shared so per-pixel arithmetic is identical on both paths.
    """
    if isinstance(op, Downsample):
        k, stride, pad, groups = op.k, op.stride, 0, 1
        c_out = x.shape[0]
    else:
        k, stride, pad, groups = op.k, op.stride, op.pad, op.groups
        c_out = op.c_out
    c_in = x.shape[0]
    r0, r1 = rows
    c0, c1 = cols
    oh, ow = r1 - r0, c1 - c0
    if oh <= 0 or ow <= 0:
        return np.zeros((c_out, max(oh, 0), max(ow, 0)), dtype=np.float64)
    # gather padded input window for this output region (absolute coordinates)
    in_r0 = r0 * stride - pad
    in_c0 = c0 * stride - pad
    in_r1 = (r1 - 1) * stride - pad + k
    in_c1 = (c1 - 1) * stride - pad + k
    win = np.zeros((c_in, in_r1 - in_r0, in_c1 - in_c0), dtype=np.float64)
    xr0, xc0 = origin
    xr1, xc1 = xr0 + x.shape[1], xc0 + x.shape[2]
    sr0, sr1 = max(in_r0, xr0), min(in_r1, xr1)
    sc0, sc1 = max(in_c0, xc0), min(in_c1, xc1)
    if sr0 < sr1 and sc0 < sc1:
        win[:, sr0 - in_r0:sr1 - in_r0, sc0 - in_c0:sc1 - in_c0] = \
            x[:, sr0 - xr0:sr1 - xr0, sc0 - xc0:sc1 - xc0]

    cig = c_in // groups
    cog = c_out // groups
    out = np.empty((c_out, oh, ow), dtype=np.float64)
    for g in range(groups):
        xs = win[g * cig:(g + 1) * cig]
        # im2col: (oh*ow, cig*k*k)
        patches = np.empty((oh * ow, cig * k * k), dtype=np.float64)
        idx = 0
        for r in range(oh):
            for c in range(ow):
                patch = xs[:, r * stride:r * stride + k, c * stride:c * stride + k]
                patches[idx] = patch.reshape(-1)
                idx += 1
        wg = w[g * cog:(g + 1) * cog].reshape(cog, -1)
        res = patches @ wg.T + b[g * cog:(g + 1) * cog]
        out[g * cog:(g + 1) * cog] = res.T.reshape(cog, oh, ow)
    return out


def layernorm(x: np.ndarray) -> np.ndarray:
    """Per-pixel normalization over channels; gamma=1, beta=0."""
    mean = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-form GELU; one definition shared by every executor."""
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def linear_tokens(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Token-wise linear layer on a (c, h, w) map."""
    c, h, wd = x.shape
    tok = x.reshape(c, h * wd).T  # (N, c)
    out = tok @ w + b
    return out.T.reshape(w.shape[1], h, wd)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (the baseline the online form must match)."""
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """softmax(QK^T / sqrt(d)) V per head; q,k,v are (heads, N, d)/(heads, N_r, d)."""
    d = q.shape[-1]
    out = np.empty_like(q)
    for h in range(q.shape[0]):
        s = (q[h] @ k[h].T) / math.sqrt(d)
        out[h] = softmax_rows(s) @ v[h]
    return out


def attention_operands(x: np.ndarray, op: Attention, p: dict[str, np.ndarray]
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project a (c, h, w) map into per-head Q, K, V; K/V from the reduced sequence."""
    c, h, w = x.shape
    n_tok = h * w
    tok = x.reshape(c, n_tok).T  # (N, c)
    q = tok @ p["wq"]
    if op.sr_ratio > 1:
        h_r, w_r = _sr_hw(h, w, op.sr_ratio)
        sr_conv = Conv2D(c, c, op.sr_ratio, op.sr_ratio, 0, groups=c)
        red = conv2d_region(x, sr_conv, p["w_sr"], np.zeros(c), (0, h_r), (0, w_r))
        tok_r = red.reshape(c, -1).T
    else:
        tok_r = tok
    kk = tok_r @ p["wk"]
    vv = tok_r @ p["wv"]

    def split(m: np.ndarray) -> np.ndarray:
        n = m.shape[0]
        return m.reshape(n, op.heads, op.d_head).transpose(1, 0, 2)

    return split(q), split(kk), split(vv)


def attention_forward(x: np.ndarray, op: Attention, p: dict[str, np.ndarray]) -> np.ndarray:
    c, h, w = x.shape
    q, k, v = attention_operands(x, op, p)
    o = dense_attention(q, k, v)  # (heads, N, d)
    merged = o.transpose(1, 0, 2).reshape(h * w, c)
    return merged.T.reshape(c, h, w)


# ---------------------------------------------------------------------------
# Reference execution
# ---------------------------------------------------------------------------

def layer_forward(node: LayerNode, inputs: list[np.ndarray],
                  p: dict[str, np.ndarray]) -> np.ndarray:
    op = node.op
    x = inputs[0]
    if isinstance(op, (Conv2D, Downsample)):
        h_out = conv_out_dim(x.shape[1], op.k, op.stride, getattr(op, "pad", 0))
        w_out = conv_out_dim(x.shape[2], op.k, op.stride, getattr(op, "pad", 0))
        return conv2d_region(x, op, p["w"], p["b"], (0, h_out), (0, w_out))
    if isinstance(op, Attention):
        return attention_forward(x, op, p)
    if isinstance(op, Linear):
        return linear_tokens(x, p["w"], p["b"])
    if isinstance(op, LayerNorm):
        return layernorm(x)
    if isinstance(op, GELU):
        return gelu(x)
    if isinstance(op, Add):
        return inputs[0] + inputs[1]
    raise ShapeError(node.id, f"unknown op {op!r}")


def reference_execute(graph: NetworkGraph, x: np.ndarray,
                      params: dict[str, dict[str, np.ndarray]] | None = None,
                      seed: int = 0,
                      record: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Dense, untiled, float64 execution: the oracle for all optimized paths.

    ``record``, if given, is filled with every node's output tensor.
    """
    if not graph.shapes:
        graph = infer_shapes(graph)
    if params is None:
        params = init_params(graph, seed)
    if tuple(x.shape) != (graph.input_shape.c, graph.input_shape.h, graph.input_shape.w):
        raise ShapeError("input", f"expected {graph.input_shape}, got {x.shape}")
    x = np.asarray(x, dtype=np.float64)

    values: dict[str, np.ndarray] = {}
    out = x
    for node in graph.nodes:
        ins = [values[p] for p in node.preds] if node.preds else [x]
        out = layer_forward(node, ins, params[node.id])
        if not np.all(np.isfinite(out)):
            raise NumericsError(node.id)
        values[node.id] = out
        if record is not None:
            record[node.id] = out
    return out


def seeded_input(graph: NetworkGraph, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xFEED])
    s = graph.input_shape
    return rng.uniform(-0.5, 0.5, size=(s.c, s.h, s.w))


# ---------------------------------------------------------------------------
# Cost primitives
# ---------------------------------------------------------------------------

def layer_macs(graph: NetworkGraph, node: LayerNode) -> int:
    """Multiply-accumulate count; norm/activation layers are vector ops, not MACs."""
    op = node.op
    ins = graph.in_shape(node)
    outs = graph.out_shape(node.id)
    if isinstance(op, Conv2D):
        return outs.h * outs.w * op.c_out * (op.c_in // op.groups) * op.k * op.k
    if isinstance(op, Downsample):
        return outs.h * outs.w * ins.c * ins.c * op.k * op.k
    if isinstance(op, Linear):
        return ins.tokens * op.c_in * op.c_out
    if isinstance(op, Attention):
        c = op.heads * op.d_head
        dims = attention_dims(graph, node)
        core = op.heads * 2 * dims.N * dims.N_r * op.d_head  # QK^T + AV
        proj = dims.N * c * c + 2 * dims.N_r * c * c
        sr = dims.N_r * c * op.sr_ratio ** 2 if op.sr_ratio > 1 else 0  # depthwise
        return core + proj + sr
    return 0


def layer_vector_ops(graph: NetworkGraph, node: LayerNode) -> int:
    op = node.op
    outs = graph.out_shape(node.id)
    if isinstance(op, (LayerNorm, GELU, Add)):
        return outs.elements
    if isinstance(op, Attention):
        dims = attention_dims(graph, node)
        return dims.heads * dims.N * dims.N_r  # softmax map
    return 0


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _transformer_block(nodes: list[LayerNode], prev: str, stage: int, blk: int,
                       c: int, heads: int, sr: int, mlp_ratio: int,
                       dw_in_mlp: bool = False) -> str:
    tag = f"s{stage}b{blk}"
    nodes.append(LayerNode(f"{tag}_ln1", LayerNorm(), (prev,)))
    nodes.append(LayerNode(f"{tag}_attn", Attention(heads, c // heads, sr), (f"{tag}_ln1",)))
    nodes.append(LayerNode(f"{tag}_add1", Add(prev), (f"{tag}_attn", prev)))
    nodes.append(LayerNode(f"{tag}_ln2", LayerNorm(), (f"{tag}_add1",)))
    nodes.append(LayerNode(f"{tag}_fc1", Linear(c, c * mlp_ratio), (f"{tag}_ln2",)))
    prev_mlp = f"{tag}_fc1"
    if dw_in_mlp:
        nodes.append(LayerNode(f"{tag}_dw", Conv2D(c * mlp_ratio, c * mlp_ratio, 3,
                                                   1, 1, groups=c * mlp_ratio), (prev_mlp,)))
        prev_mlp = f"{tag}_dw"
    nodes.append(LayerNode(f"{tag}_act", GELU(), (prev_mlp,)))
    nodes.append(LayerNode(f"{tag}_fc2", Linear(c * mlp_ratio, c), (f"{tag}_act",)))
    nodes.append(LayerNode(f"{tag}_add2", Add(f"{tag}_add1"), (f"{tag}_fc2", f"{tag}_add1")))
    return f"{tag}_add2"


def _pyramid_preset(dw_in_mlp: bool, local_conv: bool) -> NetworkGraph:
    c = 16
    sr_ratios = (8, 4, 2, 1)
    heads = (1, 2, 4, 8)
    nodes: list[LayerNode] = [
        LayerNode("stem", Conv2D(3, c, 3, 1, 1), ()),
    ]
    prev = "stem"
    for s in range(4):
        nodes.append(LayerNode(f"s{s}_down", Downsample(2, 2), (prev,)))
        prev = f"s{s}_down"
        if local_conv:
            nodes.append(LayerNode(f"s{s}_lpu", Conv2D(c, c, 3, 1, 1, groups=c), (prev,)))
            nodes.append(LayerNode(f"s{s}_lpu_add", Add(prev), (f"s{s}_lpu", prev)))
            prev = f"s{s}_lpu_add"
        prev = _transformer_block(nodes, prev, s, 0, c, heads[s], sr_ratios[s],
                                  mlp_ratio=2, dw_in_mlp=dw_in_mlp)
    return NetworkGraph(nodes=nodes, input_shape=TensorShape(1, 3, 32, 32))


def build_preset(name: str) -> NetworkGraph:
    """Reduced-scale model presets; shapes come pre-inferred."""
    if name == "toy-chain":
        c = 8
        nodes = [
            LayerNode("c0", Conv2D(c, c, 3, 1, 1), ()),
            LayerNode("c1", Conv2D(c, c, 3, 1, 1), ("c0",)),
            LayerNode("c2", Conv2D(c, c, 3, 1, 1), ("c1",)),
            LayerNode("c3", Conv2D(c, c, 3, 1, 1), ("c2",)),
        ]
        g = NetworkGraph(nodes=nodes, input_shape=TensorShape(1, c, 16, 16))
    elif name == "segformer-micro":
        g = _pyramid_preset(dw_in_mlp=False, local_conv=False)
    elif name == "pvtv2-micro":
        g = _pyramid_preset(dw_in_mlp=True, local_conv=False)
    elif name == "cmt-micro":
        g = _pyramid_preset(dw_in_mlp=False, local_conv=True)
    else:
        raise NotFoundError(f"unknown preset {name!r}; known: {PRESETS}")
    return infer_shapes(g)


PRESETS = ("toy-chain", "segformer-micro", "pvtv2-micro", "cmt-micro")


# ---------------------------------------------------------------------------
# Declarative graph definition (config-file schema)
# ---------------------------------------------------------------------------

_KIND_BUILDERS = {
    "conv2d": lambda d: Conv2D(int(d["c_in"]), int(d["c_out"]), int(d["k"]),
                               int(d.get("stride", 1)), int(d.get("pad", 0)),
                               int(d.get("groups", 1))),
    "attention": lambda d: Attention(int(d["heads"]), int(d["d_head"]),
                                     int(d.get("sr_ratio", 1))),
    "linear": lambda d: Linear(int(d["c_in"]), int(d["c_out"])),
    "layernorm": lambda d: LayerNorm(),
    "gelu": lambda d: GELU(),
    "add": lambda d: Add(str(d["residual_of"])),
    "downsample": lambda d: Downsample(int(d["k"]), int(d["stride"])),
}


def graph_from_dict(d: dict) -> NetworkGraph:
    """Build a graph from the declarative form used in experiment configs."""
    try:
        shp = d["input_shape"]
        input_shape = TensorShape(*[int(v) for v in shp])
        nodes = []
        for nd in d["nodes"]:
            kind = str(nd["kind"]).lower()
            if kind not in _KIND_BUILDERS:
                raise NotFoundError(f"unknown layer kind {kind!r}")
            op = _KIND_BUILDERS[kind](nd)
            nodes.append(LayerNode(str(nd["id"]), op,
                                   tuple(str(p) for p in nd.get("preds", []))))
    except KeyError as e:
        raise ShapeError("graph", f"missing field {e.args[0]!r} in graph definition")
    return infer_shapes(NetworkGraph(nodes=nodes, input_shape=input_shape))
