"""VGG19 and Multipath VGG19 as declarative layer graphs.

A :class:`GraphSpec` is an immutable, topologically ordered list of
:class:`LayerNode` records. Parameters live separately in a
:class:`ParamStore` so the same graph can be run with imported, frozen or
freshly initialized weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import nn
from .autodiff import Node, Tape, Variable
from .tensor import ShapeError

FREEZE_POLICIES = ("backbone", "all_but_logits", "none")
MULTIPATH_TAPS = (2, 3, 4)


@dataclass(frozen=True)
class ArchScale:
    channels_per_block: tuple[int, ...]
    convs_per_block: tuple[int, ...]
    head_width: int
    input_side: int
    channels_in: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        object.__setattr__(self, "convs_per_block", tuple(int(c) for c in self.convs_per_block))
        if len(self.channels_per_block) != 5 or len(self.convs_per_block) != 5:
            raise ValueError("an architecture scale needs exactly five blocks")
        values = (*self.channels_per_block, *self.convs_per_block,
                  self.head_width, self.input_side, self.channels_in)
        if any(int(v) < 1 for v in values):
            raise ValueError(f"all scale entries must be positive: {self}")

    @property
    def input_extents(self) -> tuple[int, int, int]:
        return (self.input_side, self.input_side, self.channels_in)


FULL = ArchScale((64, 128, 256, 512, 512), (2, 2, 4, 4, 4), 2500, 224, 3)
MINI = ArchScale((8, 16, 32, 64, 64), (1, 1, 2, 2, 2), 64, 32, 3)
SCALES = {"full": FULL, "mini": MINI}


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: tuple[tuple[str, object], ...] = ()
    params: tuple[str, ...] = ()
    group: str = "backbone"

    def attr(self, key, default=None):
        return dict(self.attrs).get(key, default)


@dataclass(frozen=True)
class GraphSpec:
    name: str
    nodes: tuple[LayerNode, ...]
    class_count: int
    input_extents: tuple[int, int, int]
    scale: ArchScale

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def param_names(self) -> list[str]:
        return [p for n in self.nodes for p in n.params]


@dataclass
class ParamStore:
    vars: dict[str, Variable] = field(default_factory=dict)
    bn: dict[str, nn.BatchNormState] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Variable:
        return self.vars[name]

    def __contains__(self, name: str) -> bool:
        return name in self.vars

    def trainable(self) -> dict[str, Variable]:
        return {k: v for k, v in self.vars.items() if v.trainable}

    def frozen(self, name: str) -> bool:
        return not self.vars[name].trainable

    def apply_freeze_policy(self, policy: str) -> None:
        if policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")
        trainable_groups = {"backbone": {"head", "logits"}, "all_but_logits": {"logits"},
                            "none": {"backbone", "tap", "head", "logits"}}[policy]
        for name, var in self.vars.items():
            var.trainable = self.groups[name] in trainable_groups

    def tensors(self) -> dict[str, np.ndarray]:
        """Every stored tensor, batch-norm running statistics included."""
        out = {k: v.value for k, v in self.vars.items()}
        for layer, st in self.bn.items():
            out[f"{layer}.running_mean"] = st.running_mean
            out[f"{layer}.running_var"] = st.running_var
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name in self.vars:
            self.vars[name].value[...] = value
            return
        for suffix in (".running_mean", ".running_var"):
            if name.endswith(suffix) and name[:-len(suffix)] in self.bn:
                getattr(self.bn[name[:-len(suffix)]], suffix[1:])[...] = value
                return
        raise KeyError(name)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.tensors().items()}


class _Builder:
    def __init__(self):
        self.nodes: list[LayerNode] = []

    def add(self, name, kind, inputs=(), params=(), group="backbone", **attrs):
        self.nodes.append(LayerNode(name, kind, tuple(inputs), tuple(sorted(attrs.items())),
                                    tuple(params), group))
        return name


def _build(name: str, scale: ArchScale, class_count: int, taps: Iterable[int],
           bd_dropout: float = 0.5, head_dropout: float = 0.5) -> GraphSpec:
    if not isinstance(scale, ArchScale):
        raise ValueError(f"invalid scale {scale!r}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    taps = tuple(taps)
    if any(t not in MULTIPATH_TAPS for t in taps):
        raise ValueError(f"taps must be drawn from {MULTIPATH_TAPS}, got {taps}")
    b = _Builder()
    prev = b.add("input", "input")
    tap_outputs = []
    for blk, (width, count) in enumerate(zip(scale.channels_per_block, scale.convs_per_block), start=1):
        for k in range(1, count + 1):
            conv = f"block{blk}.conv{k}"
            prev = b.add(conv, "conv", [prev], [f"{conv}.w", f"{conv}.b"], out_channels=width)
            prev = b.add(f"block{blk}.relu{k}", "relu", [prev])
        prev = b.add(f"block{blk}.pool", "maxpool", [prev])
        if blk in taps:
            t = b.add(f"tap{blk}.bn", "batchnorm", [prev], [f"tap{blk}.bn.gamma", f"tap{blk}.bn.beta"], "tap")
            t = b.add(f"tap{blk}.dropout", "dropout", [t], group="tap", rate=bd_dropout)
            tap_outputs.append(b.add(f"tap{blk}.gap", "gap", [t], group="tap"))
    prev = b.add("main.gap", "gap", [prev])
    if tap_outputs:
        prev = b.add("fusion.concat", "concat", [*tap_outputs, prev], group="head")
    prev = b.add("head.dense", "dense", [prev], ["head.dense.w", "head.dense.b"], "head",
                 units=scale.head_width)
    prev = b.add("head.bn", "batchnorm", [prev], ["head.bn.gamma", "head.bn.beta"], "head")
    prev = b.add("head.dropout", "dropout", [prev], group="head", rate=head_dropout)
    b.add("logits", "dense", [prev], ["logits.w", "logits.b"], "logits", units=class_count)
    spec = GraphSpec(name, tuple(b.nodes), class_count, scale.input_extents, scale)
    validate_graph(spec)
    return spec


def validate_graph(spec: GraphSpec) -> None:
    """Acyclic, single input, single output, every node reachable from the input."""
    seen: set[str] = set()
    consumers: dict[str, int] = {}
    for node in spec.nodes:
        if node.name in seen:
            raise ValueError(f"duplicate node name {node.name}")
        for i in node.inputs:
            if i not in seen:
                raise ValueError(f"node {node.name} reads {i}, which is not an earlier node")
            consumers[i] = consumers.get(i, 0) + 1
        seen.add(node.name)
    inputs = [n for n in spec.nodes if n.kind == "input"]
    if len(inputs) != 1 or spec.nodes[0].kind != "input":
        raise ValueError("graph must start with exactly one input node")
    sinks = [n.name for n in spec.nodes if n.name not in consumers]
    if sinks != [spec.output]:
        raise ValueError(f"graph must have exactly one output, found {sinks}")
    reach = {spec.nodes[0].name}
    for node in spec.nodes[1:]:
        if node.inputs and all(i in reach for i in node.inputs):
            reach.add(node.name)
    if len(reach) != len(spec.nodes):
        raise ValueError(f"unreachable nodes: {sorted(seen - reach)}")


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(spec: GraphSpec, seed: int = 0, bn_momentum: float = 0.1, bn_epsilon: float = 1e-5) -> ParamStore:
    """Glorot-uniform weights, zero biases, unit/zero batch-norm affine."""
    rng = np.random.default_rng(seed)
    shapes = shape_audit(spec, spec.input_extents)
    store = ParamStore()
    for node in spec.nodes:
        if not node.inputs:
            continue
        in_shape = shapes[node.inputs[0]]
        if node.kind == "conv":
            cin, cout = in_shape[-1], node.attr("out_channels")
            w = _glorot(rng, (3, 3, cin, cout), 9 * cin, 9 * cout)
            vals = [w, np.zeros(cout, np.float32)]
        elif node.kind == "dense":
            din, dout = in_shape[-1], node.attr("units")
            vals = [_glorot(rng, (din, dout), din, dout), np.zeros(dout, np.float32)]
        elif node.kind == "batchnorm":
            c = in_shape[-1]
            vals = [np.ones(c, np.float32), np.zeros(c, np.float32)]
            store.bn[node.name] = nn.BatchNormState.fresh(c, bn_momentum, bn_epsilon)
        else:
            continue
        for pname, v in zip(node.params, vals):
            store.vars[pname] = Variable(v, trainable=True, name=pname)
            store.groups[pname] = node.group
    return store


def build_vgg19(scale: ArchScale, class_count: int, seed: int = 0, **kw) -> tuple[GraphSpec, ParamStore]:
    spec = _build("vgg19", scale, class_count, taps=(), **kw)
    return spec, init_params(spec, seed)


def build_mvgg19(scale: ArchScale, class_count: int, seed: int = 0, taps=MULTIPATH_TAPS,
                 **kw) -> tuple[GraphSpec, ParamStore]:
    spec = _build("mvgg19" if taps else "vgg19", scale, class_count, taps=taps, **kw)
    return spec, init_params(spec, seed)


def build(model: str, scale: ArchScale, class_count: int, seed: int = 0, **kw) -> tuple[GraphSpec, ParamStore]:
    if model == "vgg19":
        return build_vgg19(scale, class_count, seed, **kw)
    if model == "mvgg19":
        return build_mvgg19(scale, class_count, seed, **kw)
    raise ValueError(f"unknown model {model!r}")


def shape_audit(spec: GraphSpec, input_extents) -> dict[str, tuple[int, ...]]:
    """Per-sample output shape of every node, propagated without data."""
    shapes: dict[str, tuple[int, ...]] = {}
    for node in spec.nodes:
        ins = [shapes[i] for i in node.inputs]
        k = node.kind
        if k == "input":
            out = tuple(int(e) for e in input_extents)
            if len(out) != 3 or min(out) < 1:
                raise ShapeError(f"node input: bad input extents {out}")
        elif k == "conv":
            if len(ins[0]) != 3:
                raise ShapeError(f"node {node.name}: conv needs h x w x c input, got {ins[0]}")
            out = (ins[0][0], ins[0][1], node.attr("out_channels"))
        elif k in ("relu", "batchnorm", "dropout"):
            out = ins[0]
        elif k == "maxpool":
            h, w, c = ins[0]
            if h < 2 or w < 2:
                raise ShapeError(f"node {node.name}: pooling input {ins[0]} is smaller than 2x2")
            out = (h // 2, w // 2, c)
        elif k == "gap":
            if len(ins[0]) != 3:
                raise ShapeError(f"node {node.name}: gap needs h x w x c input, got {ins[0]}")
            out = (ins[0][2],)
        elif k == "concat":
            if any(len(s) != 1 for s in ins):
                raise ShapeError(f"node {node.name}: concat needs vectors, got {ins}")
            out = (sum(s[0] for s in ins),)
        elif k == "dense":
            if len(ins[0]) != 1:
                raise ShapeError(f"node {node.name}: dense needs a vector, got {ins[0]}")
            out = (node.attr("units"),)
        else:
            raise ValueError(f"node {node.name}: unknown kind {k}")
        shapes[node.name] = out
    return shapes


def _node_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def forward(spec: GraphSpec, params: ParamStore, batch: np.ndarray, mode: str = "eval",
            tape: Tape | None = None, seed: int = 0, capture: dict | None = None):
    """Evaluate the graph in node order.

    ``batch`` may be a :class:`Variable` to differentiate w.r.t. the input.
    Returns the logits array, or the logits :class:`Node` when ``tape`` is
    given. In train mode batch-norm uses batch statistics and updates its
    running averages, and dropout draws masks derived from ``seed``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch_var = batch if isinstance(batch, Variable) else None
    if batch_var is not None:
        batch = batch_var.value
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.input_extents):
        raise ShapeError(f"node input: batch shape {batch.shape} does not match "
                         f"expected n x {'x'.join(map(str, spec.input_extents))}")
    train = mode == "train"
    watched: dict[str, Node] = {}

    def param(name):
        var = params.vars[name]
        if tape is None:
            return var.value
        if name not in watched:
            watched[name] = tape.watch(var)
        return watched[name]

    def run(op, *inputs, **kw):
        if tape is None:
            return op(*inputs, **kw)[0]
        return tape.apply(op, *inputs, **kw)

    def raw(v):
        return v.value if isinstance(v, Node) else v

    values: dict[str, object] = {}
    for index, node in enumerate(spec.nodes):
        ins = [values[i] for i in node.inputs]
        try:
            k = node.kind
            if k == "input":
                if tape is None:
                    out = batch
                else:
                    out = tape.watch(batch_var) if batch_var is not None else tape.constant(batch)
            elif k == "conv":
                out = run(nn.conv2d, ins[0], *[param(p) for p in node.params], padding="same")
            elif k == "relu":
                out = run(nn.relu, ins[0])
            elif k == "maxpool":
                out = run(nn.maxpool2d, ins[0])
            elif k == "batchnorm":
                st = params.bn[node.name]
                gamma, beta = (param(p) for p in node.params)
                if train:
                    out = run(nn.batchnorm_train, ins[0], gamma, beta, epsilon=st.epsilon)
                    st.update(raw(ins[0]))
                else:
                    out = run(nn.batchnorm_eval, ins[0], gamma, beta, running_mean=st.running_mean,
                              running_var=st.running_var, epsilon=st.epsilon)
            elif k == "dropout":
                rate = node.attr("rate")
                if train and rate > 0:
                    mask = nn.dropout_mask(raw(ins[0]).shape, rate, _node_seed(seed, index))
                    out = run(nn.dropout, ins[0], mask=mask, rate=rate)
                else:
                    out = ins[0]
            elif k == "gap":
                out = run(nn.global_avg_pool, ins[0])
            elif k == "concat":
                out = run(nn.concat, *ins)
            elif k == "dense":
                out = run(nn.dense, ins[0], *[param(p) for p in node.params])
            else:
                raise ValueError(f"unknown node kind {k}")
        except ShapeError as exc:
            shapes = [tuple(raw(v).shape) for v in ins]
            raise ShapeError(f"node {node.name}: {exc} (input shapes {shapes})") from exc
        values[node.name] = out
        if capture is not None:
            capture[node.name] = raw(out)
    return values[spec.output]


def summary_rows(spec: GraphSpec, params: ParamStore | None = None, input_extents=None) -> list[dict]:
    shapes = shape_audit(spec, input_extents or spec.input_extents)
    rows = []
    for node in spec.nodes:
        count = 0
        frozen = ""
        if params is not None and node.params:
            count = sum(params[p].value.size for p in node.params)
            flags = {params.frozen(p) for p in node.params}
            frozen = "yes" if flags == {True} else "no" if flags == {False} else "mixed"
        elif node.params:
            frozen = "?"
        rows.append({"node": node.name, "kind": node.kind,
                     "shape": "x".join(str(s) for s in shapes[node.name]),
                     "params": count, "frozen": frozen})
    return rows


def summary_table(spec: GraphSpec, params: ParamStore | None = None, input_extents=None) -> str:
    rows = summary_rows(spec, params, input_extents)
    cols = ["node", "kind", "shape", "params", "frozen"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols),
             "  ".join("-" * widths[c] for c in cols)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines)
