"""Bag-layer networks: parameters, batched forward pass, exact gradients, model files.

A network is a stack of *levels* followed by a dense *head*. Each level applies
per-element dense layers, then one or more parallel bag-layers whose outputs are
concatenated. A bag-layer maps every element ``phi_i`` of a bag to
``rho_i = act(W phi_i + b)`` and reduces the bag element-wise with max, mean or
sum. Two levels give an MMIL network (instances -> sub-bags -> top-bag), one
level a MIL network.

Everything operates on *packed* batches: all instances of a batch stacked into
one matrix plus, per level, the number of children of each group.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear", "sigmoid", "softmax")
HIDDEN_ACTIVATIONS = ("relu", "tanh", "linear", "sigmoid")
BAG_ACTIVATIONS = ("relu", "tanh", "linear")
AGGREGATORS = ("max", "mean", "sum")
OUTPUT_ACTIVATIONS = ("softmax", "sigmoid", "linear")  # linear: raw scores, not trainable
LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"dense layer shape mismatch: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class BagLayer(DenseLayer):
    aggregator: str = "max"

    def __post_init__(self):
        super().__post_init__()
        if self.activation not in BAG_ACTIVATIONS:
            raise ValueError(f"bag-layer activation must be one of {BAG_ACTIVATIONS}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")


@dataclass(eq=False)
class Level:
    """Dense layers applied per element, then parallel bag-layers (concatenated)."""

    dense: list = field(default_factory=list)
    bags: list = field(default_factory=list)

    @property
    def n_in(self) -> int:
        return self.dense[0].n_in if self.dense else self.bags[0].n_in

    @property
    def n_out(self) -> int:
        return sum(b.n_out for b in self.bags)


@dataclass(eq=False)
class NetworkSpec:
    levels: list
    head: list

    def __post_init__(self):
        check_spec(self)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def input_dim(self) -> int:
        return self.levels[0].n_in

    @property
    def output_activation(self) -> str:
        return self.head[-1].activation

    @property
    def num_classes(self) -> int:
        return 2 if self.output_activation == "sigmoid" else self.head[-1].n_out

    # names used throughout the docs for the two-level case
    @property
    def instance_stack(self):
        return self.levels[0].dense

    @property
    def instance_bag_layer(self):
        return self.levels[0].bags

    @property
    def subbag_stack(self):
        return self.levels[1].dense if self.depth > 1 else []

    @property
    def subbag_bag_layer(self):
        return self.levels[1].bags if self.depth > 1 else []

    def layers(self) -> list:
        out = []
        for level in self.levels:
            out.extend(level.dense)
            out.extend(level.bags)
        out.extend(self.head)
        return out

    def parameters(self) -> list:
        """Weight and bias arrays in a fixed order (views, not copies)."""
        return [p for layer in self.layers() for p in (layer.weight, layer.bias)]

    def set_parameters(self, values) -> None:
        for target, value in zip(self.parameters(), values, strict=True):
            target[...] = value

    def copy(self) -> "NetworkSpec":
        return copy.deepcopy(self)


def check_spec(spec: NetworkSpec) -> None:
    """Raise ValueError unless layer widths chain and only the last layer is an output."""
    if not spec.levels:
        raise ValueError("network needs at least one level")
    if not spec.head:
        raise ValueError("network needs an output layer")
    width = None
    for li, level in enumerate(spec.levels):
        if not level.bags:
            raise ValueError(f"level {li} has no bag-layer")
        for layer in level.dense:
            if layer.activation not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"output activation {layer.activation!r} inside level {li}")
            if width is not None and layer.n_in != width:
                raise ValueError(f"level {li}: dense layer expects {layer.n_in} inputs, got {width}")
            width = layer.n_out
        widths_in = {b.n_in for b in level.bags}
        if len(widths_in) != 1:
            raise ValueError(f"level {li}: parallel bag-layers disagree on input width")
        bag_in = widths_in.pop()
        if width is not None and bag_in != width:
            raise ValueError(f"level {li}: bag-layer expects {bag_in} inputs, got {width}")
        width = level.n_out
    for hi, layer in enumerate(spec.head):
        last = hi == len(spec.head) - 1
        if layer.n_in != width:
            raise ValueError(f"head layer {hi} expects {layer.n_in} inputs, got {width}")
        if last and layer.activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"final layer must use softmax, sigmoid or linear, got {layer.activation!r}")
        if not last and layer.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"output activation {layer.activation!r} before the final layer")
        width = layer.n_out
    if spec.head[-1].activation == "sigmoid" and spec.head[-1].n_out != 1:
        raise ValueError("sigmoid output layer must have width 1")
    if spec.head[-1].activation == "softmax" and spec.head[-1].n_out < 2:
        raise ValueError("softmax output layer must have width >= 2")


def glorot_uniform(n_out: int, n_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


def _bag_entries(level_cfg) -> list:
    bags = level_cfg.get("bags", level_cfg.get("bag"))
    if isinstance(bags, dict):
        bags = [bags]
    if isinstance(bags, int):
        bags = [{"units": bags}]
    return bags


def build_network(arch: dict, input_dim: int, num_classes: int, rng) -> NetworkSpec:
    """Create a freshly initialised network from an architecture description.

    ``arch`` looks like::

        {"levels": [{"dense": [32], "bags": [{"units": 64, "aggregator": "max"}]},
                    {"bags": [{"units": 32, "aggregator": "max"},
                              {"units": 32, "aggregator": "mean"}]}],
         "head": [16], "hidden_activation": "relu", "output": "auto"}

    ``output`` is ``"sigmoid"``, ``"softmax"`` or ``"auto"`` (sigmoid for two
    classes). Weights are Glorot-uniform, biases zero.
    """
    rng = np.random.default_rng(rng)
    hidden = arch.get("hidden_activation", "relu")
    output = arch.get("output", "auto")
    if output == "auto":
        output = "sigmoid" if num_classes == 2 else "softmax"
    if output == "sigmoid" and num_classes != 2:
        raise ValueError("sigmoid output needs exactly two classes")

    def dense(n_in, n_out, act):
        return DenseLayer(glorot_uniform(n_out, n_in, rng), np.zeros(n_out), act)

    width = input_dim
    levels = []
    for level_cfg in arch["levels"]:
        layers = []
        for units in level_cfg.get("dense", []):
            layers.append(dense(width, int(units), level_cfg.get("activation", hidden)))
            width = int(units)
        bags = []
        for b in _bag_entries(level_cfg):
            units = int(b["units"])
            bags.append(
                BagLayer(
                    glorot_uniform(units, width, rng),
                    np.zeros(units),
                    b.get("activation", "relu"),
                    b.get("aggregator", "max"),
                )
            )
        levels.append(Level(layers, bags))
        width = sum(b.n_out for b in bags)
    head = []
    for units in arch.get("head", []):
        head.append(dense(width, int(units), hidden))
        width = int(units)
    n_out = 1 if output == "sigmoid" else num_classes
    head.append(dense(width, n_out, output))
    return NetworkSpec(levels, head)


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


class Segments:
    """Contiguous grouping of consecutive rows: group ``g`` owns ``counts[g]`` rows."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.intp)
        if counts.ndim != 1 or np.any(counts < 1):
            raise ValueError("every bag must contain at least one element")
        self.counts = counts
        self.offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
        self.max_count = int(counts.max()) if counts.size else 0
        positions = np.arange(self.max_count)
        self.mask = positions[None, :] < counts[:, None]
        self.index = np.where(self.mask, self.offsets[:, None] + positions[None, :], 0)
        self.owner = np.repeat(np.arange(counts.size), counts)

    @property
    def n_groups(self) -> int:
        return self.counts.size

    @property
    def n_elements(self) -> int:
        return int(self.counts.sum())


@dataclass
class Packed:
    X: np.ndarray
    segments: list  # innermost level first

    @property
    def n_examples(self) -> int:
        return self.segments[-1].n_groups


def pack(bags, depth: int) -> Packed:
    """Stack normalised bags (see ``validation.check_bags``) into one batch."""
    if depth == 2:
        rows = [m for top in bags for m in top]
        inner = [m.shape[0] for m in rows]
        outer = [len(top) for top in bags]
        return Packed(np.concatenate(rows, axis=0), [Segments(inner), Segments(outer)])
    if depth == 1:
        return Packed(np.concatenate(bags, axis=0), [Segments([m.shape[0] for m in bags])])
    raise ValueError(f"unsupported nesting depth {depth}")


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {kind!r}")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of a hidden activation; the ReLU subgradient at 0 is 0."""
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "linear":
        return np.ones_like(z)
    if kind == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"no elementwise derivative for {kind!r}")


def aggregate(rho: np.ndarray, seg: Segments, how: str):
    """Reduce each group of rows of ``rho`` element-wise.

    Returns ``(out, argmax)`` where ``argmax[g, u]`` is the within-group position
    of the smallest-index maximiser for ``how == "max"`` and None otherwise.
    Sums are accumulated over values sorted within each group, so the result
    does not depend on element order, bit for bit.
    """
    gathered = rho[seg.index]  # (groups, max_count, k)
    mask = seg.mask[:, :, None]
    if how == "max":
        gathered = np.where(mask, gathered, -np.inf)
        arg = gathered.argmax(axis=1)
        out = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
        return out, arg
    if how not in ("mean", "sum"):
        raise ValueError(f"unknown aggregator {how!r}")
    # padding zeros add exactly nothing, whatever their position after sorting
    ordered = np.sort(np.where(mask, gathered, 0.0), axis=1)
    acc = ordered[:, 0, :].copy()
    for i in range(1, ordered.shape[1]):
        acc = acc + ordered[:, i, :]
    if how == "mean":
        acc = acc / seg.counts[:, None]
    return acc, None


def aggregate_backward(grad_out: np.ndarray, seg: Segments, how: str, arg) -> np.ndarray:
    if how == "sum":
        return grad_out[seg.owner]
    if how == "mean":
        return (grad_out / seg.counts[:, None])[seg.owner]
    grad = np.zeros((seg.n_elements, grad_out.shape[1]))
    rows = seg.index[np.arange(seg.n_groups)[:, None], arg]
    grad[rows, np.arange(grad_out.shape[1])[None, :]] = grad_out
    return grad


def bag_layer_forward(bag, params: BagLayer):
    """Apply one bag-layer to a single bag of vectors.

    Returns ``(output, rhos, argmax)``; ``argmax`` is None unless the layer
    aggregates with max.
    """
    bag = np.asarray(bag, dtype=float)
    if bag.ndim != 2 or bag.shape[0] == 0:
        raise ValueError("bag-layer needs a non-empty bag of vectors")
    if bag.shape[1] != params.n_in:
        raise ValueError(f"dimension mismatch: bag vectors have {bag.shape[1]} entries, layer expects {params.n_in}")
    rhos = activate(bag @ params.weight.T + params.bias, params.activation)
    out, arg = aggregate(rhos, Segments([bag.shape[0]]), params.aggregator)
    return out[0], rhos, None if arg is None else arg[0]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class LevelTrace:
    dense: list  # (input, z, a) per dense layer
    bag_input: np.ndarray
    bag_z: list
    rho: list  # per parallel bag-layer
    argmax: list
    phi: np.ndarray

    @property
    def rho_concat(self) -> np.ndarray:
        return np.concatenate(self.rho, axis=1)


@dataclass
class ForwardTrace:
    """Intermediate values of one batched forward pass.

    For a two-level network ``instance_rho`` holds one row per instance,
    ``subbag_rho``/``subbag_phi`` one row per sub-bag and ``top_phi`` one row
    per top-bag; rows follow the packing order.
    """

    packed: Packed
    levels: list
    head: list  # (input, z, a)
    output: np.ndarray  # activated final layer
    proba: np.ndarray  # (batch, num_classes)

    @property
    def instance_rho(self):
        return self.levels[0].rho_concat

    @property
    def subbag_phi(self):
        return self.levels[0].phi

    @property
    def subbag_rho(self):
        return self.levels[1].rho_concat if len(self.levels) > 1 else None

    @property
    def top_phi(self):
        return self.levels[-1].phi


def forward_packed(spec: NetworkSpec, packed: Packed) -> ForwardTrace:
    if len(packed.segments) != spec.depth:
        raise ValueError(f"network expects {spec.depth} nesting level(s), data has {len(packed.segments)}")
    if packed.X.shape[1] != spec.input_dim:
        raise ValueError(
            f"dimension mismatch: instances have {packed.X.shape[1]} features, network expects {spec.input_dim}"
        )
    h = packed.X
    level_traces = []
    for level, seg in zip(spec.levels, packed.segments):
        dense = []
        for layer in level.dense:
            z = h @ layer.weight.T + layer.bias
            a = activate(z, layer.activation)
            dense.append((h, z, a))
            h = a
        zs, rhos, args, outs = [], [], [], []
        for bl in level.bags:
            z = h @ bl.weight.T + bl.bias
            rho = activate(z, bl.activation)
            out, arg = aggregate(rho, seg, bl.aggregator)
            zs.append(z)
            rhos.append(rho)
            args.append(arg)
            outs.append(out)
        phi = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=1)
        level_traces.append(LevelTrace(dense, h, zs, rhos, args, phi))
        h = phi
    head = []
    for layer in spec.head:
        z = h @ layer.weight.T + layer.bias
        a = activate(z, layer.activation)
        head.append((h, z, a))
        h = a
    if spec.output_activation == "sigmoid":
        proba = np.column_stack([1.0 - h[:, 0], h[:, 0]])
    else:
        proba = h
    return ForwardTrace(packed, level_traces, head, h, proba)


def forward(x, spec: NetworkSpec) -> ForwardTrace:
    """Forward pass for a single top-bag (list of sub-bag matrices) or flat bag."""
    from .validation import check_bags

    bags, depth, _ = check_bags([x], depth=spec.depth, feature_dim=spec.input_dim)
    return forward_packed(spec, pack(bags, depth))


def output_gradient(trace: ForwardTrace, labels) -> np.ndarray:
    """Gradient of the batch-mean cross-entropy w.r.t. the final pre-activation."""
    labels = np.asarray(labels, dtype=int)
    batch = trace.output.shape[0]
    if labels.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {labels.shape}")
    if trace.output.shape[1] == 1:
        return (trace.output - labels[:, None]) / batch
    target = np.zeros_like(trace.output)
    target[np.arange(batch), labels] = 1.0
    return (trace.output - target) / batch


def backward(trace: ForwardTrace, labels, spec: NetworkSpec) -> list:
    """Exact gradients of the batch-mean loss, aligned with ``spec.parameters()``.

    Max aggregation routes each coordinate's gradient to the recorded argmax
    only; mean divides by the bag size; sum passes gradients through.
    """
    if len(trace.levels) != spec.depth or len(trace.head) != len(spec.head):
        raise ValueError("trace was not produced by this network")
    grads = {}
    delta = output_gradient(trace, labels)
    for i in range(len(spec.head) - 1, -1, -1):
        layer = spec.head[i]
        h_in, z, a = trace.head[i]
        if i < len(spec.head) - 1:
            delta = delta * activation_grad(z, a, layer.activation)
        grads[id(layer)] = (delta.T @ h_in, delta.sum(axis=0))
        delta = delta @ layer.weight
    for li in range(spec.depth - 1, -1, -1):
        level, lt, seg = spec.levels[li], trace.levels[li], trace.packed.segments[li]
        d_in = np.zeros_like(lt.bag_input)
        start = 0
        for bl, z, rho, arg in zip(level.bags, lt.bag_z, lt.rho, lt.argmax):
            part = delta[:, start : start + bl.n_out]
            start += bl.n_out
            d_rho = aggregate_backward(part, seg, bl.aggregator, arg)
            dz = d_rho * activation_grad(z, rho, bl.activation)
            grads[id(bl)] = (dz.T @ lt.bag_input, dz.sum(axis=0))
            d_in += dz @ bl.weight
        delta = d_in
        for di in range(len(level.dense) - 1, -1, -1):
            layer = level.dense[di]
            h_in, z, a = lt.dense[di]
            dz = delta * activation_grad(z, a, layer.activation)
            grads[id(layer)] = (dz.T @ h_in, dz.sum(axis=0))
            delta = dz @ layer.weight
    return [g for layer in spec.layers() for g in grads[id(layer)]]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss(probabilities, label, kind: str = "softmax_ce"):
    """Cross-entropy of predicted probabilities, with log arguments clamped at 1e-12.

    ``kind="bce"`` takes the probability of class 1 (scalar or one per
    example); ``kind="softmax_ce"`` takes a class-probability vector (or one
    row per example). Batched inputs return one loss per example.
    """
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(label)
    if kind == "bce":
        if p.shape != y.shape:
            raise ValueError(f"arity mismatch: {p.shape} probabilities for {y.shape} labels")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("binary cross-entropy needs labels in {0, 1}")
        out = -(y * np.log(np.maximum(p, LOG_CLAMP)) + (1 - y) * np.log(np.maximum(1.0 - p, LOG_CLAMP)))
    elif kind == "softmax_ce":
        if p.ndim != y.ndim + 1 or p.shape[:-1] != y.shape:
            raise ValueError(f"arity mismatch: probabilities {p.shape} for labels {y.shape}")
        if np.any((y < 0) | (y >= p.shape[-1])):
            raise ValueError(f"label out of range for {p.shape[-1]} classes")
        picked = np.take_along_axis(p, y[..., None].astype(int), axis=-1)[..., 0]
        out = -np.log(np.maximum(picked, LOG_CLAMP))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def loss_kind(spec: NetworkSpec) -> str:
    kinds = {"sigmoid": "bce", "softmax": "softmax_ce"}
    if spec.output_activation not in kinds:
        raise ValueError(f"no training loss for a {spec.output_activation} output layer")
    return kinds[spec.output_activation]


def batch_losses(trace: ForwardTrace, labels, spec: NetworkSpec) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if loss_kind(spec) == "bce":
        return loss(trace.output[:, 0], labels, "bce")
    return loss(trace.output, labels, "softmax_ce")


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------


def _layer_doc(layer) -> dict:
    doc = {"in": layer.n_in, "out": layer.n_out, "activation": layer.activation}
    if isinstance(layer, BagLayer):
        doc["aggregator"] = layer.aggregator
    return doc


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "version": 1,
        "spec": {
            "levels": [
                {"dense": [_layer_doc(l) for l in lv.dense], "bags": [_layer_doc(b) for b in lv.bags]}
                for lv in spec.levels
            ],
            "head": [_layer_doc(l) for l in spec.head],
        },
        "weights": [[float(v) for v in p.ravel()] for p in spec.parameters()],
    }


def spec_from_dict(doc: dict) -> NetworkSpec:
    """Rebuild a network from its model document; shapes must chain."""
    if doc.get("version") != 1:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    weights = iter(doc["weights"])

    def make(layer_doc, cls):
        n_in, n_out = int(layer_doc["in"]), int(layer_doc["out"])
        try:
            w, b = np.asarray(next(weights), float), np.asarray(next(weights), float)
        except StopIteration:
            raise ValueError("model file has fewer weight arrays than layers") from None
        if w.size != n_in * n_out or b.size != n_out:
            raise ValueError(
                f"weight array sizes {w.size}/{b.size} do not match layer shape {n_out}x{n_in}"
            )
        kwargs = {"aggregator": layer_doc["aggregator"]} if cls is BagLayer else {}
        return cls(w.reshape(n_out, n_in), b, layer_doc["activation"], **kwargs)

    body = doc["spec"]
    levels = [
        Level([make(d, DenseLayer) for d in lv.get("dense", [])], [make(b, BagLayer) for b in lv["bags"]])
        for lv in body["levels"]
    ]
    head = [make(d, DenseLayer) for d in body["head"]]
    if next(weights, None) is not None:
        raise ValueError("model file has more weight arrays than layers")
    return NetworkSpec(levels, head)


def save_model(spec: NetworkSpec, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec_to_dict(spec), fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> NetworkSpec:
    with open(path, encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))
