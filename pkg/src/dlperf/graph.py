"""Layer graphs: specification, shape inference, parameters, forward/backward."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvParams, ShapeError

LAYER_KINDS = frozenset(
    {"conv", "fc", "relu", "maxpool", "avgpool", "lrn", "softmax", "concat", "flatten", "dropout"}
)
INPUT_ID = "input"
WEIGHTED_KINDS = frozenset({"conv", "fc"})


class GraphError(ValueError):
    """Invalid graph structure (unknown ids, cycles, several sinks, ...)."""


class LayerShapeError(ShapeError):
    """Shape mismatch raised while running a specific layer."""

    def __init__(self, layer_id: str, message: str):
        super().__init__(f"layer {layer_id!r}: {message}")
        self.layer_id = layer_id


@dataclass
class LayerSpec:
    id: str
    kind: str
    inputs: list[str]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        if not self.inputs:
            raise GraphError(f"layer {self.id!r} has no inputs")
        if self.kind != "concat" and len(self.inputs) != 1:
            raise GraphError(f"layer {self.id!r}: kind {self.kind} takes exactly one input")

    @property
    def aux(self) -> bool:
        return bool(self.params.get("aux", False))

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(id=d["id"], kind=d["kind"], inputs=list(d["inputs"]), params=dict(d.get("params", {})))


def _kernel_hw(params: dict) -> tuple[int, int]:
    k = params["kernel"]
    if isinstance(k, (list, tuple)):
        return int(k[0]), int(k[1])
    return int(k), int(k)


class NetworkGraph:
    """A DAG of layers fed by the reserved source id ``"input"``.

    ``params`` maps each conv/fc layer id to ``(weights, bias)``.  Full-size
    architectures are usually left symbolic (``params`` empty); their shapes and
    counts come from :meth:`param_shapes`.
    """

    def __init__(self, layers, input_shape, class_count: int, name: str = "custom", params=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.class_count = int(class_count)
        self.name = name
        self.params: dict[str, tuple[np.ndarray, np.ndarray]] = dict(params or {})
        self._by_id = {}
        self.validate()

    # -- structure ---------------------------------------------------------
    def validate(self) -> None:
        seen = {INPUT_ID}
        self._by_id = {}
        consumers: dict[str, int] = {}
        for layer in self.layers:
            if layer.id in seen:
                raise GraphError(f"duplicate layer id {layer.id!r}")
            for src in layer.inputs:
                if src not in seen:
                    raise GraphError(
                        f"layer {layer.id!r} references {src!r}, which is not an earlier layer"
                    )
                consumers[src] = consumers.get(src, 0) + 1
            seen.add(layer.id)
            self._by_id[layer.id] = layer
        if self.layers:
            sinks = [l.id for l in self.layers if not l.aux and consumers.get(l.id, 0) == 0]
            if len(sinks) != 1:
                raise GraphError(f"graph must have exactly one sink, found {sinks}")
        if self.class_count < 1:
            raise GraphError("class_count must be positive")
        self._shapes = self.infer_shapes()
        declared = self.param_shapes()
        for lid, (w, b) in self.params.items():
            expected = declared.get(lid)
            if expected is None:
                raise GraphError(f"parameters given for non-weighted layer {lid!r}")
            if tuple(w.shape) != expected[0] or tuple(b.shape) != expected[1]:
                raise ShapeError(
                    f"layer {lid!r}: parameter shapes {w.shape}/{b.shape} "
                    f"disagree with spec {expected[0]}/{expected[1]}"
                )

    def layer(self, layer_id: str) -> LayerSpec:
        return self._by_id[layer_id]

    @property
    def sink(self) -> LayerSpec:
        consumed = {src for l in self.layers for src in l.inputs}
        return next(l for l in self.layers if not l.aux and l.id not in consumed)

    @property
    def weighted_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in WEIGHTED_KINDS]

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer (no batch axis)."""
        return self._shapes

    def infer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {INPUT_ID: self.input_shape}
        for layer in self.layers:
            ins = [shapes[s] for s in layer.inputs]
            shapes[layer.id] = _infer_layer_shape(layer, ins)
        return shapes

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        out = {}
        for layer in self.layers:
            src = self._shapes[layer.inputs[0]]
            if layer.kind == "conv":
                kh, kw = _kernel_hw(layer.params)
                k = int(layer.params["out_channels"])
                out[layer.id] = ((k, src[0], kh, kw), (k,))
            elif layer.kind == "fc":
                m = int(layer.params["out_features"])
                out[layer.id] = ((src[0], m), (m,))
        return out

    def param_count(self, include_aux: bool = False) -> int:
        total = 0
        for lid, (ws, bs) in self.param_shapes().items():
            if not include_aux and self._by_id[lid].aux:
                continue
            total += math.prod(ws) + math.prod(bs)
        return total

    @property
    def is_parameterized(self) -> bool:
        return set(self.params) == set(self.param_shapes())

    # -- parameters ----------------------------------------------------------
    def initialize(self, seed: int = 0) -> "NetworkGraph":
        """Allocate parameters: He-normal conv, Xavier-uniform fc, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for lid, (ws, bs) in self.param_shapes().items():
            params[lid] = _init_weights(self._by_id[lid].kind, ws, rng), np.zeros(bs)
        self.params = params
        return self

    def copy(self) -> "NetworkGraph":
        return NetworkGraph(
            copy.deepcopy(self.layers),
            self.input_shape,
            self.class_count,
            self.name,
            {k: (w.copy(), b.copy()) for k, (w, b) in self.params.items()},
        )

    # -- text form -----------------------------------------------------------
    def spec_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [l.to_dict() for l in self.layers],
        }

    def spec_text(self) -> str:
        return json.dumps(self.spec_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_spec_text(cls, text: str) -> "NetworkGraph":
        d = json.loads(text)
        layers = [LayerSpec.from_dict(x) for x in d["layers"]]
        return cls(layers, d["input_shape"], d["class_count"], d.get("name", "custom"))

    def __repr__(self) -> str:
        return (
            f"NetworkGraph(name={self.name!r}, layers={len(self.layers)}, "
            f"input_shape={self.input_shape}, class_count={self.class_count})"
        )


def _init_weights(kind: str, shape, rng: np.random.Generator) -> np.ndarray:
    if kind == "conv":
        fan_in = math.prod(shape[1:])
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _pool_out(size: int, window: int, stride: int, pad: int, lid: str, dim: str) -> int:
    span = size + 2 * pad - window
    if span < 0:
        raise LayerShapeError(lid, f"pool window {window} larger than {dim} {size} (pad {pad})")
    return span // stride + 1


def _infer_layer_shape(layer: LayerSpec, ins: list[tuple[int, ...]]) -> tuple[int, ...]:
    lid, p = layer.id, layer.params
    src = ins[0]
    kind = layer.kind
    if kind == "conv":
        if len(src) != 3:
            raise LayerShapeError(lid, f"conv needs C×H×W input, got {src}")
        kh, kw = _kernel_hw(p)
        stride, pad = int(p.get("stride", 1)), int(p.get("pad", 0))
        try:
            ho = T.conv_output_size(src[1], kh, stride, pad, "height")
            wo = T.conv_output_size(src[2], kw, stride, pad, "width")
        except ShapeError as exc:
            raise LayerShapeError(lid, str(exc)) from None
        return (int(p["out_channels"]), ho, wo)
    if kind in ("maxpool", "avgpool"):
        if len(src) != 3:
            raise LayerShapeError(lid, f"{kind} needs C×H×W input, got {src}")
        if p.get("global"):
            return (src[0], 1, 1)
        win, stride, pad = int(p["window"]), int(p.get("stride", p["window"])), int(p.get("pad", 0))
        return (
            src[0],
            _pool_out(src[1], win, stride, pad, lid, "height"),
            _pool_out(src[2], win, stride, pad, lid, "width"),
        )
    if kind == "fc":
        if len(src) != 1:
            raise LayerShapeError(lid, f"fc needs a flat input, got {src}; insert a flatten layer")
        return (int(p["out_features"]),)
    if kind == "flatten":
        return (math.prod(src),)
    if kind == "concat":
        first = ins[0]
        for other in ins[1:]:
            if len(other) != len(first) or other[1:] != first[1:]:
                raise LayerShapeError(lid, f"concat inputs disagree beyond the channel axis: {ins}")
        return (sum(s[0] for s in ins),) + first[1:]
    if kind == "lrn" and len(src) < 1:
        raise LayerShapeError(lid, "lrn needs a channel axis")
    return src


# -- execution ---------------------------------------------------------------

def _conv_params(layer: LayerSpec, in_channels: int) -> ConvParams:
    kh, kw = _kernel_hw(layer.params)
    return ConvParams(
        kernel_h=kh,
        kernel_w=kw,
        in_channels=in_channels,
        out_channels=int(layer.params["out_channels"]),
        stride=int(layer.params.get("stride", 1)),
        pad=int(layer.params.get("pad", 0)),
    )


def _lrn_args(p: dict) -> dict:
    return {
        "k": float(p.get("k", 2.0)),
        "n": int(p.get("n", 5)),
        "alpha": float(p.get("alpha", 1e-4)),
        "beta": float(p.get("beta", 0.75)),
    }


def _run_layer(net: NetworkGraph, layer: LayerSpec, xs: list[np.ndarray], training: bool, rng):
    """Return ``(output, cache)`` for one layer."""
    p = layer.params
    x = xs[0]
    kind = layer.kind
    if kind == "conv":
        w, b = net.params[layer.id]
        cp = _conv_params(layer, x.shape[1])
        return T.conv2d_forward(x, w, b, cp), (x, cp)
    if kind == "fc":
        w, b = net.params[layer.id]
        return T.fc_forward(x, w, b), x
    if kind == "relu":
        return T.relu(x), x
    if kind == "maxpool":
        if p.get("global"):
            flat = x.reshape(x.shape[0], x.shape[1], -1)
            idx = flat.argmax(axis=-1)
            return np.take_along_axis(flat, idx[..., None], -1)[..., None], (x.shape, idx[..., None, None])
        win = int(p["window"])
        out, arg = T.maxpool2d_forward(x, win, int(p.get("stride", win)), int(p.get("pad", 0)))
        return out, (x.shape, arg)
    if kind == "avgpool":
        if p.get("global"):
            return x.mean(axis=(2, 3), keepdims=True), x.shape
        win = int(p["window"])
        return T.avgpool2d_forward(x, win, int(p.get("stride", win)), int(p.get("pad", 0))), x.shape
    if kind == "lrn":
        return T.lrn_forward(x, **_lrn_args(p)), x
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "concat":
        return np.concatenate(xs, axis=1), [a.shape[1] for a in xs]
    if kind == "dropout":
        rate = float(p.get("rate", 0.5))
        if not training or rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError(f"layer {layer.id!r}: dropout in training mode needs an explicit seed")
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * mask, mask
    if kind == "softmax":
        return T.softmax(x), None
    raise GraphError(f"unhandled layer kind {kind}")


def _layer_backward(layer: LayerSpec, g: np.ndarray, cache, net: NetworkGraph):
    """Return ``(input grads list, (gw, gb) or None)``."""
    kind = layer.kind
    p = layer.params
    if kind == "conv":
        x, cp = cache
        gx, gw, gb = T.conv2d_backward(g, x, net.params[layer.id][0], cp)
        return [gx], (gw, gb)
    if kind == "fc":
        gx, gw, gb = T.fc_backward(g, cache, net.params[layer.id][0])
        return [gx], (gw, gb)
    if kind == "relu":
        return [T.relu_backward(g, cache)], None
    if kind == "maxpool":
        shape, arg = cache
        if p.get("global"):
            n, c, h, w = shape
            grad = np.zeros((n, c, h * w))
            np.put_along_axis(grad, arg[..., 0, 0][..., None], g.reshape(n, c, 1), -1)
            return [grad.reshape(shape)], None
        return [T.maxpool2d_backward(g, arg, shape)], None
    if kind == "avgpool":
        shape = cache
        if p.get("global"):
            n, c, h, w = shape
            return [np.broadcast_to(g / (h * w), shape).copy()], None
        win = int(p["window"])
        return [T.avgpool2d_backward(g, shape, win, int(p.get("stride", win)), int(p.get("pad", 0)))], None
    if kind == "lrn":
        return [T.lrn_backward(g, cache, **_lrn_args(p))], None
    if kind == "flatten":
        return [g.reshape(cache)], None
    if kind == "concat":
        splits = np.cumsum(cache)[:-1]
        return np.split(g, splits, axis=1), None
    if kind == "dropout":
        return [g if cache is None else g * cache], None
    raise GraphError(f"no backward for layer kind {kind}")


def _logits_layer(net: NetworkGraph) -> LayerSpec:
    sink = net.sink
    if sink.kind == "softmax":
        return net.layer(sink.inputs[0]) if sink.inputs[0] != INPUT_ID else sink
    return sink


def _check_batch(net: NetworkGraph, batch) -> np.ndarray:
    x = T.as_tensor(batch, "batch")
    if x.shape[1:] != net.input_shape:
        raise LayerShapeError(INPUT_ID, f"batch shape {x.shape[1:]} != net input shape {net.input_shape}")
    return x


def _forward_all(net: NetworkGraph, x: np.ndarray, training: bool, rng, keep_cache: bool):
    if not net.is_parameterized:
        raise GraphError(f"network {net.name!r} has no allocated parameters")
    target = _logits_layer(net)
    outs = {INPUT_ID: x}
    caches = {}
    for layer in net.layers:
        if layer.aux:
            continue
        try:
            out, cache = _run_layer(net, layer, [outs[s] for s in layer.inputs], training, rng)
        except LayerShapeError:
            raise
        except ShapeError as exc:  # name the layer that failed
            raise LayerShapeError(layer.id, str(exc)) from None
        outs[layer.id] = out
        if keep_cache:
            caches[layer.id] = cache
        if layer.id == target.id:
            break
    return outs, caches, target


def forward(net: NetworkGraph, batch, training: bool = False, seed=None) -> np.ndarray:
    """Run the network up to (not including) a terminal softmax; return logits."""
    x = _check_batch(net, batch)
    rng = np.random.default_rng(seed) if seed is not None else None
    outs, _, target = _forward_all(net, x, training, rng, keep_cache=False)
    return outs[target.id]


def predict_proba(net: NetworkGraph, batch) -> np.ndarray:
    return T.softmax(forward(net, batch))


def loss_and_gradients(net: NetworkGraph, batch, labels, training: bool = False, seed=None):
    """Forward + backward under mean softmax cross-entropy.

    Returns ``(loss, grads, probs)`` where ``grads`` maps every weighted
    layer id to ``(grad_weights, grad_bias)``.
    """
    x = _check_batch(net, batch)
    rng = np.random.default_rng(seed) if seed is not None else None
    outs, caches, target = _forward_all(net, x, training, rng, keep_cache=True)
    probs = T.softmax(outs[target.id])
    loss = T.cross_entropy(probs, labels)
    pending = {target.id: T.softmax_cross_entropy_backward(probs, labels)}
    grads = {}
    order = [l for l in net.layers if l.id in caches]
    for layer in reversed(order):
        g = pending.pop(layer.id, None)
        if g is None:
            continue
        in_grads, pgrad = _layer_backward(layer, g, caches[layer.id], net)
        if pgrad is not None:
            grads[layer.id] = pgrad
        for src, gi in zip(layer.inputs, in_grads):
            if src == INPUT_ID:
                continue
            if src in pending:
                pending[src] = pending[src] + gi
            else:
                pending[src] = gi
    for layer in net.weighted_layers:
        if layer.id not in grads and not layer.aux:
            w, b = net.params[layer.id]
            grads[layer.id] = (np.zeros_like(w), np.zeros_like(b))
    return loss, grads, probs


def backward(net: NetworkGraph, batch, labels, training: bool = False, seed=None):
    """Gradient map ``layer id -> (grad_weights, grad_bias)`` of the mean loss."""
    return loss_and_gradients(net, batch, labels, training, seed)[1]


def count_layers(net: NetworkGraph, counted_kinds=WEIGHTED_KINDS, include_aux: bool = False) -> int:
    kinds = set(counted_kinds)
    if not kinds:
        raise ValueError("counted_kinds must be non-empty")
    return sum(1 for l in net.layers if l.kind in kinds and (include_aux or not l.aux))


def param_count(net: NetworkGraph, include_aux: bool = False) -> int:
    return net.param_count(include_aux=include_aux)
