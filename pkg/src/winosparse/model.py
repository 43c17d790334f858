"""Trainable model state: the FilterBank of learnable weights, graph
construction for training, a fast numpy-only forward path, and a
deterministic on-disk model format (JSON with base64 float64 payloads)."""

from __future__ import annotations

import base64
import json
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .netspec import NetworkSpec
from .winograd import WinogradPlan, build_plan

__all__ = [
    "FilterBank",
    "init_filter_bank",
    "plans_for",
    "build_training_graph",
    "predict_logits",
    "save_model",
    "load_model",
]


class FilterBank:
    """Ordered per-layer learnable weights: conv tensors [D,C/g,r,r] and fc
    matrices [in,out]. Supports an exact flattened view (layer order,
    row-major within each layer) used by percentile and quantization passes."""

    def __init__(self, weights: "OrderedDict[str, np.ndarray]"):
        self.weights = OrderedDict(
            (k, np.asarray(v, dtype=np.float64)) for k, v in weights.items()
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.weights[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.weights

    def __iter__(self):
        return iter(self.weights)

    def items(self):
        return self.weights.items()

    def names(self):
        return list(self.weights)

    @property
    def total_count(self) -> int:
        return sum(v.size for v in self.weights.values())

    def flat(self) -> np.ndarray:
        """Concatenated copy of all weights in canonical order."""
        return np.concatenate([v.ravel() for v in self.weights.values()])

    def from_flat(self, flat: np.ndarray) -> "FilterBank":
        """Inverse of flat(): rebuild a bank with these values."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.total_count:
            raise ValueError(
                f"from_flat: expected {self.total_count} values, got {flat.size}"
            )
        out = OrderedDict()
        pos = 0
        for name, v in self.weights.items():
            out[name] = flat[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size
        return FilterBank(out)

    def copy(self) -> "FilterBank":
        return FilterBank(OrderedDict((k, v.copy()) for k, v in self.weights.items()))


def init_filter_bank(net: NetworkSpec, rng: np.random.Generator) -> FilterBank:
    """Glorot-uniform initialization for every conv and fc layer."""
    weights = OrderedDict()
    for ly in net.weighted_layers():
        if ly.kind == "conv":
            shape = ly.weight_shape
            fan_in = shape[1] * ly.kernel * ly.kernel
            fan_out = shape[0] * ly.kernel * ly.kernel
        else:
            shape = (ly.in_features, ly.out_features)
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights[ly.name] = rng.uniform(-limit, limit, size=shape)
    return FilterBank(weights)


def plans_for(net: NetworkSpec) -> dict[str, WinogradPlan]:
    """One transform plan per winograd-eligible layer, keyed by layer name."""
    cache: dict[tuple[int, int], WinogradPlan] = {}
    plans = {}
    for ly in net.winograd_layers():
        if ly.plan_rn not in cache:
            cache[ly.plan_rn] = build_plan(*ly.plan_rn)
        plans[ly.name] = cache[ly.plan_rn]
    return plans


def _check_trainable(net: NetworkSpec):
    for ly in net.layers:
        if ly.branch:
            raise ValueError(f"{net.name}: branch layer {ly.name} is not trainable here")
        if ly.kind == "conv" and (ly.stride != 1 or ly.padding != 0 or ly.groups != 1):
            raise ValueError(
                f"{net.name}: trainable convs must be stride 1, pad 0, groups 1 "
                f"({ly.name} is not)"
            )
        if ly.kind == "maxpool" and (ly.stride != ly.kernel or ly.padding != 0):
            raise ValueError(f"{net.name}: trainable pools must be non-overlapping")


class TrainingGraph:
    """Handles into the static loss graph of a model."""

    def __init__(self, loss, logits, params):
        self.loss = loss
        self.logits = logits
        self.params = params  # name -> parameter Node

    def run(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float(T.forward(self.loss, {"images": images, "labels": labels}))

    def gradients(self) -> dict[str, np.ndarray]:
        T.backward(self.loss)
        return {
            name: p.grad if p.grad is not None else np.zeros_like(p.value)
            for name, p in self.params.items()
        }


def build_training_graph(net: NetworkSpec, bank: FilterBank) -> TrainingGraph:
    """Static softmax cross-entropy graph over a batch placeholder.

    Parameter nodes reference the bank's arrays, so in-place optimizer
    updates are picked up by the next forward pass.
    """
    _check_trainable(net)
    x = T.placeholder("images")
    y = T.placeholder("labels")
    params: dict[str, T.Node] = {}
    h = x
    channels, (hh, ww) = net.input_shape[0], net.input_shape[1:]
    for ly in net.layers:
        if ly.kind == "conv":
            p = T.parameter(bank[ly.name], name=ly.name)
            params[ly.name] = p
            h = T.conv2d(h, p)
            channels, (hh, ww) = ly.out_channels, ly.output_hw
        elif ly.kind == "relu":
            h = T.relu(h)
        elif ly.kind == "maxpool":
            h = T.maxpool2d(h, ly.kernel)
            hh, ww = ly.output_hw
        elif ly.kind == "flatten":
            h = T.reshape(h, (-1, channels * hh * ww))
        elif ly.kind == "fc":
            p = T.parameter(bank[ly.name], name=ly.name)
            params[ly.name] = p
            h = T.matmul(h, p)
    loss = T.softmax_cross_entropy(h, y)
    return TrainingGraph(loss=loss, logits=h, params=params)


def predict_logits(net: NetworkSpec, weights, x: np.ndarray) -> np.ndarray:
    """Numpy-only forward pass (no graph). ``weights`` is any mapping of
    layer name to array (a FilterBank works)."""
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 3
    if single:
        h = h[None]
    for ly in net.layers:
        if ly.kind == "conv":
            h = T.conv2d_forward(h, weights[ly.name])
        elif ly.kind == "relu":
            h = T.relu_forward(h)
        elif ly.kind == "maxpool":
            h = T.maxpool2d_forward(h, ly.kernel)
        elif ly.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif ly.kind == "fc":
            if h.ndim != 2:
                h = h.reshape(h.shape[0], -1)
            h = h @ weights[ly.name]
    return h[0] if single else h


def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode(),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def save_model(path, net: NetworkSpec, bank: FilterBank, extra: dict | None = None):
    """Deterministic JSON model file: same net + weights -> same bytes."""
    doc = {
        "format": "winosparse-model-v1",
        "network": json.loads(net.to_json()),
        "weights": {name: _encode_array(a) for name, a in bank.items()},
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "winosparse-model-v1":
        raise ValueError(f"{path}: not a winosparse model file")
    net = NetworkSpec.from_json(json.dumps(doc["network"]))
    names = [ly.name for ly in net.weighted_layers()]
    weights = OrderedDict((n, _decode_array(doc["weights"][n])) for n in names)
    return net, FilterBank(weights), doc.get("extra", {})
