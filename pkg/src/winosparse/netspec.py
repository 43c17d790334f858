"""Layer-by-layer network descriptors and MAC accounting.

Networks are flat layer lists. Residual shortcut convolutions are carried
as ``branch=True`` layers: they are counted like any other layer but are
excluded from the main-path shape chain (their input geometry is declared
explicitly). Only ``tiny-cnn`` is trainable here; the two large
descriptors exist for complexity bookkeeping.

MAC counting policies for Winograd layers:

* ``elementwise`` - only the n*n Hadamard-product MACs per patch; the
  patch grid is ceil(H_out/m) * ceil(W_out/m), matching the zero-padded
  execution.
* ``full`` - adds input transforms (2*n^3 per patch per input channel)
  and output transforms (m*n^2 + m^2*n per patch per output channel).
  Filter transforms are treated as offline and never counted per image.

Spatial counts are identical under both policies. Batch-norm, bias and
activation costs are excluded throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import ceil

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "MacReport",
    "conv_layer",
    "maxpool_layer",
    "fc_layer",
    "relu_layer",
    "flatten_layer",
    "builtin_networks",
    "count_macs",
    "REFERENCE_DENSE_MACS",
    "COUNTING_POLICIES",
]

COUNTING_POLICIES = ("elementwise", "full")

# Published per-image dense-MAC reference counts used to print residual
# gaps in reports (224x224 / 227x227 ImageNet-size inputs).
REFERENCE_DENSE_MACS = {
    "resnet18-modified": {"spatial": 2_347_100_000, "winograd": 1_174_000_000},
    "alexnet": {"spatial": 724_400_000, "winograd": 330_000_000},
}


@dataclass
class LayerSpec:
    kind: str  # conv | maxpool | fc | relu | flatten
    name: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1
    winograd_eligible: bool = False
    plan_rn: tuple[int, int] | None = None
    branch: bool = False
    in_features: int | None = None
    out_features: int | None = None
    # resolved by NetworkSpec.validate()
    input_hw: tuple[int, int] | None = None
    output_hw: tuple[int, int] | None = None

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)
        if self.kind == "fc":
            return (self.in_features, self.out_features)
        return None

    @property
    def weight_count(self) -> int:
        shape = self.weight_shape
        if shape is None:
            return 0
        total = 1
        for s in shape:
            total *= s
        return total

    def conv_output_hw(self, hw):
        h, w = hw
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (oh, ow)


def conv_layer(name, in_channels, out_channels, kernel, stride=1, padding=0,
               groups=1, plan_rn=None, branch=False, input_hw=None):
    eligible = plan_rn is not None
    if eligible and (stride != 1 or kernel < 2):
        raise ValueError(f"{name}: winograd plans need stride 1 and kernel >= 2")
    if in_channels % groups or out_channels % groups:
        raise ValueError(f"{name}: channels not divisible by groups")
    return LayerSpec(
        kind="conv", name=name, in_channels=in_channels, out_channels=out_channels,
        kernel=kernel, stride=stride, padding=padding, groups=groups,
        winograd_eligible=eligible, plan_rn=plan_rn, branch=branch, input_hw=input_hw,
    )


def maxpool_layer(name, kernel, stride=None, padding=0):
    return LayerSpec(kind="maxpool", name=name, kernel=kernel,
                     stride=stride if stride is not None else kernel, padding=padding)


def fc_layer(name, in_features, out_features):
    return LayerSpec(kind="fc", name=name, in_features=in_features, out_features=out_features)


def relu_layer(name="relu"):
    return LayerSpec(kind="relu", name=name)


def flatten_layer(name="flatten"):
    return LayerSpec(kind="flatten", name=name)


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    layers: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.validate()

    def validate(self):
        """Resolve per-layer geometry along the main path and check that
        consecutive shapes chain consistently."""
        if not self.layers:
            raise ValueError("NetworkSpec: need at least one layer")
        c, h, w = self.input_shape
        flattened = None
        for ly in self.layers:
            if ly.branch:
                if ly.input_hw is None:
                    raise ValueError(f"{ly.name}: branch layers must declare input_hw")
                ly.output_hw = ly.conv_output_hw(ly.input_hw)
                continue
            if ly.kind == "conv":
                if flattened is not None:
                    raise ValueError(f"{ly.name}: conv after flatten")
                if ly.in_channels != c:
                    raise ValueError(
                        f"{ly.name}: expects {ly.in_channels} channels, gets {c}"
                    )
                ly.input_hw = (h, w)
                h, w = ly.conv_output_hw((h, w))
                if h < 1 or w < 1:
                    raise ValueError(f"{ly.name}: output collapsed to {h}x{w}")
                ly.output_hw = (h, w)
                c = ly.out_channels
            elif ly.kind == "maxpool":
                ly.input_hw = (h, w)
                h = (h + 2 * ly.padding - ly.kernel) // ly.stride + 1
                w = (w + 2 * ly.padding - ly.kernel) // ly.stride + 1
                ly.output_hw = (h, w)
            elif ly.kind == "flatten":
                flattened = c * h * w
            elif ly.kind == "fc":
                feats = flattened if flattened is not None else c * h * w
                if ly.in_features != feats:
                    raise ValueError(
                        f"{ly.name}: expects {ly.in_features} features, gets {feats}"
                    )
                flattened = ly.out_features
            elif ly.kind == "relu":
                pass
            else:
                raise ValueError(f"{ly.name}: unknown layer kind {ly.kind!r}")
            if ly.winograd_eligible and ly.plan_rn is None:
                raise ValueError(f"{ly.name}: winograd-eligible layer without a plan")

    def weighted_layers(self):
        return [ly for ly in self.layers if ly.kind in ("conv", "fc")]

    def winograd_layers(self):
        return [ly for ly in self.layers if ly.winograd_eligible]

    def to_json(self) -> str:
        def encode(ly: LayerSpec):
            d = {"kind": ly.kind, "name": ly.name}
            if ly.kind == "conv":
                d.update(
                    in_channels=ly.in_channels, out_channels=ly.out_channels,
                    kernel=ly.kernel, stride=ly.stride, padding=ly.padding,
                    groups=ly.groups, branch=ly.branch,
                )
                if ly.plan_rn:
                    d["plan_rn"] = list(ly.plan_rn)
                if ly.branch:
                    d["input_hw"] = list(ly.input_hw)
            elif ly.kind == "maxpool":
                d.update(kernel=ly.kernel, stride=ly.stride, padding=ly.padding)
            elif ly.kind == "fc":
                d.update(in_features=ly.in_features, out_features=ly.out_features)
            return d

        doc = {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [encode(ly) for ly in self.layers],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        layers = []
        for d in doc["layers"]:
            kind = d["kind"]
            if kind == "conv":
                layers.append(conv_layer(
                    d["name"], d["in_channels"], d["out_channels"], d["kernel"],
                    stride=d.get("stride", 1), padding=d.get("padding", 0),
                    groups=d.get("groups", 1),
                    plan_rn=tuple(d["plan_rn"]) if d.get("plan_rn") else None,
                    branch=d.get("branch", False),
                    input_hw=tuple(d["input_hw"]) if d.get("input_hw") else None,
                ))
            elif kind == "maxpool":
                layers.append(maxpool_layer(d["name"], d["kernel"], d.get("stride"),
                                            d.get("padding", 0)))
            elif kind == "fc":
                layers.append(fc_layer(d["name"], d["in_features"], d["out_features"]))
            elif kind == "relu":
                layers.append(relu_layer(d["name"]))
            elif kind == "flatten":
                layers.append(flatten_layer(d["name"]))
            else:
                raise ValueError(f"unknown layer kind {kind!r} in JSON")
        return cls(name=doc["name"], input_shape=tuple(doc["input_shape"]), layers=layers)


# ---------------------------------------------------------------------------
# builtin networks
# ---------------------------------------------------------------------------

def tiny_cnn(input_side: int = 28, in_channels: int = 1, classes: int = 10,
             c1: int = 8, c2: int = 16) -> NetworkSpec:
    """Small trainable net: two 3x3 convs, 2x2 max pool, one fc head."""
    s1 = input_side - 2
    s2 = s1 - 2
    sp = s2 // 2
    feats = c2 * sp * sp
    return NetworkSpec(
        name="tiny-cnn",
        input_shape=(in_channels, input_side, input_side),
        layers=[
            conv_layer("conv1", in_channels, c1, 3, plan_rn=(3, 4)),
            relu_layer("relu1"),
            conv_layer("conv2", c1, c2, 3, plan_rn=(3, 4)),
            relu_layer("relu2"),
            maxpool_layer("pool", 2),
            flatten_layer(),
            fc_layer("fc", feats, classes),
        ],
    )


def resnet18_modified() -> NetworkSpec:
    """ResNet-18 with each stride-2 3x3 convolution replaced by a stride-1
    convolution followed by 2x2 max pooling (conv-then-pool ordering), so
    every 3x3 convolution is Winograd-eligible with plan (3,4).

    The 7x7 stem and the 1x1 downsample shortcuts keep stride 2: neither
    can use a (3,4) plan, so nothing is gained by modifying them. Shortcut
    convs are branch layers hanging off the block inputs.
    """
    rn = (3, 4)
    layers = [
        conv_layer("conv1", 3, 64, 7, stride=2, padding=3),
        relu_layer("relu1"),
        maxpool_layer("pool1", 3, stride=2, padding=1),
    ]
    # (stage, in_ch, out_ch, shortcut input side)
    stages = [(1, 64, 64, None), (2, 64, 128, 56), (3, 128, 256, 28), (4, 256, 512, 14)]
    for stage, cin, cout, sc_side in stages:
        for block in range(2):
            prefix = f"layer{stage}.{block}"
            first_in = cin if block == 0 else cout
            downsample = block == 0 and sc_side is not None
            layers.append(conv_layer(f"{prefix}.conv1", first_in, cout, 3, padding=1, plan_rn=rn))
            if downsample:
                layers.append(maxpool_layer(f"{prefix}.pool", 2))
            layers.append(relu_layer(f"{prefix}.relu1"))
            layers.append(conv_layer(f"{prefix}.conv2", cout, cout, 3, padding=1, plan_rn=rn))
            if downsample:
                layers.append(conv_layer(
                    f"{prefix}.shortcut", cin, cout, 1, stride=2,
                    branch=True, input_hw=(sc_side, sc_side),
                ))
            layers.append(relu_layer(f"{prefix}.relu2"))
    # stands in for global average pooling: same geometry, no counted MACs
    layers.append(maxpool_layer("gap", 7))
    layers.append(flatten_layer())
    layers.append(fc_layer("fc", 512, 1000))
    return NetworkSpec(name="resnet18-modified", input_shape=(3, 224, 224), layers=layers)


def alexnet() -> NetworkSpec:
    """The grouped-convolution AlexNet (groups of 2 on conv2/4/5).

    The stride-4 11x11 first layer cannot use Winograd convolution and is
    counted spatially in both domains; conv2 gets a (5,8) plan and the 3x3
    layers get (3,4).
    """
    layers = [
        conv_layer("conv1", 3, 96, 11, stride=4),
        relu_layer("relu1"),
        maxpool_layer("pool1", 3, stride=2),
        conv_layer("conv2", 96, 256, 5, padding=2, groups=2, plan_rn=(5, 8)),
        relu_layer("relu2"),
        maxpool_layer("pool2", 3, stride=2),
        conv_layer("conv3", 256, 384, 3, padding=1, plan_rn=(3, 4)),
        relu_layer("relu3"),
        conv_layer("conv4", 384, 384, 3, padding=1, groups=2, plan_rn=(3, 4)),
        relu_layer("relu4"),
        conv_layer("conv5", 384, 256, 3, padding=1, groups=2, plan_rn=(3, 4)),
        relu_layer("relu5"),
        maxpool_layer("pool5", 3, stride=2),
        flatten_layer(),
        fc_layer("fc6", 256 * 6 * 6, 4096),
        relu_layer("relu6"),
        fc_layer("fc7", 4096, 4096),
        relu_layer("relu7"),
        fc_layer("fc8", 4096, 1000),
    ]
    return NetworkSpec(name="alexnet", input_shape=(3, 227, 227), layers=layers)


def builtin_networks() -> dict[str, NetworkSpec]:
    return {
        "tiny-cnn": tiny_cnn(),
        "resnet18-modified": resnet18_modified(),
        "alexnet": alexnet(),
    }


# ---------------------------------------------------------------------------
# MAC counting
# ---------------------------------------------------------------------------

@dataclass
class LayerMacs:
    name: str
    dense: int
    sparse: int


@dataclass
class MacReport:
    """Per-layer and total MAC counts for one domain under one policy."""

    network: str
    domain: str
    policy: str
    rows: list[LayerMacs]

    @property
    def total_dense(self) -> int:
        return sum(r.dense for r in self.rows)

    @property
    def total_sparse(self) -> int:
        return sum(r.sparse for r in self.rows)

    def to_csv(self) -> str:
        lines = ["layer,dense_macs,sparse_macs"]
        for r in self.rows:
            lines.append(f"{r.name},{r.dense},{r.sparse}")
        lines.append(f"total,{self.total_dense},{self.total_sparse}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        head = f"{self.network} / {self.domain} domain / policy={self.policy}"
        lines = [head, f"{'layer':<{width}}  {'dense':>14}  {'sparse':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.dense:>14}  {r.sparse:>14}")
        lines.append(f"{'total':<{width}}  {self.total_dense:>14}  {self.total_sparse:>14}")
        return "\n".join(lines) + "\n"


def _to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(str(float(x)))


def _scaled(count: int, keep: Fraction) -> int:
    exact = count * keep
    return int(exact) if exact.denominator == 1 else round(float(exact))


def count_macs(net: NetworkSpec, domain: str, sparsity=None, policy: str = "elementwise") -> MacReport:
    """Per-image MACs for ``net`` in the given domain.

    ``sparsity`` maps layer name -> fraction of zero weights (number or
    Fraction); missing layers count dense. In the winograd domain the
    fraction applies to the layer's transform-domain weights for eligible
    layers and to spatial weights otherwise.
    """
    if domain not in ("spatial", "winograd"):
        raise ValueError(f"count_macs: unknown domain {domain!r}")
    if policy not in COUNTING_POLICIES:
        raise ValueError(f"count_macs: unknown policy {policy!r}")
    if domain == "winograd" and not net.winograd_layers():
        raise ValueError(f"count_macs: {net.name} has no winograd plan assignments")
    sparsity = {k: _to_fraction(v) for k, v in (sparsity or {}).items()}

    rows = []
    for ly in net.weighted_layers():
        s = sparsity.get(ly.name, Fraction(0))
        if not 0 <= s <= 1:
            raise ValueError(f"count_macs: sparsity for {ly.name} out of [0,1]")
        keep = 1 - s
        if ly.kind == "fc":
            dense = ly.in_features * ly.out_features
            rows.append(LayerMacs(ly.name, dense, _scaled(dense, keep)))
            continue
        oh, ow = ly.output_hw
        if domain == "winograd" and ly.winograd_eligible:
            r, n = ly.plan_rn
            m = n - r + 1
            tiles = ceil(oh / m) * ceil(ow / m)
            cg = ly.in_channels // ly.groups
            dg = ly.out_channels // ly.groups
            elementwise = tiles * cg * dg * n * n * ly.groups
            dense = elementwise
            sparse = _scaled(elementwise, keep)
            if policy == "full":
                transforms = tiles * ly.in_channels * 2 * n**3
                transforms += tiles * ly.out_channels * (m * n * n + m * m * n)
                dense += transforms
                sparse += transforms
            rows.append(LayerMacs(ly.name, dense, sparse))
        else:
            dense = oh * ow * ly.weight_count
            rows.append(LayerMacs(ly.name, dense, _scaled(dense, keep)))
    return MacReport(network=net.name, domain=domain, policy=policy, rows=rows)
