"""Dual-domain deployment from one compressed container.

The spatial path reconstructs dither-cancelled weights and runs the dense
kernels (multiplying by stored zeros is the zero-skip: the MAC accounting,
not the arithmetic, is what changes). The Winograd path transforms each
plan-assigned layer's filters, magnitude-prunes the transform-domain
weights at the requested sparsity with a freshly derived threshold, and
runs the sparse Winograd kernel. Sparsity is always recomputed from the
actual zeros, never trusted from metadata.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .compression import CompressedModel, decompress
from .model import FilterBank, init_filter_bank, plans_for
from .netspec import MacReport, NetworkSpec, count_macs
from .pruning import prune
from .tensor import conv2d_forward, maxpool2d_forward, relu_forward
from .winograd import WinogradFilterBank, sparse_winograd_conv2d

__all__ = ["DeployedModel", "deploy_spatial", "deploy_winograd", "evaluate",
           "evaluation_report_csv"]


@dataclass
class DeployedModel:
    domain: str  # spatial | winograd
    net: NetworkSpec
    weights: FilterBank  # spatial weights (non-winograd layers always use these)
    winograd_banks: dict[str, WinogradFilterBank]
    sparsity: dict[str, Fraction]  # measured zeros/total per weighted layer
    mac_report: MacReport

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        single = h.ndim == 3
        if single:
            h = h[None]
        for ly in self.net.layers:
            if ly.kind == "conv":
                if ly.name in self.winograd_banks:
                    h, _ = sparse_winograd_conv2d(h, self.winograd_banks[ly.name])
                else:
                    h = conv2d_forward(h, self.weights[ly.name])
            elif ly.kind == "relu":
                h = relu_forward(h)
            elif ly.kind == "maxpool":
                h = maxpool2d_forward(h, ly.kernel)
            elif ly.kind == "flatten":
                h = h.reshape(h.shape[0], -1)
            elif ly.kind == "fc":
                h = h.reshape(h.shape[0], -1) @ self.weights[ly.name]
        return h[0] if single else h


def _measured_sparsity(arr: np.ndarray) -> Fraction:
    return Fraction(int((arr == 0.0).sum()), arr.size)


def _bank_from_container(cm: CompressedModel) -> FilterBank:
    template = init_filter_bank(cm.net, np.random.default_rng(0))
    return template.from_flat(cm.deployed_weights())


def _as_model(container) -> CompressedModel:
    if isinstance(container, CompressedModel):
        return container
    return decompress(container)


def deploy_spatial(container) -> DeployedModel:
    """Reconstruct q-hat weights and set up sparse spatial inference."""
    cm = _as_model(container)
    bank = _bank_from_container(cm)
    sparsity = {name: _measured_sparsity(bank[name]) for name in bank.names()}
    report = count_macs(cm.net, "spatial", sparsity=sparsity)
    return DeployedModel(
        domain="spatial", net=cm.net, weights=bank, winograd_banks={},
        sparsity=sparsity, mac_report=report,
    )


def deploy_winograd(container, s_wd: float) -> DeployedModel:
    """Reconstruct q-hat weights, transform the eligible filters, prune the
    transform-domain weights at ``s_wd`` percent (threshold re-derived from
    the deployed magnitudes), and set up sparse Winograd inference."""
    cm = _as_model(container)
    if not cm.net.winograd_layers():
        raise ValueError(
            f"deploy_winograd: {cm.net.name} has no winograd plan assignments; "
            "deploy spatially instead"
        )
    bank = _bank_from_container(cm)
    banks, _ = prune(cm.net, bank, "winograd", s_wd)
    sparsity: dict[str, Fraction] = {}
    for name in bank.names():
        if name in banks:
            sparsity[name] = _measured_sparsity(banks[name].weights)
        else:
            sparsity[name] = _measured_sparsity(bank[name])
    report = count_macs(cm.net, "winograd", sparsity=sparsity)
    return DeployedModel(
        domain="winograd", net=cm.net, weights=bank, winograd_banks=banks,
        sparsity=sparsity, mac_report=report,
    )


def evaluate(deployed: DeployedModel, images: np.ndarray, labels: np.ndarray,
             topk: int = 5) -> dict:
    """Deterministic top-1 / top-k accuracy; argmax ties break toward the
    lowest class index."""
    logits = deployed.logits(images)
    labels = np.asarray(labels)
    top1 = logits.argmax(axis=1)
    # stable ascending sort of (-logit, class) pairs: ties keep low classes first
    order = np.argsort(-logits, axis=1, kind="stable")[:, :topk]
    in_topk = (order == labels[:, None]).any(axis=1)
    return {
        "top1": float((top1 == labels).mean()),
        f"top{topk}": float(in_topk.mean()),
        "count": int(labels.size),
    }


def evaluation_report_csv(deployed: DeployedModel, metrics: dict) -> str:
    """Evaluation CSV: domain, per-layer sparsity, per-image MACs, accuracy."""
    lines = ["field,value"]
    lines.append(f"domain,{deployed.domain}")
    for name, frac in deployed.sparsity.items():
        lines.append(f"sparsity.{name},{float(frac)!r}")
    lines.append(f"macs_per_image,{deployed.mac_report.total_sparse}")
    lines.append(f"macs_per_image_dense,{deployed.mac_report.total_dense}")
    for key in sorted(metrics):
        if key == "count":
            lines.append(f"eval_samples,{metrics[key]}")
        else:
            lines.append(f"{key},{metrics[key]!r}")
    return "\n".join(lines) + "\n"
