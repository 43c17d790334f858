"""Magnitude pruning of a trained model in the spatial or Winograd domain.

Pruning zeroes every weight whose magnitude is at or below the nearest-rank
percentile threshold for the target sparsity (ties included, matching the
regularizer's indicator). Winograd pruning operates on the transformed
filters of plan-assigned layers and is terminal for that deployment: the
spatial weights are left untouched because the transform is not invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FilterBank, plans_for
from .netspec import NetworkSpec
from .sparsity import percentile_threshold
from .winograd import WinogradFilterBank, transform_filters

__all__ = ["PruneMask", "prune", "sparsity_report", "filter_pattern_grid"]


@dataclass
class PruneMask:
    """Per-layer boolean masks (True = pruned) aligned with the weight
    tensors of the chosen domain."""

    domain: str  # spatial | winograd
    masks: dict[str, np.ndarray]
    target: float  # percent
    scope: str

    @property
    def total(self) -> int:
        return sum(m.size for m in self.masks.values())

    @property
    def pruned_count(self) -> int:
        return sum(int(m.sum()) for m in self.masks.values())

    @property
    def achieved(self) -> float:
        return self.pruned_count / self.total if self.total else 0.0

    def layer_sparsity(self, name: str) -> float:
        m = self.masks[name]
        return float(m.sum()) / m.size


def _thresholds(values: dict[str, np.ndarray], s: float, scope: str):
    if scope == "global":
        flat = np.concatenate([np.abs(v).ravel() for v in values.values()])
        theta = percentile_threshold(flat, s)
        return {name: theta for name in values}
    if scope == "per-layer":
        return {name: percentile_threshold(np.abs(v), s) for name, v in values.items()}
    raise ValueError(f"prune: unknown scope {scope!r}")


def prune(net: NetworkSpec, bank: FilterBank, domain: str, s: float,
          scope: str = "global"):
    """Prune at sparsity target ``s`` percent.

    domain="spatial": returns (masked FilterBank copy, PruneMask) over all
    conv and fc layers. domain="winograd": returns (dict of layer name ->
    WinogradFilterBank, PruneMask) over the plan-assigned layers.
    """
    if not 0 <= s <= 100:
        raise ValueError(f"prune: sparsity must be in [0,100], got {s}")
    if domain == "spatial":
        values = dict(bank.items())
        thetas = _thresholds(values, s, scope)
        masked = bank.copy()
        masks = {}
        for name, v in values.items():
            mask = np.abs(v) <= thetas[name]
            masks[name] = mask
            masked[name] = np.where(mask, 0.0, v)
        return masked, PruneMask(domain="spatial", masks=masks, target=s, scope=scope)
    if domain == "winograd":
        plans = plans_for(net)
        if not plans:
            raise ValueError(f"prune: {net.name} has no winograd plan assignments")
        wd = {name: transform_filters(bank[name], plan) for name, plan in plans.items()}
        thetas = _thresholds(wd, s, scope)
        banks = {}
        masks = {}
        for name, w in wd.items():
            mask = np.abs(w) <= thetas[name]
            masks[name] = mask
            banks[name] = WinogradFilterBank(
                weights=np.where(mask, 0.0, w), mask=mask, plan=plans[name]
            )
        return banks, PruneMask(domain="winograd", masks=masks, target=s, scope=scope)
    raise ValueError(f"prune: unknown domain {domain!r}")


def sparsity_report(mask: PruneMask):
    """Exact per-layer and overall zero counts as (rows, csv_text)."""
    rows = []
    for name, m in mask.masks.items():
        rows.append({
            "layer": name,
            "zeros": int(m.sum()),
            "total": int(m.size),
            "sparsity": float(m.sum()) / m.size,
        })
    rows.append({
        "layer": "overall",
        "zeros": mask.pruned_count,
        "total": mask.total,
        "sparsity": mask.achieved,
    })
    lines = ["layer,zeros,total,sparsity"]
    for r in rows:
        lines.append(f"{r['layer']},{r['zeros']},{r['total']},{r['sparsity']!r}")
    return rows, "\n".join(lines) + "\n"


def filter_pattern_grid(mask: np.ndarray, max_filters: int = 8) -> str:
    """Plain-text sparse-pattern grids for the first filters of a layer:
    '#' kept, '.' pruned."""
    mask = np.asarray(mask, dtype=bool)
    d, c = mask.shape[0], mask.shape[1]
    shown = []
    count = 0
    for j in range(d):
        for i in range(c):
            if count >= max_filters:
                break
            grid = "\n".join(
                "".join("." if px else "#" for px in row) for row in mask[j, i]
            )
            shown.append(f"filter (out={j}, in={i}):\n{grid}")
            count += 1
        if count >= max_filters:
            break
    return "\n\n".join(shown) + "\n"
