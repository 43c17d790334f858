"""Winograd convolution: transform construction and dense/sparse kernels.

A plan for filter side r and patch side n (output side m = n-r+1) is built
by Cook-Toom polynomial interpolation at the canonical points
0, 1, -1, 2, -2, 1/2, -1/2, 4, ... plus the point at infinity. With

    E = n-by-n evaluation matrix of a degree-(n-1) polynomial at the points,
    A = n-by-m evaluation matrix restricted to m coefficients,
    B = n-by-r evaluation matrix restricted to r coefficients,

the 1-D correlation of an n-vector d with an r-tap filter g is
``A^T ((B g) * (E^-T d))``, which is the transpose of interpolating the
product of a degree-(m-1) and a degree-(r-1) polynomial. The 2-D form
applies the 1-D transforms on rows and columns:

    y = S^T ((G w G^T) * (F x F^T)) S,  F = E^-T,  G = B,  S = A.

All transform entries are exact rationals, converted to float64 once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil

import numpy as np

__all__ = [
    "WinogradPlan",
    "WinogradFilterBank",
    "build_plan",
    "transform_filter",
    "transform_filters",
    "filter_gradient_from_transform",
    "winograd_conv2d",
    "sparse_winograd_conv2d",
]

_CANONICAL_POINTS = (
    Fraction(0),
    Fraction(1),
    Fraction(-1),
    Fraction(2),
    Fraction(-2),
    Fraction(1, 2),
    Fraction(-1, 2),
    Fraction(4),
)

MAX_PATCH_SIDE = 8  # conditioning guard for the float64 transforms


def _eval_matrix(points, ncols):
    """Rows [p^0 .. p^(ncols-1)] per finite point, plus the infinity row
    selecting the leading coefficient."""
    rows = [[p**j for j in range(ncols)] for p in points]
    rows.append([Fraction(0)] * (ncols - 1) + [Fraction(1)])
    return rows


def _invert_exact(mat):
    n = len(mat)
    aug = [list(row) + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(mat)]
    for col in range(n):
        piv = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if piv is None:
            raise ValueError("interpolation matrix is singular")
        aug[col], aug[piv] = aug[piv], aug[col]
        inv = 1 / aug[col][col]
        aug[col] = [v * inv for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def _transpose(mat):
    return [list(col) for col in zip(*mat)]


def _to_f64(mat):
    return np.array([[float(v) for v in row] for row in mat], dtype=np.float64)


@dataclass(frozen=True)
class WinogradPlan:
    """Transform matrices for one (r, n) configuration.

    F (n x n) maps an input patch into the transform domain, G (n x r)
    maps a filter, S (n x m) maps the elementwise product back. Exact
    rational copies are kept for reporting.
    """

    r: int
    n: int
    m: int
    F: np.ndarray
    G: np.ndarray
    S: np.ndarray
    interpolation_points: tuple[Fraction, ...]
    F_exact: tuple = field(repr=False, default=())
    G_exact: tuple = field(repr=False, default=())
    S_exact: tuple = field(repr=False, default=())

    def describe(self) -> str:
        """Exact-rational rendering for reports."""
        def fmt(mat, name):
            rows = ["  [" + ", ".join(str(v) for v in row) + "]" for row in mat]
            return f"{name} =\n" + "\n".join(rows)

        pts = ", ".join(str(p) for p in self.interpolation_points) + ", inf"
        return (
            f"plan r={self.r} n={self.n} m={self.m}\n"
            f"points: {pts}\n"
            + fmt(self.F_exact, "F") + "\n"
            + fmt(self.G_exact, "G") + "\n"
            + fmt(self.S_exact, "S")
        )


def build_plan(r: int, n: int) -> WinogradPlan:
    """Construct the (r, n) transform matrices.

    Requires 1 <= r <= n <= 8; n is capped because the canonical-point
    Vandermonde systems degrade in float64 beyond that.
    """
    if r < 1:
        raise ValueError(f"build_plan: filter side must be >= 1, got {r}")
    if r > n:
        raise ValueError(f"build_plan: need r <= n, got r={r} n={n}")
    if n > MAX_PATCH_SIDE:
        raise ValueError(f"build_plan: patch side {n} exceeds the supported maximum {MAX_PATCH_SIDE}")
    m = n - r + 1
    points = _CANONICAL_POINTS[: n - 1]
    E = _eval_matrix(points, n)
    F_exact = _transpose(_invert_exact(E))
    G_exact = _eval_matrix(points, r)
    S_exact = _eval_matrix(points, m)
    return WinogradPlan(
        r=r,
        n=n,
        m=m,
        F=_to_f64(F_exact),
        G=_to_f64(G_exact),
        S=_to_f64(S_exact),
        interpolation_points=tuple(points),
        F_exact=tuple(tuple(row) for row in F_exact),
        G_exact=tuple(tuple(row) for row in G_exact),
        S_exact=tuple(tuple(row) for row in S_exact),
    )


def transform_filter(w: np.ndarray, plan: WinogradPlan) -> np.ndarray:
    """G w G^T for a single r-by-r filter."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (plan.r, plan.r):
        raise ValueError(f"transform_filter: expected {(plan.r, plan.r)}, got {w.shape}")
    return plan.G @ w @ plan.G.T


def transform_filters(w: np.ndarray, plan: WinogradPlan) -> np.ndarray:
    """G w G^T applied per (output, input) channel pair: [D,C,r,r] -> [D,C,n,n]."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4 or w.shape[2] != plan.r or w.shape[3] != plan.r:
        raise ValueError(f"transform_filters: expected [D,C,{plan.r},{plan.r}], got {w.shape}")
    return np.einsum("ab,dcbe,fe->dcaf", plan.G, w, plan.G, optimize=True)


def filter_gradient_from_transform(g_wd: np.ndarray, plan: WinogradPlan) -> np.ndarray:
    """Pull a gradient w.r.t. G w G^T back to the spatial filter: G^T g G."""
    g_wd = np.asarray(g_wd, dtype=np.float64)
    return np.einsum("ab,dcae,ef->dcbf", plan.G, g_wd, plan.G, optimize=True)


def _tile_geometry(h: int, w: int, plan: WinogradPlan):
    ho, wo = h - plan.r + 1, w - plan.r + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"winograd_conv2d: filter side {plan.r} larger than input {h}x{w}")
    th, tw = ceil(ho / plan.m), ceil(wo / plan.m)
    pad_h = (th - 1) * plan.m + plan.n - h
    pad_w = (tw - 1) * plan.m + plan.n - w
    return ho, wo, th, tw, max(pad_h, 0), max(pad_w, 0)


def _transform_input(x: np.ndarray, plan: WinogradPlan):
    """Zero-pad bottom/right so patches tile, extract n-by-n patches at
    stride m and transform them: returns [N,C,th,tw,n,n] plus geometry."""
    h, w = x.shape[2], x.shape[3]
    ho, wo, th, tw, pad_h, pad_w = _tile_geometry(h, w, plan)
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(x, (plan.n, plan.n), axis=(2, 3))
    patches = win[:, :, :: plan.m, :: plan.m]
    X = np.einsum("ab,NCtubc,dc->NCtuad", plan.F, patches, plan.F, optimize=True)
    return X, (ho, wo, th, tw)


def _assemble_output(Z: np.ndarray, plan: WinogradPlan, geom):
    """S^T Z S per patch and stitch tiles: [N,D,th,tw,n,n] -> [N,D,ho,wo]."""
    ho, wo, th, tw = geom
    tiles = np.einsum("xa,NDtuxy,yb->NDtuab", plan.S, Z, plan.S, optimize=True)
    n, d = tiles.shape[0], tiles.shape[1]
    out = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, d, th * plan.m, tw * plan.m)
    return out[:, :, :ho, :wo]


def winograd_conv2d(x: np.ndarray, filters: np.ndarray, plan: WinogradPlan) -> np.ndarray:
    """Valid cross-correlation computed through the transform domain.

    Accumulates over input channels in the transform domain, then applies
    one output transform per patch. x: [C,H,W] or [N,C,H,W].
    """
    x = np.asarray(x, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if filters.ndim != 4 or filters.shape[1] != x.shape[1]:
        raise ValueError(
            f"winograd_conv2d: filters {filters.shape} incompatible with input {x.shape}"
        )
    W = transform_filters(filters, plan)
    X, geom = _transform_input(x, plan)
    Z = np.einsum("NCtuxy,DCxy->NDtuxy", X, W, optimize=True)
    out = _assemble_output(Z, plan, geom)
    return out[0] if squeeze else out


@dataclass
class WinogradFilterBank:
    """Transform-domain weights of one conv layer with a prune mask.

    weights: [D,C,n,n] with masked (pruned) entries exactly 0;
    mask: boolean [D,C,n,n], True where pruned.
    """

    weights: np.ndarray
    mask: np.ndarray
    plan: WinogradPlan

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.weights.shape != self.mask.shape:
            raise ValueError("WinogradFilterBank: weights/mask shape mismatch")
        if self.weights.ndim != 4 or self.weights.shape[2:] != (self.plan.n, self.plan.n):
            raise ValueError(
                f"WinogradFilterBank: expected [D,C,{self.plan.n},{self.plan.n}], "
                f"got {self.weights.shape}"
            )
        self.weights = np.where(self.mask, 0.0, self.weights)

    @property
    def sparsity(self) -> float:
        return float(self.mask.sum()) / self.mask.size

    @property
    def unpruned_count(self) -> int:
        return int((~self.mask).sum())

    @classmethod
    def from_spatial(cls, filters: np.ndarray, plan: WinogradPlan, mask=None):
        w = transform_filters(filters, plan)
        if mask is None:
            mask = np.zeros(w.shape, dtype=bool)
        return cls(weights=w, mask=mask, plan=plan)


def sparse_winograd_conv2d(
    x: np.ndarray, bank: WinogradFilterBank, plan: WinogradPlan | None = None
):
    """Winograd convolution with masked transform-domain weights.

    Returns (output, elementwise_mac_count) where the count covers only
    multiply-accumulates at unpruned positions, per image patch. Transform
    MACs are accounted separately by the architecture-level counters.
    """
    plan = plan or bank.plan
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if bank.weights.shape[1] != x.shape[1]:
        raise ValueError(
            f"sparse_winograd_conv2d: bank {bank.weights.shape} incompatible "
            f"with input {x.shape}"
        )
    X, geom = _transform_input(x, plan)
    Z = np.einsum("NCtuxy,DCxy->NDtuxy", X, bank.weights, optimize=True)
    out = _assemble_output(Z, plan, geom)
    _, _, th, tw = geom
    macs = x.shape[0] * th * tw * bank.unpruned_count
    return (out[0] if squeeze else out), int(macs)
