"""The regularized training loop.

Every iteration recomputes both percentile thresholds from the current
weights, evaluates the data loss on a minibatch plus the two partial-L2
regularizers, and takes one Adam step on the weights and on the two
log-coefficients. All randomness (init, batch order) flows from the
config seed, so a rerun reproduces the metrics log byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import FilterBank, build_training_graph, init_filter_bank, plans_for, predict_logits
from .netspec import NetworkSpec
from .sparsity import (
    NOTHING_REGULARIZED,
    coefficient,
    SparsityConfig,
    TrainState,
    joint_cost,
    spatial_partial_l2,
    winograd_partial_l2,
)
from .winograd import transform_filters

__all__ = [
    "TrainConfig",
    "TrainResult",
    "Adam",
    "TrainingDiverged",
    "train",
    "snapshot_histogram",
    "metrics_to_csv",
]

METRIC_FIELDS = (
    "iteration", "E", "R_WD", "R_SD", "zeta_WD", "zeta_SD",
    "theta_WD", "theta_SD", "accuracy",
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    iterations: int = 20_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    zeta0_wd: float = math.log(1e-4)
    zeta0_sd: float = math.log(1e-4)
    # None means: share the weight learning rate (same Adam settings)
    zeta_learning_rate: float | None = None
    log_every: int = 100
    snapshot_every: int = 0  # 0 disables histogram snapshots
    histogram_bins: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch size and iteration budget must be positive")


class Adam:
    """Standard Adam over a dict of arrays; updates in place."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr_override: dict[str, float] | None = None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1 - b1**self.t
        bias2 = 1 - b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mh = self.m[name] / bias1
            vh = self.v[name] / bias2
            lr = self.lr if lr_override is None else lr_override.get(name, self.lr)
            params[name] -= lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainResult:
    bank: FilterBank
    state: TrainState
    metrics: list[dict]
    histograms: list[dict]


def _fmt(x) -> str:
    return repr(float(x))


def metrics_to_csv(rows: list[dict]) -> str:
    lines = [",".join(METRIC_FIELDS)]
    for row in rows:
        cells = []
        for f in METRIC_FIELDS:
            v = row.get(f, "")
            if f == "iteration":
                cells.append(str(v))
            elif v == "" or v is None:
                cells.append("")
            else:
                cells.append(_fmt(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def snapshot_histogram(weights, domain: str, bins: int, plans=None):
    """Histogram of weight values (spatial) or transformed weights
    (winograd) over symmetric bins. Returns (edges, counts)."""
    if bins < 2:
        raise ValueError("snapshot_histogram: need at least 2 bins")
    if domain == "spatial":
        flat = np.concatenate([np.asarray(v).ravel() for v in weights.values()])
    elif domain == "winograd":
        if not plans:
            raise ValueError("snapshot_histogram: winograd domain needs plans")
        flat = np.concatenate(
            [transform_filters(weights[name], plan).ravel() for name, plan in plans.items()]
        )
    else:
        raise ValueError(f"snapshot_histogram: unknown domain {domain!r}")
    lim = float(np.abs(flat).max())
    if lim == 0.0:
        lim = 1.0
    counts, edges = np.histogram(flat, bins=bins, range=(-lim, lim))
    return edges, counts


def _conv_weights(net: NetworkSpec, bank: FilterBank, plans):
    return {name: bank[name] for name in plans}


def _evaluate_accuracy(net, bank, images, labels) -> float:
    logits = predict_logits(net, bank, images)
    return float((logits.argmax(axis=1) == labels).mean())


def train(net: NetworkSpec, dataset, config: TrainConfig,
          bank: FilterBank | None = None) -> TrainResult:
    """Run the regularized loop on ``dataset`` (a DatasetHandle).

    Returns the trained bank, the final coefficient/threshold state and the
    metrics log. Aborts with TrainingDiverged if the data loss goes
    non-finite.
    """
    rng = np.random.default_rng(config.seed)
    if bank is None:
        bank = init_filter_bank(net, rng)
    else:
        bank = bank.copy()
    plans = plans_for(net)
    graph = build_training_graph(net, bank)
    scfg = config.sparsity

    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    zlr = config.zeta_learning_rate
    lr_override = None if zlr is None else {"zeta_wd": zlr, "zeta_sd": zlr}
    zeta = {"zeta_wd": np.asarray(config.zeta0_wd, dtype=np.float64),
            "zeta_sd": np.asarray(config.zeta0_sd, dtype=np.float64)}

    train_x, train_y = dataset.train_arrays()
    test_x, test_y = dataset.test_arrays()
    state = TrainState(zeta_wd=float(zeta["zeta_wd"]), zeta_sd=float(zeta["zeta_sd"]))
    metrics: list[dict] = []
    histograms: list[dict] = []

    for it in range(config.iterations):
        idx = rng.integers(0, train_x.shape[0], size=config.batch_size)
        e = graph.run(train_x[idx], train_y[idx])
        if not math.isfinite(e):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}")
        grads = graph.gradients()

        if scfg.s_wd > 0 and plans:
            rwd = winograd_partial_l2(
                _conv_weights(net, bank, plans), plans, scfg.s_wd, scfg.threshold_scope
            )
        else:
            rwd = None
        if scfg.s_sd > 0:
            rsd = spatial_partial_l2(dict(bank.items()), scfg.s_sd, scfg.threshold_scope)
        else:
            rsd = None

        r_wd = rwd.value if rwd else 0.0
        r_sd = rsd.value if rsd else 0.0
        zwd, zsd = float(zeta["zeta_wd"]), float(zeta["zeta_sd"])
        cost = joint_cost(e, r_wd, r_sd, zwd, zsd, scfg.alpha)

        if rwd:
            coef = coefficient(zwd)
            for name, g in rwd.grads.items():
                grads[name] = grads[name] + coef * g
        if rsd:
            coef = coefficient(zsd)
            for name, g in rsd.grads.items():
                grads[name] = grads[name] + coef * g

        params = dict(bank.items())
        params.update(zeta)
        grads["zeta_wd"] = np.asarray(cost.dzeta_wd)
        grads["zeta_sd"] = np.asarray(cost.dzeta_sd)
        opt.step(params, grads, lr_override)

        def _scalar(theta):
            if isinstance(theta, dict):
                return max(theta.values())
            return theta

        state.zeta_wd = float(zeta["zeta_wd"])
        state.zeta_sd = float(zeta["zeta_sd"])
        state.theta_wd = _scalar(rwd.theta) if rwd else NOTHING_REGULARIZED
        state.theta_sd = _scalar(rsd.theta) if rsd else NOTHING_REGULARIZED
        state.iteration = it + 1

        if config.log_every and (it % config.log_every == 0 or it == config.iterations - 1):
            acc = _evaluate_accuracy(net, bank, test_x, test_y)
            metrics.append({
                "iteration": it,
                "E": e,
                "R_WD": r_wd,
                "R_SD": r_sd,
                "zeta_WD": zwd,
                "zeta_SD": zsd,
                "theta_WD": state.theta_wd if math.isfinite(state.theta_wd) else 0.0,
                "theta_SD": state.theta_sd if math.isfinite(state.theta_sd) else 0.0,
                "accuracy": acc,
            })
        if config.snapshot_every and it % config.snapshot_every == 0:
            for domain in ("spatial", "winograd") if plans else ("spatial",):
                edges, counts = snapshot_histogram(
                    dict(bank.items()), domain, config.histogram_bins, plans
                )
                histograms.append({
                    "iteration": it, "domain": domain,
                    "edges": edges, "counts": counts,
                })

    return TrainResult(bank=bank, state=state, metrics=metrics, histograms=histograms)
