#!/usr/bin/env python3
"""End-to-end desk experiment.

Trains the four tiny-cnn variants (baseline, SD-only, WD-only, WD+SD),
prunes each in both domains, then pushes the WD+SD model through
quantization, codebook fine-tuning, compression and dual-domain
deployment. Prints the cross-domain accuracy table and the compression
summary.

Usage: python scripts/run_pipeline.py [outdir] [--fast]
"""

import json
import sys
import time
from pathlib import Path

import numpy as np

from winosparse import compression as cp
from winosparse import deploy as dpl
from winosparse import training as tr
from winosparse.datasets import ingest_dataset
from winosparse.model import plans_for, predict_logits, save_model
from winosparse.netspec import count_macs, tiny_cnn
from winosparse.pruning import prune, sparsity_report
from winosparse.sparsity import SparsityConfig
from winosparse.winograd import sparse_winograd_conv2d

DATASET = "synthetic:10x3000x16:seed=7"
SPARSITY = 70.0
SEED = 1


def train_variant(net, data, s_wd, s_sd, iterations):
    cfg = tr.TrainConfig(
        learning_rate=2e-3, batch_size=32, iterations=iterations,
        log_every=max(iterations // 10, 1), seed=SEED,
        zeta_learning_rate=0.05, zeta0_wd=np.log(1e-2), zeta0_sd=np.log(1e-2),
        sparsity=SparsityConfig(s_wd=s_wd, s_sd=s_sd, alpha=1.0),
    )
    return tr.train(net, data, cfg)


def accuracy_spatial(net, bank, x, y):
    return float((predict_logits(net, bank, x).argmax(axis=1) == y).mean())


def accuracy_winograd(net, bank, banks, x, y):
    h = x
    for ly in net.layers:
        if ly.kind == "conv":
            if ly.name in banks:
                h, _ = sparse_winograd_conv2d(h, banks[ly.name])
            else:
                from winosparse.tensor import conv2d_forward

                h = conv2d_forward(h, bank[ly.name])
        elif ly.kind == "relu":
            h = np.maximum(h, 0.0)
        elif ly.kind == "maxpool":
            from winosparse.tensor import maxpool2d_forward

            h = maxpool2d_forward(h, ly.kernel)
        elif ly.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
        elif ly.kind == "fc":
            h = h.reshape(h.shape[0], -1) @ bank[ly.name]
    return float((h.argmax(axis=1) == y).mean())


def main(argv):
    outdir = Path(argv[1]) if len(argv) > 1 and not argv[1].startswith("-") else Path("pipeline_out")
    fast = "--fast" in argv
    iterations = 1200 if fast else 6000
    outdir.mkdir(parents=True, exist_ok=True)

    data = ingest_dataset(DATASET)
    net = tiny_cnn(input_side=data.image_side, classes=data.classes)
    tx, ty = data.test_arrays()

    t0 = time.time()
    print(f"training 4 variants ({iterations} iterations each) ...")
    variants = {
        "baseline": train_variant(net, data, 0, 0, iterations),
        "SD": train_variant(net, data, 0, SPARSITY, iterations),
        "WD": train_variant(net, data, SPARSITY, 0, iterations),
        "WD+SD": train_variant(net, data, SPARSITY, SPARSITY, iterations),
    }
    print(f"  done in {time.time() - t0:.0f}s")

    base_acc = accuracy_spatial(net, variants["baseline"].bank, tx, ty)
    print(f"\n{'variant':8s} {'unpruned':>9s} {'SD-pruned':>10s} {'WD-pruned':>10s}")
    print(f"{'baseline':8s} {base_acc:9.3f} {'-':>10s} {'-':>10s}")
    table = {}
    for tag in ("SD", "WD", "WD+SD"):
        bank = variants[tag].bank
        up = accuracy_spatial(net, bank, tx, ty)
        masked, _ = prune(net, bank, "spatial", SPARSITY)
        sd_acc = accuracy_spatial(net, masked, tx, ty)
        banks, _ = prune(net, bank, "winograd", SPARSITY)
        wd_acc = accuracy_winograd(net, bank, banks, tx, ty)
        table[tag] = (up, sd_acc, wd_acc)
        print(f"{tag:8s} {up:9.3f} {sd_acc:10.3f} {wd_acc:10.3f}")
        save_model(outdir / f"model_{tag.replace('+', '_')}.json", net, bank)

    # compress the jointly regularized model: delta targets the spatial
    # sparsity, codebook fine-tuning restores winograd prunability
    both = variants["WD+SD"].bank
    delta = cp.delta_for_target_sparsity(both.flat(), SPARSITY, SEED)
    record = cp.dithered_quantize(both.flat(), delta, SEED)
    codebook, _ = cp.fine_tune_codebook(
        record, net, both, data, s_wd=SPARSITY, alpha=1.0,
        steps=120 if fast else 400, learning_rate=1e-3, seed=SEED,
    )
    cm = cp.compress(net, both, delta, SEED, codebook=codebook)
    blob = cm.to_bytes()
    (outdir / "model.wspc").write_bytes(blob)
    rep = cm.size_report()

    spatial = dpl.deploy_spatial(blob)
    winograd = dpl.deploy_winograd(blob, s_wd=SPARSITY)
    ms = dpl.evaluate(spatial, tx, ty)
    mw = dpl.evaluate(winograd, tx, ty)
    print(f"\ncontainer: {rep['container_bytes']} bytes, CR {rep['cr_total']:.1f}x "
          f"({rep['cr_payload']:.1f}x payload-only)")
    print(f"deployed spatial:  top1={ms['top1']:.3f} macs/image={spatial.mac_report.total_sparse}")
    print(f"deployed winograd: top1={mw['top1']:.3f} macs/image={winograd.mac_report.total_sparse}")
    dense = count_macs(net, "spatial").total_dense
    print(f"dense spatial macs/image: {dense}")

    summary = {
        "baseline_top1": base_acc,
        "table": table,
        "container_bytes": rep["container_bytes"],
        "cr_total": rep["cr_total"],
        "cr_payload": rep["cr_payload"],
        "deployed_spatial_top1": ms["top1"],
        "deployed_winograd_top1": mw["top1"],
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(f"\nwrote {outdir}/summary.json")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
