"""Command-line pipeline: train / prune / compress / decompress / deploy /
eval / macs / report.

Config precedence is CLI flags over a JSON config file over built-in
defaults. Every stochastic stage takes an explicit seed and logs it, so a
rerun with the same argv produces byte-identical artifacts.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import compression as cp
from . import deploy as dpl
from . import netspec as ns
from . import pruning as pr
from . import training as tr
from .datasets import ingest_dataset
from .model import FilterBank, load_model, plans_for, save_model
from .sparsity import SparsityConfig

__all__ = ["main"]

# Published reference compression ratios for the ImageNet-scale pipelines;
# printed as context only, never reproduced at desk scale.
REFERENCE_COMPRESSION_RATIOS = {"resnet18-modified": 24.2, "alexnet": 47.7}


class ConfigError(ValueError):
    pass


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path}: expected a JSON object")
    return doc


def _setting(args, config: dict, name: str, default):
    """CLI flag (if given) beats config file beats default."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _resolve_net(name: str, dataset=None) -> ns.NetworkSpec:
    nets = ns.builtin_networks()
    if name == "tiny-cnn" and dataset is not None:
        return ns.tiny_cnn(input_side=dataset.image_side, classes=dataset.classes)
    if name in nets:
        return nets[name]
    path = Path(name)
    if path.exists():
        return ns.NetworkSpec.from_json(path.read_text())
    raise ConfigError(f"unknown network {name!r} (builtin: {sorted(nets)}) and no such file")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text)
    print(f"wrote {path}")


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    dataset = ingest_dataset(_setting(args, config, "dataset", None) or _fail("--dataset required"))
    net = _resolve_net(_setting(args, config, "net", "tiny-cnn"), dataset)
    scfg = SparsityConfig(
        s_wd=float(_setting(args, config, "swd", 0.0)),
        s_sd=float(_setting(args, config, "ssd", 0.0)),
        alpha=float(_setting(args, config, "alpha", 1.0)),
        threshold_scope=_setting(args, config, "scope", "global"),
    )
    tcfg = tr.TrainConfig(
        learning_rate=float(_setting(args, config, "lr", 2e-3)),
        batch_size=int(_setting(args, config, "batch", 32)),
        iterations=int(_setting(args, config, "iters", 20000)),
        sparsity=scfg,
        zeta0_wd=float(_setting(args, config, "zeta0", math.log(1e-4))),
        zeta0_sd=float(_setting(args, config, "zeta0", math.log(1e-4))),
        zeta_learning_rate=_setting(args, config, "zeta-lr", None),
        log_every=int(_setting(args, config, "log-every", 100)),
        snapshot_every=int(_setting(args, config, "snapshot-every", 0)),
        seed=int(_setting(args, config, "seed", 0)),
    )
    if tcfg.zeta_learning_rate is not None:
        tcfg.zeta_learning_rate = float(tcfg.zeta_learning_rate)
    out = _outdir(args)
    result = tr.train(net, dataset, tcfg)
    save_model(out / "model.json", net, result.bank, extra={
        "dataset": dataset.name, "seed": tcfg.seed,
        "s_wd": scfg.s_wd, "s_sd": scfg.s_sd, "alpha": scfg.alpha,
    })
    print(f"wrote {out / 'model.json'}")
    _write(out / "metrics.csv", tr.metrics_to_csv(result.metrics))
    for snap in result.histograms:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(snap["edges"][:-1], snap["edges"][1:], snap["counts"]):
            lines.append(f"{lo!r},{hi!r},{int(c)}")
        _write(out / f"hist_{snap['domain']}_{snap['iteration']:06d}.csv",
               "\n".join(lines) + "\n")
    final = result.metrics[-1] if result.metrics else {}
    print(f"final: E={final.get('E')} accuracy={final.get('accuracy')}")
    return 0


def cmd_prune(args) -> int:
    net, bank, _ = load_model(args.model)
    masked, mask = pr.prune(net, bank, args.domain, float(args.sparsity), args.scope)
    out = _outdir(args)
    rows, csv = pr.sparsity_report(mask)
    _write(out / "sparsity_report.csv", csv)
    print(f"target {mask.target}% -> realized {100 * mask.achieved:.3f}% ({mask.domain})")
    if args.domain == "spatial":
        save_model(out / "pruned_model.json", net, masked, extra={"pruned": "spatial"})
        print(f"wrote {out / 'pruned_model.json'}")
    else:
        grids = []
        for name, wb in masked.items():
            grids.append(f"== {name}\n{pr.filter_pattern_grid(wb.mask, max_filters=4)}")
        _write(out / "winograd_patterns.txt", "\n".join(grids))
    return 0


def cmd_compress(args) -> int:
    net, bank, _ = load_model(args.model)
    seed = int(args.seed)
    if args.delta is not None:
        delta = float(args.delta)
    else:
        delta = cp.delta_for_target_sparsity(bank.flat(), float(args.target_sparsity), seed)
        print(f"delta={delta!r} (targets {args.target_sparsity}% spatial sparsity)")
    codebook = {}
    trace = []
    if args.finetune_steps > 0:
        if not args.dataset:
            raise ConfigError("--finetune-steps needs --dataset")
        dataset = ingest_dataset(args.dataset)
        record = cp.dithered_quantize(bank.flat(), delta, seed)
        codebook, trace = cp.fine_tune_codebook(
            record, net, bank, dataset,
            s_wd=float(args.swd), alpha=float(args.alpha),
            steps=int(args.finetune_steps), learning_rate=float(args.finetune_lr),
            seed=seed,
        )
    cm = cp.compress(net, bank, delta, seed, codebook=codebook)
    out = _outdir(args)
    blob = cm.to_bytes()
    (out / "model.wspc").write_bytes(blob)
    print(f"wrote {out / 'model.wspc'}")
    rep = cm.size_report()
    lines = ["field,value"]
    for k, v in rep.items():
        lines.append(f"{k},{v!r}")
    lines.append(f"pruned_fraction,{cm.record.pruned_fraction!r}")
    lines.append(f"delta,{delta!r}")
    lines.append(f"seed,{seed}")
    lines.append(f"finetune_steps,{len(trace)}")
    _write(out / "compress_report.csv", "\n".join(lines) + "\n")
    print(f"CR {rep['cr_total']:.2f}x total ({rep['cr_payload']:.2f}x payload-only), "
          f"{100 * cm.record.pruned_fraction:.1f}% pruned")
    return 0


def cmd_decompress(args) -> int:
    cm = cp.decompress(Path(args.container).read_bytes())
    bank = dpl._bank_from_container(cm)
    out = _outdir(args)
    save_model(out / "decompressed_model.json", cm.net, bank, extra={
        "delta": cm.record.delta, "seed": cm.record.seed,
    })
    print(f"wrote {out / 'decompressed_model.json'}")
    return 0


def cmd_deploy(args) -> int:
    blob = Path(args.container).read_bytes()
    if args.domain == "spatial":
        deployed = dpl.deploy_spatial(blob)
    else:
        deployed = dpl.deploy_winograd(blob, s_wd=float(args.swd))
    dataset = ingest_dataset(args.dataset)
    tx, ty = dataset.test_arrays()
    metrics = dpl.evaluate(deployed, tx, ty)
    out = _outdir(args)
    _write(out / f"eval_{args.domain}.csv", dpl.evaluation_report_csv(deployed, metrics))
    _write(out / f"macs_{args.domain}.csv", deployed.mac_report.to_csv())
    print(f"{args.domain}: top1={metrics['top1']:.4f} "
          f"macs/image={deployed.mac_report.total_sparse}")
    return 0


def cmd_eval(args) -> int:
    net, bank, _ = load_model(args.model)
    dataset = ingest_dataset(args.dataset)
    tx, ty = dataset.test_arrays()
    from .model import predict_logits

    logits = predict_logits(net, bank, tx)
    top1 = float((logits.argmax(axis=1) == ty).mean())
    print(f"top1={top1:.4f} over {len(ty)} samples")
    return 0


def cmd_macs(args) -> int:
    net = _resolve_net(args.net)
    sparsity = {}
    if args.sparsity:
        for ly in net.weighted_layers():
            sparsity[ly.name] = float(args.sparsity) / 100.0
    domains = ["spatial", "winograd"] if args.domain == "both" else [args.domain]
    out_lines = []
    for domain in domains:
        policies = ns.COUNTING_POLICIES if domain == "winograd" else ("elementwise",)
        for policy in policies:
            rep = ns.count_macs(net, domain, sparsity=sparsity, policy=policy)
            out_lines.append(rep.to_text())
            ref = ns.REFERENCE_DENSE_MACS.get(net.name, {}).get(domain)
            if ref:
                gap = (rep.total_dense - ref) / ref
                out_lines.append(
                    f"reference {domain} count {ref / 1e6:.1f}M; "
                    f"this inventory: {rep.total_dense / 1e6:.1f}M "
                    f"(residual gap {100 * gap:+.2f}% under policy={policy})\n"
                )
    text = "\n".join(out_lines)
    print(text)
    if args.csv:
        combined = []
        for domain in domains:
            for policy in (ns.COUNTING_POLICIES if domain == "winograd" else ("elementwise",)):
                rep = ns.count_macs(net, domain, sparsity=sparsity, policy=policy)
                combined.append(f"# domain={domain} policy={policy}")
                combined.append(rep.to_csv())
        Path(args.csv).write_text("\n".join(combined))
        print(f"wrote {args.csv}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"{run_dir} is not a directory")
    sections = ["winosparse run report", "=" * 40]
    for name in sorted(run_dir.glob("*.csv")):
        sections.append(f"\n-- {name.name} --")
        sections.append(name.read_text().rstrip())
    pats = sorted(run_dir.glob("*patterns.txt"))
    for p in pats:
        sections.append(f"\n-- {p.name} --")
        sections.append(p.read_text().rstrip())
    sections.append("\n-- context --")
    sections.append(
        "Reference ImageNet-scale pipelines report compression ratios of "
        f"{REFERENCE_COMPRESSION_RATIOS['resnet18-modified']}x (resnet18-modified) and "
        f"{REFERENCE_COMPRESSION_RATIOS['alexnet']}x (alexnet). Those figures are "
        "context only: desk-scale models are orders of magnitude smaller and "
        "their metadata overhead dominates, so they are not reproducible here."
    )
    text = "\n".join(sections) + "\n"
    out = run_dir / "report.txt"
    _write(out, text)
    return 0


def _fail(msg: str):
    raise ConfigError(msg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="winosparse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="regularized training")
    t.add_argument("--net", default=None)
    t.add_argument("--dataset", default=None)
    t.add_argument("--swd", type=float, default=None)
    t.add_argument("--ssd", type=float, default=None)
    t.add_argument("--alpha", type=float, default=None)
    t.add_argument("--scope", choices=["global", "per-layer"], default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--zeta-lr", type=float, default=None)
    t.add_argument("--zeta0", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--log-every", type=int, default=None)
    t.add_argument("--snapshot-every", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pm = sub.add_parser("prune", help="magnitude pruning")
    pm.add_argument("--model", required=True)
    pm.add_argument("--domain", choices=["spatial", "winograd"], required=True)
    pm.add_argument("--sparsity", type=float, required=True)
    pm.add_argument("--scope", choices=["global", "per-layer"], default="global")
    pm.add_argument("--out", required=True)
    pm.set_defaults(func=cmd_prune)

    c = sub.add_parser("compress", help="dithered quantization + entropy coding")
    c.add_argument("--model", required=True)
    c.add_argument("--delta", type=float, default=None)
    c.add_argument("--target-sparsity", type=float, default=70.0,
                   help="used to pick delta when --delta is absent")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--finetune-steps", type=int, default=0)
    c.add_argument("--finetune-lr", type=float, default=1e-3)
    c.add_argument("--swd", type=float, default=70.0)
    c.add_argument("--alpha", type=float, default=1.0)
    c.add_argument("--dataset", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="container -> deployable weights")
    d.add_argument("--container", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompress)

    dp = sub.add_parser("deploy", help="deploy a container and evaluate")
    dp.add_argument("--container", required=True)
    dp.add_argument("--domain", choices=["spatial", "winograd"], required=True)
    dp.add_argument("--swd", type=float, default=70.0)
    dp.add_argument("--dataset", required=True)
    dp.add_argument("--out", required=True)
    dp.set_defaults(func=cmd_deploy)

    e = sub.add_parser("eval", help="evaluate a model file")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("macs", help="analytic MAC accounting")
    m.add_argument("--net", required=True)
    m.add_argument("--domain", choices=["spatial", "winograd", "both"], default="both")
    m.add_argument("--sparsity", type=float, default=None,
                   help="uniform sparsity percent applied to all layers")
    m.add_argument("--csv", default=None)
    m.set_defaults(func=cmd_macs)

    r = sub.add_parser("report", help="aggregate run artifacts")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
