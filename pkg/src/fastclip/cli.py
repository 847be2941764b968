"""Command-line entry point: ``fastclip <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 numerical check failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import SyntheticSpec, generate_dataset
from .gradcheck import run_suite
from .trainer import Trainer, train

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _overrides(args, mapping: dict[str, str]) -> dict:
    out = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(item, "expected section.key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _load(args, mapping) -> RunConfig:
    return config_mod.load_config(args.config, overrides=_overrides(args, mapping))


TRAIN_FLAGS = {"variant": "algo.variant", "strategy": "algo.strategy", "optimizer": "optim.optimizer",
               "epochs": "run.epochs", "workers": "fabric.workers", "batch": "run.batch_size",
               "seed": "run.seed", "out": "run.out_dir", "data": "data.path"}


def cmd_gen_data(args) -> int:
    cfg = _load(args, {"n": "data.n", "seed": "data.seed", "noise": "data.noise"})
    d = cfg.data
    spec = SyntheticSpec(d.n, d.latent_dim, d.d_img, d.d_txt, d.noise, d.seed)
    generate_dataset(spec, args.output)
    print(f"wrote {d.n} pairs to {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args, TRAIN_FLAGS)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_mod.dumps(cfg))
    trainer = train(cfg, out_dir=out, resume=args.resume)
    print(json.dumps(trainer.fabric.ledger_report(), sort_keys=True))
    return 0


def compare_strategies(workers: int, batch: int, dim: int, iters: int = 1, seed: int = 0) -> dict:
    """Run both contrast-half strategies on identical inputs and compare."""
    grads = {}
    ledgers = {}
    for strategy in ("fastclip", "openclip_rs"):
        cfg = RunConfig().with_overrides({
            "algo.variant": "fastclip_v1", "algo.strategy": strategy, "model.dim": dim,
            "fabric.workers": workers, "run.batch_size": batch, "run.seed": seed,
            "data.n": workers * batch * iters, "data.n_probe": 0, "run.epochs": 1,
        })
        seen = []
        tr = Trainer(cfg, on_step=lambda info: seen.append(info["grad"].copy()))
        tr.run_epoch()
        grads[strategy] = np.array(seen)
        ledgers[strategy] = tr.fabric.ledger.totals("phase")
    u = ledgers["fastclip"].get("u-gather", 0)
    rs = ledgers["openclip_rs"].get("rs-grad", 0)
    return {
        "workers": workers, "batch": batch, "dim": dim, "iterations": iters,
        "fastclip": ledgers["fastclip"], "openclip_rs": ledgers["openclip_rs"],
        "u_gather": u, "rs_grad": rs,
        "ratio": rs / u if u else float("inf"),
        "max_grad_diff": float(np.max(np.abs(grads["fastclip"] - grads["openclip_rs"]))),
    }


def cmd_compare_comm(args) -> int:
    res = compare_strategies(args.workers, args.batch, args.dim, args.iters, args.seed)
    for name in ("fastclip", "openclip_rs"):
        for phase, n in sorted(res[name].items()):
            print(f"{name:12s} {phase:15s} {n}")
    if res["u_gather"] == 0:
        print("u-gather:rs-grad undefined (single worker moves nothing)")
    else:
        ratio = res["rs_grad"] // res["u_gather"] if res["rs_grad"] % res["u_gather"] == 0 else res["ratio"]
        print(f"u-gather:rs-grad = 1:{ratio}")
    print(f"max |G_fastclip - G_openclip_rs| = {res['max_grad_diff']:.3e}")
    return 0 if res["max_grad_diff"] <= 1e-12 else EXIT_NUMERIC


def cmd_grad_check(args) -> int:
    if args.config:
        config_mod.load_config(args.config)  # reject malformed files with exit 2
    results = run_suite(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:24s} rel_err={r.error:.3e} tol={r.tol:.0e}")
    return 0 if all(r.ok for r in results) else EXIT_NUMERIC


def read_metrics(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list[float]] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for k, v in row.items():
                cols[k].append(float(v))
    return cols


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = read_metrics(args.metrics)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(cols["epoch"], cols["probe_gcl"], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("probe GCL")
    ax2.plot(cols["epoch"], cols["r1_i2t"], marker="o", label="image->text")
    ax2.plot(cols["epoch"], cols["r1_t2i"], marker="s", label="text->image")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("R@1")
    ax2.legend()
    fig.tight_layout()
    out = args.output or str(Path(args.metrics).with_suffix(".png"))
    fig.savefig(out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastclip", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="sectioned key=value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")

    g = sub.add_parser("gen-data", help="write a synthetic pair dataset")
    common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant; writes metrics.csv, checkpoint.npz, ledger.csv")
    common(t)
    t.add_argument("--variant")
    t.add_argument("--strategy")
    t.add_argument("--optimizer")
    t.add_argument("--epochs", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--batch", type=int, help="per-worker batch size")
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="dataset file from gen-data")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compare-comm", help="compare u all-gather vs reduce-scatter communication")
    c.add_argument("--workers", type=int, default=4)
    c.add_argument("--batch", type=int, default=32, help="per-worker batch size")
    c.add_argument("--dim", type=int, default=16)
    c.add_argument("--iters", type=int, default=1)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_compare_comm)

    k = sub.add_parser("grad-check", help="finite-difference oracle suite")
    k.add_argument("--config")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=cmd_grad_check)

    r = sub.add_parser("report", help="plot probe loss and R@1 from a metrics file")
    r.add_argument("metrics")
    r.add_argument("-o", "--output")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
