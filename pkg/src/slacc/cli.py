"""Command-line entry point: ``slacc {train,compare,compress-bench,inspect-entropy}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import acii, cgc, codec
from .core import Direction, FormatError, SmashedData, atomic_write, read_tensor
from .harness import Compressor, Config, ConfigError, setup, train
from .netsim import time_to_accuracy

COMPARE_SET = ("slacc", "uniform-8", "uniform-2", "topk", "none")
SUMMARY_FIELDS = ["round", "mean_loss", "test_accuracy", "uplink_bytes", "downlink_bytes",
                  "sim_seconds", "cum_sim_seconds", "wall_seconds"]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--devices", type=int)
    p.add_argument("--g", type=int)
    p.add_argument("--bmin", type=int, dest="b_min")
    p.add_argument("--bmax", type=int, dest="b_max")
    p.add_argument("--seed", type=int)
    p.add_argument("--partition", choices=["iid", "dirichlet"])
    p.add_argument("--compressor")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    overrides = {k: getattr(args, k) for k in
                 ("rounds", "devices", "g", "b_min", "b_max", "seed", "partition", "compressor", "threads")
                 if getattr(args, k, None) is not None}
    try:
        return cfg.replace(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _summary_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    elapsed = 0.0
    for r in reports:
        elapsed += r.sim_seconds
        w.writerow([r.round, repr(float(np.mean(r.losses))), r.test_accuracy, sum(r.uplink_bytes),
                    sum(r.downlink_bytes), repr(float(r.sim_seconds)), repr(float(elapsed)), f"{r.wall_seconds:.3f}"])
    return buf.getvalue()


def run_and_write(cfg: Config, out: Path, on_scores=None):
    sim = setup(cfg)
    sim.on_scores = on_scores
    reports = train(cfg, sim=sim)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    atomic_write(out / "reports.jsonl", "".join(r.to_json() + "\n" for r in reports))
    atomic_write(out / "summary.csv", _summary_csv(reports))
    atomic_write(out / "ledger.csv", sim.ledger.to_csv())
    return reports, sim


def cmd_train(args) -> int:
    cfg = load_config(args)
    reports, sim = run_and_write(cfg, Path(args.out))
    tta = time_to_accuracy(reports, args.target)
    print(f"final accuracy: {reports[-1].test_accuracy:.4f}")
    print(f"total bytes: {sim.ledger.total_bytes()} "
          f"(up {sim.ledger.total_bytes('up')}, down {sim.ledger.total_bytes('down')})")
    print(f"time to {args.target:.0%}: " + (f"{tta:.3f} s" if tta is not None else "not reached"))
    return 0


def cmd_compare(args) -> int:
    base = load_config(args)
    out = Path(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["compressor", "round", "test_accuracy", "cum_bytes", "cum_sim_seconds"])
    summary = {}
    for name in args.compressors.split(","):
        cfg = base.replace(compressor=name)
        label = cfg.compressor.label
        started = time.perf_counter()
        reports, sim = run_and_write(cfg, out / label)
        wall = time.perf_counter() - started
        cum_bytes, elapsed = 0, 0.0
        for r in reports:
            cum_bytes += sum(r.uplink_bytes) + sum(r.downlink_bytes)
            elapsed += r.sim_seconds
            w.writerow([label, r.round, r.test_accuracy, cum_bytes, repr(float(elapsed))])
        summary[label] = {
            "final_accuracy": reports[-1].test_accuracy,
            "total_bytes": sim.ledger.total_bytes(),
            "time_to_accuracy": {f"{t:g}": time_to_accuracy(reports, t) for t in args.targets},
            "wall_seconds": round(wall, 3),  # host timing, not deterministic
        }
        print(f"{label:>12}: acc {reports[-1].test_accuracy:.4f}  bytes {sim.ledger.total_bytes()}")
    atomic_write(out / "compare.csv", buf.getvalue())
    atomic_write(out / "compare_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_inspect_entropy(args) -> int:
    cfg = load_config(args)
    if cfg.compressor.name != "slacc":
        cfg = cfg.replace(compressor="slacc")
    want = Direction.GRADIENTS if args.direction == "gradients" else Direction.ACTIVATIONS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "channel", "h_inst", "h_hist", "alpha", "h_blend"])

    def log(t, device, direction, iv):
        if device == args.device and direction == want:
            for c in range(len(iv)):
                w.writerow([t, c, repr(float(iv.instantaneous[c])), repr(float(iv.historical[c])),
                            repr(float(iv.alpha)), repr(float(iv.scores[c]))])

    run_and_write(cfg, Path(args.out), on_scores=log)
    text = buf.getvalue()
    atomic_write(Path(args.out) / "entropy.csv", text)
    if args.stdout:
        sys.stdout.write(text)
    return 0


def cmd_compress_bench(args) -> int:
    tensor = read_tensor(args.tensor)
    if tensor.ndim != 4:
        raise FormatError(f"expected a [B, C, H, W] tensor, got rank {tensor.ndim}")
    s = SmashedData(tensor)
    comp = Compressor.parse(args.compressor)
    if comp.name == "slacc":
        scores = acii.score_channels(s, acii.EntropyState(s.num_channels), 0, 1, base=args.log_base)
        q = cgc.compress(s, scores, args.g, args.b_min, args.b_max)
    elif comp.name == "uniform":
        q = cgc.baseline_uniform(s, comp.bits)
    else:
        raise ConfigError("compress-bench supports slacc and uniform(b)")
    blob = codec.encode(q)
    recon = cgc.decompress(codec.decode(blob)).tensor
    err = recon - tensor
    raw = 4 * tensor.size
    stats = {
        "raw_bytes": raw,
        "compressed_bytes": len(blob),
        "ratio": raw / len(blob),
        "max_abs_err": float(np.abs(err).max()),
        "mse": float(np.mean(err ** 2)),
        "per_group_bits": [int(b) for b in q.plan.bits],
    }
    if args.out:
        atomic_write(args.out, blob)
    print(json.dumps(stats, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slacc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training experiment")
    _add_overrides(p)
    p.add_argument("--out", default="runs/train")
    p.add_argument("--target", type=float, default=0.9)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="same config under several compressors")
    _add_overrides(p)
    p.add_argument("--out", default="runs/compare")
    p.add_argument("--compressors", default=",".join(COMPARE_SET))
    p.add_argument("--targets", type=float, nargs="+", default=[0.85, 0.9, 0.95])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect-entropy", help="train while logging per-channel entropy")
    _add_overrides(p)
    p.add_argument("--out", default="runs/entropy")
    p.add_argument("--device", type=int, default=0)
    p.add_argument("--direction", choices=["activations", "gradients"], default="activations")
    p.add_argument("--stdout", action="store_true", help="also print the CSV")
    p.set_defaults(func=cmd_inspect_entropy)

    p = sub.add_parser("compress-bench", help="compress one SLT1 tensor dump")
    p.add_argument("tensor")
    p.add_argument("--g", type=int, default=4)
    p.add_argument("--bmin", type=int, default=2, dest="b_min")
    p.add_argument("--bmax", type=int, default=8, dest="b_max")
    p.add_argument("--compressor", default="slacc")
    p.add_argument("--log-base", default="e", choices=["e", "2"])
    p.add_argument("--out", help="write the SLC1 blob here")
    p.set_defaults(func=cmd_compress_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
