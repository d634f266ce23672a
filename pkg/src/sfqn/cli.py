"""Experiment harness CLI.

Subcommands: train, eval, ablate, analyze-capacity, analyze-cost,
plot-membership.  Exit code 0 on success; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ConvSpec, capacity, cost_model
from .checkpoint import CheckpointFormatError, load_records
from .config import (ABLATION_MATRIX, ConfigError, ExperimentConfig,
                     load_config)
from .fuzzy import GAUSSIAN, TRIANGULAR, MembershipBank, membership_eval
from .qnet import QNetwork
from .train import MetricsRow, evaluate, run_training, write_metrics


def _write_manifest(out_dir: Path, cfg: ExperimentConfig) -> None:
    manifest = {"config_sha256": cfg.digest(), "seeds": list(cfg.seeds),
                "code_version": __version__, "variant": cfg.variant}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True) + "\n")
    (out_dir / "config.cfg").write_text(cfg.serialize())


def _train_variant(cfg: ExperimentConfig, variant: str, out_dir: Path,
                   verbose: bool) -> list[MetricsRow]:
    rows: list[MetricsRow] = []
    for seed in cfg.seeds:
        net = QNetwork(cfg.network_config(seed, variant))

        def progress(row):
            if verbose:
                print(f"[{variant} seed {row.seed}] step {row.step}: "
                      f"reward {row.avg_reward:.3f} speed {row.avg_speed:.2f} "
                      f"crash {row.crash_freq:.4f}", file=sys.stderr)

        rows.extend(run_training(
            net, cfg.train_config(seed), cfg.env_config(),
            checkpoint_dir=out_dir, checkpoint_tag=f"{variant}_seed{seed}",
            progress=progress))
    return rows


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.variant:
        cfg = ExperimentConfig(**{**cfg.__dict__, "variant": args.variant})
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, cfg)
    rows = _train_variant(cfg, cfg.variant, out_dir, not args.quiet)
    write_metrics(out_dir / "metrics.csv", rows)
    print(f"wrote {out_dir / 'metrics.csv'} ({len(rows)} checkpoints)")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    net = QNetwork(cfg.network_config(cfg.seeds[0]))
    net.load(args.checkpoint)
    metrics = evaluate(net, cfg.env_config(), cfg.eval_episodes)
    for key in ("avg_reward", "avg_speed", "crash_freq"):
        print(f"{key} = {metrics[key]}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, cfg)
    path = out_dir / "ablation.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant",) + MetricsRow.FIELDS)
        for variant in ABLATION_MATRIX:
            for row in _train_variant(cfg, variant, out_dir, not args.quiet):
                writer.writerow([variant] + row.as_list())
    print(f"wrote {path}")
    return 0


def cmd_analyze_capacity(args) -> int:
    report = capacity(args.c, args.height, args.width, args.t, args.n, args.m)
    rows = [("raw_bits", report.raw_bits),
            ("rate_bits", report.rate_bits),
            ("pop_bits", report.pop_bits),
            ("q_raw_bits", report.q_raw_bits),
            ("q_pop_bits", report.q_pop_bits),
            ("pop_over_rate", report.pop_over_rate)]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key:<{width}}  {value}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["quantity", "value"])
            writer.writerows(rows)
    return 0


def cmd_analyze_cost(args) -> int:
    conv = ConvSpec(args.c_out, args.kernel, args.stride, args.padding)
    report = cost_model(args.c, args.height, args.width, conv, args.n,
                        args.m, args.actions)
    rows = [("fuzzy_encoder", report.fuzzy_encoder),
            ("rate_encoder", report.rate_encoder),
            ("first_conv", report.first_conv),
            ("decoder_overhead", report.decoder_overhead)]
    width = max(len(k) for k, _ in rows)
    for key, value in rows:
        print(f"{key:<{width}}  {value}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "multiplications"])
            writer.writerows(rows)
    return 0


def _banks_from_records(records: dict) -> dict[str, MembershipBank]:
    """Rebuild membership banks from checkpoint records, keyed by
    '<modality>.bank<channel>'."""
    banks: dict[str, MembershipBank] = {}
    prefixes = sorted({name.rsplit(".", 1)[0] for name in records
                       if ".bank" in name})
    for prefix in prefixes:
        if f"{prefix}.memb_a" in records:
            a = records[f"{prefix}.memb_a"]
            b = a + np.exp(records[f"{prefix}.memb_log_ab"])
            c = b + np.exp(records[f"{prefix}.memb_log_bc"])
            banks[prefix] = MembershipBank(
                TRIANGULAR, len(a), np.stack([a, b, c], axis=1))
        elif f"{prefix}.memb_mean" in records:
            mean = records[f"{prefix}.memb_mean"]
            sigma = np.exp(records[f"{prefix}.memb_log_sigma"])
            banks[prefix] = MembershipBank(
                GAUSSIAN, len(mean), np.stack([mean, sigma], axis=1))
    if not banks:
        raise CheckpointFormatError("checkpoint contains no membership records")
    return banks


def cmd_plot_membership(args) -> int:
    records = load_records(args.checkpoint)
    banks = _banks_from_records(records)
    samples = np.linspace(0.0, 1.0, args.samples)
    header = ["p"]
    columns = [samples]
    for prefix, bank in banks.items():
        mu = membership_eval(bank, samples).value      # (N, samples)
        for i in range(bank.n):
            header.append(f"{prefix}.mu_{i + 1}")
            columns.append(mu[i])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([f"{v:.6f}" for v in row])
    finally:
        if args.out:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfqn", description="Fuzzy population-coded spiking Q-learning "
        "experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant over the config seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", help="override the config's variant")
    p.add_argument("--out", help="output directory (default: config value)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the five-variant ablation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze-capacity", help="entropy capacity table")
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--t", type=int, default=5)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_analyze_capacity)

    p = sub.add_parser("analyze-cost", help="multiplication cost table")
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--c-out", type=int, default=8)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--padding", type=int, default=1)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--actions", type=int, default=5)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_analyze_cost)

    p = sub.add_parser("plot-membership",
                       help="dump learned membership curves as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--samples", type=int, default=256)
    p.set_defaults(func=cmd_plot_membership)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except (ConfigError, CheckpointFormatError, FileNotFoundError,
            KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
