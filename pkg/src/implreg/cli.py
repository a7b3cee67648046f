"""Command-line entry point.

Subcommands:

- ``implreg matfac --config FILE [--jobs N] [--seed S]``
- ``implreg detsign --samples N --depth L --seed S [--out CSV]``
- ``implreg tenfac --config FILE [--jobs N] [--seed S]``
- ``implreg plot --input CSV [CSV ...] --style {loss-vs-entry,sweep} --out SVG``

Seed precedence is flag > IMPLREG_SEED environment variable > config.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import harness, svgplot


def _add_seed_jobs(p):
    p.add_argument("--config", required=True, help="path to a JSON config document")
    p.add_argument("--jobs", type=int, default=1, help="run independent cells in N processes")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="implreg", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _add_seed_jobs(sub.add_parser("matfac", help="matrix-factorization run or sweep"))
    _add_seed_jobs(sub.add_parser("tenfac", help="tensor-factorization sweep"))

    det = sub.add_parser("detsign", help="determinant-sign Monte Carlo")
    det.add_argument("--samples", type=int, default=10_000)
    det.add_argument("--depth", type=int, default=3)
    det.add_argument("--dim", type=int, default=2)
    det.add_argument("--seed", type=int, default=None)
    det.add_argument("--out", default="runs/detsign.csv")

    plot = sub.add_parser("plot", help="render an SVG chart from run CSVs")
    plot.add_argument("--input", nargs="+", required=True)
    plot.add_argument("--style", choices=["loss-vs-entry", "sweep"], required=True)
    plot.add_argument("--out", required=True)
    plot.add_argument("--title", default=None)
    return parser


def _reseed(cfg, seed):
    if isinstance(cfg, harness.MatfacRunConfig) or isinstance(cfg, harness.DetSignConfig):
        return dataclasses.replace(cfg, seed=seed)
    if isinstance(cfg, harness.MatfacSweepConfig):
        return dataclasses.replace(cfg, seeds=(seed,))
    if isinstance(cfg, harness.TenfacSweepConfig):
        return dataclasses.replace(cfg, seeds=(seed,))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command in ("matfac", "tenfac"):
        cfg = harness.load_config(args.config)
        default_seed = getattr(cfg, "seed", None)
        if default_seed is None:
            seeds = getattr(cfg, "seeds", (0,))
            default_seed = seeds[0] if len(seeds) == 1 else None
        if default_seed is not None:
            seed = harness.resolve_seed(args.seed, default_seed)
            if seed != default_seed:
                cfg = _reseed(cfg, seed)
        out = harness.run_config(cfg, jobs=args.jobs)
        if isinstance(out, harness.RunRecord):
            print(f"{out.run_id}: {out.csv_path}")
        elif isinstance(out, list):
            for rec in out:
                print(f"{rec.run_id}: {rec.csv_path}")
        else:
            print(out)
        return 0

    if args.command == "detsign":
        seed = harness.resolve_seed(args.seed, 0)
        dists = ["gaussian", f"gaussian-product-{args.depth}", "identity"]
        if args.dim != 2:
            dists = [f"{d}@{args.dim}" for d in dists]
        rows = harness.run_detsign(args.samples, dists, seed, out=args.out)
        for r in rows:
            print(
                f"{r['distribution']}: P(det>0) = {r['p_det_pos']:.4f} "
                f"[{r['ci_low']:.4f}, {r['ci_high']:.4f}]  (n={r['n']})"
            )
        print(f"wrote {args.out}")
        return 0

    if args.command == "plot":
        path = svgplot.emit_plot(args.input, args.style, args.out, title=args.title)
        print(f"wrote {path}")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
