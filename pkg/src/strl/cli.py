"""Command-line entry point.

    strl train    --profile desk --seed 0 --out runs/strl0
    strl compare  --profile desk --out runs/ablation --jobs 3
    strl infer    --checkpoint runs/strl0/checkpoint.npz --mutation armidale.json --out runs/inf
    strl heatmap  --checkpoint runs/strl0/checkpoint.npz --units 24 --steps 10 --out runs/hm
    strl acf      --max-lag 40 --out runs/acf

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .topology import TopologyMutation

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("strl")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON config file")
    p.add_argument("--profile", default="paper", help="base profile: paper or desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override one config key, value parsed as JSON")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one agent and write episodes.csv + checkpoint.npz")
    _common(p)
    p.add_argument("--variant", choices=["STRL", "SRL", "TRL"])

    p = sub.add_parser("compare", help="train variants over the configured seeds and summarise")
    _common(p)
    p.add_argument("--variants", nargs="+", default=["STRL", "SRL", "TRL"])
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("infer", help="greedy inference from a checkpoint, optionally on a mutated topology")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mutation", type=Path, help="JSON list of add/remove link entries")
    p.add_argument("--steps", type=int, help="defaults to the config's inference_steps")

    p = sub.add_parser("heatmap", help="export GRU hidden states as step,unit,value rows")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="trained actor; untrained when omitted")
    p.add_argument("--units", type=int, default=50)
    p.add_argument("--steps", type=int, default=25)

    p = sub.add_parser("acf", help="export arrival-rate autocorrelation with its confidence band")
    _common(p)
    p.add_argument("--max-lag", type=int, default=40)
    return parser


def _overrides(pairs: list[str]) -> dict:
    import json

    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"{item}: expected KEY=VALUE")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config(args) -> ExperimentConfig:
    overrides = _overrides(args.set)
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    return load_config(args.config, args.profile, **overrides)


def _run(args) -> None:
    # heavy imports deferred so `--help` and config errors stay fast
    from . import experiments as ex

    config = _config(args)
    out: Path = args.out
    if args.verb == "train":
        rows = ex.run_training(config, args.seed, out)
        print(f"{len(rows)} episodes -> {out / 'episodes.csv'}")
    elif args.verb == "compare":
        comp = ex.compare_variants(config, args.variants, out_dir=out, jobs=args.jobs)
        for v in comp.finals:
            print(f"{v}: median final reward {comp.median(v):.6g}")
        print(f"summary -> {out / 'summary.csv'}")
    elif args.verb == "infer":
        mutation = TopologyMutation.from_json(args.mutation) if args.mutation else None
        steps = args.steps if args.steps is not None else config.inference_steps
        rows = ex.run_inference(config, args.checkpoint, args.seed, steps, mutation, out)
        print(f"{len(rows)} steps -> {out / 'inference.csv'}")
    elif args.verb == "heatmap":
        text = ex.heatmap_for(config, args.checkpoint, args.seed, args.units, args.steps)
        ex.write_atomic(out / "heatmap.csv", text)
        print(f"heatmap -> {out / 'heatmap.csv'}")
    elif args.verb == "acf":
        series = ex.arrivals_for(config, args.seed)
        ex.write_atomic(out / "acf.csv", ex.acf_plotdata_csv(series, args.max_lag))
        print(f"acf -> {out / 'acf.csv'}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported, mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
