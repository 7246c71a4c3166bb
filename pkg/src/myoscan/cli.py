"""Command-line entry point: ``myoscan <verb> --config FILE --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 a training
run or solver failed to converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from threadpoolctl import threadpool_limits

from . import __version__
from .autodiff.serialize import FormatError, atomic_write
from .config import ConfigError, load_config
from .errors import ConvergenceError, DataError, ParameterError, TrainingError
from .pipeline import STAGES, Workspace

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4

# stage -> named seed streams it draws from (recorded in the run manifest)
STAGE_SEEDS = {
    "phantom-gen": ("phantoms",),
    "seg-train": ("seg_train",),
    "cae-train": ("cae_train",),
    "classify": ("cv",),
    "sweep": ("cv", "cae_train"),
}

log = logging.getLogger("myoscan")


def build_parser():
    parser = argparse.ArgumentParser(prog="myoscan", description="Myocardium analysis pipeline on synthetic phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")
    for verb in STAGES:
        p = sub.add_parser(verb, help=f"run the {verb} stage")
        p.add_argument("--config", help="INI experiment configuration (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="workspace directory shared by all stages")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, keeps runs bit-stable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(verb, cfg, out, threads=1):
    """Execute one stage and write ``run_<verb>.json``; returns the manifest."""
    os.makedirs(out, exist_ok=True)
    ws = Workspace(out)
    started = time.time()
    with threadpool_limits(limits=threads):
        metrics = STAGES[verb](ws, cfg)
    manifest = {
        "verb": verb,
        "version": __version__,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "stage_seeds": {name: cfg.stage_seed(name) for name in STAGE_SEEDS.get(verb, ())},
        "outputs": ws.checksums(),
        "metrics": metrics,
        "started": started,
        "finished": time.time(),
    }
    atomic_write(os.path.join(out, f"run_{verb}.json"),
                 json.dumps(manifest, indent=2, sort_keys=True, default=str).encode())
    return manifest


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(args.verb, cfg, args.out, args.threads)
    except (ConvergenceError, TrainingError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DataError, FormatError, ParameterError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps({"verb": args.verb, "outputs": len(manifest["outputs"]), "metrics": manifest["metrics"]},
                     sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
