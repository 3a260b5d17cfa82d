"""volrecon command line.

Subcommands: phantom-gen | register | align | ae-train | maskrobust-train |
reconstruct | evaluate | report. A single JSON config drives everything;
--set a.b=value overrides individual fields. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys


def _setup_threads() -> None:
    n = os.environ.get("VOLRECON_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


_setup_threads()  # before numpy loads its BLAS thread pool


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volrecon",
                                 description="volumetric registration and reconstruction")
    ap.add_argument("--config", help="JSON pipeline config")
    ap.add_argument("--seed", type=int, help="override dataset seed")
    ap.add_argument("--out", help="override output root")
    ap.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                    help="dot-path config override, e.g. registration.lr=1e-4")
    ap.add_argument("--profile", choices=["desk", "paper"], default="desk",
                    help="base config profile when --config is absent")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom-gen", help="generate the synthetic dataset")

    p = sub.add_parser("register", help="train step-1 registration")
    p.add_argument("--mode", choices=["direct", "stn"], default="stn")
    p.add_argument("--data", required=True, help="dataset dir from phantom-gen")

    p = sub.add_parser("align", help="apply a registration to a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="registration checkpoint")
    p.add_argument("--split", default="val", choices=["train", "val"])

    p = sub.add_parser("ae-train", help="train a latent model on aligned data")
    p.add_argument("--model", required=True, choices=["pca16", "pca32", "vae", "vqvae"])
    p.add_argument("--aligned", required=True, help="aligned dataset dir")
    p.add_argument("--masked", action="store_true",
                   help="use the masked training objective (step 3)")

    p = sub.add_parser("maskrobust-train", help="retrain the LocNet on corrupted data")
    p.add_argument("--aligned", required=True)

    p = sub.add_parser("reconstruct", help="query path: align, encode, decode")
    p.add_argument("--reg-ckpt", required=True)
    p.add_argument("--ae-ckpt", required=True)
    p.add_argument("--volume", required=True, help=".vvol input")
    p.add_argument("--mask", help=".vmsk visibility mask (omit for all-visible)")
    p.add_argument("--stl", action="store_true", help="export the isosurface mesh")

    p = sub.add_parser("evaluate", help="metric tables for reconstruction dirs")
    p.add_argument("--recon", required=True)
    p.add_argument("--gt", required=True)

    p = sub.add_parser("report", help="merge evaluation outputs into one markdown file")
    p.add_argument("--evals", nargs="+", required=True)
    p.add_argument("--output", required=True)
    return ap


def main(argv=None) -> int:
    from . import pipeline
    from .errors import ConfigError, DataError, NumericError

    args = _build_parser().parse_args(argv)
    try:
        cfg = pipeline.PipelineConfig.load(args.config) if args.config else (
            pipeline.PipelineConfig.paper_profile() if args.profile == "paper"
            else pipeline.PipelineConfig())
        if args.seed is not None:
            cfg.dataset.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        for override in args.set:
            if "=" not in override:
                raise ConfigError(f"--set expects PATH=VALUE, got '{override}'")
            path, _, value = override.partition("=")
            pipeline.apply_override(cfg, path.strip(), value.strip())

        if args.command == "phantom-gen":
            out = pipeline.cmd_phantom_gen(cfg)
        elif args.command == "register":
            out = pipeline.cmd_register(args.mode, args.data, cfg)
        elif args.command == "align":
            out = pipeline.cmd_align(args.data, args.ckpt, cfg, split=args.split)
        elif args.command == "ae-train":
            out = pipeline.cmd_ae_train(args.model, args.aligned, cfg, masked=args.masked)
        elif args.command == "maskrobust-train":
            out = pipeline.cmd_maskrobust_train(args.aligned, cfg)
        elif args.command == "reconstruct":
            out = pipeline.cmd_reconstruct(args.reg_ckpt, args.ae_ckpt, args.volume,
                                           args.mask, cfg=cfg, export_stl=args.stl)
        elif args.command == "evaluate":
            out = pipeline.cmd_evaluate(args.recon, args.gt, cfg)
        elif args.command == "report":
            out = pipeline.cmd_report(args.evals, args.output)
        else:  # pragma: no cover - argparse guards this
            raise ConfigError(f"unknown command {args.command}")
        print(out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
