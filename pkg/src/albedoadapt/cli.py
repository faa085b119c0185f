"""Command-line entry points.

Subcommands::

    synthgen   generate a synthetic or real-like dataset
    init       set up a run: base model, classifier, initial labels
    loop       run adaptation iterations (resumes completed work)
    dpo        preference fine-tune of the final loop model
    eval       score a checkpoint against a dataset
    serve      start the labeling/preference HTTP server

Every subcommand accepts --config FILE, --seed K (overrides the config
seed), and --out DIR. Success exits 0; failures exit nonzero with a
single-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

from .core import ConfigError, PipelineError, RunConfig
from .dataio import load_dataset, save_dataset

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _emit_error(kind: str, message: str) -> None:
    line = json.dumps({"error": {"type": kind, "message": message}}, sort_keys=True)
    print(line, file=sys.stderr)


class CliParser(argparse.ArgumentParser):
    """argparse that reports usage errors as JSON on stderr."""

    def error(self, message: str) -> None:  # type: ignore[override]
        _emit_error("UsageError", message)
        raise SystemExit(EXIT_USAGE)


def _load_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = RunConfig.from_json(fh.read())
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    cfg.validate()
    return cfg


def _datasets_path(run_dir: str) -> str:
    return os.path.join(run_dir, "datasets.json")


def _resolve_datasets(args: argparse.Namespace, run_dir: str) -> dict:
    """Dataset dirs from flags, falling back to the run's recorded paths."""
    path = _datasets_path(run_dir)
    recorded = {}
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            recorded = json.load(fh)
    out = {}
    for key in ("synthetic", "pool", "eval"):
        value = getattr(args, key, None) or recorded.get(key)
        if not value:
            raise ConfigError(
                f"no --{key} dataset given and none recorded in {path}"
            )
        out[key] = os.path.abspath(value)
    os.makedirs(run_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _build_context(cfg: RunConfig, run_dir: str, paths: dict):
    from .adaptloop import RunContext

    return RunContext(
        cfg=cfg,
        run_dir=run_dir,
        synthetic=load_dataset(paths["synthetic"]),
        pool=load_dataset(paths["pool"]),
        eval_set=load_dataset(paths["eval"]),
    )


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_synthgen(args: argparse.Namespace) -> int:
    from .synthgen import generate_dataset

    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seed
    count = args.count if args.count is not None else cfg.synthetic_count
    size = args.size if args.size is not None else cfg.image_size
    pairs = generate_dataset(count, domain=args.domain, size=size, seed=seed)
    save_dataset(args.out, pairs, seed=seed)
    print(json.dumps({"out": args.out, "count": len(pairs), "domain": args.domain}))
    return 0


def cmd_init(args: argparse.Namespace) -> int:
    from .adaptloop import initialize

    cfg = _load_config(args)
    paths = _resolve_datasets(args, args.out)
    ctx = _build_context(cfg, args.out, paths)
    state = initialize(ctx)
    print(
        json.dumps(
            {
                "run": args.out,
                "iteration": state.iteration,
                "model_hash": state.model.content_hash(),
                "positives": len(state.pnsets.positives),
                "negatives": len(state.pnsets.negatives),
            }
        )
    )
    return 0


def cmd_loop(args: argparse.Namespace) -> int:
    from .adaptloop import run_loop

    cfg = _load_config(args)
    iters = args.iters if args.iters is not None else cfg.num_iterations
    if iters < 1:
        raise ConfigError(f"--iters must be >= 1, got {iters}")
    paths = _resolve_datasets(args, args.out)
    ctx = _build_context(cfg, args.out, paths)
    state = run_loop(ctx, iters)
    print(
        json.dumps(
            {
                "run": args.out,
                "iteration": state.iteration,
                "model_hash": state.model.content_hash(),
                "positives": len(state.pnsets.positives),
                "negatives": len(state.pnsets.negatives),
            }
        )
    )
    return 0


def cmd_dpo(args: argparse.Namespace) -> int:
    from .adaptloop import run_dpo

    cfg = _load_config(args)
    paths = _resolve_datasets(args, args.out)
    ctx = _build_context(cfg, args.out, paths)
    entry = run_dpo(ctx, out_name=args.name, corrupt_frac=args.corrupt_frac)
    print(
        json.dumps(
            {
                "run": args.out,
                "name": args.name,
                "model_hash": entry["model_hash"],
                "n_pairs": entry["n_pairs"],
                "mse_mean": entry["metrics"]["mse_mean"],
                "negative_ratio": entry["metrics"]["negative_ratio"],
            }
        )
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    import numpy as np

    from .adaptloop import evaluate_model, RunContext
    from .torchutil import Checkpoint

    cfg = _load_config(args)
    pairs = load_dataset(args.pool)
    model = Checkpoint.load(args.model)
    ctx = RunContext(
        cfg=cfg,
        run_dir=args.out,
        synthetic=[],
        pool=pairs,
        eval_set=pairs,
        pool_name=os.path.basename(os.path.normpath(args.pool)),
    )
    os.makedirs(args.out, exist_ok=True)
    if args.classifier:
        clf = Checkpoint.load(args.classifier)
        report = evaluate_model(ctx, model, clf, out_dir=args.out)
    else:
        from .adaptloop import infer_to_dir
        from .core import derive_seed
        from .metrics import mse, psnr, ssim

        ests = infer_to_dir(
            model,
            pairs,
            os.path.join(args.out, "eval_albedos"),
            cfg,
            derive_seed(cfg.seed, "eval-sample"),
        )
        es = [ests[p.sample_id] for p in pairs]
        ts = [p.albedo for p in pairs]
        report = {
            "pool": ctx.pool_name,
            "n": len(es),
            "mse_mean": float(np.mean([mse(e, t) for e, t in zip(es, ts)])),
            "psnr_mean": float(np.mean([psnr(e, t) for e, t in zip(es, ts)])),
            "ssim_mean": float(np.mean([ssim(e, t) for e, t in zip(es, ts)])),
            "negative_ratio": None,
            "seed": cfg.seed,
            "model_hash": model.content_hash(),
        }
        with open(os.path.join(args.out, "metrics.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .labelserve import build_app

    cfg = _load_config(args)
    app = build_app(args.run, seed=cfg.seed)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults built in)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logging")


def build_parser() -> CliParser:
    parser = CliParser(prog="albedoadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthgen", help="generate a dataset")
    _add_common(p)
    p.add_argument("--domain", choices=("synthetic", "real_like"), required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_synthgen)

    p = sub.add_parser("init", help="initialize a run")
    _add_common(p)
    p.add_argument("--synthetic", help="labeled source dataset dir")
    p.add_argument("--pool", help="unlabeled target pool dataset dir")
    p.add_argument("--eval", help="held-out eval dataset dir")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("loop", help="run adaptation iterations")
    _add_common(p)
    p.add_argument("--iters", type=int, default=None, help="iterations to reach")
    p.add_argument("--synthetic", help="labeled source dataset dir")
    p.add_argument("--pool", help="unlabeled target pool dataset dir")
    p.add_argument("--eval", help="held-out eval dataset dir")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("dpo", help="preference fine-tune the final model")
    _add_common(p)
    p.add_argument("--corrupt-frac", type=float, default=0.0,
                   help="fraction of pairs to swap (robustness probes)")
    p.add_argument("--name", default="dpo", help="output subdirectory name")
    p.add_argument("--synthetic", help="labeled source dataset dir")
    p.add_argument("--pool", help="unlabeled target pool dataset dir")
    p.add_argument("--eval", help="held-out eval dataset dir")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_dpo)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--model", required=True, help="model checkpoint path")
    p.add_argument("--pool", required=True, help="dataset dir with truth albedos")
    p.add_argument("--classifier", default=None, help="classifier checkpoint path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="start the labeling server")
    _add_common(p)
    p.add_argument("--run", required=True, help="run directory to serve")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8777)
    p.add_argument("--out", help="unused; accepted for interface uniformity")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list] = None) -> int:
    from .torchutil import pin_threads

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    pin_threads()
    try:
        return args.func(args)
    except PipelineError as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    except FileNotFoundError as exc:
        _emit_error("FileNotFoundError", str(exc))
        return EXIT_FAILURE
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
