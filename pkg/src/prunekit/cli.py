"""Command line entry point: ``prunekit {train,prune,quantize,report}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from prunekit.compress import FormatError
from prunekit.config import ConfigError, ExperimentConfig, load_config
from prunekit.data import DataError
from prunekit.nn import NonFiniteError, TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("prunekit")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $PRUNEKIT_OUT or config output_dir)")
    common.add_argument("--threads", type=int, help="BLAS thread limit (default: $PRUNEKIT_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prunekit", description="Prune, quantize and size-account small MLPs.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train base and from-scratch models")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="run only this seed")
    t.add_argument("--precision", choices=["f32", "f16"], default="f32", help="stored model precision")

    pr = sub.add_parser("prune", parents=[common], help="run prune/fine-tune loops on trained base models")
    pr.add_argument("--config", required=True)
    pr.add_argument("--seed", type=int, help="run only this seed")

    q = sub.add_parser("quantize", parents=[common], help="convert a model file and compare metrics")
    q.add_argument("model", help="input .prk model file")
    q.add_argument("--config", required=True, help="config naming the evaluation data")
    q.add_argument("--precision", choices=["f32", "f16"], default="f16")

    r = sub.add_parser("report", parents=[common], help="aggregate traces into plot-ready tables")
    r.add_argument("--config", help="config whose output_dir is used when --out is absent")
    return p


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get("PRUNEKIT_OUT"):
        return Path(os.environ["PRUNEKIT_OUT"])
    if cfg is not None:
        return Path(cfg.output_dir)
    raise ConfigError("no output directory: pass --out, set PRUNEKIT_OUT or give --config")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        try:
            n = int(os.environ.get("PRUNEKIT_THREADS", "1"))
        except ValueError as e:
            raise ConfigError(f"PRUNEKIT_THREADS: {e}") from None
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _with_seed(cfg: ExperimentConfig, seed):
    if seed is None:
        return cfg
    cfg = cfg.model_copy(deep=True)
    cfg.seeds = [seed]
    for r in cfg.runs:
        r.seeds = [seed]
    for s in cfg.scratch:
        s.seeds = [seed]
    return cfg


def _run(args) -> int:
    from prunekit import experiment as ex

    cfg = load_config(args.config) if getattr(args, "config", None) else None
    out = _out_dir(args, cfg)
    with _thread_limit(_threads(args)):
        if args.command == "train":
            cfg = _with_seed(cfg, args.seed)
            train_set, test_set = ex.load_datasets(cfg)
            rows = ex.run_train(cfg, out, train_set, test_set, args.precision)
            print(f"trained {len(rows)} models -> {out}")
        elif args.command == "prune":
            cfg = _with_seed(cfg, args.seed)
            if not cfg.runs:
                raise ConfigError("runs: config defines no prune runs")
            train_set, test_set = ex.load_datasets(cfg)
            results = ex.run_prune(cfg, out, train_set, test_set)
            failed = [r for r in results if r.trace.error]
            print(f"wrote {len(results)} traces -> {out / 'traces'}")
            if failed:
                for r in failed:
                    print(f"error: {r.run} seed {r.seed}: {r.trace.error}", file=sys.stderr)
                return EXIT_RUNTIME
        elif args.command == "quantize":
            _, test_set = ex.load_datasets(cfg)
            rows = ex.run_quantize(args.model, out, test_set, args.precision)
            q = rows[-1]
            print(f"{q['precision']}: payload ratio {q['payload_ratio']:.4f}, delta AUC {q['delta_auc']:+.5f}")
        elif args.command == "report":
            tables = ex.build_report(out)
            print(f"wrote {len(tables)} tables -> {out / 'report'}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, NonFiniteError) as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, DataError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
