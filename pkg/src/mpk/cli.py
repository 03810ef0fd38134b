"""``mpk`` command line: gradcheck, fit, eval, synth, upsampler-train.

Exit codes: 0 success, 1 check failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, harness
from .errors import InvalidConfig, MissingPredictions, MPKError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "msg": record.getMessage()})


def _setup_logging(mode: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if mode == "json":
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("mpk")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (MPK_THREADS wins)")
    common.add_argument("--log", choices=("json", "text"), default="text")

    p = argparse.ArgumentParser(prog="mpk", parents=[common],
                                description="Mesh-from-heatmaps toolkit: checks, fits and metrics.")
    p.add_argument("--version", action="version", version=f"mpk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, out=True, preds=False):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("-c", "--config", help="experiment config (JSON); defaults if omitted")
        if preds:
            sp.add_argument("-p", "--predictions", required=True, help="directory of scene_NNNN.mpt files")
        sp.add_argument("-o", "--output", required=out, default=None, help="output directory")
        return sp

    add("gradcheck", "finite-difference check of every analytic gradient", out=False)
    add("fit", "optimize decoder inputs on one synthetic scene")
    add("eval", "score predictions against synthetic ground truth", preds=True)
    add("synth", "write synthetic scenes to disk")
    add("upsampler-train", "train the low-to-high mesh upsampler")
    return p


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        d = json.loads(path.read_text())
    else:
        d = {}
    if args.seed is not None:
        d["seed"] = args.seed
    return harness.ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    _setup_logging(args.log)
    log = logging.getLogger("mpk")
    try:
        cfg = _load_config(args)
        threads = harness.resolve_threads(args.threads)
        out = args.output or cfg.output_dir
        if args.command == "gradcheck":
            report, code = harness.run_gradcheck(cfg)
        elif args.command == "fit":
            report, code = harness.run_fit(cfg, out)
        elif args.command == "eval":
            report, code = harness.run_eval(cfg, args.predictions, out, threads)
        elif args.command == "synth":
            report, code = harness.run_synth(cfg, out)
        else:
            report, code = harness.run_upsampler_train(cfg, out)
    except MissingPredictions as e:
        log.error("%s", e)
        return EXIT_USAGE
    except (InvalidConfig, FileNotFoundError, json.JSONDecodeError, OSError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except MPKError as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_CHECK_FAILED
    if out:
        path = harness.write_report(report, out)
        log.info("report written to %s", path)
    else:
        print(json.dumps(harness.jsonable(report), indent=1, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
