"""Command-line entry point: ``reslm <command> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from typing import Dict, List, Optional

from . import experiment as E
from .checkpoint import CheckpointError, CheckpointVersionError
from .config import ConfigError, ConfigVersionError, ExperimentConfig, load_config
from .corpus import CorpusFormatError
from .fusion import MissingComponentError
from .parallel import limit_threads

COMMANDS = (
    "gen-data",
    "train-asr",
    "train-lm",
    "train-reslm",
    "decode",
    "evaluate",
    "bench",
    "run-crossdomain",
    "run-intradomain",
)


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 2):
        super().__init__(message)
        self.code = code
        self.status = status


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in fields(ExperimentConfig):
        # strings keep the file parser's conversion rules, so flags and files agree
        g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reslm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--workdir", default="work", help="artifact directory (default: work)")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
        p.add_argument("--quiet", action="store_true")
        if name == "decode":
            p.add_argument("--method", action="append", choices=list(E.METHODS), help="repeatable; default: all")
            p.add_argument("--workers", type=int, default=1)
        if name == "train-lm":
            p.add_argument("--domain", action="append", choices=["target", "source"])
        if name == "train-reslm":
            p.add_argument("--objective", action="append", choices=["integrated", "elementwise_mse"])
        if name in ("run-crossdomain", "run-intradomain"):
            p.add_argument("--no-bench", action="store_true")
            p.add_argument("--no-control", action="store_true", help="skip the elementwise-MSE control")
        _add_config_flags(p)
    return parser


def _overrides(ns: argparse.Namespace) -> Dict[str, str]:
    return {k[4:]: v for k, v in vars(ns).items() if k.startswith("cfg_") and v is not None}


def resolve_config(ns: argparse.Namespace) -> ExperimentConfig:
    over = _overrides(ns)
    if ns.command == "run-crossdomain":
        over.setdefault("experiment", "crossdomain")
    elif ns.command == "run-intradomain":
        over["experiment"] = "intradomain"
    config_path = ns.config
    if config_path is None and ns.command not in ("gen-data", "run-crossdomain", "run-intradomain"):
        # downstream commands default to the config recorded by gen-data
        recorded = E.Workspace(ns.workdir).path("config.txt")
        if recorded.exists():
            config_path = recorded
    try:
        return load_config(config_path, over)
    except FileNotFoundError as exc:
        raise CliError("missing_artifact", f"config file not found: {exc.filename}") from None


def run(ns: argparse.Namespace) -> None:
    cfg = resolve_config(ns)
    ws = E.Workspace(ns.workdir)
    log = (lambda m: None) if ns.quiet else (lambda m: print(m, flush=True))
    cmd = ns.command
    if cmd == "gen-data":
        E.gen_data(cfg, ws, log)
    elif cmd == "train-asr":
        E.train_asr_stage(cfg, ws, log)
    elif cmd == "train-lm":
        E.train_lm_stage(cfg, ws, ns.domain or ("target", "source"), log)
    elif cmd == "train-reslm":
        E.train_residual_stage(cfg, ws, ns.objective or ("integrated", "elementwise_mse"), log)
    elif cmd == "decode":
        E.decode_stage(cfg, ws, ns.method or list(E.METHODS), ns.workers, log)
    elif cmd == "evaluate":
        E.evaluate_stage(cfg, ws, log)
    elif cmd == "bench":
        E.bench_stage(cfg, ws, log=log)
    else:
        E.run_pipeline(cfg, ws, log, bench=not ns.no_bench, negative_control=not ns.no_control)


def main(argv: Optional[List[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    limiter = limit_threads(ns.threads) if ns.threads else None
    try:
        run(ns)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except E.MissingArtifactError as exc:
        return _fail("missing_artifact", str(exc), 3)
    except (ConfigVersionError, CheckpointVersionError) as exc:
        return _fail("version_mismatch", str(exc), 4)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except (CheckpointError, CorpusFormatError) as exc:
        return _fail("format", str(exc), 5)
    except MissingComponentError as exc:
        return _fail("missing_component", str(exc), 3)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


def _fail(code: str, message: str, status: int) -> int:
    print(f"ERR:{code}: {message}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
