"""Command line: ``generate``, ``run``, ``check`` and ``report``.

Exit codes: 0 ran, 1 config or IO error, 2 a check failed under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from . import __version__
from .experiments import ReportError, RunConfig, config_hash, run_experiment, write_report, write_result
from .problem import mean_operator, problem_l, save_problem

OUT_ENV = "FFGG_OUT_DIR"


class ConfigError(Exception):
    pass


def _key_line(text: str, loc) -> Optional[int]:
    """1-based line of the deepest key of ``loc`` found in ``text``, if any."""
    for part in reversed([p for p in loc if isinstance(p, str)]):
        m = re.search(r'"' + re.escape(part) + r'"\s*:', text)
        if m:
            return text.count("\n", 0, m.start()) + 1
    return None


def load_config(path) -> RunConfig:
    """Parse and validate a JSON config; errors name the file line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            line = _key_line(text, err["loc"])
            where = f"{path}:{line}" if line is not None else str(path)
            key = ".".join(str(p) for p in err["loc"]) or "<root>"
            msgs.append(f"{where}: {key}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from exc


def _override(cfg: RunConfig, seeds: Optional[str]) -> RunConfig:
    if seeds is None:
        return cfg
    try:
        values = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seed-override: not a comma-separated integer list: {seeds!r}") from exc
    doc = cfg.model_dump(by_alias=True)
    doc["seeds"] = values
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"--seed-override: {exc.errors()[0]['msg']}") from exc


def _out_dir(args, cfg: Optional[RunConfig] = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    base = Path(os.environ.get(OUT_ENV, "runs"))
    return base / cfg.experiment if cfg is not None else base


def cmd_generate(args) -> int:
    cfg = _override(load_config(args.config), args.seed_override)
    out = _out_dir(args, cfg)
    for seed in cfg.seeds:
        ps = cfg.problem.build(seed)
        path = out / f"problem_seed_{seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_problem(ps, path)
        print(f"{path}: M={ps.m_clients} n={ps.clients[0].n} d_theta={ps.d_theta} d_w={ps.d_w} "
              f"generator={ps.generator} seed={ps.seed}")
        print(f"  L={problem_l(ps):.6g}")
        if ps.planted_theta_star is not None:
            res = float(np.linalg.norm(mean_operator(ps, ps.planted_theta_star)))
            print(f"  planted-root residual ||F(theta*)||={res:.3e}")
    return 0


def _print_verdicts(verdicts) -> None:
    width = max((len(v["check"]) for v in verdicts), default=5)
    for v in verdicts:
        extra = {k: x for k, x in v.items() if k not in ("check", "holds")}
        print(f"  {v['check']:<{width}}  {'ok  ' if v['holds'] else 'FAIL'}  {json.dumps(extra, sort_keys=True)}")


def cmd_run(args) -> int:
    cfg = _override(load_config(args.config), args.seed_override)
    out = _out_dir(args, cfg)
    res = run_experiment(cfg)
    write_result(res, out)
    print(f"{cfg.experiment}: {len(cfg.seeds)} seed(s) -> {out} (config sha256 {config_hash(cfg)[:12]})")
    _print_verdicts(res.verdicts)
    if args.strict and not res.all_hold:
        return 2
    return 0


def cmd_check(args) -> int:
    if args.config:
        return cmd_run(args)
    from .suite import CRITERIA, run_suite

    numbers = None
    if args.criteria:
        try:
            numbers = [int(x) for x in args.criteria.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"--criteria: not a comma-separated integer list: {args.criteria!r}") from exc
        unknown = [n for n in numbers if n not in CRITERIA]
        if unknown:
            raise ConfigError(f"--criteria: unknown criterion {unknown[0]}")
    results = run_suite(numbers)
    for r in results:
        print(r.line())
    if args.strict and not all(r.passed for r in results):
        return 2
    return 0


def cmd_report(args) -> int:
    try:
        written = write_report(args.run_dir)
    except ReportError as exc:
        raise ConfigError(str(exc)) from exc
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffgg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--strict", action="store_true", help="exit 2 when any check fails")
        p.add_argument("--seed-override", help="comma-separated seeds replacing the config's list")

    common(sub.add_parser("generate", help="write problem instances as JSON"))
    common(sub.add_parser("run", help="run one experiment and write CSV/JSON outputs"))
    p = sub.add_parser("check", help="run the acceptance suite, or a config's checks")
    common(p, config_required=False)
    p.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    p = sub.add_parser("report", help="reduce a run directory to figure data and a summary table")
    p.add_argument("run_dir")
    return parser


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "check": cmd_check, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
