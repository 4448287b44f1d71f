"""Command line entry point: ``hensgnn run|evaluate|proxy-rank|report``.

Configuration comes from an optional YAML/JSON file (``--config``) whose
top-level keys are the ``PipelineConfig`` field names; nested ``proxy``,
``adaptive`` and ``gradient`` sections hold the sub-config fields.  Any
field can then be overridden from the command line, e.g.
``--k 2 --proxy.d_proxy 0.5``.  ``HENSGNN_WORKERS`` sets the default
worker count.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import numkern as nk
from .graphio import DatasetValidationError, ParseError, ProxyConfig
from .ensemble import AdaptiveConfig
from .pipeline import EXIT_FAILURE, PipelineConfig, RunReport, evaluate, load_config, proxy_rank, report_runtime, run
from .search import GradientSearchConfig

_SECTIONS = {"proxy": ProxyConfig, "adaptive": AdaptiveConfig, "gradient": GradientSearchConfig}
_LISTS = {"candidates": str, "learning_rates": float, "dropouts": float}


def _scalar_type(default):
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file with PipelineConfig keys")
    g = p.add_argument_group("pipeline overrides")
    defaults = PipelineConfig(workers=1)
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _SECTIONS:
            for sf in dataclasses.fields(_SECTIONS[f.name]):
                sub_default = getattr(getattr(defaults, f.name), sf.name)
                g.add_argument(f"--{f.name}.{sf.name}", dest=f"{f.name}.{sf.name}",
                               type=_scalar_type(sub_default), default=argparse.SUPPRESS)
        elif f.name in _LISTS:
            g.add_argument(flag, dest=f.name, nargs="+", type=_LISTS[f.name], default=argparse.SUPPRESS)
        elif f.name == "time_budget":
            g.add_argument(flag, dest=f.name, type=float, default=argparse.SUPPRESS)
        else:
            default = getattr(defaults, f.name)
            g.add_argument(flag, dest=f.name, type=_scalar_type(default), default=argparse.SUPPRESS)


def build_config(ns: argparse.Namespace) -> PipelineConfig:
    data = load_config(ns.config) if getattr(ns, "config", None) else {}
    for key, value in vars(ns).items():
        if key in ("command", "config", "gold", "report_path", "verbose"):
            continue
        section, _, sub = key.partition(".")
        if sub:
            data.setdefault(section, {})
            data[section] = dict(data[section], **{sub: value})
        else:
            data[key] = value
    return PipelineConfig.from_mapping(data)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hensgnn", description="Hierarchical GNN ensembles for node classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and write test predictions")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a predictions file against gold labels")
    _add_config_flags(p)
    p.add_argument("--gold", required=True, help="file with node_index and class columns")

    p = sub.add_parser("proxy-rank", help="print the proxy ranking of candidate families")
    _add_config_flags(p)

    p = sub.add_parser("report", help="print the stage runtime table of a finished run")
    p.add_argument("report_path", help="<output>.report.json written by run")
    return parser


def main(argv=None) -> int:
    ns = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.command == "report":
            sys.stdout.write(report_runtime(RunReport.load(ns.report_path)))
            return 0
        cfg = build_config(ns)
        if ns.command == "run":
            rep = run(cfg)
            sys.stdout.write(report_runtime(rep))
            for note in rep.notes:
                print(f"note: {note}", file=sys.stderr)
            return rep.status
        if ns.command == "evaluate":
            sys.stdout.write(evaluate(cfg, ns.gold).format())
            return 0
        if ns.command == "proxy-rank":
            sys.stdout.write(proxy_rank(cfg))
            return 0
    except (nk.ConfigError, ParseError, DatasetValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
