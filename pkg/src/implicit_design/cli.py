"""Command-line entry point.

    implicit-design design     --model death --method grid --estimator analytic --outdir out
    implicit-design baseline   --model death --replicates 50 --outdir out/baseline
    implicit-design compare-eq --model death --dims 8 --budget 60 --outdir out/eq
    implicit-design export     --outdir out

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import InvalidArgument
from .experiment import (ConfigError, ExperimentConfig, MissingArtifacts, equidistant_comparison,
                         export_plot_data, random_baseline, run_experiment, write_json)

log = logging.getLogger("implicit_design")

# flag name -> config field
OVERRIDES = {
    "model": "model", "method": "method", "estimator": "estimator", "dims": "dims", "seed": "seed",
    "budget": "budget", "replicates": "replicates", "outdir": "outdir",
    "n_prior": "n_prior", "n_lfire": "n_lfire", "workers": "workers",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="implicit-design", description="Bayesian experimental design for implicit models.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config; flags override its fields")
        p.add_argument("--model", choices=["death", "sir"])
        p.add_argument("--method", choices=["grid", "bo", "random", "equidistant"])
        p.add_argument("--estimator", choices=["lfire", "analytic"])
        p.add_argument("--dims", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--budget", type=int)
        p.add_argument("--replicates", type=int)
        p.add_argument("--outdir", type=str)
        p.add_argument("--n-prior", dest="n_prior", type=int, help="prior draws N")
        p.add_argument("--n-lfire", dest="n_lfire", type=int, help="LFIRE simulations per class M")
        p.add_argument("--workers", type=int)

    common(sub.add_parser("design", help="select a design and run the replicate posteriors"))
    common(sub.add_parser("baseline", help="posteriors at uniformly random designs"))
    common(sub.add_parser("compare-eq", help="U at the equidistant design versus the BO optimum"))
    exp = sub.add_parser("export", help="plot-ready files from a finished run")
    exp.add_argument("--outdir", required=True, type=str)
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {args.config}: {exc}"]) from exc
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
    for flag, name in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[name] = value
    return ExperimentConfig.from_dict(data)


def run(args: argparse.Namespace) -> int:
    if args.command == "export":
        for path in export_plot_data(args.outdir):
            print(path)
        return 0
    config = load_config(args)
    if args.command == "design":
        report = run_experiment(config)
        print(json.dumps({"design": list(report.design.times), "utility": report.utility.value,
                          "std_error": report.utility.std_error, "outdir": str(report.outdir)}))
    elif args.command == "baseline":
        out = random_baseline(config)
        print(json.dumps({"replicates": len(out), "outdir": config.outdir}))
    elif args.command == "compare-eq":
        result = equidistant_comparison(config)
        Path(config.outdir).mkdir(parents=True, exist_ok=True)
        write_json(Path(config.outdir) / "compare_eq.json", result)
        print(json.dumps({k: result[k] for k in ("U_eq", "U_star", "difference")}))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifacts as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
