"""Command-line front end.

    zitterwalk run [--config FILE] [--<field> VALUE ...] [--convergence]
    zitterwalk simulate [--csv]
    zitterwalk analyze --ensemble FILE
    zitterwalk noise-check

Every RunConfig field has a kebab-case flag that overrides the file value.
Exit codes: 0 all verdicts pass, 1 an analysis failed, 2 configuration
error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path as FsPath

from . import io, pipeline
from .config import RunConfig, parse_config
from .errors import ConfigurationError, NumericDomainError, ResolutionError, ZitterwalkError
from .schemas import ANALYSES

log = logging.getLogger("zitterwalk")


def _number_list(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def _analyses(text: str):
    names = [v.strip() for v in text.split(",") if v.strip()]
    if text.strip() == "all":
        return list(ANALYSES)
    bad = [n for n in names if n not in ANALYSES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown analyses {bad}; choose from {', '.join(ANALYSES)}")
    return names


def _auto_or(kind):
    def parse(text: str):
        if text == "auto":
            return "auto"
        try:
            return kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None
    return parse


def _number_or_text(text: str):
    try:
        return float(text)
    except ValueError:
        return text


def _x0(text: str):
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError("x0 must be a number or a JSON object") from None


FLAG_TYPES = {
    "scenario": dict(choices=["free", "ou_nelson", "custom"]),
    "hbar": dict(type=float), "mass": dict(type=float), "omega": dict(type=float),
    "drift": dict(type=_number_or_text, help="number or expression in t, x"),
    "volatility": dict(type=_number_or_text, help="number or expression in t, x"),
    "x0": dict(type=_x0, help='number or JSON, e.g. \'{"kind": "normal", "mean": 0, "std": 1}\''),
    "n_steps": dict(type=int), "horizon": dict(type=float), "n_paths": dict(type=int),
    "seed": dict(type=int), "reference_seed": dict(type=int),
    "analyses": dict(type=_analyses, help=f"comma-separated subset of {','.join(ANALYSES)} or 'all'"),
    "out_dir": dict(type=str),
    "k_low": dict(type=float), "k_high": dict(type=float),
    "ks_threshold": dict(type=_auto_or(float)), "w1_threshold": dict(type=float),
    "min_count": dict(type=int), "n_xbins": dict(type=int), "window": dict(type=_auto_or(int)),
    "markov_min_group": dict(type=int),
    "comparison_times": dict(type=_number_list(float)),
    "calibration_pairs": dict(type=int), "calibration_quantile": dict(type=float),
    "delta_b": dict(type=float), "delta_sigma": dict(type=float), "delta_x0": dict(type=float),
    "lipschitz_bound": dict(type=float),
    "fractal_scales": dict(type=_number_list(int), help="scales in steps, comma-separated"),
    "expected_dimension": dict(type=float), "dimension_tolerance": dict(type=float),
    "storage": dict(choices=["auto", "dense", "lazy", "thinned"]),
    "write_ensemble": dict(action=argparse.BooleanOptionalAction),
    "ensemble_stride": dict(type=int), "noise_draws": dict(type=int),
    "reference_method": dict(choices=["auto", "simulate"],
                             help="auto samples affine fields from the exact transition law"),
}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=FsPath, help="JSON run configuration")
    g = p.add_argument_group("run configuration (overrides the file)")
    for name in RunConfig.__dataclass_fields__:
        opts = dict(FLAG_TYPES[name])
        opts.setdefault("metavar", name.upper())
        if "choices" in opts or opts.get("action"):
            opts.pop("metavar")
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **opts)
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zitterwalk", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="simulate, then run the configured analyses")
    _add_config_flags(p)
    p.add_argument("--convergence", action="store_true",
                   help="repeat the run at n_steps = 1e4, 1e5, 1e6 and tabulate trends")
    p = sub.add_parser("simulate", help="simulate and write the ensemble (ZWLK binary)")
    _add_config_flags(p)
    p.add_argument("--csv", action="store_true", help="also write ensemble.csv (path_id, t, x)")
    p = sub.add_parser("analyze", help="run the analyses on a stored ensemble")
    _add_config_flags(p)
    p.add_argument("--ensemble", type=FsPath, required=True, help="ZWLK file written by 'simulate'")
    p = sub.add_parser("noise-check", help="frequency and autocorrelation tests of the noise stream")
    _add_config_flags(p)
    return parser


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in RunConfig.__dataclass_fields__}
    return parse_config(args.config, overrides)


def _simulate(cfg: RunConfig, csv: bool) -> int:
    out = FsPath(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ens = pipeline.build_ensemble(cfg)
    path = io.write_ensemble(ens, out / "ensemble.zwlk", cfg.ensemble_stride)
    if csv:
        io.write_ensemble_csv(ens if ens.stride == cfg.ensemble_stride else ens.materialize(cfg.ensemble_stride),
                              out / "ensemble.csv")
    print(path)
    return pipeline.EXIT_OK


def _analyze(cfg: RunConfig, path: FsPath) -> int:
    ens = io.read_ensemble(path)
    h = io.read_header(path)
    cfg = cfg.with_overrides(n_steps=h["n_steps"], horizon=h["horizon"], n_paths=h["n_paths"],
                             seed=h["seed"] if h["seed"] is not None else cfg.seed,
                             ensemble_stride=h["stride"])
    return pipeline.run(cfg, ensemble=ens)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="zitterwalk: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run":
            code = pipeline.convergence(cfg) if args.convergence else pipeline.run(cfg)
        elif args.command == "simulate":
            code = _simulate(cfg, args.csv)
        elif args.command == "analyze":
            code = _analyze(cfg, args.ensemble)
        else:
            code = pipeline.noise_check(cfg)
    except (ConfigurationError, ResolutionError) as exc:
        print(f"zitterwalk: configuration error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG
    except NumericDomainError as exc:
        print(f"zitterwalk: numeric error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return pipeline.EXIT_RUNTIME
    except (ZitterwalkError, ArithmeticError, MemoryError, OSError) as exc:
        print(f"zitterwalk: runtime error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return pipeline.EXIT_RUNTIME
    if code != pipeline.EXIT_OK:
        print(f"zitterwalk: finished with exit code {code}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
