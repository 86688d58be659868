"""Command-line interface: ``fusion-shrinkage {estimate,fuse,sensitivity,simulate}``.

Every file written is paired with a ``<file>.manifest.json`` recording the
command, the resolved configuration, the seed, the tool version, the paths
involved and the wall-clock duration.

Exit codes: 0 success, 2 invalid input, 3 search did not converge (the result
is still written), 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import shrinkage as sh
from . import simulation as sim
from .causal import PropensityFitError, build_fusion_input, read_csv
from .core import DegenerateInputError, FusionInput, OracleSpec, ValidationError, _jsonable
from .sensitivity import SensitivityConfig, implied_gamma, sensitivity_report

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3

DEFAULT_SEED = 20_190_101


class UsageError(Exception):
    """Bad user input detected by the CLI itself."""


# --- output helpers -----------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.generic,)):
        return _jsonable(o.item())
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o)}")


def _manifest(command, config, seed, inputs, outputs, started) -> Dict[str, Any]:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_seconds": round(time.perf_counter() - started, 6),
    }


def _emit(text: str, output: Optional[str], manifest: Dict[str, Any]) -> None:
    """Write ``text`` to ``output`` plus its manifest, or to stdout without one."""
    if output is None:
        sys.stdout.write(text)
        return
    path = Path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    manifest["outputs"] = [str(path)]
    Path(f"{path}.manifest.json").write_text(_dumps(manifest))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _parse_ids(text: Optional[str]) -> List[str]:
    if not text:
        return ["kappa1_plus"]
    ids = [s.strip() for s in text.split(",") if s.strip()]
    bad = [i for i in ids if i not in sh.ESTIMATOR_IDS]
    if bad:
        raise UsageError(
            f"unknown estimator id(s) {', '.join(bad)}; valid ids: {', '.join(sh.ESTIMATOR_IDS)}"
        )
    return ids


def _load_fusion_input(path: str) -> FusionInput:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(obj, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return FusionInput.from_dict(obj)


def _load_oracle(path: Optional[str]) -> Optional[OracleSpec]:
    if path is None:
        return None
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}") from exc
    missing = [k for k in ("xi", "sigma_o2") if k not in obj]
    if missing:
        raise ValidationError([f"{path}: missing key {k!r}" for k in missing])
    return OracleSpec(obj["xi"], obj["sigma_o2"])


def _run_estimators(inp: FusionInput, ids, oracle, a2_form, bias_weight):
    out = {}
    for name in ids:
        opts = {}
        if name == "kappa2_plus_star":
            opts["a2_form"] = a2_form
        if name == "oracle":
            opts["bias_weight"] = bias_weight
        out[name] = sh.estimate(inp, name, oracle=oracle, **opts)
    return out


def _estimates_text(results, fmt: str, extra: Optional[Dict[str, Any]] = None) -> str:
    if fmt == "csv":
        rows = []
        for name, res in results.items():
            for k, (e, f) in enumerate(zip(res.estimate, res.factors)):
                rows.append([name, k, float(e), float(f)])
        return _csv_text(["estimator", "stratum", "estimate", "factor"], rows)
    payload: Dict[str, Any] = {"estimates": {n: r.to_dict() for n, r in results.items()}}
    if extra:
        payload.update(extra)
    return _dumps(payload)


# --- subcommands --------------------------------------------------------------


def cmd_estimate(args) -> int:
    if args.list_estimators:
        sys.stdout.write("\n".join(sh.ESTIMATOR_IDS) + "\n")
        return EXIT_OK
    if args.input is None:
        raise UsageError("estimate needs an input FusionInput JSON file")
    started = time.perf_counter()
    ids = _parse_ids(args.estimators)
    inp = _load_fusion_input(args.input)
    oracle = _load_oracle(args.oracle)
    results = _run_estimators(inp, ids, oracle, args.a2_form, args.bias_weight)
    config = {"estimators": ids, "a2_form": args.a2_form, "bias_weight": args.bias_weight}
    inputs = [args.input] + ([args.oracle] if args.oracle else [])
    manifest = _manifest("estimate", config, args.seed, inputs, [], started)
    _emit(_estimates_text(results, args.format), args.output, manifest)
    return EXIT_OK


def _load_pair(args):
    obs = read_csv(args.obs, role="observational")
    rct = read_csv(args.rct, role="randomized")
    if obs.K != rct.K:
        raise ValidationError(
            [f"stratum counts differ: observational has {obs.K}, RCT has {rct.K}"]
        )
    fusion = build_fusion_input(obs, rct, args.adjustment, args.propensity_mode, args.ddof)
    return obs, rct, fusion


def cmd_fuse(args) -> int:
    started = time.perf_counter()
    ids = _parse_ids(args.estimators)
    _, _, fusion = _load_pair(args)
    results = _run_estimators(fusion, ids, None, args.a2_form, "loss")
    report = sh.check_dominance_conditions(fusion.sigma_r2, fusion.weights)
    config = {
        "estimators": ids,
        "adjustment": args.adjustment,
        "propensity_mode": args.propensity_mode,
        "ddof": args.ddof,
        "a2_form": args.a2_form,
    }
    extra = {"input": fusion.to_dict(), "dominance": report.to_dict()}
    manifest = _manifest("fuse", config, args.seed, [args.obs, args.rct], [], started)
    _emit(_estimates_text(results, args.format, extra), args.output, manifest)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    started = time.perf_counter()
    obs, _, fusion = _load_pair(args)
    cfg = SensitivityConfig(
        gamma=args.gamma if args.gamma is not None else 1.0,
        bootstrap_B=args.bootstrap_B,
        seed=args.seed,
        epsilon=args.epsilon,
        gamma_max=args.gamma_max,
        bias_weight=args.bias_weight,
        stratify_bootstrap=args.stratify_bootstrap,
    )
    config = {"mode": args.mode, "adjustment": args.adjustment, **asdict(cfg)}
    code = EXIT_OK
    if args.mode == "at-gamma":
        if args.gamma is None:
            raise UsageError("--mode at-gamma needs --gamma")
        rep = sensitivity_report(obs, fusion, cfg)
        if args.format == "csv":
            text = _csv_text(
                ["stratum", "point", "lower", "upper", "bias_l", "bias_r", "var_l", "var_r", "combined"],
                [[k] + list(asdict(s).values()) for k, s in enumerate(rep.strata)],
            )
        else:
            text = _dumps(rep.to_dict())
    else:
        res = implied_gamma(obs, fusion, cfg)
        if args.format == "csv":
            d = res.to_dict()
            text = _csv_text(list(d), [list(d.values())])
        else:
            text = _dumps(res.to_dict())
        if not res.converged:
            code = EXIT_NOT_CONVERGED
            reason = "target not bracketed" if not res.bracketed else "search did not converge"
            print(f"warning: implied gamma {reason}; result written with converged=false", file=sys.stderr)
    manifest = _manifest("sensitivity", config, args.seed, [args.obs, args.rct], [], started)
    _emit(text, args.output, manifest)
    return code


def _selector(text: Optional[str], allowed: Sequence, cast, label: str):
    if text is None:
        return list(allowed)
    out = []
    for raw in text.split(","):
        raw = raw.strip()
        try:
            val = cast(raw)
        except ValueError:
            raise UsageError(f"invalid {label} selector {raw!r}; choose from {list(allowed)}")
        if val not in allowed:
            raise UsageError(f"invalid {label} selector {raw!r}; choose from {list(allowed)}")
        out.append(val)
    return out


def _bool_word(raw: str) -> bool:
    words = {"shift": True, "true": True, "yes": True, "1": True,
             "noshift": False, "false": False, "no": False, "0": False}
    if raw.lower() not in words:
        raise ValueError(raw)
    return words[raw.lower()]


def cmd_simulate(args) -> int:
    if args.paper and args.quick:
        raise UsageError("--paper and --quick are mutually exclusive")
    if args.config:
        base = sim.SimConfig.from_file(args.config)
    elif args.quick:
        base = sim.QUICK_BASE
    else:
        base = sim.FULL_SCALE_BASE
    if args.config and args.quick:
        base = replace(base, n_o=sim.QUICK_BASE.n_o, n_r=sim.QUICK_BASE.n_r,
                       outer_reps=sim.QUICK_BASE.outer_reps, inner_reps=sim.QUICK_BASE.inner_reps)
    seed = args.seed if args.seed_given else base.seed
    base = replace(base, seed=seed)
    # a config file names one condition; the presets sweep the whole grid
    def axis(text, field, cast, label):
        if text is None and args.config:
            return [getattr(base, field)]
        return _selector(text, sim.GRID_AXES[field], cast, label)

    grid = sim.condition_grid(
        base,
        K=axis(args.K, "K", int, "K"),
        strata_scheme=axis(args.scheme, "strata_scheme", str, "scheme"),
        covariate_shift=axis(args.shift, "covariate_shift", _bool_word, "shift"),
        adjustment=axis(args.adjustment, "adjustment", str, "adjustment"),
    )
    outdir = Path(args.output or "simulation_output")
    outdir.mkdir(parents=True, exist_ok=True)
    inputs = [args.config] if args.config else []
    for cfg in grid:
        started = time.perf_counter()
        table = sim.run_condition(cfg, threads=args.threads)
        path = outdir / f"{cfg.name}.{args.format}"
        if args.format == "csv":
            table.to_csv(path)
        else:
            path.write_text(_dumps({"rows": [table.row(n) for n in table.estimators]}))
        manifest = _manifest("simulate", cfg.to_dict(), cfg.seed, inputs, [path], started)
        manifest["results"] = table.sidecar()
        Path(f"{path}.manifest.json").write_text(_dumps(manifest))
        print(f"{cfg.name}: wrote {path}", file=sys.stderr)
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(DEFAULT_SEED),
                        help="random seed (default: fixed constant)")
    parser.add_argument("--threads", type=int, default=default(os.cpu_count() or 1),
                        help="worker processes for simulate (default: all CPUs)")
    parser.add_argument("--output", default=default(None),
                        help="output file, or directory for simulate")
    parser.add_argument("--format", choices=("csv", "json"), default=default(None),
                        help="output format")


def _pair_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("obs", help="observational CSV (y, w, stratum, x1..xp, optional p_hat)")
    p.add_argument("rct", help="RCT CSV (y, w, stratum)")
    p.add_argument("--adjustment", choices=("none", "sipw"), default="none")
    p.add_argument("--propensity-mode", choices=("shared", "per_stratum"), default="shared")
    p.add_argument("--ddof", type=int, default=0, help="Neyman variance degrees of freedom")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusion-shrinkage",
        description="Shrink RCT stratum estimates toward observational ones.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="run estimators on a FusionInput JSON")
    _global_flags(p, suppress=True)
    p.add_argument("input", nargs="?")
    p.add_argument("--estimators", help="comma-separated ids (default kappa1_plus)")
    p.add_argument("--list-estimators", action="store_true")
    p.add_argument("--oracle", help="JSON with xi and sigma_o2 for the oracle estimator")
    p.add_argument("--a2-form", choices=("derived", "printed"), default="derived")
    p.add_argument("--bias-weight", choices=("loss", "printed"), default="loss")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fuse", help="estimate strata from two CSVs and fuse them")
    _global_flags(p, suppress=True)
    _pair_args(p)
    p.add_argument("--estimators", help="comma-separated ids (default kappa1_plus)")
    p.add_argument("--a2-form", choices=("derived", "printed"), default="derived")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("sensitivity", help="sensitivity report or implied gamma")
    _global_flags(p, suppress=True)
    _pair_args(p)
    p.add_argument("--mode", choices=("at-gamma", "implied"), default="implied")
    p.add_argument("--gamma", type=float)
    p.add_argument("--bootstrap-B", dest="bootstrap_B", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--gamma-max", type=float, default=10.0)
    p.add_argument("--bias-weight", choices=("loss", "printed"), default="loss")
    p.add_argument("--stratify-bootstrap", action="store_true")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("simulate", help="Monte Carlo risk tables")
    _global_flags(p, suppress=True)
    p.add_argument("--config", help="JSON or TOML file with SimConfig fields")
    p.add_argument("--paper", action="store_true", help="full-scale preset (default)")
    p.add_argument("--quick", action="store_true", help="n_o=2000, n_r=400, 10x10 replicates")
    p.add_argument("--K", help="comma-separated subset of 6,20")
    p.add_argument("--scheme", help="comma-separated subset of similar,variable")
    p.add_argument("--shift", help="comma-separated subset of noshift,shift")
    p.add_argument("--adjustment", help="comma-separated subset of none,sipw")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    if args.format is None:
        args.format = "csv" if args.command == "simulate" else "json"
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (UsageError, ValidationError, DegenerateInputError, PropensityFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # pragma: no cover
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
