"""Command line entry point (``qfhas``).

Errors are written to stderr as a single JSON object
``{"error": kind, "message": ..., "path": ...}`` with exit code 2 for usage
and validation problems and 1 for anything that fails at run time.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from qfhas.errors import QfhasError, ScenarioError
from qfhas.experiments import run_grid_spec
from qfhas.metrics import summarize
from qfhas.netsim import simulate
from qfhas.num import NumProblem, solve_oracle
from qfhas.scenario import UtilityModel, build_sim_config, load_grid, load_scenario, read_document, with_seed
from qfhas.traceio import dump_json, summary_to_dict, write_run
from qfhas.utility import SsimSample, fit_curve, rmse

OUT_DIR_ENV = "QFHAS_OUT_DIR"
DEFAULT_OUT_DIR = "qfhas-out"


class UsageError(QfhasError):
    kind = "usage_error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR)) / name


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    spec = with_seed(load_scenario(args.scenario), args.seed)
    trace = simulate(build_sim_config(spec))
    summary = summarize(trace)
    out = args.out or _default_out(Path(args.scenario).stem)
    write_run(trace, out, args.trace, summary if args.summary == "json" else None)
    s = summary_to_dict(summary)
    _print_json({"out": str(out), "capacity_usage": s["capacity_usage"],
                 "average_ssim": s["average_ssim"], "underruns": s["underruns"],
                 "mean_price": s["mean_price"]})
    return 0


def cmd_grid(args) -> int:
    spec = load_grid(args.grid)
    if args.seed is not None:
        spec = spec.model_copy(update={"base": spec.base.model_copy(update={"seed": args.seed})})
    if args.realizations is not None:
        spec = spec.model_copy(update={"realizations": args.realizations})
    result = run_grid_spec(spec, workers=args.workers).to_dict()
    out = Path(args.out or _default_out(Path(args.grid).stem))
    out.mkdir(parents=True, exist_ok=True)
    dump_json(result, out / "grid.json")
    for cell in result["cells"]:
        av = cell["averaged"]
        print(f"{cell['controller']:>12} N={cell['n_users']:<4} C_usr={cell['c_usr_bps']:<10g} "
              f"N_TCP={cell['n_tcp']:<3} minSSIM={av['min_average_ssim']:.4f} "
              f"meanSSIM={av['mean_average_ssim']:.4f} dSSIM={av['mean_delta_ssim']:.5f} "
              f"usage={av['capacity_usage']:.3f}")
    print(f"wrote {out / 'grid.json'}")
    return 0


def _read_samples(path: str) -> list[SsimSample]:
    p = Path(path)
    try:
        if p.suffix == ".csv":
            with open(p, newline="") as fh:
                rows = list(csv.DictReader(fh))
            raw = [{"bitrate_bps": r["bitrate_bps"], "ssim": r["ssim"]} for r in rows]
        else:
            doc = read_document(p)
            raw = doc.get("samples")
            if not isinstance(raw, list):
                raise ScenarioError("expected a 'samples' list", path="samples")
        return [SsimSample(float(s["bitrate_bps"]), float(s["ssim"])) for s in raw]
    except OSError as exc:
        raise ScenarioError(f"cannot read {p}: {exc.strerror or exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, QfhasError):
            raise
        raise ScenarioError(f"bad sample entry: {exc}", path="samples") from None


def cmd_fit(args) -> int:
    samples = _read_samples(args.samples)
    curve = fit_curve(samples)
    _print_json({"a": curve.a, "b": curve.b, "c": curve.c,
                 "valid_range": list(curve.valid_range), "rmse": rmse(curve, samples)})
    return 0


def cmd_oracle(args) -> int:
    doc = read_document(args.problem)
    cap = doc.get("capacity_bps")
    users = doc.get("users")
    if not isinstance(cap, (int, float)) or cap <= 0:
        raise ScenarioError("must be a positive number", path="capacity_bps")
    if not isinstance(users, list) or not users:
        raise ScenarioError("must be a non-empty list", path="users")
    curves = []
    for i, u in enumerate(users):
        raw = u.get("utility", u) if isinstance(u, dict) else u
        try:
            model = UtilityModel.model_validate({"preset": raw} if isinstance(raw, str) else raw)
            curves.append(model.build())
        except (ValueError, QfhasError) as exc:
            raise ScenarioError(str(exc).splitlines()[0], path=f"users.{i}") from None
    sol = solve_oracle(NumProblem(tuple(curves), float(cap)))
    _print_json({"rates": list(sol.rates), "price": sol.price,
                 "aggregate_utility": sol.aggregate_utility})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qfhas", description="Quality-fair HAS simulator and NUM tools.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV}/<name>)")
    r.add_argument("--trace", choices=("csv", "jsonl"), default="csv")
    r.add_argument("--summary", choices=("json", "none"), default="json")
    r.set_defaults(fn=cmd_run)

    g = sub.add_parser("grid", help="run an experiment grid")
    g.add_argument("grid")
    g.add_argument("--seed", type=int)
    g.add_argument("--realizations", type=int)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_grid)

    f = sub.add_parser("fit", help="fit a*r^b+c to SSIM samples")
    f.add_argument("samples")
    f.set_defaults(fn=cmd_fit)

    o = sub.add_parser("oracle", help="solve a NUM problem by bisection")
    o.add_argument("problem")
    o.set_defaults(fn=cmd_oracle)
    return p


def _fail(exc: Exception, code: int) -> int:
    err = {"error": getattr(exc, "kind", "error"), "message": str(exc)}
    path = getattr(exc, "path", "")
    if path:
        err["path"] = path
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (UsageError, ScenarioError) as exc:
        return _fail(exc, 2)
    except QfhasError as exc:
        return _fail(exc, 1)
    except OSError as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
