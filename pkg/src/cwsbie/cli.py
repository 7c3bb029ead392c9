"""Command-line front end: ``cwsbie {reconstruct,kernel,validate}``.

Exit codes: 0 ok, 1 numerical failure, 2 configuration error. Failures are
reported as one JSON object on stderr (and as ``error.json`` in the output
directory when one is known).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AxisIntersection, ConfigError, CwsError, NonEmbedded

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["surface"],
    "properties": {
        "surface": {
            "type": "object",
            "additionalProperties": False,
            "required": ["r_coeffs", "z_coeffs"],
            "properties": {
                "nfp": {"type": "integer", "minimum": 1},
                "r_coeffs": {"$ref": "#/$defs/table"},
                "z_coeffs": {"$ref": "#/$defs/table"},
                "n_theta": {"type": "integer", "minimum": 8, "multipleOf": 2},
                "n_phi": {"type": "integer", "minimum": 8, "multipleOf": 2},
            },
        },
        "plasma": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "minor_scale": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "n_s": {"type": "integer", "minimum": 1},
                "n_theta": {"type": "integer", "minimum": 4},
                "n_phi": {"type": "integer", "minimum": 4},
            },
        },
        "target": {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "maxProperties": 1,
            "properties": {
                "uniform": {"$ref": "#/$defs/vec3"},
                "loop": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["center", "radius", "normal"],
                    "properties": {
                        "center": {"$ref": "#/$defs/vec3"},
                        "radius": {"type": "number", "exclusiveMinimum": 0},
                        "normal": {"$ref": "#/$defs/vec3"},
                        "current": {"type": "number"},
                    },
                },
                "samples": {"type": "string"},
            },
        },
        "step1": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_modes": {"type": "integer", "minimum": 1}},
        },
        "step2": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"iterations": {"type": "integer", "minimum": 0}},
        },
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "route": {"enum": ["series", "exact", "exterior"]},
                "iterations": {"type": "integer", "minimum": 0},
            },
        },
        "tikhonov": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_sweep": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "mmax": {"type": "integer", "minimum": 0},
                "nmax": {"type": "integer", "minimum": 0},
            },
        },
        "output": {"type": "string"},
        "vtk": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
    },
    "$defs": {
        "vec3": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "table": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "minItems": 3, "maxItems": 3,
                      "prefixItems": [{"type": "integer"}, {"type": "integer"}, {"type": "number"}]},
        },
    },
}

DEFAULTS = {
    "plasma": {"minor_scale": 0.5, "n_s": 6, "n_theta": 16, "n_phi": 32},
    "target": {"uniform": [0.0, 0.0, 1.0]},
    "step1": {"n_modes": 49},
    "step2": {"iterations": 20},
    "kernel": {"route": "series", "iterations": 10},
    "tikhonov": {"lambda_sweep": [1e-2, 1e-4, 1e-6, 1e-8], "mmax": 6, "nmax": 4},
    "vtk": False,
    "seed": 0,
}


# -- configuration ---------------------------------------------------------------------

def _error_key(err) -> str:
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        extra = set(err.instance) - set(err.schema.get("properties", {}))
        path.append(sorted(extra)[0] if extra else "?")
    elif err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        path.append(missing[0] if missing else "?")
    return ".".join(str(p) for p in path) or "<root>"


def load_config(path: str | Path) -> dict:
    import jsonschema
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", "--config")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", "<root>")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _error_key(err))
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for k, v in doc.items():
        if isinstance(v, dict) and k in cfg and k != "target":
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    cfg["surface"].setdefault("nfp", 1)
    cfg["surface"].setdefault("n_theta", 64)
    cfg["surface"].setdefault("n_phi", 64)
    return cfg


def parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        sizes = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--grid expects NTHETAxNPHI, got {text!r}", "--grid")
    if len(sizes) == 1:
        sizes *= 2
    if len(sizes) != 2 or any(s < 8 or s % 2 for s in sizes):
        raise ConfigError(f"--grid sizes must be even and at least 8, got {text!r}", "--grid")
    return sizes[0], sizes[1]


def _g(x: float) -> float:
    """Round to 12 significant digits so reports are stable across BLAS reorderings."""
    return float(f"{float(x):.12g}")


def _gl(xs) -> list:
    return [_g(x) for x in xs]


def _build_workspace(cfg: dict, flip_diagonal: bool = False):
    from .geometry import build_torus
    from .reconstruction import prepare
    srf = cfg["surface"]
    try:
        torus = build_torus([tuple(r) for r in srf["r_coeffs"]], [tuple(r) for r in srf["z_coeffs"]],
                            srf["nfp"])
    except (ValueError, NonEmbedded, AxisIntersection) as exc:
        raise ConfigError(str(exc), "surface")
    pl = cfg["plasma"]
    return prepare(torus, srf["n_theta"], srf["n_phi"], plasma_scale=pl["minor_scale"],
                   plasma_shape=(pl["n_s"], pl["n_theta"], pl["n_phi"]),
                   flip_diagonal=flip_diagonal)


def _target(cfg: dict, ws):
    from .fields import FieldSamples, bs_filament, circular_loop
    tgt = cfg["target"]
    P = ws.plasma
    if "uniform" in tgt:
        vals = np.tile(np.asarray(tgt["uniform"], float), (len(P.nodes), 1))
        return FieldSamples(P.nodes, vals, P.weights, P.shape), None
    if "loop" in tgt:
        lp = tgt["loop"]
        loop = circular_loop(lp["center"], lp["radius"], lp["normal"], lp.get("current", 1.0))
        sampler = lambda x: bs_filament(loop, x)  # noqa: E731
        return FieldSamples(P.nodes, sampler(P.nodes), P.weights, P.shape), sampler
    try:
        samples = FieldSamples.from_csv(tgt["samples"])
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"cannot read target samples: {exc}", "target.samples")
    return samples, None


# -- commands --------------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)


def _write_current(path: Path, ws, j: np.ndarray) -> None:
    g = ws.grid
    rows = [[f"{t:.12e}", f"{p:.12e}", *(f"{c:.12e}" for c in x), *(f"{c:.12e}" for c in v)]
            for t, p, x, v in zip(g.theta, g.phi, g.nodes, j)]
    _write_csv(path, ["theta", "phi", "x", "y", "z", "jx", "jy", "jz"], rows)


def _geometric_ratio(values) -> float:
    v = np.asarray(values, float)
    v = v[v > 0]
    if len(v) < 2:
        return float("nan")
    slope = np.polyfit(np.arange(len(v)), np.log(v), 1)[0]
    return float(np.exp(slope))


def cmd_reconstruct(cfg: dict, out: Path) -> dict:
    from .fields import FieldSamples, bs_surface_current
    from .layer_potentials import contraction_estimate
    from .reconstruction import exact_preimage, regularized_fit, relative_winding, step1_fit, step2_preimage
    ws = _build_workspace(cfg)
    target, sampler = _target(cfg, ws)
    lam = contraction_estimate(ws.opset, seed=cfg["seed"])
    s1 = step1_fit(ws, target, cfg["step1"]["n_modes"], circulation_sampler=sampler)
    s2 = step2_preimage(s1, cfg["step2"]["iterations"])
    ex = exact_preimage(s1)
    tik = regularized_fit(ws, target, cfg["tikhonov"]["lambda_sweep"],
                          cfg["tikhonov"]["mmax"], cfg["tikhonov"]["nmax"])
    incs = s2.increment_norms
    report = {
        "command": "reconstruct",
        "version": __version__,
        "seed": cfg["seed"],
        "grid": list(ws.grid.shape),
        "contraction_estimate": _g(lam),
        "step1": {
            "alpha0": _g(s1.alpha0),
            "circulation": None if s1.circulation is None else _g(s1.circulation),
            "basis_keys": [list(k) for k in s1.basis_keys],
            "alphas": _gl(s1.alphas),
            "residual_history": _gl(s1.residual_history),
            "effective_rank": s1.rank,
        },
        "step2": {
            "iterations": s2.iterations,
            "series_term_norms": _gl(s2.series_term_norms),
            "increment_norms": _gl(incs),
            "increment_ratios": _gl(np.asarray(incs[1:]) / np.asarray(incs[:-1])) if len(incs) > 1 else [],
            "achieved_residual": _g(s2.achieved_residual),
            "target_residual": _g(s2.target_residual),
            "qbar": _g(s2.qbar),
            "pbar": _g(s2.pbar),
            "qbar_relative": _g(relative_winding(ws, s2.current, "q")),
        },
        "exact": {
            "achieved_residual": _g(ex.achieved_residual),
            "target_residual": _g(ex.target_residual),
            "qbar": _g(ex.qbar),
            "qbar_relative": _g(relative_winding(ws, ex.current, "q")),
            "step2_difference": _g(ws.grid.l2_norm(s2.current - ex.current) / ws.grid.l2_norm(ex.current)),
        },
        "tikhonov": {
            "lambdas": _gl(tik.lambdas),
            "residuals": _gl(tik.residuals),
            "current_norms": _gl(tik.current_norms),
        },
    }
    rows = [[k, f"{r:.12e}"] for k, r in enumerate(s1.residual_history)]
    _write_csv(out / "residuals.csv", ["basis_size", "relative_residual"], rows)
    _write_current(out / "current.csv", ws, s2.current)
    field = FieldSamples(target.points, bs_surface_current(ws.opset, s2.current, target.points, check=False),
                         target.weights, target.shape)
    field.to_csv(out / "field_on_plasma.csv")
    if cfg["vtk"]:
        field.to_vtk(out / "field_on_plasma.vtk", "reconstructed field on the plasma region")
        FieldSamples(ws.grid.nodes, s2.current, None, ws.grid.shape).to_vtk(
            out / "current.vtk", "surface current")
    return report


def cmd_kernel(cfg: dict, out: Path) -> dict:
    from .reconstruction import ROUTES, kernel_element, relative_winding
    from .layer_potentials import contraction_estimate
    ws = _build_workspace(cfg)
    n = cfg["kernel"]["iterations"]
    lam = contraction_estimate(ws.opset, seed=cfg["seed"])
    elements = {r: kernel_element(ws, r, n, history=(r == "series")) for r in ROUTES}
    chosen = elements[cfg["kernel"]["route"]]
    series = elements["series"]
    ex, ext = elements["exact"], elements["exterior"]
    rel = lambda a, b: ws.grid.l2_norm(a - b) / ws.grid.l2_norm(b)  # noqa: E731
    report = {
        "command": "kernel",
        "version": __version__,
        "seed": cfg["seed"],
        "grid": list(ws.grid.shape),
        "contraction_estimate": _g(lam),
        "route": chosen.route,
        "iterations": n,
        "leakage_history": _gl(series.leakage_history),
        "leakage_decay_ratio": _g(_geometric_ratio(series.leakage_history)),
        "increment_norms": _gl(series.increment_norms),
        "routes": {
            r: {"leakage": _g(e.leakage), "qbar": _g(e.qbar), "pbar": _g(e.pbar),
                "pbar_relative": _g(relative_winding(ws, e.current, "p")),
                "qbar_relative": _g(relative_winding(ws, e.current, "q"))}
            for r, e in elements.items()
        },
        "exact_vs_exterior": _g(rel(ext.current, ex.current)),
        "series_vs_exact": _g(rel(series.current, ex.current)),
    }
    _write_csv(out / "leakage.csv", ["n", "leakage"],
               [[k, f"{v:.12e}"] for k, v in enumerate(series.leakage_history)])
    _write_current(out / "current.csv", ws, chosen.current)
    if cfg["vtk"]:
        from .fields import FieldSamples
        FieldSamples(ws.grid.nodes, chosen.current, None, ws.grid.shape).to_vtk(
            out / "current.vtk", "kernel current")
    return report


def cmd_validate(n_theta: int, n_phi: int, force_bug: bool = False, seed: int = 0,
                 stream=None) -> bool:
    from .validation import run_checks
    stream = stream or sys.stdout
    rows = run_checks(n_theta, n_phi, force_bug=force_bug, seed=seed)
    width = max(len(r.name) for r in rows)
    print(f"{'check':<{width}}  {'status':<6}  {'measured':>12}  {'tolerance':>10}", file=stream)
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status:<6}  {r.measured:>12.4e}  {r.tolerance:>10.1e}", file=stream)
    failed = [r.name for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed"
          + (f"; FAILED: {', '.join(failed)}" if failed else ""), file=stream)
    return not failed


# -- entry point -----------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cwsbie", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("reconstruct", "kernel"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--output", default=None, help="output directory (overrides the config)")
        s.add_argument("--route", choices=None, default=None, help="kernel route override")
    v = sub.add_parser("validate")
    v.add_argument("--force-bug", action="store_true",
                   help="flip the sign of the double-layer diagonal; the suite must fail")
    v.add_argument("--output", default=None)
    for s in sub.choices.values():
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--grid", default=None, help="NTHETAxNPHI or a single size")
        s.add_argument("--seed", type=int, default=None)
    return p


def _emit_error(kind: str, message: str, key: str | None, out: Path | None) -> None:
    doc = {"error": kind, "message": message}
    if key is not None:
        doc["key"] = key
    text = json.dumps(doc, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        with contextlib.suppress(OSError):
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n")


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = Path(args.output) if args.output else None
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive", "--threads")
        with _threads(args.threads):
            if args.command == "validate":
                n_t, n_p = parse_grid(args.grid) if args.grid else (64, 64)
                ok = cmd_validate(n_t, n_p, args.force_bug, args.seed or 0)
                return 0 if ok else 1
            cfg = load_config(args.config)
            if args.grid:
                cfg["surface"]["n_theta"], cfg["surface"]["n_phi"] = parse_grid(args.grid)
            if args.seed is not None:
                cfg["seed"] = args.seed
            if args.route is not None:
                if args.route not in ("series", "exact", "exterior"):
                    raise ConfigError(f"unknown kernel route {args.route!r}", "kernel.route")
                cfg["kernel"]["route"] = args.route
            out = out or Path(cfg.get("output", "cwsbie_output"))
            out.mkdir(parents=True, exist_ok=True)
            start = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("default")
                run = cmd_reconstruct if args.command == "reconstruct" else cmd_kernel
                report = run(cfg, out)
            (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(f"{args.command}: wrote {out} in {time.perf_counter() - start:.1f} s")
            return 0
    except ConfigError as exc:
        _emit_error("config", str(exc.args[0]), exc.key, out)
        return 2
    except (CwsError, np.linalg.LinAlgError, FloatingPointError) as exc:
        _emit_error("numerical", f"{type(exc).__name__}: {exc}", None, out)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
