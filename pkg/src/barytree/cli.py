"""Command-line entry point: ``barytree <command> [--config PATH] [flags]``.

Every command reads a JSON config (unknown fields are rejected), merges the
command-line flags into it, runs one library operation and writes CSV or
JSON.  Outputs start with metadata (``#`` lines for CSV, a ``meta`` object
for JSON) holding a hash of the effective config, the quadrature order, the
seed and the config itself, so runs can be reproduced from their outputs.

Exit codes: 0 success, 1 config error, 2 numeric failure (partial results
are still written and flagged).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import barycentric as bc
from . import degeneration as dg
from . import tree as tr
from .errors import (BarytreeError, ConfigError, DomainError, InternalConsistencyError, NearDegenerateMapError,
                     NumericError, PreconditionError, StructureError)
from .h3 import BallPoint
from .rational import RationalMap, resultant_magnitude
from .sphere import make_quadrature

log = logging.getLogger("barytree")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


# ---------------------------------------------------------------------------
# config schemas


class _Field:
    def __init__(self, default, check, doc=""):
        self.default = default
        self.check = check
        self.doc = doc


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _pos_int(v):
    return _is_int(v) and v >= 1


def _nonneg_int(v):
    return _is_int(v) and v >= 0


def _pos_num(v):
    return _is_num(v) and v > 0


def _num_list(v):
    return isinstance(v, list) and all(_is_num(x) for x in v)


def _complex_like(v):
    return _is_num(v) or (isinstance(v, list) and len(v) == 2 and all(_is_num(x) for x in v))


def _complex_list(v):
    return isinstance(v, list) and len(v) > 0 and all(_complex_like(x) for x in v)


def _point(v):
    return _num_list(v) and len(v) == 3


def _map_spec(v):
    return isinstance(v, (dict, str))


def _opt(check):
    return lambda v: v is None or check(v)


COMMON = {
    "command": _Field(None, lambda v: isinstance(v, str)),
    "seed": _Field(0, _nonneg_int),
    "quadrature_order": _Field(bc.DEFAULT_ORDER, _pos_int),
    "tol": _Field(bc.DEFAULT_TOL, _pos_num),
}

SCHEMAS = {
    "extend": {"map": _Field(None, _map_spec), "point": _Field([0.0, 0.0, 0.0], _point),
               "refine": _Field(True, lambda v: isinstance(v, bool))},
    "lipscan": {"map": _Field(None, _map_spec), "samples": _Field(10000, _pos_int),
                "accurate": _Field(False, lambda v: isinstance(v, bool))},
    "belt": {"maps": _Field(None, lambda v: isinstance(v, list) and len(v) > 0 and all(map(_map_spec, v))),
             "recenter": _Field(True, lambda v: isinstance(v, bool)),
             "n_azimuth": _Field(720, _pos_int), "n_grid": _Field(512, _pos_int)},
    "delta": {"radii": _Field([0.25, 0.5, 1.0, 2.0, 4.0, 8.0], lambda v: _num_list(v) and len(v) > 0),
              "grading": _Field(10, _nonneg_int)},
    "preimages": {"map": _Field(None, _map_spec),
                  "depths": _Field(list(dg.DEFAULT_DEPTHS), lambda v: _num_list(v)),
                  "random_seeds": _Field(8, _nonneg_int), "random_radius": _Field(8.0, _pos_num)},
    "family": {"family": _Field(None, lambda v: v in dg.FAMILIES), "params": _Field(None, _complex_list),
               "mode": _Field("indicator", lambda v: v in ("indicator", "translation", "snapshot")),
               "q": _Field(1, _pos_int),
               "depth_grid": _Field(list(dg.DEFAULT_DEPTH_GRID), lambda v: _num_list(v) and len(v) > 0)},
    "naturality": {"map": _Field(None, _opt(_map_spec)), "family": _Field(None, _opt(lambda v: v in dg.FAMILIES)),
                   "params": _Field(None, _opt(_complex_list)), "N": _Field(2, _pos_int),
                   "point": _Field([0.0, 0.0, 0.0], _point), "refine_tol": _Field(bc.REFINE_TOL, _pos_num),
                   "with_radius": _Field(False, lambda v: isinstance(v, bool))},
    "treecheck": {"tree_map": _Field(None, _map_spec)},
    "fit-tree": {"snapshot": _Field(None, _opt(lambda v: isinstance(v, str))),
                 "parameter": _Field(None, _opt(lambda v: isinstance(v, str))),
                 "labels": _Field(None, _opt(lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v))),
                 "distances": _Field(None, _opt(lambda v: isinstance(v, list) and all(_num_list(r) for r in v))),
                 "fit_tol": _Field(0.1, _pos_num)},
}

# commands whose default order differs from the global default
ORDER_DEFAULTS = {"delta": 40}
REQUIRED = {"extend": ["map"], "lipscan": ["map"], "belt": ["maps"], "preimages": ["map"],
            "family": ["family", "params"], "treecheck": ["tree_map"]}


def resolve_config(command: str, raw: dict, overrides: dict) -> dict:
    """Validate ``raw`` against the schema of ``command`` and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    schema = {**COMMON, **SCHEMAS[command]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config fields for '{command}': {unknown}")
    if raw.get("command", command) != command:
        raise ConfigError(f"config is for command {raw['command']!r}, not {command!r}")
    cfg = {}
    for key, fld in schema.items():
        default = ORDER_DEFAULTS.get(command, fld.default) if key == "quadrature_order" else fld.default
        value = overrides[key] if overrides.get(key) is not None else raw.get(key, default)
        if value is not None and not fld.check(value):
            raise ConfigError(f"invalid value for {key!r}: {value!r}")
        cfg[key] = value
    cfg["command"] = command
    for key in REQUIRED.get(command, []):
        if cfg[key] is None:
            raise ConfigError(f"'{command}' needs the field {key!r}")
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# map specifications


def _complex(v) -> complex:
    return complex(v[0], v[1]) if isinstance(v, list) else complex(v)


def _load_json_file(path: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from None


def parse_map(spec) -> RationalMap:
    """Rational map from a spec object (or a path to a JSON file holding one).

    Accepted forms: ``{"power": d, "coefficient": a}``, ``{"numerator": [...],
    "denominator": [...]}`` (highest power first), ``{"P": [...], "Q": [...]}``
    (homogeneous coefficients), ``{"mobius": [[a, b], [c, d]]}`` and
    ``{"family": name, "param": c}``.  Complex numbers are numbers or
    ``[re, im]`` pairs.
    """
    if isinstance(spec, str):
        spec = _load_json_file(spec)
    if not isinstance(spec, dict):
        raise ConfigError("map spec must be an object")
    keys = set(spec)
    try:
        if keys <= {"power", "coefficient"} and "power" in keys:
            if not _pos_int(spec["power"]):
                raise ConfigError("power must be a positive integer")
            return RationalMap.power(spec["power"], _complex(spec.get("coefficient", 1.0)))
        if keys <= {"numerator", "denominator"} and "numerator" in keys:
            num = spec["numerator"]
            den = spec.get("denominator", [1])
            if not (_complex_list(num) and _complex_list(den)):
                raise ConfigError("numerator and denominator must be lists of complex numbers")
            return RationalMap.from_polys([_complex(c) for c in num], [_complex(c) for c in den])
        if keys == {"P", "Q"}:
            if not (_complex_list(spec["P"]) and _complex_list(spec["Q"])):
                raise ConfigError("P and Q must be lists of complex numbers")
            return RationalMap([_complex(c) for c in spec["P"]], [_complex(c) for c in spec["Q"]])
        if keys == {"mobius"}:
            m = spec["mobius"]
            if not (isinstance(m, list) and len(m) == 2 and all(_complex_list(r) and len(r) == 2 for r in m)):
                raise ConfigError("mobius needs a 2x2 matrix")
            M = np.array([[_complex(c) for c in row] for row in m])
            if abs(np.linalg.det(M)) == 0:
                raise ConfigError("mobius matrix is singular")
            return RationalMap.mobius(M)
        if keys == {"family", "param"}:
            if spec["family"] not in dg.FAMILIES or not _complex_like(spec["param"]):
                raise ConfigError("family map needs a known family and a complex param")
            return dg.family_from_name(spec["family"], [_complex(spec["param"])]).maps()[0]
    except DomainError as exc:
        raise ConfigError(f"invalid map: {exc}") from None
    raise ConfigError(f"unrecognised map spec with fields {sorted(keys)}")


def _map_label(spec) -> str:
    return spec if isinstance(spec, str) else canonical_json(spec)


# ---------------------------------------------------------------------------
# output helpers


def _meta(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "quadrature_order": cfg["quadrature_order"],
            "seed": cfg["seed"], "config": cfg}


def csv_with_header(cfg: dict, body: str, extra=()) -> str:
    meta = _meta(cfg)
    lines = [f"# barytree {cfg['command']}",
             f"# config_hash: {meta['config_hash']}",
             f"# quadrature_order: {meta['quadrature_order']}",
             f"# seed: {meta['seed']}",
             f"# config: {canonical_json(cfg)}"]
    lines += [f"# {k}: {v}" for k, v in extra]
    return "\n".join(lines) + "\n" + body


def json_with_meta(cfg: dict, payload: dict) -> str:
    return json.dumps({"meta": _meta(cfg), **payload}, sort_keys=True, indent=2) + "\n"


def read_header(text: str) -> dict:
    """Metadata of a CSV written by this CLI (``config`` parsed back to a dict)."""
    meta = {}
    for line in text.splitlines():
        if not line.startswith("# "):
            break
        key, sep, value = line[2:].partition(": ")
        if sep:
            meta[key] = json.loads(value) if key == "config" else value
    return meta


def _csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _g(x) -> str:
    return dg._fmt(x)


class _Outcome:
    """Text to write plus whether any sub-run failed."""

    def __init__(self, text: str, failed: bool = False):
        self.text = text
        self.failed = failed


# ---------------------------------------------------------------------------
# commands


def _rule(cfg):
    return make_quadrature(cfg["quadrature_order"])


def cmd_extend(cfg, workers=1) -> _Outcome:
    f = parse_map(cfg["map"])
    try:
        x = BallPoint(tuple(cfg["point"]))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    res = bc.extend(f, x, _rule(cfg), tol=cfg["tol"], refine=cfg["refine"])
    payload = {"point": [float(c) for c in res.frame.ball_vector()],
               "distance": float(res.distance_from_origin),
               "residual": float(res.residual), "iterations": int(res.iterations)}
    return _Outcome(json_with_meta(cfg, payload))


def cmd_lipscan(cfg, workers=1) -> _Outcome:
    f = parse_map(cfg["map"])
    failed = False
    try:
        scan = bc.lipschitz_scan(f, cfg["samples"], cfg["seed"], _rule(cfg), workers=workers,
                                 accurate=cfg["accurate"])
    except InternalConsistencyError as exc:
        log.error("%s", exc)
        raise
    failed = scan.failures > 0
    extra = [("degree", scan.degree), ("samples", scan.samples), ("max_norm", repr(scan.max_norm)),
             ("argmax_distance", repr(scan.argmax_distance)), ("bound", repr(scan.bound)),
             ("within_bound", scan.within_bound), ("max_over_degree", repr(scan.max_norm / scan.degree)),
             ("failures", scan.failures),
             ("histogram", " ".join(str(int(c)) for c in scan.histogram))]
    return _Outcome(csv_with_header(cfg, scan.to_csv(), extra), failed)


def cmd_belt(cfg, workers=1) -> _Outcome:
    rule = _rule(cfg)
    rows, failed = [], False
    for spec in cfg["maps"]:
        f = parse_map(spec)
        label = _map_label(spec)
        try:
            g = bc.recenter(f, rule, tol=cfg["tol"]) if cfg["recenter"] else f
            vol = bc.belt_volume(g, cfg["n_azimuth"], cfg["n_grid"], rule=rule)
            eig = np.abs(bc.fy_spectrum(g, rule, tol=cfg["tol"]))
            bound = bc.belt_lower_bound(f.degree)
            rows.append([label, f.degree, _g(vol.V), _g(vol.V1), _g(vol.V2), _g(bound), _g(float(eig.min())),
                         _g(8 * math.log(3) / (27 * f.degree)), "ok"])
        except (NumericError, PreconditionError, NearDegenerateMapError) as exc:
            failed = True
            rows.append([label, f.degree] + ["nan"] * 6 + [f"failed: {type(exc).__name__}"])
    body = _csv(["map", "degree", "V", "V1", "V2", "V_bound", "min_abs_eig_Fy", "eig_bound", "status"], rows)
    return _Outcome(csv_with_header(cfg, body), failed)


def cmd_delta(cfg, workers=1) -> _Outcome:
    rule = make_quadrature(cfg["quadrature_order"], grading=cfg["grading"])
    if any(r <= 0 for r in cfg["radii"]):
        raise ConfigError("radii must be positive")
    rows = bc.delta_curve(cfg["radii"], rule, tol=min(cfg["tol"], 1e-13))
    return _Outcome(csv_with_header(cfg, bc.delta_curve_csv(rows)))


def _search(cfg):
    if not all(t > 0 for t in cfg.get("depths") or [1.0]):
        raise ConfigError("depths must be positive")
    return dg.SeedSpec(tuple(cfg.get("depths", dg.DEFAULT_DEPTHS)), cfg.get("random_seeds", 8),
                       cfg.get("random_radius", 8.0), cfg["seed"])


def cmd_preimages(cfg, workers=1) -> _Outcome:
    f = parse_map(cfg["map"])
    pre = dg.preimages_of_origin(f, _rule(cfg), _search(cfg))
    rows = []
    for j, s in enumerate(pre.solutions):
        rows.append([j, _g(s.distance)] + [_g(float(c)) for c in s.direction] + [_g(s.residual)])
    extra = [("rescale_radius", repr(dg.rescale_radius(pre))), ("seeds", pre.seed_count),
             ("failed_seeds", pre.failures), ("resultant", repr(resultant_magnitude(f)))]
    body = _csv(["index", "distance", "u1", "u2", "u3", "residual"], rows)
    return _Outcome(csv_with_header(cfg, body, extra))


def cmd_family(cfg, workers=1) -> _Outcome:
    params = [_complex(c) for c in cfg["params"]]
    try:
        fam = dg.family_from_name(cfg["family"], params)
        fam.maps()
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    rule = _rule(cfg)
    search = dg.SeedSpec(seed=cfg["seed"])
    mode = cfg["mode"]
    if mode == "indicator":
        rows = dg.degeneration_indicator(fam, rule, search)
        failed = any(r.status != "ok" for r in rows)
        return _Outcome(csv_with_header(cfg, dg.indicator_csv(rows)), failed)
    if mode == "translation":
        grid = cfg["depth_grid"]
        if any(not 0 < t <= 1 for t in grid):
            raise ConfigError("depth_grid must lie in (0, 1]")
        est = dg.translation_estimate(fam, cfg["q"], rule, grid, search)
        return _Outcome(csv_with_header(cfg, dg.translation_csv(est)))
    # snapshot: one block of rows per parameter, rescaled by its own radius
    rows, failed = [], False
    for c, f in zip(fam.params, fam.maps()):
        try:
            pre = dg.preimages_of_origin(f, rule, search)
            r = dg.rescale_radius(pre)
            C, _ = dg.dominant_cycle(f, cfg["q"])
            snap = dg.snapshot(f, r, marked=list(C.points), rule=rule, preimages=pre)
            for label, v in snap:
                rows.append([_g(complex(c)), _g(r), label] + [_g(float(x)) for x in v])
        except (NumericError, DomainError) as exc:
            failed = True
            rows.append([_g(complex(c)), "nan", f"failed: {type(exc).__name__}", "nan", "nan", "nan"])
    body = _csv(["parameter", "scale", "label", "x", "y", "z"], rows)
    return _Outcome(csv_with_header(cfg, body), failed)


def cmd_naturality(cfg, workers=1) -> _Outcome:
    if (cfg["map"] is None) == (cfg["family"] is None):
        raise ConfigError("naturality needs exactly one of 'map' or 'family'")
    if cfg["family"] is not None:
        if cfg["params"] is None:
            raise ConfigError("a family needs 'params'")
        params = [_complex(c) for c in cfg["params"]]
        fam = dg.family_from_name(cfg["family"], params)
        items = [(_g(c), f) for c, f in zip(params, fam.maps())]
    else:
        items = [(_map_label(cfg["map"]), parse_map(cfg["map"]))]
    try:
        x = BallPoint(tuple(cfg["point"]))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    rule = _rule(cfg)
    rows, failed = [], False
    for label, f in items:
        try:
            gap = dg.naturality_gap(f, cfg["N"], x, rule, tol=cfg["tol"], refine_tol=cfg["refine_tol"])
            row = [label, cfg["N"], _g(gap)]
            if cfg["with_radius"]:
                r = dg.rescale_radius(dg.preimages_of_origin(f, rule, dg.SeedSpec(seed=cfg["seed"])))
                row += [_g(r), _g(gap / r) if r > 0 else "nan"]
            rows.append(row + ["ok"])
        except NumericError as exc:
            failed = True
            rows.append([label, cfg["N"], "nan"] + (["nan", "nan"] if cfg["with_radius"] else [])
                        + [f"failed: {type(exc).__name__}"])
    header = ["map", "N", "gap"] + (["radius", "gap_over_radius"] if cfg["with_radius"] else []) + ["status"]
    return _Outcome(csv_with_header(cfg, _csv(header, rows)), failed)


def cmd_treecheck(cfg, workers=1) -> _Outcome:
    spec = cfg["tree_map"]
    data = _load_json_file(spec) if isinstance(spec, str) else spec
    try:
        f = tr.TreeMap.from_dict(data)
    except (DomainError, StructureError) as exc:
        raise ConfigError(f"invalid tree map: {exc}") from None
    report = tr.validate_branched_cover(f)
    summary = str(report)
    payload = {"valid": report.valid, "degree": report.degree, "summary": summary,
               "failures": [{"kind": k, "witness": repr(w), "detail": d} for k, w, d in report.failures]}
    if report.valid:
        payload["critical_locus"] = [p.a for p in tr.critical_locus(f)]
    print(summary, file=sys.stderr)
    return _Outcome(json_with_meta(cfg, payload))


def _snapshot_points(path, parameter):
    text = Path(path).read_text() if Path(path).exists() else None
    if text is None:
        raise ConfigError(f"cannot read snapshot {path}")
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    if not rows or not {"parameter", "scale", "label", "x", "y", "z"} <= set(rows[0]):
        raise ConfigError("snapshot CSV needs columns parameter, scale, label, x, y, z")
    params = list(dict.fromkeys(r["parameter"] for r in rows))
    chosen = params[-1] if parameter is None else parameter
    sel = [r for r in rows if r["parameter"] == chosen and not r["label"].startswith("failed")]
    if not sel:
        raise ConfigError(f"no snapshot rows for parameter {chosen!r}")
    scale = float(sel[0]["scale"])
    labels = [r["label"] for r in sel]
    V = np.array([[float(r[k]) for k in "xyz"] for r in sel])
    return labels, tr.hyperbolic_distances(V, scale)


def cmd_fit_tree(cfg, workers=1) -> _Outcome:
    if cfg["snapshot"] is not None:
        labels, D = _snapshot_points(cfg["snapshot"], cfg["parameter"])
    elif cfg["labels"] is not None and cfg["distances"] is not None:
        labels, D = cfg["labels"], np.array(cfg["distances"], dtype=float)
        if D.shape != (len(labels), len(labels)):
            raise ConfigError("distances must be a square matrix matching labels")
    else:
        raise ConfigError("fit-tree needs 'snapshot' or 'labels' with 'distances'")
    try:
        fit = tr.fit_tree(labels, D, cfg["fit_tol"])
    except (DomainError, StructureError) as exc:
        raise ConfigError(f"cannot fit: {exc}") from None
    payload = {"tree": fit.tree.to_dict(), "placement": fit.placement, "distortion": fit.distortion,
               "ok": fit.ok, "worst_quadruple": list(fit.worst_quadruple) if fit.worst_quadruple else None}
    return _Outcome(json_with_meta(cfg, payload), not fit.ok)


COMMANDS = {"extend": cmd_extend, "lipscan": cmd_lipscan, "belt": cmd_belt, "delta": cmd_delta,
            "preimages": cmd_preimages, "family": cmd_family, "naturality": cmd_naturality,
            "treecheck": cmd_treecheck, "fit-tree": cmd_fit_tree}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="barytree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--quadrature-order", type=int, dest="quadrature_order",
                       help="quadrature order (overrides the config)")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--workers", type=int, default=1, help="worker processes for scans")
    return parser


def _setup_logging():
    level = os.environ.get("BARYTREE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        raw = {}
        if args.config:
            raw = _load_json_file(args.config)
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        cfg = resolve_config(args.command, raw, {"seed": args.seed, "quadrature_order": args.quadrature_order})
        outcome = COMMANDS[args.command](cfg, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, NearDegenerateMapError, InternalConsistencyError, DomainError, StructureError,
            PreconditionError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BarytreeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.out:
        Path(args.out).write_text(outcome.text)
    else:
        sys.stdout.write(outcome.text)
    if outcome.failed:
        print("some sub-runs failed; see the status column", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
