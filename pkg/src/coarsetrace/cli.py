"""Batch experiment runner.

Reads a JSON experiment config, executes the requested command (flow, pair,
verify, sweep), and emits machine-readable reports.  Flags override config
fields; environment variables override nothing.  Reports embed the fully
resolved config and the library version and contain no timestamps, so they
are byte-for-byte reproducible for a fixed (config, seed).

Exit codes: 0 success, 2 schema, 3 certificate/window, 4 unbounded-support,
5 tolerance breach, 6 indeterminate rounding.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .cohomology import verify_equipartition, verify_sum_rule
from .errors import (ConfigError, CoarseTraceError, IndeterminateRoundingError,
                     UnboundedSupportError, WindowTooSmallError)
from .models import (HofstadterSpec, chern_oracle, conjugate_idempotent,
                     conjugate_invertible, deform_partition,
                     hofstadter_projection, random_local_idempotent,
                     random_local_invertible, shift_unitary, shifted_walk,
                     split_step_walk)
from .pairings import (flow, kitaev_idempotent, kitaev_invertible,
                       kubo_idempotent, kubo_invertible)
from .space import (Box, HalfSpace, Partition, partition_from_doc,
                    partition_from_halfspaces, region_from_doc,
                    sector_partition, standard_halfspaces, standard_partition)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_CERTIFICATE = 3
EXIT_UNBOUNDED = 4
EXIT_TOLERANCE = 5
EXIT_INDETERMINATE = 6

_COMMANDS = ("flow", "pair", "verify", "sweep")
_IDENTITIES = ("sum_rule", "equipartition", "kubo_kitaev_factor",
               "deformation", "conjugation", "formula_equivalence")


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _build_model(doc: dict, seed_override=None):
    """Returns (unitized_operator, kind, report) with kind in {idempotent, invertible}."""
    _require(isinstance(doc, dict) and "model" in doc, "config.model must name a model")
    name = doc["model"]
    if name == "shift":
        _require("power" in doc, "shift model needs 'power'")
        return shift_unitary(int(doc["power"])), "invertible", {}
    if name == "split_step":
        return split_step_walk(float(doc.get("theta1", 0.0)),
                               float(doc.get("theta2", 0.0))), "invertible", {}
    if name == "shifted_walk":
        return shifted_walk(int(doc.get("power", 1)), float(doc.get("theta1", 0.0)),
                            float(doc.get("theta2", 0.0))), "invertible", {}
    if name == "hofstadter":
        spec = HofstadterSpec.parse(doc)
        op, report = hofstadter_projection(spec)
        return op, "idempotent", report
    seed = int(doc.get("seed", 0)) if seed_override is None else int(seed_override)
    if name == "random_idempotent":
        op = random_local_idempotent(seed, int(doc.get("radius", 2)),
                                     int(doc.get("block_dim", 1)),
                                     int(doc.get("dimension", 2)),
                                     int(doc.get("scalar_rank", 0)))
        return op, "idempotent", {}
    if name == "random_invertible":
        op = random_local_invertible(seed, int(doc.get("radius", 2)),
                                     int(doc.get("block_dim", 1)),
                                     int(doc.get("dimension", 1)),
                                     doc.get("shift_power"))
        return op, "invertible", {}
    raise ConfigError(f"unknown model {name!r}")


def _build_geometry(doc: dict):
    """Returns (halfspaces or None, partition or None)."""
    _require(isinstance(doc, dict) and "type" in doc, "config.geometry must have a type")
    t = doc["type"]
    if t == "standard_halfspaces":
        return standard_halfspaces(int(doc["d"])), None
    if t == "standard_partition":
        return None, standard_partition(int(doc["d"]))
    if t == "halfspaces":
        return [region_from_doc(r) for r in doc["regions"]], None
    if t == "partition":
        return None, partition_from_doc(doc["parts"])
    if t == "sector_partition":
        return None, sector_partition(doc["angles"], tuple(doc.get("center", (0, 0))))
    raise ConfigError(f"unknown geometry type {t!r}")


def _resolve_config(args) -> dict:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    _require(isinstance(cfg, dict), "config must be a JSON object")
    _require(cfg.get("command") in _COMMANDS,
             f"config.command must be one of {_COMMANDS}")
    if args.tolerance is not None:
        cfg["tolerance"] = args.tolerance
    if args.window is not None:
        cfg["window"] = args.window
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("tolerance", 1e-8)
    cfg.setdefault("window", 64)
    cfg.setdefault("threads", 1)
    cfg.setdefault("seed", 0)
    return cfg


def _window_box(cfg, d) -> Box:
    return Box.cube(d, int(cfg["window"]))


def _pair_once(cfg, op, kind, halfspaces, partition, window):
    flavor = cfg.get("flavor", "kubo" if halfspaces is not None else "kitaev")
    _require(flavor in ("kubo", "kitaev"), "flavor must be 'kubo' or 'kitaev'")
    if flavor == "kubo":
        _require(halfspaces is not None, "kubo pairing needs half-space geometry")
        fn = kubo_idempotent if kind == "idempotent" else kubo_invertible
        return fn(op, halfspaces, window=window)
    _require(partition is not None, "kitaev pairing needs partition geometry")
    fn = kitaev_idempotent if kind == "idempotent" else kitaev_invertible
    return fn(op, partition, window=window)


def run_flow(cfg: dict) -> tuple:
    op, kind, model_report = _build_model(cfg.get("model", {}), cfg.get("seed"))
    _require(kind == "invertible", "flow needs an invertible 1D model")
    _require(op.space.d == 1, "flow is defined on Z only")
    rep = flow(op)
    kubo = kubo_invertible(op, [HalfSpace(1, 0, 0, "geq")], validate=False)
    defect = max(rep.defect, abs(kubo.value - rep.value))
    result = {"flow": rep.value, "integer": rep.integer_candidate,
              "kubo": [kubo.value.real, kubo.value.imag], "defect": defect,
              "model_report": model_report}
    code = EXIT_OK if defect <= cfg["tolerance"] else EXIT_TOLERANCE
    return result, code


def run_pair(cfg: dict) -> tuple:
    op, kind, model_report = _build_model(cfg.get("model", {}), cfg.get("seed"))
    halfspaces, partition = _build_geometry(cfg.get("geometry", {}))
    window = _window_box(cfg, op.space.d)
    report = _pair_once(cfg, op, kind, halfspaces, partition, window)
    result = report.to_doc()
    result["model_report"] = model_report
    if cfg.get("model", {}).get("model") == "hofstadter" \
            and cfg.get("oracle", "chern") == "chern":
        spec = cfg["model"]
        oracle = chern_oracle(Fraction(str(spec["flux"])), int(spec.get("gap", 1)),
                              int(spec.get("kgrid", 48)))
        result["oracle_integer"] = oracle
        if report.integer_candidate != oracle:
            return result, EXIT_TOLERANCE
    if report.indeterminate:
        return result, EXIT_INDETERMINATE
    code = EXIT_OK if report.defect <= cfg["tolerance"] else EXIT_TOLERANCE
    return result, code


def _identity_verdicts(cfg, op, kind, halfspaces, partition, window):
    import math

    suite = cfg.get("suite", list(_IDENTITIES))
    tol = cfg["tolerance"]
    verdicts = []
    n = len(halfspaces) if halfspaces is not None else partition.n
    rng = np.random.default_rng(int(cfg["seed"]))

    def pairing_with_partition(part):
        if kind == "idempotent":
            return kitaev_idempotent(op, part, window=window, validate=False)
        return kitaev_invertible(op, part, window=window, validate=False)

    for name in suite:
        if name not in _IDENTITIES:
            raise ConfigError(f"unknown identity {name!r}")
        if name == "sum_rule" and halfspaces is not None:
            verdicts.append(verify_sum_rule(op, halfspaces, window=window,
                                            validate=False))
        elif name == "equipartition" and halfspaces is not None and n >= 2:
            sigma = list(range(n))
            sigma[0], sigma[1] = sigma[1], sigma[0]
            verdicts.append(verify_equipartition(op, halfspaces, sigma,
                                                 window=window, validate=False))
        elif name == "kubo_kitaev_factor" and halfspaces is not None:
            if kind == "idempotent":
                ku = kubo_idempotent(op, halfspaces, window=window, validate=False)
            else:
                ku = kubo_invertible(op, halfspaces, window=window, validate=False)
            ki = pairing_with_partition(partition_from_halfspaces(halfspaces))
            factor = (-1) ** n * math.factorial(n)
            delta = abs(ku.value - factor * ki.value)
            bound = max(tol, 3 * (ku.error_bound + ki.error_bound))
            verdicts.append({"identity": "kubo_kitaev_factor", "factor": factor,
                             "delta": delta, "tolerance": bound,
                             "passed": bool(delta <= bound)})
        elif name == "deformation":
            part = partition if partition is not None else \
                partition_from_halfspaces(halfspaces)
            sites = rng.integers(-4, 5, size=(10, op.space.d))
            deformed = deform_partition(part, sites, target=0)
            before = pairing_with_partition(part)
            after = pairing_with_partition(deformed)
            verdicts.append({"identity": "deformation",
                             "before": before.integer_candidate,
                             "after": after.integer_candidate,
                             "passed": bool(before.integer_candidate ==
                                            after.integer_candidate)})
        elif name == "conjugation":
            box = _window_box(cfg, op.space.d)
            V = random_local_invertible(int(cfg["seed"]) + 17, 2, op.k,
                                        op.space.d, shift_power=0)
            conj = conjugate_idempotent(op, V, box) if kind == "idempotent" \
                else conjugate_invertible(op, V, box)
            part = partition if partition is not None else \
                partition_from_halfspaces(halfspaces)
            before = pairing_with_partition(part)
            after = kitaev_idempotent(conj, part, window=window, validate=False) \
                if kind == "idempotent" else \
                kitaev_invertible(conj, part, window=window, validate=False)
            verdicts.append({"identity": "conjugation",
                             "before": before.integer_candidate,
                             "after": after.integer_candidate,
                             "passed": bool(before.integer_candidate ==
                                            after.integer_candidate)})
        elif name == "formula_equivalence" and kind == "invertible" \
                and halfspaces is not None and n % 2 == 1:
            rep = kubo_invertible(op, halfspaces, window=window, validate=False,
                                  crosscheck=True)
            delta = abs(rep.extras["commutator_form"] - rep.extras["uminus_form"])
            bound = 1e-10 + 2 * rep.error_bound
            verdicts.append({"identity": "formula_equivalence", "delta": delta,
                             "tolerance": bound, "passed": bool(delta <= bound)})
    return verdicts


def run_verify(cfg: dict) -> tuple:
    op, kind, model_report = _build_model(cfg.get("model", {}), cfg.get("seed"))
    halfspaces, partition = _build_geometry(cfg.get("geometry", {}))
    window = _window_box(cfg, op.space.d)
    verdicts = _identity_verdicts(cfg, op, kind, halfspaces, partition, window)
    result = {"identities": verdicts, "model_report": model_report,
              "all_passed": all(v["passed"] for v in verdicts)}
    return result, EXIT_OK if result["all_passed"] else EXIT_TOLERANCE


def run_sweep(cfg: dict) -> tuple:
    axis = cfg.get("sweep", {}).get("axis")
    values = cfg.get("sweep", {}).get("values")
    _require(axis in ("truncation_radius", "kgrid", "window"),
             "sweep.axis must be truncation_radius | kgrid | window")
    _require(isinstance(values, list) and values, "sweep.values must be a nonempty list")
    rows = []
    for v in values:
        sub = json.loads(json.dumps(cfg))
        if axis == "window":
            sub["window"] = int(v)
        else:
            sub["model"][axis] = int(v)
        result, _ = run_pair(sub)
        rows.append({"axis": axis, "value": int(v), "defect": result["defect"],
                     "integer": result["integer"],
                     "error_bound": result["error_bound"]})
    defects = [r["defect"] for r in rows]
    summary = {"monotone_nonincreasing": all(b <= a + 1e-12 for a, b in
                                             zip(defects, defects[1:])),
               "first": defects[0], "last": defects[-1]}
    return {"rows": rows, "summary": summary}, EXIT_OK


def _emit(cfg: dict, command: str, result: dict, out_path):
    doc = {"version": __version__, "command": command, "config": cfg,
           "result": result}
    text = json.dumps(doc, sort_keys=True, indent=2, default=float) + "\n"
    if out_path:
        Path(out_path).write_text(text)
        if command == "sweep":
            csv_path = Path(out_path).with_suffix(".csv")
            with open(csv_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(result["rows"][0]))
                writer.writeheader()
                writer.writerows(result["rows"])
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="coarsetrace",
        description="Quantized trace pairings of finite-propagation lattice operators")
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--out", default=None, help="report output path")
    parser.add_argument("--tolerance", type=float, default=None)
    parser.add_argument("--window", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        _kernels.set_threads(int(cfg["threads"]))
        runner = {"flow": run_flow, "pair": run_pair, "verify": run_verify,
                  "sweep": run_sweep}[cfg["command"]]
        result, code = runner(cfg)
        _emit(cfg, cfg["command"], result, cfg.get("out"))
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except WindowTooSmallError as exc:
        print(f"window/certificate error: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except UnboundedSupportError as exc:
        print(f"unbounded support: {exc}", file=sys.stderr)
        return EXIT_UNBOUNDED
    except IndeterminateRoundingError as exc:
        print(f"indeterminate rounding: {exc}", file=sys.stderr)
        return EXIT_INDETERMINATE
    except CoarseTraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE


if __name__ == "__main__":
    sys.exit(main())
