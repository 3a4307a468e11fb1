"""Command-line entry point: ``rpr3 {ik,fk,analyze,path}``.

Exit codes are 0 on success, 1 on usage errors and 2 on numeric or stage
faults.  Every command is deterministic given its arguments; ``analyze``
writes a manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import pickle
import sys
from pathlib import Path

import numpy as np

import rpr3
from rpr3 import analysis as an
from rpr3 import manipulator as mk
from rpr3 import octree as ot
from rpr3 import paths as pt

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2
BUNDLE_FILE = "bundle.pkl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump(obj, fh=None):
    fh = fh or sys.stdout
    fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _geometry(args) -> mk.ManipulatorGeometry:
    try:
        return mk.load_geometry(args.geometry)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load geometry: {exc}") from exc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------- ik / fk --

def cmd_ik(args) -> int:
    g = _geometry(args)
    X = mk.Pose(*args.pose)
    rho = mk.ik_array(g, X.as_array())
    _dump({"pose": list(args.pose), "rho": rho.tolist(),
           "within_limits": bool(mk.limits_mask(g, rho)),
           "det_a": float(mk.det_a(g, X.as_array()))})
    return EXIT_OK


def fk_rows(g, q: mk.JointVector) -> list:
    rows = []
    for p in mk.forward_kinematics(g, q):
        r = mk.residual(g, p, q)
        rows.append({"x": p.x, "y": p.y, "phi": p.phi,
                     "residual": float(np.max(np.abs(r))),
                     "sign_det_a": int(np.sign(mk.det_a(g, p.as_array())))})
    return rows


def cmd_fk(args) -> int:
    g = _geometry(args)
    if any(not math.isfinite(r) or r <= 0 for r in args.rho):
        raise UsageError("leg lengths must be positive and finite")
    _dump(fk_rows(g, mk.JointVector(tuple(args.rho))))
    return EXIT_OK


# --------------------------------------------------------------- analyze --

def config_from_args(args) -> an.AnalysisConfig:
    kw = {"max_depth": args.depth, "seed": args.seed}
    if args.workspace_box:
        x0, x1, y0, y1 = args.workspace_box
        kw["workspace_box"] = ot.Box3((x0, y0, -math.pi), (x1, y1, math.pi))
    if args.joint_box:
        lo, hi = args.joint_box
        kw["joint_box"] = ot.Box3((lo,) * 3, (hi,) * 3)
    try:
        return an.AnalysisConfig(**kw)
    except (ValueError, ot.OctreeError) as exc:
        raise UsageError(str(exc)) from exc


def _write_points(path, centers, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c0", "c1", "c2", "label"])
        for c, lab in zip(centers.tolist(), labels.tolist()):
            w.writerow([f"{c[0]:.9g}", f"{c[1]:.9g}", f"{c[2]:.9g}", lab])


def export_set(out: Path, name: str, obj):
    """Write ``obj`` (Octree or RegionSet) as ``name.oct``/``name.rgn`` + ``name.csv``."""
    if isinstance(obj, ot.RegionSet):
        ot.save(out / f"{name}.rgn", obj)
        fl = obj.labeled.full_leaves()
        _write_points(out / f"{name}.csv", fl.centers(obj.labeled.bounds), fl.value - 1)
    else:
        ot.save(out / f"{name}.oct", obj)
        fl = obj.full_leaves()
        _write_points(out / f"{name}.csv", fl.centers(obj.bounds), np.zeros(len(fl), int))


def export_bundle(bundle: an.AnalysisBundle, out: Path) -> list:
    sets = [("W", bundle.W), ("Q", bundle.Q), ("S", bundle.S), ("aspects", bundle.aspects),
            ("basic_regions", bundle.basic_regions),
            ("uniqueness_domains", bundle.uniqueness_domains),
            ("multiplicity", bundle.multiplicity)]
    sets += [(f"Sc_{a}", s) for a, s in enumerate(bundle.Sc)]
    sets += [(f"basic_component_{r}", t) for r, t in enumerate(bundle.basic_components)]
    for name, obj in sets:
        export_set(out, name, obj)
    return [name for name, _ in sets]


def cmd_analyze(args) -> int:
    g = _geometry(args)
    cfg = config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        bundle = an.analyze(g, cfg)
    except Exception as exc:  # any stage failure is a fault, not a usage error
        print(f"analyze: stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT
    names = export_bundle(bundle, out)
    summary = bundle.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    bundle.timings = {}
    with open(out / BUNDLE_FILE, "wb") as fh:
        pickle.dump(bundle, fh, protocol=4)
    inputs = {}
    if args.geometry:
        inputs[str(args.geometry)] = _sha256(args.geometry)
    manifest = {"command": "analyze", "argv": _argv_for_manifest(args),
                "geometry": str(args.geometry) if args.geometry else None,
                "geometry_params": g.to_dict(), "config": cfg.to_dict(),
                "output_dir": str(out), "version": rpr3.__version__,
                "input_sha256": inputs, "sets": names}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _dump({k: summary[k] for k in ("aspects", "basic_regions", "coincidence_class_sizes",
                                   "uniqueness_domains")}
          | {"faults": len(summary["faults"]), "out": str(out)})
    return EXIT_OK


def _argv_for_manifest(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def load_bundle(directory) -> an.AnalysisBundle:
    """Bundle cached by ``analyze`` (a local, trusted pickle)."""
    path = Path(directory) / BUNDLE_FILE
    if not path.exists():
        raise UsageError(f"no {BUNDLE_FILE} in {directory}; run analyze first")
    with open(path, "rb") as fh:
        return pickle.load(fh)


# ------------------------------------------------------------------ path --

def cmd_path(args) -> int:
    g = _geometry(args)
    try:
        path = pt.read_path_csv(args.csv, args.step)
        path.check_limits(g)
    except (OSError, pt.PathError) as exc:
        raise UsageError(str(exc)) from exc
    if args.start is not None:
        start = mk.Pose(*args.start)
    else:
        sols = mk.forward_kinematics(g, mk.JointVector(path.waypoints[0]))
        if not 0 <= args.start_index < len(sols):
            raise UsageError(f"start index {args.start_index} out of range "
                             f"({len(sols)} FK solutions)")
        start = sols[args.start_index]
    try:
        report = pt.continue_path(g, path, start)
    except pt.PathError as exc:
        raise UsageError(str(exc)) from exc
    classification = None
    if args.bundle and report.ok:
        try:
            classification = pt.classify_mode_change(report, load_bundle(args.bundle))
        except pt.PathError as exc:
            print(f"path: {exc}", file=sys.stderr)
            return EXIT_FAULT
    doc = report.to_dict()
    if not args.trace:
        doc.pop("trace")
    if classification is not None:
        doc["classification"] = classification.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        _dump(doc)
    if not report.ok:
        print(f"path: continuation failed at t = {report.failed_at:.6g}: {report.message}",
              file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


# ---------------------------------------------------------------- parser --

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--geometry", help="geometry JSON (default: reference robot)")
    p = _Parser(prog="rpr3", description="3-RPR assembly-mode analysis")
    p.add_argument("--version", action="version", version=rpr3.__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ik", parents=[common], help="inverse kinematics of one pose")
    s.add_argument("--pose", nargs=3, type=float, required=True, metavar=("X", "Y", "PHI"))
    s.set_defaults(func=cmd_ik)

    s = sub.add_parser("fk", parents=[common], help="all forward-kinematics solutions")
    s.add_argument("--rho", nargs=3, type=float, required=True, metavar=("R1", "R2", "R3"))
    s.set_defaults(func=cmd_fk)

    s = sub.add_parser("analyze", parents=[common], help="run the set pipeline and export")
    s.add_argument("--depth", type=int, default=7)
    s.add_argument("--out", required=True)
    s.add_argument("--workspace-box", nargs=4, type=float, metavar=("X0", "X1", "Y0", "Y1"))
    s.add_argument("--joint-box", nargs=2, type=float, metavar=("LO", "HI"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("path", parents=[common], help="continue an FK solution along a path")
    s.add_argument("csv", help="waypoints, one 'rho1,rho2,rho3' row each")
    grp = s.add_mutually_exclusive_group()
    grp.add_argument("--start", nargs=3, type=float, metavar=("X", "Y", "PHI"))
    grp.add_argument("--start-index", type=int, default=0,
                     help="index into the sorted FK solutions of the first waypoint")
    s.add_argument("--step", type=float, default=0.05)
    s.add_argument("--bundle", help="directory written by analyze")
    s.add_argument("--out", help="report JSON (default: stdout)")
    s.add_argument("--trace", action="store_true", help="include the per-step trace")
    s.set_defaults(func=cmd_path)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rpr3 {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"rpr3 {args.command}: numeric fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
