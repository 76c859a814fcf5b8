"""Command-line interface: ``cycreg <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
(divergence, or a gradient self-check breach).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from cycreg import __version__
from cycreg.errors import DataError, DivergenceError
from cycreg.field import (jacobian_stats, load_field, save_field, warp, warp_array)
from cycreg.losses import REG_MODES, SIM_MODES
from cycreg.metrics import dumps17, evaluate, tre
from cycreg.volume import (LandmarkSet, Volume3D, _paths, crop, load_landmarks, load_volume,
                           normalize_max, save_landmarks, save_volume, zero_pad_centered)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TRACE_COLUMNS = ("iteration", "regist_ab", "regist_ba", "cycle", "identity", "total")

log = logging.getLogger("cycreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- argument parsing helpers --------------------------------------------------

def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")] if text else []
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _pyramid(text):
    """``4x4x4,2x2x2,1x1x1`` -> [[4, 4, 4], [2, 2, 2], [1, 1, 1]]."""
    try:
        levels = [[int(f) for f in level.split("x")] for level in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected levels like 4x4x4,2x2x2,1x1x1, got {text!r}")
    if any(len(level) != 3 for level in levels):
        raise argparse.ArgumentTypeError("each pyramid level needs three factors")
    return levels


def _crop_bounds(text):
    """``x0:x1,y0:y1,z0:z1`` -> [(x0, x1), (y0, y1), (z0, z1)]."""
    try:
        bounds = [tuple(int(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x0:x1,y0:y1,z0:z1, got {text!r}")
    if len(bounds) != 3 or any(len(b) != 2 for b in bounds):
        raise argparse.ArgumentTypeError(f"expected x0:x1,y0:y1,z0:z1, got {text!r}")
    return bounds


def _named_params(text):
    """``name:p1,p2`` -> (name, [p1, p2])."""
    name, _, params = text.partition(":")
    return name, _float_list(params)


def _threads(value):
    if value is None:
        value = os.environ.get("CYCREG_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


# --- shared I/O -------------------------------------------------------------------

def _header_of(path) -> dict:
    return json.loads(_paths(path)[0].read_text())


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps17(obj))
    return path


def write_trace_csv(path, trace) -> Path:
    """One row per optimizer step; floats at full precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i, b in enumerate(trace):
            w.writerow([i, *(repr(float(getattr(b, k))) for k in TRACE_COLUMNS[1:])])
    return path


def _container_files(stem):
    return [str(p) for p in _paths(stem)]


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(command, config, inputs, outputs, started, **extra):
    body = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }
    body.update(extra)
    return body


def _shift_landmarks(points: LandmarkSet, before: Volume3D, after: Volume3D) -> LandmarkSet:
    """Re-express voxel landmarks after a crop or pad moved the grid origin."""
    shift = (np.asarray(before.origin_mm) - np.asarray(after.origin_mm)) \
        / np.asarray(after.spacing_mm)
    return LandmarkSet(tuple((i, tuple(np.asarray(p) + shift)) for i, p in points.entries))


# --- register -----------------------------------------------------------------------

def _solver_config(args):
    from cycreg.solver import SolverConfig

    cfg = SolverConfig()
    if args.config:
        try:
            cfg = SolverConfig.from_dict(json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise DataError(f"missing config file {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {args.config}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from None
    try:
        return cfg.with_overrides(**{
            "lambda": args.lam, "alpha": args.alpha, "beta": args.beta,
            "learning_rate": args.learning_rate,
            "iterations_per_level": args.iterations,
            "pyramid_factors": args.pyramid,
            "sim_mode": args.sim_mode, "reg_mode": args.reg_mode,
            "gradient_sigma": args.gradient_sigma, "pyramid_sigma": args.pyramid_sigma,
            "seed": args.seed,
        })
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid solver option: {exc}") from None


def _preprocess(v: Volume3D, args) -> Volume3D:
    if args.crop:
        v = crop(v, args.crop)
    if args.pad_z:
        v = zero_pad_centered(v, args.pad_z)
    if args.normalize:
        v = normalize_max(v)
    return v


def cmd_register(args) -> int:
    from cycreg.plotting import plot_jacobian, plot_loss_trace, plot_slices
    from cycreg.solver import register_pair, register_self

    started = _now()
    cfg = _solver_config(args)
    if bool(args.fixed_landmarks) != bool(args.moving_landmarks):
        raise UsageError("--fixed-landmarks and --moving-landmarks must be given together")
    if not args.self_ and not args.fixed:
        raise UsageError("--fixed is required unless --self is given")
    raw_a = load_volume(args.moving)
    raw_b = raw_a if args.self_ else load_volume(args.fixed)
    a, b = _preprocess(raw_a, args), _preprocess(raw_b, args)
    landmarks = None
    if args.fixed_landmarks:
        landmarks = (_shift_landmarks(load_landmarks(args.fixed_landmarks), raw_b, b),
                     _shift_landmarks(load_landmarks(args.moving_landmarks), raw_a, a))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    try:
        result = register_self(a, cfg) if args.self_ else register_pair(a, b, cfg)
    except DivergenceError as exc:
        write_trace_csv(out / "loss_trace.csv", exc.trace)
        raise

    outputs = []
    for name, f in (("phi_ab", result.phi_ab), ("phi_ba", result.phi_ba)):
        save_field(f, out / name, a.spacing_mm, a.origin_mm)
        outputs += _container_files(out / name)
    warped_ab = warp(a, result.phi_ab)
    warped_ba = warp(b, result.phi_ba)
    for name, v in (("warped_ab", warped_ab), ("warped_ba", warped_ba)):
        save_volume(v, out / name)
        outputs += _container_files(out / name)
    outputs.append(str(write_trace_csv(out / "loss_trace.csv", result.loss_trace)))
    report = evaluate(a, b, result, landmarks)
    outputs.append(str(_write_json(out / "report.json", report.as_dict())))
    if not args.no_figures:
        det = np.asarray(jacobian_stats(result.phi_ab).det_volume)
        outputs.append(str(plot_loss_trace(result.loss_trace, out / "loss_trace.png",
                                           result.level_of_iteration)))
        outputs.append(str(plot_slices(a, b, warped_ab, out / "slices.png")))
        outputs.append(str(plot_jacobian(det, out / "jacobian.png")))

    inputs = {"moving": str(args.moving), "fixed": str(args.moving if args.self_ else args.fixed)}
    if landmarks is not None:
        inputs.update(fixed_landmarks=str(args.fixed_landmarks),
                      moving_landmarks=str(args.moving_landmarks))
    manifest_path = out / "manifest.json"
    outputs.append(str(manifest_path))
    _write_json(manifest_path, _manifest(
        "register", cfg.to_dict(), inputs, outputs, started, threads=args.threads_n,
        initial_loss=result.initial_loss.as_dict(), final_loss=result.final_loss.as_dict()))
    print(report.to_json(), end="")
    return EXIT_OK


# --- other subcommands -------------------------------------------------------------

def cmd_warp(args) -> int:
    started = _now()
    moving = load_volume(args.moving)
    field = load_field(args.field)
    if moving.dims != field.dims:
        raise DataError(f"dims mismatch: volume {list(moving.dims)} vs field {list(field.dims)}")
    warped = moving.with_data(warp_array(moving.data, field.vectors))
    files = [str(p) for p in save_volume(warped, args.out)]
    if args.manifest:
        _write_json(args.manifest, _manifest(
            "warp", None, {"moving": str(args.moving), "field": str(args.field)}, files,
            started))
    return EXIT_OK


def cmd_jacobian(args) -> int:
    from cycreg.plotting import plot_jacobian

    field = load_field(args.field)
    header = _header_of(args.field)
    stats = jacobian_stats(field, header.get("spacing_mm", (1.0, 1.0, 1.0)))
    det = stats.det_volume
    summary = {
        "folding_percent": 100.0 * stats.nonpositive_fraction,
        "nonpositive_fraction": stats.nonpositive_fraction,
        "det_min": float(det.data.min()),
        "det_max": float(det.data.max()),
        "det_mean": float(det.data.mean()),
    }
    if args.out:
        out = Path(args.out)
        save_volume(det, out / "jacobian_det")
        _write_json(out / "jacobian.json", summary)
        if not args.no_figures:
            plot_jacobian(det.data, out / "jacobian.png")
    print(dumps17(summary), end="")
    return EXIT_OK


def cmd_tre(args) -> int:
    field = load_field(args.field)
    spacing = args.spacing or _header_of(args.field).get("spacing_mm", (1.0, 1.0, 1.0))
    fixed = load_landmarks(args.fixed_landmarks)
    moving = load_landmarks(args.moving_landmarks)
    mean, per = tre(fixed, moving, field, spacing)
    body = {"tre_mm": mean,
            "per_landmark_tre_mm": dict(zip(sorted(fixed.as_dict()), per)),
            "spacing_mm": [float(s) for s in spacing]}
    if args.out:
        _write_json(args.out, body)
    print(dumps17(body), end="")
    return EXIT_OK


def cmd_phantom(args) -> int:
    from cycreg.phantom import PhantomSpec, generate, synthetic_landmarks

    started = _now()
    spec = PhantomSpec(dims=tuple(args.dims), kind=args.kind,
                       deformation=_named_params(args.deformation),
                       contrast=_named_params(args.contrast), seed=args.seed,
                       spacing_mm=tuple(args.spacing), taper_vox=args.taper)
    moving, fixed, truth = generate(spec)
    out = Path(args.out)
    paths = {
        "moving": _container_files(out / "moving"),
        "fixed": _container_files(out / "fixed"),
        "truth": _container_files(out / "phi_truth"),
    }
    save_volume(moving, out / "moving")
    save_volume(fixed, out / "fixed")
    save_field(truth, out / "phi_truth", spec.spacing_mm)
    if args.landmarks:
        fixed_pts, moving_pts = synthetic_landmarks(spec, args.landmarks, args.landmark_margin)
        paths["fixed_landmarks"] = str(save_landmarks(fixed_pts, out / "landmarks_fixed.csv"))
        paths["moving_landmarks"] = str(save_landmarks(moving_pts, out / "landmarks_moving.csv"))
    _write_json(out / "truth.json", {"paths": paths, "spec": spec.as_dict(), "seed": spec.seed,
                                     "tool_version": __version__, "created_at": started})
    print(out / "truth.json")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from cycreg.gradcheck import GRAD_TOL, run_gradient_suite

    t0 = time.perf_counter()
    results = run_gradient_suite(args.instances, args.coords, args.seed)
    elapsed = time.perf_counter() - t0
    for i, r in enumerate(results):
        status = "ok" if r.ok else "FAIL"
        print(f"instance {i:2d} dims {r.dims} {r.sim_mode:10s} {r.reg_mode:9s} "
              f"max rel err {r.max_rel_error:.3e} {status}")
    worst = max(r.max_rel_error for r in results)
    ok = all(r.ok for r in results)
    print(f"selfcheck: {len(results)} instances, worst {worst:.3e} (tol {GRAD_TOL:g}), "
          f"{elapsed:.1f} s: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cycreg", description=(
        "Cycle-consistent deformable registration of 3D volumes. "
        "Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure."))
    p.add_argument("--version", action="version", version=f"cycreg {__version__}")
    p.add_argument("--threads", default=None,
                   help="cap on internal numeric threads (default: $CYCREG_THREADS or 1; "
                        "1 keeps runs bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("register", help="register a moving volume to a fixed volume",
                       description="Jointly optimize phi_ab and phi_ba and write fields, "
                                   "warped volumes, loss_trace.csv, report.json, "
                                   "manifest.json and PNG figures to --out.")
    r.add_argument("--moving", required=True, help="moving volume container (A)")
    r.add_argument("--fixed", help="fixed volume container (B); not needed with --self")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--self", dest="self_", action="store_true",
                   help="self-registration of --moving with the identity loss active")
    r.add_argument("--config", help="solver config JSON with SolverConfig field names")
    r.add_argument("--sim-mode", choices=SIM_MODES, help="cross-correlation denominator form")
    r.add_argument("--reg-mode", choices=REG_MODES, help="regularizer on phi or on grad phi")
    r.add_argument("--lambda", dest="lam", type=float, help="regularizer weight")
    r.add_argument("--alpha", type=float, help="cycle loss weight")
    r.add_argument("--beta", type=float, help="identity loss weight (self mode)")
    r.add_argument("--learning-rate", type=float, help="Adam step size")
    r.add_argument("--iterations", type=_int_list,
                   help="iterations per pyramid level, coarse to fine, e.g. 100,100,50")
    r.add_argument("--pyramid", type=_pyramid,
                   help="pyramid factors, coarse to fine, e.g. 4x4x4,2x2x2,1x1x1")
    r.add_argument("--gradient-sigma", type=float,
                   help="Gaussian sigma (voxels) applied to field gradients; 0 disables")
    r.add_argument("--pyramid-sigma", type=float,
                   help="anti-alias sigma per unit downsampling factor; 0 disables")
    r.add_argument("--seed", type=int, help="solver seed recorded in the config")
    r.add_argument("--crop", type=_crop_bounds,
                   help="crop both volumes to half-open bounds x0:x1,y0:y1,z0:z1")
    r.add_argument("--pad-z", type=int, help="zero-pad both volumes to this many z slices")
    r.add_argument("--normalize", action="store_true", help="divide each volume by its max")
    r.add_argument("--fixed-landmarks", help="CSV id,x,y,z of landmarks in the fixed volume")
    r.add_argument("--moving-landmarks", help="CSV id,x,y,z of matching moving landmarks")
    r.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    r.set_defaults(func=cmd_register)

    w = sub.add_parser("warp", help="apply a stored field to a volume")
    w.add_argument("--moving", required=True, help="volume container to resample")
    w.add_argument("--field", required=True, help="displacement field container")
    w.add_argument("--out", required=True, help="output volume container stem")
    w.add_argument("--manifest", help="optional manifest JSON path")
    w.set_defaults(func=cmd_warp)

    j = sub.add_parser("jacobian", help="Jacobian determinant and folding percentage")
    j.add_argument("--field", required=True, help="displacement field container")
    j.add_argument("--out", help="directory for jacobian_det, jacobian.json and jacobian.png")
    j.add_argument("--no-figures", action="store_true", help="skip the PNG figure")
    j.set_defaults(func=cmd_jacobian)

    t = sub.add_parser("tre", help="target registration error of landmark pairs")
    t.add_argument("--field", required=True, help="field mapping fixed to moving grid points")
    t.add_argument("--fixed-landmarks", required=True, help="CSV id,x,y,z in the fixed volume")
    t.add_argument("--moving-landmarks", required=True, help="CSV id,x,y,z in the moving volume")
    t.add_argument("--spacing", type=_float_list,
                   help="voxel spacing in mm, x,y,z (default: from the field header)")
    t.add_argument("--out", help="optional JSON output path")
    t.set_defaults(func=cmd_tre)

    ph = sub.add_parser("phantom", help="write a synthetic pair with its ground-truth field")
    ph.add_argument("--out", required=True, help="output directory")
    ph.add_argument("--dims", type=_int_list, default=[32, 32, 32], help="nx,ny,nz")
    ph.add_argument("--kind", default="perlin-smooth",
                    choices=("spheres", "ramp", "perlin-smooth"), help="intensity model")
    ph.add_argument("--deformation", default="translation:0,0,0",
                    help="name:params, e.g. translation:2,0,0, affine:<9 or 12 values>, "
                         "sinusoid:2.0,16, reflection:0")
    ph.add_argument("--contrast", default="none",
                    help="name:params, e.g. none, affine:1.5,0.2, gamma:0.7")
    ph.add_argument("--seed", type=int, default=0, help="phantom seed")
    ph.add_argument("--spacing", type=_float_list, default=[1.0, 1.0, 1.0],
                    help="voxel spacing in mm, x,y,z")
    ph.add_argument("--taper", type=float, default=0.0,
                    help="fade intensity to zero over this many voxels at the faces")
    ph.add_argument("--landmarks", type=int, default=0,
                    help="also write this many synthetic landmark pairs")
    ph.add_argument("--landmark-margin", type=float, default=4.0,
                    help="minimum landmark distance from the faces, voxels")
    ph.set_defaults(func=cmd_phantom)

    s = sub.add_parser("selfcheck", help="finite-difference check of the loss gradients")
    s.add_argument("--instances", type=int, default=20, help="random problems to check")
    s.add_argument("--coords", type=int, default=64, help="sampled coordinates per problem")
    s.add_argument("--seed", type=int, default=0, help="suite seed")
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads_n = _threads(args.threads)
        with threadpool_limits(limits=args.threads_n):
            return args.func(args)
    except UsageError as exc:
        print(f"cycreg {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"cycreg {args.command}: divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"cycreg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
