"""Command-line entry point: ``motioncalib {calibrate,simulate,eval,diagnose}``.

Exit codes: 0 success (calibrate: converged), 1 calibration failure or
oracle mismatch, 2 stopped at the iteration limit, 64 usage error,
66 unreadable or missing input.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import CalibrationError, DivergenceDetected, ParseError
from .geometry import CameraModel
from .pipeline import CalibrationConfig, initial_pairs, lidar_motions, motion_advisor, run_calibration
from .synthetic import NoiseSpec, SceneSpec, TrajectorySpec, evaluate_extrinsic, generate_scene, simulate_dataset

log = logging.getLogger("motioncalib")

EXIT_OK, EXIT_FAIL, EXIT_MAX_ITER, EXIT_USAGE, EXIT_NOINPUT = 0, 1, 2, 64, 66
STATUS_EXIT = {"converged": EXIT_OK, "max_iter": EXIT_MAX_ITER, "failed": EXIT_FAIL}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


class UsageError(Exception):
    pass


def _spec(cls, text):
    if text is None:
        return cls()
    p = Path(text)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
    try:
        return io.apply_overrides(cls(), io.parse_kv(text))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad {cls.__name__}: {str(exc).strip(chr(39))}") from None


def _camera(text):
    kind, _, size = text.partition(":")
    try:
        if kind == "spherical":
            w, h = (int(x) for x in (size or "2048x1024").split("x"))
            return CameraModel.spherical(w, h)
        if kind == "perspective":
            f, cx, cy = (float(x) for x in size.split(","))
            return CameraModel.perspective(f, cx, cy)
    except ValueError:
        pass
    raise UsageError(f"bad camera {text!r}; use spherical[:WxH] or perspective:f,cx,cy")


def _config(path):
    return io.read_config(path) if path else CalibrationConfig()


def _sweep(dataset, config, max_n, trials):
    """Calibrate on random subsets of n horizontal + n vertical motions."""
    lid, _ = lidar_motions(dataset, config.icp)
    ids = [i for i in dataset.ids if i in lid]
    data = dataset.select(ids).with_lidar_motions([lid[i] for i in ids])
    cache, rows = {}, []
    for n in range(1, max_n + 1):
        for t in range(trials):
            sub = data.sample_motions(n, np.random.SeedSequence([config.seed, n, t]))
            key = tuple(sub.ids)
            if key not in cache:
                try:
                    rep = run_calibration(sub, config)
                    cache[key] = {
                        "status": rep.status,
                        "initial": io.motion_to_dict(rep.initial.transform),
                        "extrinsic": io.motion_to_dict(rep.extrinsic.transform),
                    }
                except CalibrationError as exc:
                    cache[key] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            rows.append({"n": n, "trial": t, "ids": list(key), **cache[key]})
    return rows


def cmd_calibrate(args):
    config = _config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset = io.load_dataset(args.manifest)
    try:
        report = run_calibration(dataset, config)
    except DivergenceDetected as exc:
        log.error("%s", exc)
        report = exc.report
    except CalibrationError as exc:
        log.error("calibration failed: %s", exc)
        return EXIT_FAIL
    sweep = _sweep(dataset, config, args.sweep, args.sweep_trials) if args.sweep else None
    io.write_report(args.out, report, sweep)
    e = report.extrinsic
    print(f"status: {report.status} after {len(report.per_iteration) - 1} outer iterations")
    print("R =\n" + np.array2string(e.rotation, precision=9, suppress_small=True))
    print("t =", np.array2string(e.translation, precision=6), "m")
    return STATUS_EXIT[report.status]


def cmd_simulate(args):
    scene_spec = _spec(SceneSpec, args.scene)
    traj = _spec(TrajectorySpec, args.trajectory)
    noise = _spec(NoiseSpec, args.noise)
    camera = _camera(args.camera)
    scene = generate_scene(scene_spec)
    dataset, oracle = simulate_dataset(scene, traj, None, camera, noise, seed=args.seed, n_matches=args.matches)
    manifest = io.export_dataset(args.out, dataset, oracle, track_step=args.track_step, binary=not args.ascii)
    print(f"wrote {len(dataset)} motions to {manifest} (dataset {dataset.name})")
    return EXIT_OK


def _errors(d, truth):
    return evaluate_extrinsic(io.motion_from_dict(d), truth)


def cmd_eval(args):
    report = io.read_report(args.report)
    oracle = io.read_oracle(args.oracle)
    if report.get("dataset_id") != oracle.dataset_id:
        print(
            f"error: oracle/report mismatch: report was computed on dataset {report.get('dataset_id')!r}, "
            f"oracle describes {oracle.dataset_id!r}",
            file=sys.stderr,
        )
        return EXIT_FAIL
    X = oracle.extrinsic
    header = ["section", "iteration", "n_motions", "trial", "status", "rotation_error_deg", "translation_error_m"]
    rows = []
    r, t = _errors(report["extrinsic"], X)
    rows.append(["final", "", len(report["extrinsic"]["pair_ids"]), "", report["status"], r, t])
    print(f"final: rotation {r:.6f} deg, translation {t * 1000:.3f} mm ({report['status']})")
    for it in report["per_iteration"]:
        r, t = _errors(it["extrinsic"], X)
        rows.append(["iteration", it["iteration"], it["pair_count"], "", "", r, t])
    by_n = {}
    for s in report.get("sweep", []):
        if "extrinsic" not in s:
            rows.append(["sweep_final", "", s["n"], s["trial"], s["status"], "", ""])
            continue
        ri, ti = _errors(s["initial"], X)
        rf, tf = _errors(s["extrinsic"], X)
        rows.append(["sweep_initial", "", s["n"], s["trial"], s["status"], ri, ti])
        rows.append(["sweep_final", "", s["n"], s["trial"], s["status"], rf, tf])
        by_n.setdefault(s["n"], []).append((ri, ti, rf, tf))
    if by_n:
        print(f"{'n':>3} {'init rot deg':>13} {'init trans m':>13} {'final rot deg':>14} {'final trans m':>14}")
    for n in sorted(by_n):
        med = np.median(np.array(by_n[n]), axis=0)
        rows.append(["sweep_median_initial", "", n, "", "", med[0], med[1]])
        rows.append(["sweep_median_final", "", n, "", "", med[2], med[3]])
        print(f"{n:>3} {med[0]:>13.6f} {med[1]:>13.6f} {med[2]:>14.6f} {med[3]:>14.6f}")
    io.write_csv(args.out, header, rows)
    return EXIT_OK


def cmd_diagnose(args):
    config = _config(args.config)
    dataset = io.load_dataset(args.manifest)
    pairs, _, failures = initial_pairs(dataset, config)
    diags = motion_advisor(pairs, config.advisor)
    print(f"{'motion':<10} {'rot deg':>9} {'gain':>7} {'trans m':>9}  flags")
    for d in diags:
        print(f"{d.pair_id:<10} {np.degrees(d.rotation_angle):>9.3f} {d.propagation_gain:>7.4f} {d.translation_magnitude:>9.4f}  {','.join(d.flags)}")
    for mid, msg in failures.items():
        print(f"{mid:<10} failed: {msg}")
    print("thresholds are engineering defaults (weak rotation %.1f deg, baseline %.2f m)"
          % (np.degrees(config.advisor.weak_rotation), config.advisor.large_baseline))  # fmt: skip
    return EXIT_OK


def build_parser():
    p = _Parser(prog="motioncalib", description="Targetless camera-LiDAR extrinsic calibration from motion.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="run the calibration loop on a manifest")
    c.add_argument("--manifest", required=True)
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--sweep", type=int, default=0, metavar="N", help="also calibrate on 1..N motion pairs")
    c.add_argument("--sweep-trials", type=int, default=10)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="write a synthetic dataset with its oracle")
    s.add_argument("--scene", help="key=value list, e.g. kind=box-room,density=100")
    s.add_argument("--trajectory", help="key=value list, e.g. n_horizontal=5,n_vertical=5")
    s.add_argument("--noise", help="key=value list, e.g. pixel_sigma=0.5,lidar_range_sigma=0.005")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--camera", default="spherical")
    s.add_argument("--matches", type=int, default=300)
    s.add_argument("--track-step", type=float, default=8.0)
    s.add_argument("--ascii", action="store_true", help="write ASCII instead of binary PLY")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="score a report against an oracle, write CSV curves")
    e.add_argument("--report", required=True)
    e.add_argument("--oracle", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="motion-quality table for a manifest")
    d.add_argument("--manifest", required=True)
    d.add_argument("--config")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"motioncalib: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"motioncalib: error: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_NOINPUT
    except (ParseError, OSError) as exc:
        print(f"motioncalib: error: {exc}", file=sys.stderr)
        return EXIT_NOINPUT


if __name__ == "__main__":
    sys.exit(main())
