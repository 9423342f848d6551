"""Command line entry point: ``surfelnav {synth,reconstruct,localize,eval}``.

Settings are layered: built-in defaults < ``--config`` JSON file < flags
(including ``--set section.key=value``). Every command prints human-readable
lines followed by one JSON line with the same numbers.

Exit codes: 0 success, 1 usage, 2 I/O or format, 3 tracking failure,
4 localization failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import re
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .depth import StereoParams, make_provider
from .errors import FormatError, InvalidInputError, LocalizationFailure, SurfelNavError, TrackingFailure
from .evaluation import ICPConfig, ate, cloud_rmse, icp_refine, register_landmarks, rre, rte
from .formats import (Trajectory, ensure_dir, list_frames, load_global_map, read_image, read_intrinsics,
                      read_landmarks, read_point_cloud, read_trajectory, save_global_map, write_depth_map, write_image,
                      write_intrinsics, write_landmarks, write_point_cloud, write_trajectory)
from .fusion import AssociationThresholds
from .geometry import Intrinsics, RigidPose, compose, rotation_angle
from .localization import FeatureParams, LocalizationConfig, MapParams, build_global_map, localize_detailed
from .pipeline import Reconstructor
from .synth import SceneSpec, TrajectorySpec, default_intrinsics, generate_scene, generate_trajectory, render_frame
from .tracking import TrackingConfig

log = logging.getLogger("surfelnav")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TRACKING, EXIT_LOCALIZATION = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _section(obj, skip=()):
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}


DEFAULTS = {
    "stereo": _section(StereoParams()),
    "tracking": _section(TrackingConfig()),
    "association": _section(AssociationThresholds()),
    "localization": _section(LocalizationConfig(), skip=("features",)),
    "features": _section(FeatureParams()),
    "map": {"stride": 5, "gamma_depth": MapParams().gamma_depth, "max_surfel_points": MapParams().max_surfel_points},
    "reconstruct": {"fps": 30.0, "max_failures": 3, "confidence_floor": 0.0},
    "synth": {"scene": _section(SceneSpec()), "trajectory": _section(TrajectorySpec()), "width": 640, "height": 480,
              "baseline": 5.0, "cloud_spacing": 0.25},
    "icp": _section(ICPConfig()),
}


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise UsageError(f"unknown setting {where}{k}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"setting {where}{k} must be a table")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _dotted(assignments):
    over = {}
    for a in assignments or ():
        if "=" not in a:
            raise UsageError(f"--set expects key=value, got {a!r}")
        key, val = a.split("=", 1)
        parts = key.strip().split(".")
        node = over
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    return over


@dataclass
class RunConfig:
    """Resolved settings of one command run."""

    command: str
    settings: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    intrinsics: str | None = None
    depth: str = "zncc"
    out: str | None = None
    seed: int | None = None
    verbosity: int = 0
    inputs: dict = field(default_factory=dict)

    @classmethod
    def from_args(cls, args):
        settings = copy.deepcopy(DEFAULTS)
        if getattr(args, "config", None):
            try:
                layer = json.loads(Path(args.config).read_text())
            except OSError as e:
                raise FormatError(f"cannot read config {args.config}: {e}") from e
            except json.JSONDecodeError as e:
                raise FormatError(f"{args.config}: {e}") from e
            settings = _merge(settings, layer)
        settings = _merge(settings, _dotted(getattr(args, "set", None)))
        inputs = {k: v for k, v in vars(args).items()
                  if k not in ("command", "config", "set", "intrinsics", "depth", "out", "seed", "verbose", "func")}
        return cls(args.command, settings, getattr(args, "intrinsics", None), getattr(args, "depth", None) or "zncc",
                   getattr(args, "out", None), getattr(args, "seed", None), getattr(args, "verbose", 0), inputs)

    def validate(self, paths=()):
        for key in paths:
            p = self.inputs.get(key)
            items = p if isinstance(p, list) else [p]
            for item in items:
                if item is not None and not Path(item).exists():
                    raise FormatError(f"--{key.replace('_', '-')}: {item} does not exist")
        if self.intrinsics is not None and not Path(self.intrinsics).exists():
            raise FormatError(f"--intrinsics: {self.intrinsics} does not exist")
        if self.depth.startswith("files:") and not Path(self.depth[6:]).is_dir():
            raise UsageError(f"--depth: {self.depth[6:]} is not a directory")
        if self.depth != "zncc" and not self.depth.startswith("files:"):
            raise UsageError("--depth must be 'zncc' or 'files:<dir>'")

    def build(self, cls, section, **extra):
        try:
            return cls(**{**self.settings[section], **extra})
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad [{section}] settings: {e}") from e


def _emit(human_lines, payload):
    for line in human_lines:
        print(line)
    print(json.dumps(payload, sort_keys=True, default=float))


# ---------------------------------------------------------------- synth


def cmd_synth(cfg: RunConfig) -> int:
    syn = copy.deepcopy(cfg.settings["synth"])
    spec_path = cfg.inputs.get("spec")
    if spec_path:
        try:
            syn = _merge(syn, json.loads(Path(spec_path).read_text()))
        except OSError as e:
            raise FormatError(f"cannot read {spec_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise FormatError(f"{spec_path}: {e}") from e
    if cfg.seed is not None:
        syn["scene"]["seed"] = cfg.seed
        syn["trajectory"]["seed"] = cfg.seed
    if cfg.out is None:
        raise UsageError("synth needs --out")
    for key in ("bump_sigma", "light"):
        syn["scene"][key] = tuple(syn["scene"][key])
    syn["trajectory"]["center"] = tuple(syn["trajectory"]["center"])
    try:
        scene = generate_scene(SceneSpec(**syn["scene"]))
        traj = generate_trajectory(TrajectorySpec(**syn["trajectory"]), scene)
    except TypeError as e:
        raise UsageError(f"bad synth spec: {e}") from e
    K = default_intrinsics(int(syn["width"]), int(syn["height"]), float(syn["baseline"]))

    out = ensure_dir(cfg.out)
    dirs = {name: ensure_dir(out / name) for name in ("left", "right", "depth")}
    zmin, zmax = np.inf, 0.0
    for k, pose in enumerate(traj.poses):
        left, right, depth = render_frame(scene, pose, K)
        write_image(left, dirs["left"] / f"{k:06d}.png")
        write_image(right, dirs["right"] / f"{k:06d}.png")
        write_depth_map(depth, dirs["depth"] / f"{k:06d}.dpth")
        zmin, zmax = min(zmin, float(depth.data.min())), max(zmax, float(depth.data.max()))
    write_trajectory(traj, out / "gt_traj.txt")
    write_intrinsics(K, out / "intrinsics.txt")
    (out / "times.txt").write_text("".join(f"{t!r}\n" for t in traj.timestamps.tolist()))
    cloud = scene.sample_cloud(float(syn["cloud_spacing"]))
    write_point_cloud(out / "gt_cloud.ply", cloud, scene.normals(cloud[:, 0], cloud[:, 1]))

    # landmarks: surface points seen in the first frame, first-camera coordinates -> world
    rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
    P0 = traj.poses[0]
    depth0 = render_frame(scene, P0, K)[2].data
    jj = rng.integers(K.height // 8, K.height - K.height // 8, 8)
    ii = rng.integers(K.width // 8, K.width - K.width // 8, 8)
    z = depth0[jj, ii]
    Xc = np.stack([(ii - K.cx) / K.fx * z, (jj - K.cy) / K.fy * z, z], axis=1)
    write_landmarks(out / "landmarks.csv", Xc, P0.apply(Xc))

    # a disparity search range that covers the rendered depths
    fb = K.fx * K.baseline
    stereo = {"min_disparity": max(0, int(math.floor(fb / zmax)) - 2),
              "max_disparity": int(math.ceil(fb / zmin)) + 2}
    (out / "config.json").write_text(json.dumps({"stereo": stereo}, indent=2) + "\n")
    _emit([f"wrote {len(traj)} frames ({K.width}x{K.height}) to {out}",
           f"depth range {zmin:.2f}..{zmax:.2f} mm, disparity {stereo['min_disparity']}..{stereo['max_disparity']} px"],
          {"frames": len(traj), "width": K.width, "height": K.height, "depth_min": zmin, "depth_max": zmax, **stereo})
    return EXIT_OK


# ---------------------------------------------------------------- reconstruct


def _load_intrinsics(cfg: RunConfig, fallback=None) -> Intrinsics:
    path = cfg.intrinsics or fallback
    if path is None or not Path(path).exists():
        raise UsageError("--intrinsics is required")
    return read_intrinsics(path)


def _input_frames(cfg: RunConfig):
    root = cfg.inputs.get("input")
    left = cfg.inputs.get("left") or (str(Path(root) / "left") if root else None)
    right = cfg.inputs.get("right") or (str(Path(root) / "right") if root else None)
    if left is None:
        raise UsageError("reconstruct needs --input or --left")
    if not Path(left).is_dir():
        raise UsageError(f"{left} is not a directory")
    lf = dict(list_frames(left, (".png",)))
    if not lf:
        raise UsageError(f"no frames in {left}")
    rf = {}
    if right is not None and Path(right).is_dir():
        rf = dict(list_frames(right, (".png",)))
    return lf, rf, root


def _timestamps(indices, root, fps):
    if root is not None and (Path(root) / "times.txt").exists():
        try:
            stamps = np.loadtxt(Path(root) / "times.txt", ndmin=1)
        except ValueError as e:
            raise FormatError(f"{root}/times.txt: {e}") from e
        if len(stamps) > max(indices):
            return stamps[indices]
        raise FormatError(f"{root}/times.txt has {len(stamps)} entries, frames go up to {max(indices)}")
    return np.asarray(indices, float) / fps


def cmd_reconstruct(cfg: RunConfig) -> int:
    cfg.validate(("input", "left", "right"))
    lf, rf, root = _input_frames(cfg)
    K = _load_intrinsics(cfg, str(Path(root) / "intrinsics.txt") if root else None)
    if cfg.out is None:
        raise UsageError("reconstruct needs --out")
    out = ensure_dir(cfg.out)
    stereo = cfg.build(StereoParams, "stereo")
    provider = make_provider(cfg.depth, K, stereo)
    if cfg.depth == "zncc":
        missing = sorted(set(lf) - set(rf))
        if missing:
            raise UsageError(f"zncc depth needs right images; missing frame {missing[0]}")
    rset = cfg.settings["reconstruct"]
    rec = Reconstructor(K, cfg.build(AssociationThresholds, "association"), cfg.build(TrackingConfig, "tracking"),
                        int(rset["max_failures"]))
    indices = sorted(lf)
    stamps = _timestamps(indices, root, float(rset["fps"]))
    images, wall = [], []
    failure = None
    for t in indices:
        s = time.perf_counter()
        left = read_image(lf[t])
        right = read_image(rf[t]) if t in rf else None
        d0 = time.perf_counter()
        depth = provider(t, left, right)
        ms_depth = 1e3 * (time.perf_counter() - d0)
        try:
            rec.process(t, depth, left, ms_depth)
        except TrackingFailure as e:
            failure = e
            break
        images.append(left)
        wall.append(1e3 * (time.perf_counter() - s))
        fl = rec.log[-1]
        log.info("frame %d: %.1f ms (depth %.1f, track %.1f, fuse %.1f), %d surfels", t, wall[-1], fl.ms_depth,
                 fl.ms_track, fl.ms_fuse, fl.map_size)

    with open(out / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "ms_wall", "ms_depth", "ms_track", "ms_fuse", "surfels", "map_size", "tracked"])
        for fl, ms in zip(rec.log, wall):
            w.writerow([fl.index, f"{ms:.3f}", f"{fl.ms_depth:.3f}", f"{fl.ms_track:.3f}", f"{fl.ms_fuse:.3f}",
                        fl.surfels, fl.map_size, int(fl.tracked)])
    if failure is not None:
        print(f"tracking failed: {failure}", file=sys.stderr)
        return EXIT_TRACKING

    smap = rec.smap
    keep = smap.confident(float(rset["confidence_floor"]))
    write_point_cloud(out / "cloud.ply", smap.positions[keep], smap.normals[keep], smap.colors()[keep],
                      smap.confidence[keep])
    traj = rec.trajectory(stamps[: len(rec.poses)])
    write_trajectory(traj, out / "trajectory.txt")
    write_intrinsics(K, out / "intrinsics.txt")

    mset = cfg.settings["map"]
    mp = MapParams(int(mset["stride"]), float(mset["gamma_depth"]), int(mset["max_surfel_points"]),
                   cfg.build(FeatureParams, "features"))
    gmap = build_global_map(images, traj, smap, K, stride=mp.stride, params=mp, names=[str(lf[t]) for t in indices])
    save_global_map(gmap, out / "map")
    write_intrinsics(K, out / "map" / "intrinsics.txt")

    # the first frame carries numba compilation; report it but keep it out of the mean
    steady = wall[1:] if len(wall) > 1 else wall
    summary = {"frames": len(wall), "surfels": len(smap), "keyframes": len(gmap.keyframes),
               "mean_ms_per_frame": float(np.mean(steady)), "first_frame_ms": float(wall[0]),
               "mean_ms_depth": float(np.mean([f.ms_depth for f in rec.log[1:]] or [rec.log[0].ms_depth])),
               "mean_ms_track": float(np.mean([f.ms_track for f in rec.log[1:]] or [0.0])),
               "mean_ms_fuse": float(np.mean([f.ms_fuse for f in rec.log[1:]] or [rec.log[0].ms_fuse])),
               "untracked": int(sum(not f.tracked for f in rec.log))}
    _emit([f"reconstructed {len(wall)} frames -> {len(smap)} surfels, {len(gmap.keyframes)} keyframes in {out}",
           f"mean {summary['mean_ms_per_frame']:.1f} ms/frame (depth {summary['mean_ms_depth']:.1f}, "
           f"track {summary['mean_ms_track']:.1f}, fuse {summary['mean_ms_fuse']:.1f}); first frame {wall[0]:.0f} ms"],
          summary)
    return EXIT_OK


# ---------------------------------------------------------------- localize


def _frame_number(path, fallback):
    m = re.findall(r"\d+", Path(path).stem)
    return int(m[-1]) if m else fallback


def cmd_localize(cfg: RunConfig) -> int:
    cfg.validate(("map", "query", "gt"))
    if not cfg.inputs.get("map") or not cfg.inputs.get("query"):
        raise UsageError("localize needs --map and --query")
    gmap = load_global_map(cfg.inputs["map"])
    K = _load_intrinsics(cfg, str(Path(cfg.inputs["map"]) / "intrinsics.txt"))
    lc = dict(cfg.settings["localization"])
    if cfg.seed is not None:
        lc["seed"] = cfg.seed
    lconf = LocalizationConfig(**lc, features=cfg.build(FeatureParams, "features"))
    gt = read_trajectory(cfg.inputs["gt"]) if cfg.inputs.get("gt") else None

    queries = []
    for q in cfg.inputs["query"]:
        p = Path(q)
        queries.extend([fp for _, fp in list_frames(p, (".png",))] if p.is_dir() else [p])
    lines, results, stamps, poses = [], [], [], []
    for n, q in enumerate(queries):
        img = read_image(q)
        frame = _frame_number(q, n)
        rec = {"query": str(q), "frame": frame}
        try:
            r = localize_detailed(img, gmap, K, lconf)
        except LocalizationFailure as e:
            rec.update(ok=False, reason=str(e))
            lines.append(f"{q}: FAILED ({e})")
            results.append(rec)
            continue
        rec.update(ok=True, pose=[*map(float, r.pose.translation), *map(float, r.pose.quat)], inliers=r.inliers,
                   matches=r.matches, rmse_px=r.rmse, cluster=r.cluster)
        msg = f"{q}: t = {np.array2string(r.pose.translation, precision=4)} ({r.inliers}/{r.matches} inliers)"
        if gt is not None and frame < len(gt):
            d = compose(r.pose.inverse(), gt.poses[frame])
            rec.update(err_t=float(np.linalg.norm(d.translation)), err_r=float(np.degrees(rotation_angle(d.rotation))))
            msg += f", error {rec['err_t']:.3f} mm / {rec['err_r']:.3f} deg"
        lines.append(msg)
        results.append(rec)
        stamps.append(float(gt.timestamps[frame]) if gt is not None and frame < len(gt) else float(frame))
        poses.append(r.pose)

    if cfg.inputs.get("out_pose") and poses:
        order = np.argsort(stamps, kind="stable")
        write_trajectory(Trajectory(np.array(stamps)[order], [poses[i] for i in order]), cfg.inputs["out_pose"])
    ok = [r for r in results if r["ok"]]
    summary = {"queries": len(results), "localized": len(ok), "success_rate": len(ok) / max(len(results), 1),
               "results": results}
    errs = [r for r in ok if "err_t" in r]
    if errs:
        summary["median_err_t"] = float(np.median([r["err_t"] for r in errs]))
        summary["median_err_r"] = float(np.median([r["err_r"] for r in errs]))
        lines.append(f"median error {summary['median_err_t']:.3f} mm / {summary['median_err_r']:.3f} deg")
    lines.append(f"localized {len(ok)}/{len(results)}")
    _emit(lines, summary)
    return EXIT_OK if len(ok) == len(results) else EXIT_LOCALIZATION


# ---------------------------------------------------------------- eval


def cmd_eval(cfg: RunConfig) -> int:
    metric = cfg.inputs["metric"]
    if metric in ("ate", "rte", "rre"):
        cfg.validate(("gt", "est"))
        if not cfg.inputs.get("gt") or not cfg.inputs.get("est"):
            raise UsageError(f"eval {metric} needs --gt and --est")
        Q = read_trajectory(cfg.inputs["gt"])
        P = read_trajectory(cfg.inputs["est"])
        fn = {"ate": ate, "rte": rte, "rre": rre}[metric]
        value = fn(Q, P, cfg.inputs.get("tol") or 0.02)
        unit = "deg" if metric == "rre" else "mm"
        _emit([f"{metric.upper()} {value:.6g} {unit}"], {"metric": metric, "value": value, "unit": unit})
        return EXIT_OK
    cfg.validate(("src", "dst", "landmarks"))
    if not cfg.inputs.get("src") or not cfg.inputs.get("dst"):
        raise UsageError("eval rmse needs --src and --dst")
    src = read_point_cloud(cfg.inputs["src"])["points"].astype(float)
    dst = read_point_cloud(cfg.inputs["dst"])["points"].astype(float)
    if cfg.inputs.get("landmarks"):
        a, b = read_landmarks(cfg.inputs["landmarks"])
        init = register_landmarks(a, b)
    else:
        init = RigidPose()
    res = icp_refine(src, dst, init, cfg.build(ICPConfig, "icp"))
    value = cloud_rmse(src, dst, res.transform)
    _emit([f"RMSE {value:.6g} mm (ICP {res.iterations} iterations, converged={res.converged}, {res.pairs} pairs)"],
          {"metric": "rmse", "value": value, "unit": "mm", "icp_iterations": res.iterations,
           "icp_converged": res.converged, "icp_rmse": res.rmse, "pairs": res.pairs,
           "transform": res.transform.matrix.tolist()})
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _common(p):
    p.add_argument("--config", help="JSON settings file layered over the defaults")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting, e.g. stereo.max_disparity=64")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = _Parser(prog="surfelnav", description="Stereo surfel reconstruction and map-based localization.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="render a synthetic stereo sequence with ground truth")
    _common(p)
    p.add_argument("--spec", help="JSON with 'scene'/'trajectory' overrides, width, height, baseline")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="depth -> tracking -> fusion over a stereo sequence")
    _common(p)
    p.add_argument("--input", help="directory with left/ and right/ (and optionally times.txt, intrinsics.txt)")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--intrinsics")
    p.add_argument("--depth", default="zncc", help="'zncc' or 'files:<dir>'")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("localize", help="camera poses of query images in a saved map")
    _common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--query", required=True, nargs="+", help="image files or directories")
    p.add_argument("--intrinsics")
    p.add_argument("--out-pose", help="TUM file for the recovered camera poses")
    p.add_argument("--gt", help="TUM trajectory in the map frame, indexed by the query frame number")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="trajectory and cloud metrics")
    _common(p)
    p.add_argument("metric", choices=["ate", "rte", "rre", "rmse"])
    p.add_argument("--gt")
    p.add_argument("--est")
    p.add_argument("--tol", type=float, help="timestamp association tolerance, s")
    p.add_argument("--src")
    p.add_argument("--dst")
    p.add_argument("--landmarks")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help or a parse error
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.from_args(args)
        return args.func(cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrackingFailure as e:
        print(f"tracking failed: {e}", file=sys.stderr)
        return EXIT_TRACKING
    except LocalizationFailure as e:
        print(f"localization failed: {e}", file=sys.stderr)
        return EXIT_LOCALIZATION
    except InvalidInputError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SurfelNavError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
