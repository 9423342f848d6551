"""Readers and writers for depth rasters, images, point clouds, trajectories,
intrinsics and the serialized localization map.

All binary data is little-endian. PLY files are ASCII.
"""
from __future__ import annotations

import io
import json
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, PngImagePlugin

from .errors import FormatError
from .geometry import Intrinsics, RigidPose
from .mapping import DESCRIPTOR_BYTES, FeatureSet, GlobalMap, Keyframe

DEPTH_MAGIC = b"DPTH"
DEPTH_HEADER = struct.Struct("<4sIIf")
MAP_VERSION = 1


@dataclass
class DepthMap:
    """Metric depth raster in millimetres; zero marks an invalid pixel."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError("depth data must be 2-D")
        d = np.where(np.isfinite(d) & (d > 0), d, np.float32(0.0)).astype(np.float32)
        self.data = d

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def validity(self):
        return self.data > 0


@dataclass
class GrayImage:
    """Intensity image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("image data must be 2-D")
        if d.size and (not np.all(np.isfinite(d)) or d.min() < 0.0 or d.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        self.data = d

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class Trajectory:
    """Timestamped camera poses (camera-to-world), timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise FormatError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


# ---------------------------------------------------------------- depth

def write_depth_map(depth, path, scale=1.0):
    """Write the raw ``DPTH`` format (values are stored divided by ``scale``)."""
    d = depth.data if isinstance(depth, DepthMap) else np.asarray(depth, np.float32)
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, float(scale)))
        f.write((d / np.float32(scale)).astype("<f4").tobytes())


def write_depth_png(depth, path, scale=0.1):
    """16-bit PNG where ``mm = pixel * scale``; the scale rides in a text chunk."""
    d = depth.data if isinstance(depth, DepthMap) else np.asarray(depth, np.float32)
    raw = np.round(d / scale)
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this scale")
    info = PngImagePlugin.PngInfo()
    info.add_text("depth_scale", repr(float(scale)))
    Image.fromarray(raw.astype(np.uint16)).save(path, pnginfo=info)


def read_depth_map(path, png_scale=None) -> DepthMap:
    """Read a raw ``DPTH`` file or a 16-bit PNG.

    For PNGs the scale comes from ``png_scale`` if given, else from the
    ``depth_scale`` text chunk, else 1.0.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            head = f.read(8)
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    if head.startswith(b"\x89PNG"):
        try:
            img = Image.open(path)
            img.load()
        except Exception as e:  # Pillow raises a zoo of types
            raise FormatError(f"bad PNG {path}: {e}") from e
        if png_scale is None:
            png_scale = float(img.info.get("depth_scale", 1.0))
        arr = np.asarray(img)
        if arr.ndim != 2:
            raise FormatError("depth PNG must be single channel")
        return DepthMap(arr.astype(np.float64) * png_scale)
    blob = path.read_bytes()
    if len(blob) < DEPTH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, scale = DEPTH_HEADER.unpack_from(blob)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if len(blob) != DEPTH_HEADER.size + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} values, file size is {len(blob)} bytes")
    if not np.isfinite(scale) or scale <= 0:
        raise FormatError(f"{path}: bad scale {scale}")
    data = np.frombuffer(blob, dtype="<f4", offset=DEPTH_HEADER.size).reshape(h, w)
    return DepthMap(data * np.float32(scale))


# ---------------------------------------------------------------- images

def read_image(path) -> GrayImage:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise FormatError(f"cannot read image {path}: {e}") from e
    arr = np.asarray(img)
    if arr.dtype == np.uint16 or img.mode.startswith("I;16"):
        return GrayImage(arr.astype(np.float64) / 65535.0)
    if img.mode == "I":
        return GrayImage(np.clip(arr.astype(np.float64) / 65535.0, 0, 1))
    if img.mode == "F":
        return GrayImage(np.clip(arr.astype(np.float64), 0, 1))
    if arr.ndim == 3:
        arr = np.asarray(img.convert("L"))
    return GrayImage(arr.astype(np.float64) / 255.0)


def write_image(image, path, bits=16):
    d = image.data if isinstance(image, GrayImage) else np.asarray(image, float)
    if bits == 16:
        Image.fromarray(np.round(np.clip(d, 0, 1) * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(np.clip(d, 0, 1) * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------- point clouds

def write_point_cloud(path, points, normals=None, colors=None, confidence=None):
    """ASCII PLY with x,y,z,nx,ny,nz,red,green,blue,confidence per vertex."""
    P = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = len(P)
    N = np.zeros((n, 3), np.float32) if normals is None else np.asarray(normals, np.float32).reshape(n, 3)
    C = np.zeros((n, 3), np.uint8) if colors is None else np.asarray(colors).reshape(n, 3)
    if C.dtype != np.uint8:
        C = np.clip(np.round(C), 0, 255).astype(np.uint8)
    W = np.ones(n, np.float32) if confidence is None else np.asarray(confidence, np.float32).reshape(n)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property float confidence",
        "end_header",
    ]
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        if n:
            # %.9g round-trips float32 exactly
            fl = np.concatenate([P, N], axis=1).astype(np.float64)
            body = _format_rows(fl, C, W.astype(np.float64))
            f.write(body)


_PLY_ROW = "%.9g %.9g %.9g %.9g %.9g %.9g %d %d %d %.9g\n"


def _format_rows(fl, C, W):
    M = np.concatenate([fl, C.astype(np.float64), W[:, None]], axis=1)
    return (_PLY_ROW * len(M)) % tuple(M.ravel().tolist())


def read_point_cloud(path):
    """Read an ASCII PLY. Returns dict with points, normals, colors, confidence
    (missing properties come back as None)."""
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    end = text.find("end_header")
    if not text.startswith("ply") or end < 0:
        raise FormatError(f"{path}: not an ASCII PLY file")
    header = text[:end].splitlines()
    body = text[end:].split("\n", 1)[1] if "\n" in text[end:] else ""
    if not any(line.strip() == "format ascii 1.0" for line in header):
        raise FormatError(f"{path}: only ASCII PLY is supported")
    n = None
    props = []
    in_vertex = False
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n = int(tok[2])
                except (IndexError, ValueError) as e:
                    raise FormatError(f"{path}: bad element line") from e
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
    if n is None:
        raise FormatError(f"{path}: no vertex element")
    if n:
        table = _parse_body(body, n, len(props))
        if table is None:
            raise FormatError(f"{path}: expected {n} vertices with {len(props)} properties")
    else:
        table = np.zeros((0, len(props)))
    if table.shape != (n, len(props)):
        raise FormatError(f"{path}: expected {n} vertices with {len(props)} properties")

    def cols(names):
        if all(k in props for k in names):
            return table[:, [props.index(k) for k in names]]
        return None

    pts = cols(["x", "y", "z"])
    if pts is None:
        raise FormatError(f"{path}: missing x/y/z")
    col = cols(["red", "green", "blue"])
    conf = cols(["confidence"])
    return {
        "points": pts.astype(np.float32),
        "normals": None if cols(["nx", "ny", "nz"]) is None else cols(["nx", "ny", "nz"]).astype(np.float32),
        "colors": None if col is None else col.astype(np.uint8),
        "confidence": None if conf is None else conf[:, 0].astype(np.float32),
    }


def _parse_body(body, n, m):
    """Vertex rows as an (n, m) float table, or None if they do not parse.

    Single-space separated rows (what we write) take the fast C path; anything
    else falls back to splitting on arbitrary whitespace.
    """
    for sep in (" ", r"\s+"):
        try:
            t = pd.read_csv(io.StringIO(body), sep=sep, header=None, nrows=n, dtype=np.float64).to_numpy()
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError):
            continue
        if t.shape == (n, m) and not np.isnan(t).any():
            return t
    return None


# ---------------------------------------------------------------- trajectories

def read_trajectory(path) -> Trajectory:
    """TUM format: ``timestamp tx ty tz qx qy qz qw`` per line, '#' comments."""
    stamps, poses = [], []
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.replace(",", " ").split()
        if len(tok) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(tok)}")
        try:
            v = [float(x) for x in tok]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
        if not all(np.isfinite(v)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        q = np.array(v[4:8])
        if abs(np.linalg.norm(q) - 1.0) > 1e-3:
            raise FormatError(f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.6f} is not unit")
        if stamps and v[0] <= stamps[-1]:
            raise FormatError(f"{path}:{lineno}: timestamps not strictly increasing")
        stamps.append(v[0])
        poses.append(RigidPose(q, v[1:4]))
    return Trajectory(np.array(stamps), poses)


def format_tum_line(t, pose: RigidPose):
    vals = [t, *pose.translation, *pose.quat]
    return " ".join(repr(float(x)) for x in vals)


def write_trajectory(traj: Trajectory, path):
    with open(path, "w") as f:
        for t, p in zip(traj.timestamps, traj.poses):
            f.write(format_tum_line(t, p) + "\n")


# ---------------------------------------------------------------- intrinsics

_KV = re.compile(r"^\s*([A-Za-z_]+)\s*[:=\s]\s*(\S+)\s*$")


def read_intrinsics(path) -> Intrinsics:
    """Plain key/value file with fx, fy, cx, cy, width, height[, baseline]."""
    vals = {}
    try:
        lines = Path(path).read_text().splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    for line in lines:
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        m = _KV.match(line)
        if not m:
            raise FormatError(f"{path}: cannot parse line {line!r}")
        try:
            vals[m.group(1).lower()] = float(m.group(2))
        except ValueError as e:
            raise FormatError(f"{path}: bad value in {line!r}") from e
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - vals.keys()
    if missing:
        raise FormatError(f"{path}: missing keys {sorted(missing)}")
    try:
        return Intrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], int(vals["width"]), int(vals["height"]), vals.get("baseline"))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_intrinsics(K: Intrinsics, path):
    lines = [f"fx = {K.fx!r}", f"fy = {K.fy!r}", f"cx = {K.cx!r}", f"cy = {K.cy!r}", f"width = {K.width}", f"height = {K.height}"]
    if K.baseline is not None:
        lines.append(f"baseline = {K.baseline!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path):
    """CSV of ``sx,sy,sz,dx,dy,dz`` rows -> (src (N,3), dst (N,3))."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            v = [float(x) for x in s.split(",")]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
        if len(v) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 values")
        rows.append(v)
    a = np.array(rows).reshape(-1, 6)
    return a[:, :3], a[:, 3:]


def write_landmarks(path, src, dst):
    with open(path, "w") as f:
        for s, d in zip(np.asarray(src), np.asarray(dst)):
            f.write(",".join(repr(float(x)) for x in (*s, *d)) + "\n")


# ---------------------------------------------------------------- global map

def _pose_to_list(p):
    return [*map(float, p.translation), *map(float, p.quat)]


def _pose_from_list(v):
    return RigidPose(v[3:7], v[0:3])


def save_global_map(gmap: GlobalMap, directory):
    """Write ``manifest.json``, ``surfels.ply`` (point table, vertex index is the
    point id), ``keyframes.jsonl`` and ``descriptors.bin`` (float32 records)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dim = len(gmap.keyframes[0].global_descriptor) if gmap.keyframes else 0
    write_point_cloud(d / "surfels.ply", gmap.points, gmap.normals)
    with open(d / "keyframes.jsonl", "w") as f:
        for kf in gmap.keyframes:
            rec = {
                "id": int(kf.id),
                "pose": _pose_to_list(kf.pose),
                "image": kf.image,
                "keypoints": kf.keypoints.tolist(),
                "point_ids": kf.point_ids.tolist(),
                "features": {
                    "keypoints": kf.features.keypoints.tolist(),
                    "scales": kf.features.scales.tolist(),
                    "orientations": kf.features.orientations.tolist(),
                    "descriptors": [bytes(row).hex() for row in kf.features.descriptors],
                    "obs": kf.feature_obs.tolist(),
                },
            }
            f.write(json.dumps(rec) + "\n")
    with open(d / "descriptors.bin", "wb") as f:
        for kf in gmap.keyframes:
            if len(kf.global_descriptor) != dim:
                raise ValueError("global descriptors must share one width")
            f.write(np.asarray(kf.global_descriptor, "<f4").tobytes())
    manifest = {"version": MAP_VERSION, "descriptor_dim": dim, "keyframes": len(gmap.keyframes), "points": len(gmap.points)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_global_map(directory) -> GlobalMap:
    d = Path(directory)
    for name in ("manifest.json", "surfels.ply", "keyframes.jsonl", "descriptors.bin"):
        if not (d / name).exists():
            raise FormatError(f"{d}: missing {name}")
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{d}/manifest.json: {e}") from e
    if manifest.get("version") != MAP_VERSION:
        raise FormatError(f"{d}: map version {manifest.get('version')} != {MAP_VERSION}")
    dim = int(manifest["descriptor_dim"])
    cloud = read_point_cloud(d / "surfels.ply")
    points = cloud["points"].astype(np.float64)
    if len(points) != manifest["points"]:
        raise FormatError(f"{d}: point count mismatch")
    normals = cloud["normals"]
    if normals is not None and not np.any(normals):
        normals = None
    raw = np.fromfile(d / "descriptors.bin", dtype="<f4")
    keyframes = []
    with open(d / "keyframes.jsonl") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feat = rec["features"]
                fs = FeatureSet(
                    np.array(feat["keypoints"], dtype=float).reshape(-1, 2),
                    feat["scales"],
                    feat["orientations"],
                    np.array([np.frombuffer(bytes.fromhex(h), np.uint8) for h in feat["descriptors"]]).reshape(-1, DESCRIPTOR_BYTES),
                )
                k = len(keyframes)
                kf = Keyframe(
                    id=rec["id"],
                    pose=_pose_from_list(rec["pose"]),
                    keypoints=np.array(rec["keypoints"], dtype=float).reshape(-1, 2),
                    point_ids=rec["point_ids"],
                    global_descriptor=raw[k * dim:(k + 1) * dim],
                    features=fs,
                    feature_obs=feat["obs"],
                    image=rec.get("image"),
                )
            except (KeyError, ValueError, TypeError) as e:
                raise FormatError(f"{d}/keyframes.jsonl:{lineno}: {e}") from e
            keyframes.append(kf)
    if len(keyframes) != manifest["keyframes"] or raw.size != dim * len(keyframes):
        raise FormatError(f"{d}: keyframe/descriptor count mismatch")
    gmap = GlobalMap(keyframes, points, normals)
    try:
        gmap.validate()
    except ValueError as e:
        raise FormatError(str(e)) from e
    return gmap


def list_frames(directory, suffixes=(".png", ".dpth", ".bin")):
    """Files in ``directory`` sorted by the integer in their name."""
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d} is not a directory")
    out = []
    for p in d.iterdir():
        if p.suffix.lower() in suffixes:
            m = re.findall(r"\d+", p.stem)
            if m:
                out.append((int(m[-1]), p))
    out.sort()
    return out


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
