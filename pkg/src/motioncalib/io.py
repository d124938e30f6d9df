"""File formats: PLY clouds, match/track tables, manifests, configs and reports.

Every writer goes through :func:`atomic_write` (temp file in the target
directory, then ``os.replace``), so readers never see half-written files.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import warnings
from dataclasses import dataclass
from io import StringIO
from pathlib import Path

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import cKDTree

from .cam_odom import FeatureMatches
from .dataset import Dataset, MotionRecord
from .errors import ParseError
from .geometry import CameraModel, PointCloud, RigidMotion, from_quaternion, to_quaternion

log = logging.getLogger(__name__)

REPORT_FORMAT = "motioncalib-report"
REPORT_VERSION = 1
MANIFEST_VERSION = 1


class UnsupportedPropertyWarning(UserWarning):
    pass


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip
_XYZ = ("x", "y", "z")
_NXYZ = ("nx", "ny", "nz")


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_header(f, path):
    first = f.readline()
    if first.strip() != b"ply":
        raise ParseError("not a PLY file (missing 'ply' magic)", path, line=1)
    fmt = None
    elements = []
    line_no = 1
    while True:
        raw = f.readline()
        line_no += 1
        if not raw:
            raise ParseError("unexpected end of file inside header", path, line=line_no)
        words = raw.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) != 3 or words[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unsupported format line {raw.strip()!r}", path, line=line_no)
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise ParseError("malformed element line", path, line=line_no)
            elements.append(_Element(words[1], int(words[2]), []))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", path, line=line_no)
            try:
                if words[1] == "list":
                    elements[-1].props.append((words[4], (_PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            except (KeyError, IndexError):
                raise ParseError(f"malformed property line {raw.strip()!r}", path, line=line_no) from None
        else:
            raise ParseError(f"unknown header keyword {key!r}", path, line=line_no)
    if fmt is None:
        raise ParseError("header has no format line", path, line=line_no)
    return fmt, elements, line_no, f.tell()


def _read_ascii(f, elements, path, line_no):
    data = {}
    for el in elements:
        rows = []
        for _ in range(el.count):
            raw = f.readline()
            line_no += 1
            if not raw:
                raise ParseError(f"file ends before all {el.count} '{el.name}' rows were read", path, line=line_no)
            words = raw.split()
            vals, k = [], 0
            try:
                for _, dt in el.props:
                    if isinstance(dt, tuple):
                        n = int(words[k])
                        vals.append([float(w) for w in words[k + 1 : k + 1 + n]])
                        if len(vals[-1]) != n:
                            raise IndexError
                        k += 1 + n
                    else:
                        vals.append(float(words[k]))
                        k += 1
            except (ValueError, IndexError):
                raise ParseError(f"malformed '{el.name}' row", path, line=line_no) from None
            if k != len(words):
                raise ParseError(f"extra values in '{el.name}' row", path, line=line_no)
            rows.append(vals)
        data[el.name] = rows
    return data


def _read_binary(buf, elements, endian, path, offset):
    data = {}
    for el in elements:
        if all(not isinstance(dt, tuple) for _, dt in el.props):
            dtype = np.dtype([(n, endian + dt) for n, dt in el.props])
            need = dtype.itemsize * el.count
            if offset + need > len(buf):
                got = (len(buf) - offset) // max(dtype.itemsize, 1)
                raise ParseError(
                    f"truncated '{el.name}' data: {got} of {el.count} rows present", path, offset=offset + got * dtype.itemsize
                )
            arr = np.frombuffer(buf, dtype=dtype, count=el.count, offset=offset)
            offset += need
            data[el.name] = arr
            continue
        rows = []
        for _ in range(el.count):
            vals = []
            for _, dt in el.props:
                if isinstance(dt, tuple):
                    cdt, idt = np.dtype(endian + dt[0]), np.dtype(endian + dt[1])
                    if offset + cdt.itemsize > len(buf):
                        raise ParseError(f"truncated '{el.name}' data", path, offset=offset)
                    n = int(np.frombuffer(buf, cdt, 1, offset)[0])
                    offset += cdt.itemsize
                    if offset + n * idt.itemsize > len(buf):
                        raise ParseError(f"truncated '{el.name}' data", path, offset=offset)
                    vals.append(np.frombuffer(buf, idt, n, offset).astype(float).tolist())
                    offset += n * idt.itemsize
                else:
                    d = np.dtype(endian + dt)
                    if offset + d.itemsize > len(buf):
                        raise ParseError(f"truncated '{el.name}' data", path, offset=offset)
                    vals.append(float(np.frombuffer(buf, d, 1, offset)[0]))
                    offset += d.itemsize
            rows.append(vals)
        data[el.name] = rows
    return data


def _column(data, el, name):
    names = [n for n, _ in el.props]
    i = names.index(name)
    if isinstance(data, np.ndarray):
        return data[name].astype(float)
    return np.array([r[i] for r in data], dtype=float)


def read_point_cloud(path) -> PointCloud:
    """Read an ASCII or binary PLY file with x/y/z and optional nx/ny/nz."""
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements, line_no, offset = _parse_header(f, path)
        by_name = {e.name: e for e in elements}
        if "vertex" not in by_name:
            raise ParseError("no 'vertex' element", path, line=line_no)
        if fmt == "ascii":
            data = _read_ascii(f, elements, path, line_no)
        else:
            f.seek(0)
            buf = f.read()
            data = _read_binary(buf, elements, "<" if fmt == "binary_little_endian" else ">", path, offset)
    vert = by_name["vertex"]
    names = [n for n, _ in vert.props]
    missing = [c for c in _XYZ if c not in names]
    if missing:
        raise ParseError(f"vertex element lacks properties {missing}", path)
    for n in names:
        if n not in _XYZ + _NXYZ:
            warnings.warn(f"{path}: skipping unsupported vertex property {n!r}", UnsupportedPropertyWarning, stacklevel=2)
    pts = np.column_stack([_column(data["vertex"], vert, c) for c in _XYZ]) if vert.count else np.zeros((0, 3))
    normals = None
    if all(c in names for c in _NXYZ):
        normals = np.column_stack([_column(data["vertex"], vert, c) for c in _NXYZ]) if vert.count else np.zeros((0, 3))
    mesh = None
    face = by_name.get("face")
    if face is not None and face.count:
        lists = [r[0] for r in data["face"]] if not isinstance(data["face"], np.ndarray) else []
        tris = [v for v in lists if len(v) == 3]
        if tris:
            mesh = np.array(tris, dtype=np.int64)
    return PointCloud(pts, normals, mesh=mesh)


def write_point_cloud(path, cloud: PointCloud, binary=True):
    """Write x/y/z (and normals when present) as float64 PLY."""
    cols = list(_XYZ) + (list(_NXYZ) if cloud.normals is not None else [])
    arrays = [cloud.points] + ([cloud.normals] if cloud.normals is not None else [])
    values = np.hstack(arrays) if len(cloud) else np.zeros((0, len(cols)))
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", "comment units meters", f"element vertex {len(cloud)}"]
    header += [f"property double {c}" for c in cols]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = np.ascontiguousarray(values, dtype="<f8").tobytes()
    else:
        body = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in values).encode("ascii")
    atomic_write(path, head + body)


# ---------------------------------------------------------------- match / track tables


@dataclass(frozen=True, eq=False)
class PixelTable:
    """Pixel correspondences between the two images of a motion, with quality."""

    pixels1: np.ndarray
    pixels2: np.ndarray
    quality: np.ndarray

    def __len__(self):
        return len(self.pixels1)


def read_table(path) -> PixelTable:
    """Read ``u1 v1 u2 v2 quality`` records; '#' starts a comment line."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            words = s.split()
            if len(words) != 5:
                raise ParseError(f"expected 5 fields (u1 v1 u2 v2 quality), got {len(words)}", path, line=line_no)
            try:
                vals = [float(w) for w in words]
            except ValueError:
                raise ParseError(f"non-numeric field in {s!r}", path, line=line_no) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", path, line=line_no)
            rows.append(vals)
    a = np.array(rows, dtype=float).reshape(-1, 5)
    return PixelTable(a[:, :2], a[:, 2:4], a[:, 4])


read_matches = read_table
read_tracks = read_table


def write_table(path, table: PixelTable, header="u1 v1 u2 v2 quality", precision=6):
    """Write a pixel table; ``precision`` decimals (1e-6 px by default)."""
    buf = StringIO()
    data = np.column_stack([table.pixels1, table.pixels2, table.quality]).reshape(-1, 5)
    np.savetxt(buf, data, fmt=f"%.{precision}f", header=header)
    atomic_write(path, buf.getvalue())


class TableTracker:
    """Tracker backed by a scattered table of tracked pixels.

    Queries are answered by linear interpolation of the flow over a Delaunay
    triangulation of the table's first-image pixels. A query fails when it
    falls outside the table or farther than ``max_gap`` from every entry.
    Rows with non-positive quality are treated as lost tracks.
    """

    def __init__(self, table: PixelTable, camera: CameraModel | None = None, max_gap=None):
        keep = table.quality > 0
        p1, p2 = table.pixels1[keep], table.pixels2[keep]
        self.camera = camera
        flow = p2 - p1
        wrap = camera is not None and camera.kind == "spherical"
        if wrap:
            w = camera.width
            flow[:, 0] = (flow[:, 0] + w / 2) % w - w / 2
            # replicate the seam so queries near u = 0 or u = width interpolate
            left, right = p1[:, 0] < 0.1 * w, p1[:, 0] > 0.9 * w
            p1 = np.vstack([p1, p1[left] + [w, 0], p1[right] - [w, 0]])
            flow = np.vstack([flow, flow[left], flow[right]])
        self._tree = cKDTree(p1) if len(p1) else None
        if max_gap is None and len(p1) > 1:
            d, _ = self._tree.query(p1, k=2)
            max_gap = 3.0 * float(np.median(d[:, 1]))
        self.max_gap = max_gap if max_gap is not None else np.inf
        self._interp = LinearNDInterpolator(p1, flow) if len(p1) >= 3 else None

    def track(self, pixels):
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        out = np.full_like(px, np.nan)
        if self._interp is None or len(px) == 0:
            return out, np.zeros(len(px), dtype=bool)
        f = self._interp(px)
        d, _ = self._tree.query(px)
        ok = np.isfinite(f).all(axis=1) & (d <= self.max_gap)
        out[ok] = px[ok] + f[ok]
        if self.camera is not None:
            if self.camera.kind == "spherical":
                out[ok, 0] %= self.camera.width
            ok &= self.camera.in_image(np.where(ok[:, None], out, 0.0))
        out[~ok] = np.nan
        return out, ok


# ---------------------------------------------------------------- manifest / dataset


def camera_to_dict(camera: CameraModel):
    d = dataclasses.asdict(camera)
    if camera.kind == "spherical":
        d = {"kind": "spherical", "width": camera.width, "height": camera.height}
    return d


def camera_from_dict(d):
    try:
        if d["kind"] == "spherical":
            return CameraModel.spherical(d["width"], d["height"])
        return CameraModel("perspective", int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))
    except KeyError as exc:
        raise ParseError(f"camera description lacks {exc.args[0]!r}") from None


def _hash_files(paths):
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def read_manifest(path):
    """Parse and validate a dataset manifest; returns (dict, base directory)."""
    path = Path(path)
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, line=exc.lineno) from None
    if m.get("version") != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest version {m.get('version')!r}", path)
    if m.get("units", "meters") != "meters":
        raise ParseError(f"unsupported units {m.get('units')!r}; only meters", path)
    stations = m.get("stations")
    if not isinstance(stations, list) or len(stations) < 2:
        raise ParseError("manifest needs a list of at least 2 stations", path)
    base = path.parent
    for i, st in enumerate(stations):
        keys = ("scan",) if i == len(stations) - 1 else ("scan", "matches", "tracks")
        for k in keys:
            if k not in st:
                raise ParseError(f"station {i} lacks {k!r}", path)
            p = base / st[k]
            if not p.is_file():
                raise FileNotFoundError(2, "referenced file does not exist", str(p))
    return m, base


def load_dataset(path) -> Dataset:
    """Build a :class:`Dataset` from a manifest; consecutive stations form the motions."""
    m, base = read_manifest(path)
    camera = camera_from_dict(m["camera"])
    stations = m["stations"]
    scans = [read_point_cloud(base / st["scan"]) for st in stations]
    records = []
    for k, st in enumerate(stations[:-1]):
        mid = st.get("id", f"m{k:02d}")
        mt = read_matches(base / st["matches"])
        tr = read_tracks(base / st["tracks"])
        matches = FeatureMatches.from_pixels(camera, mt.pixels1, mt.pixels2, mt.quality)
        records.append(
            MotionRecord(mid, scans[k], scans[k + 1], matches, TableTracker(tr, camera), st.get("kind", ""),
                         match_pixels=(mt.pixels1, mt.pixels2))
        )  # fmt: skip
    name = m.get("dataset_id") or _hash_files([Path(path)])
    return Dataset(camera, records, name)


def write_manifest(path, camera: CameraModel, stations, dataset_id=""):
    doc = {"version": MANIFEST_VERSION, "units": "meters", "dataset_id": dataset_id, "camera": camera_to_dict(camera), "stations": stations}
    atomic_write(path, json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------- config


def _coerce(text, default, key):
    t = text.strip()
    try:
        if isinstance(default, bool):
            if t.lower() in ("1", "true", "yes", "on"):
                return True
            if t.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            if t.endswith("deg"):
                return float(np.radians(float(t[:-3])))
            return float(t)
        if isinstance(default, tuple):
            return tuple(float(x) for x in t.replace("x", " ").replace(",", " ").split())
        return t
    except ValueError:
        raise ValueError(f"bad value {text!r} for {key}") from None


def apply_overrides(obj, values: dict, where=""):
    """Return a copy of a (frozen) dataclass with string overrides parsed by field type."""
    fields = {f.name: f for f in dataclasses.fields(obj)}
    kw = {}
    for k, v in values.items():
        if k not in fields or dataclasses.is_dataclass(getattr(obj, k)):
            raise KeyError(f"unknown setting {where}{k!r}")
        kw[k] = _coerce(v, getattr(obj, k), f"{where}{k}")
    return dataclasses.replace(obj, **kw)


def parse_kv(text):
    """``a=1, b=2`` (or one ``key = value`` per line) into a dict."""
    out = {}
    for part in text.replace("\n", ",").split(","):
        part = part.strip()
        if not part or part.startswith("#"):
            continue
        if "=" not in part:
            raise ValueError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config(path):
    """INI file with sections [pipeline], [icp], [ransac], [fusion], [advisor]."""
    from .pipeline import CalibrationConfig

    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0], path) from None
    cfg = CalibrationConfig()
    subs = {}
    for section in cp.sections():
        vals = dict(cp.items(section))
        try:
            if section == "pipeline":
                cfg = apply_overrides(cfg, vals, "pipeline.")
            elif section in ("icp", "ransac", "fusion", "advisor"):
                subs[section] = apply_overrides(getattr(cfg, section), vals, f"{section}.")
            else:
                raise KeyError(f"unknown section [{section}]")
        except (KeyError, ValueError) as exc:
            raise ParseError(str(exc).strip("'\""), path) from None
    return dataclasses.replace(cfg, **subs)


# ---------------------------------------------------------------- reports


def motion_to_dict(m: RigidMotion):
    return {
        "matrix": m.matrix().tolist(),
        "quaternion": to_quaternion(m.rotation).tolist(),
        "translation": m.translation.tolist(),
    }


def motion_from_dict(d):
    if "matrix" in d:
        return RigidMotion.from_matrix(np.array(d["matrix"], dtype=float))
    return RigidMotion(from_quaternion(d["quaternion"]), d["translation"])


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def extrinsic_to_dict(e):
    d = motion_to_dict(e.transform)
    d.update(
        scales=list(e.scales),
        pair_ids=list(e.pair_ids),
        rotation_residual=e.rotation_residual,
        translation_residual=e.translation_residual,
        condition=e.condition,
        flags=list(e.flags),
        converged=bool(e.converged),
    )
    return d


def report_to_dict(report, sweep=None):
    doc = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "dataset_id": report.dataset_name,
        "convention": "X maps LiDAR-frame coordinates into the camera frame: p_c = R p_l + t",
        "status": report.status,
        "extrinsic": extrinsic_to_dict(report.extrinsic),
        "per_iteration": [
            {
                "iteration": r.iteration,
                "extrinsic": motion_to_dict(r.extrinsic.transform),
                "mean_residual": _finite(r.mean_residual),
                "translation_residual": r.extrinsic.translation_residual,
                "pair_count": r.pair_count,
            }
            for r in report.per_iteration
        ],
        "motion_diagnostics": [dataclasses.asdict(d) | {"flags": list(d.flags)} for d in report.motion_diagnostics],
        "advisor_note": "WEAK_ROTATION / LARGE_BASELINE thresholds are engineering defaults, not derived limits",
        "failures": dict(report.failures),
    }
    if sweep is not None:
        doc["sweep"] = sweep
    return doc


def write_report(path, report, sweep=None):
    atomic_write(path, json.dumps(report_to_dict(report, sweep), indent=2, allow_nan=False) + "\n")


def read_report(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, line=exc.lineno) from None
    if doc.get("format") != REPORT_FORMAT:
        raise ParseError("not a calibration report", path)
    if doc.get("version") != REPORT_VERSION:
        raise ParseError(f"unsupported report version {doc.get('version')!r}", path)
    return doc


def write_oracle(path, oracle):
    atomic_write(path, json.dumps({"format": "motioncalib-oracle", "version": 1} | oracle.to_dict(), indent=2) + "\n")


def read_oracle(path):
    from .synthetic import Oracle

    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, line=exc.lineno) from None
    if doc.get("format") != "motioncalib-oracle":
        raise ParseError("not an oracle file", path)
    return Oracle.from_dict(doc)


def write_csv(path, header, rows):
    buf = StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())


def grid_pixels(camera: CameraModel, step):
    u = np.arange(step / 2, camera.width, step)
    v = np.arange(step / 2, camera.height, step)
    uu, vv = np.meshgrid(u, v)
    return np.column_stack([uu.ravel(), vv.ravel()])


def export_dataset(out_dir, dataset: Dataset, oracle=None, track_step=8.0, binary=True):
    """Write scans, match tables, dense track tables and a manifest (plus oracle).

    Track tables sample each motion's tracker on a regular pixel grid; the
    file-backed tracker interpolates between grid nodes when read back.
    """
    out = Path(out_dir)
    recs = dataset.motions
    if not recs:
        raise ValueError("dataset has no motions")
    scans = [r.scan_from for r in recs] + [recs[-1].scan_to]
    grid = grid_pixels(dataset.camera, track_step)
    stations = []
    for k, scan in enumerate(scans):
        st = {"scan": f"scans/s{k:02d}.ply"}
        write_point_cloud(out / st["scan"], scan, binary)
        if k < len(recs):
            rec = recs[k]
            st.update(id=rec.id, kind=rec.kind, matches=f"matches/{rec.id}.txt", tracks=f"tracks/{rec.id}.txt")
            px1, px2 = rec.match_pixels
            write_table(out / st["matches"], PixelTable(px1, px2, rec.matches.weights))
            p2, ok = rec.tracker.track(grid)
            write_table(out / st["tracks"], PixelTable(grid[ok], p2[ok], np.ones(int(ok.sum()))))
        stations.append(st)
    write_manifest(out / "manifest.json", dataset.camera, stations, dataset.name)
    if oracle is not None:
        write_oracle(out / "oracle.json", oracle)
    return out / "manifest.json"
