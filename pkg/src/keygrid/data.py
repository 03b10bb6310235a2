"""Point-cloud ingestion, annotation loading, and synthetic deformable families.

Supported cloud file formats:
  * ``.xyz``  — ASCII, one "x y z" triple per line
  * ``.ply``  — polygon file format, vertex elements only (ASCII or binary LE)
  * ``.f32``  — raw little-endian float32 N x 3 blob with a ``<file>.json``
                sidecar holding ``{"n": N}``

Synthetic families generate smooth deformation sequences of a parametric
surface with identical sample indices across frames, so the frame-to-frame
correspondence is the identity on indices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import Frame, PointCloud


class DataError(ValueError):
    pass


class CloudFormatError(DataError):
    """Unknown extension or malformed cloud file."""


SYNTH_KINDS = ("folded_sheet", "articulated_pair", "bent_tube")


@dataclass
class SynthFamilyParams:
    kind: str = "folded_sheet"
    frames: int = 32
    points: int = 512
    magnitude: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTH_KINDS:
            raise DataError(f"unknown synthetic family kind: {self.kind!r}")
        if self.frames < 2:
            raise DataError("a family needs at least 2 frames")
        if not 0.0 <= self.magnitude <= 1.0:
            raise DataError("deformation magnitude must lie in [0, 1]")


# --- file IO ----------------------------------------------------------------

def load_cloud(path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise CloudFormatError(f"no such file: {path}")
    ext = path.suffix.lower()
    if ext == ".xyz":
        pts = _load_xyz(path)
    elif ext == ".ply":
        pts = _load_ply(path)
    elif ext == ".f32":
        pts = _load_f32(path)
    else:
        raise CloudFormatError(f"unknown cloud extension: {ext!r}")
    if not np.isfinite(pts).all():
        raise CloudFormatError(f"{path}: non-finite coordinates")
    return PointCloud(torch.as_tensor(pts), id=path.stem)


def write_cloud(cloud: PointCloud, path, ply_binary: bool = False) -> None:
    path = Path(path)
    pts = cloud.numpy().astype(np.float32)
    ext = path.suffix.lower()
    if ext == ".xyz":
        np.savetxt(path, pts, fmt="%.9g")
    elif ext == ".ply":
        _write_ply(path, pts, binary=ply_binary)
    elif ext == ".f32":
        path.write_bytes(pts.astype("<f4").tobytes())
        path.with_suffix(".json").write_text(json.dumps({"n": pts.shape[0]}))
    else:
        raise CloudFormatError(f"unknown cloud extension: {ext!r}")


def _load_xyz(path: Path) -> np.ndarray:
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CloudFormatError(f"{path}:{ln}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise CloudFormatError(f"{path}:{ln}: malformed number") from None
    if not rows:
        raise CloudFormatError(f"{path}: empty cloud")
    return np.asarray(rows, dtype=np.float64)


def _load_f32(path: Path) -> np.ndarray:
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise CloudFormatError(f"missing sidecar {sidecar}")
    n = json.loads(sidecar.read_text())["n"]
    raw = path.read_bytes()
    if len(raw) != n * 12:
        raise CloudFormatError(f"{path}: expected {n * 12} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(n, 3).astype(np.float64)


_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
}


def _load_ply(path: Path) -> np.ndarray:
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise CloudFormatError(f"{path}: not a polygon file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = None
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise CloudFormatError(f"{path}: list properties unsupported")
            props.append((tok[1], tok[2]))
    if fmt not in ("ascii", "binary_little_endian") or n_vertex is None:
        raise CloudFormatError(f"{path}: unsupported or incomplete header")
    names = [p[1] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise CloudFormatError(f"{path}: vertex element lacks x/y/z")

    if fmt == "ascii":
        rows = []
        lines = body.decode("ascii", errors="replace").splitlines()
        for line in lines[:n_vertex]:
            vals = line.split()
            if len(vals) != len(props):
                raise CloudFormatError(f"{path}: malformed vertex record")
            rows.append([float(v) for v in vals])
        if len(rows) != n_vertex:
            raise CloudFormatError(f"{path}: truncated vertex data")
        arr = np.asarray(rows, dtype=np.float64)
    else:
        dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in props])
        if len(body) < n_vertex * dtype.itemsize:
            raise CloudFormatError(f"{path}: truncated vertex data")
        rec = np.frombuffer(body[: n_vertex * dtype.itemsize], dtype=dtype)
        arr = np.stack([rec[n].astype(np.float64) for n in names], axis=1)
    cols = [names.index(c) for c in ("x", "y", "z")]
    return arr[:, cols]


def _write_ply(path: Path, pts: np.ndarray, binary: bool,
               colors: np.ndarray | None = None) -> None:
    n = pts.shape[0]
    lines = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += ["end_header"]
    header = "\n".join(lines) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            for i in range(n):
                f.write(struct.pack("<fff", *pts[i]))
                if colors is not None:
                    f.write(struct.pack("<BBB", *colors[i]))
        else:
            for i in range(n):
                row = "%.9g %.9g %.9g" % tuple(pts[i])
                if colors is not None:
                    row += " %d %d %d" % tuple(colors[i])
                f.write((row + "\n").encode("ascii"))


def write_colored_ply(path, pts: np.ndarray, colors: np.ndarray) -> None:
    """ASCII polygon file with per-vertex uchar RGB."""
    _write_ply(Path(path), pts.astype(np.float32), binary=False,
               colors=colors.astype(np.uint8))


# --- annotations -------------------------------------------------------------

def load_annotations(path) -> dict[str, list[tuple[str, np.ndarray]]]:
    """JSON mapping shape id -> list of {label, xyz} keypoint annotations."""
    raw = json.loads(Path(path).read_text())
    out = {}
    for shape_id, entries in raw.items():
        out[shape_id] = [
            (str(e["label"]), np.asarray(e["xyz"], dtype=np.float64)) for e in entries
        ]
    return out


# --- mesh sampling -----------------------------------------------------------

def sample_mesh(vertices, faces, num_points: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform sampling of a triangle mesh surface."""
    verts = np.asarray(vertices, dtype=np.float64)
    tris = verts[np.asarray(faces, dtype=np.int64)]  # (T, 3, 3)
    cross = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise DataError("degenerate mesh: zero surface area")
    rng = np.random.default_rng(seed)
    tri_idx = rng.choice(len(areas), size=num_points, p=areas / total)
    u, v = rng.random(num_points), rng.random(num_points)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tris[tri_idx]
    pts = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    return PointCloud(torch.as_tensor(pts), id=f"mesh-{seed}")


# --- synthetic deformation families -------------------------------------------

def synth_family(params: SynthFamilyParams) -> list[tuple[PointCloud, np.ndarray]]:
    """Deformation sequence with identity index correspondence across frames."""
    rng = np.random.default_rng(params.seed)
    base = _rest_shape(params.kind, params.points, rng)
    frames = []
    corr = np.arange(params.points, dtype=np.int64)
    for f in range(params.frames):
        progress = f / (params.frames - 1)
        amount = params.magnitude * progress
        pts = _deform(params.kind, base, amount)
        cloud = PointCloud(
            torch.as_tensor(pts),
            id=f"{params.kind}-s{params.seed}-f{f:03d}",
            frame=Frame.RAW,
        )
        frames.append((cloud, corr.copy()))
    return frames


def _rest_shape(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "folded_sheet":
        # unit sheet in the xy plane, x in [-1, 1], y in [-0.5, 0.5]
        xy = rng.random((n, 2))
        return np.column_stack([xy[:, 0] * 2 - 1, xy[:, 1] - 0.5, np.zeros(n)])
    if kind == "articulated_pair":
        # two bars meeting at the origin along +x and -x
        t = rng.random(n) * 2 - 1
        jitter = rng.normal(0, 0.03, size=(n, 2))
        return np.column_stack([t, jitter[:, 0], jitter[:, 1]])
    # bent_tube: straight tube along x
    t = rng.random(n) * 2 - 1
    theta = rng.random(n) * 2 * np.pi
    r = 0.1
    return np.column_stack([t, r * np.cos(theta), r * np.sin(theta)])


def _deform(kind: str, base: np.ndarray, amount: float) -> np.ndarray:
    if amount == 0.0:
        return base.copy()
    if kind == "folded_sheet":
        # fold the x > 0 half about the crease line x = 0 (axis = y) by amount * pi
        out = base.copy()
        angle = amount * np.pi
        c, s = np.cos(angle), np.sin(angle)
        mask = base[:, 0] > 0
        x, z = base[mask, 0], base[mask, 2]
        out[mask, 0] = c * x - s * z
        out[mask, 2] = s * x + c * z
        return out
    if kind == "articulated_pair":
        # hinge the +x bar upward about the y axis by amount * pi/2
        out = base.copy()
        angle = amount * np.pi / 2
        c, s = np.cos(angle), np.sin(angle)
        mask = base[:, 0] > 0
        x, z = base[mask, 0], base[mask, 2]
        out[mask, 0] = c * x - s * z
        out[mask, 2] = s * x + c * z
        return out
    # bent_tube: wrap the axis onto a circular arc of total angle amount * pi
    total = amount * np.pi
    radius = 2.0 / total  # arc length 2 preserved
    phi = base[:, 0] / radius
    out = base.copy()
    out[:, 0] = np.sin(phi) * (radius + base[:, 2])
    out[:, 2] = (radius + base[:, 2]) * (1 - np.cos(phi))
    return out
