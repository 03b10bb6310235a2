"""Geometric primitives: normalization, sampling, distances, and the grid heatmap.

Everything here is a pure function of its inputs. Operations that sit on the
training path (chamfer distance, point-segment distance, heatmap construction
and sampling) are written in torch and stay differentiable; index-selection
utilities (farthest point sampling) are plain numpy since no gradient flows
through the selected indices.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

# Segments shorter than this are treated as a single point (avoids 0/0 in the
# projection parameter).
DEGENERATE_SEGMENT_EPS = 1e-8

# exp() arguments above this abort heatmap construction instead of overflowing.
EXP_OVERFLOW_GUARD = 80.0


class GeometryError(ValueError):
    """Raised on contract violations in geometric operations."""


class Frame(str, enum.Enum):
    RAW = "raw"
    UNIT_CUBE = "unit_cube"


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, PointCloud):
        x = x.points
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        t = t.to(dtype)
    if t.is_floating_point():
        return t
    return t.double()


@dataclass
class PointCloud:
    """N x 3 coordinates plus provenance metadata."""

    points: torch.Tensor
    id: str = ""
    frame: Frame = Frame.RAW

    def __post_init__(self):
        self.points = _as_tensor(self.points)
        if self.points.ndim != 2 or self.points.shape[-1] != 3:
            raise GeometryError(f"point cloud must be N x 3, got {tuple(self.points.shape)}")
        if self.points.shape[0] < 1:
            raise GeometryError("point cloud must contain at least one point")
        if not torch.isfinite(self.points).all():
            raise GeometryError("point cloud contains non-finite coordinates")
        if self.frame == Frame.UNIT_CUBE:
            if self.points.abs().max() > 0.5 + 1e-6:
                raise GeometryError("unit_cube cloud has coordinates outside [-0.5, 0.5]")

    def __len__(self) -> int:
        return self.points.shape[0]

    def numpy(self) -> np.ndarray:
        return self.points.detach().cpu().numpy()


@dataclass(frozen=True)
class NormalizeTransform:
    """Invertible map raw -> unit cube: q = (p + offset) * scale."""

    offset: tuple[float, float, float]
    scale: float

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        off = torch.as_tensor(self.offset, dtype=points.dtype, device=points.device)
        return (points + off) * self.scale

    def invert(self, points: torch.Tensor) -> torch.Tensor:
        off = torch.as_tensor(self.offset, dtype=points.dtype, device=points.device)
        return points / self.scale - off


@dataclass(frozen=True)
class GridSpec:
    """Uniform M x M x M grid over an axis-aligned cube."""

    m: int = 16
    lo: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    hi: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.m < 2:
            raise GeometryError("grid needs at least 2 points per edge")
        if not all(l < h for l, h in zip(self.lo, self.hi)):
            raise GeometryError("grid bounds must satisfy lo < hi componentwise")

    def axes(self, dtype=torch.float64) -> list[torch.Tensor]:
        return [
            torch.linspace(l, h, self.m, dtype=dtype)
            for l, h in zip(self.lo, self.hi)
        ]

    def nodes(self, dtype=torch.float64) -> torch.Tensor:
        """All grid node coordinates, shape (M^3, 3), x fastest-varying last."""
        ax, ay, az = self.axes(dtype)
        gx, gy, gz = torch.meshgrid(ax, ay, az, indexing="ij")
        return torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)


@dataclass
class SkeletonSegment:
    """Edge between keypoints i and j with a learned weight in (0, 1]."""

    i: int
    j: int
    weight: object  # float or 0-d torch.Tensor

    def __post_init__(self):
        if not self.i < self.j:
            raise GeometryError(f"segment indices must satisfy i < j, got ({self.i}, {self.j})")


def all_pair_segments(num_keypoints: int, weights) -> list[SkeletonSegment]:
    """Segments for every keypoint pair (i < j), weights in row-major pair order."""
    pairs = [(i, j) for i in range(num_keypoints) for j in range(i + 1, num_keypoints)]
    if len(weights) != len(pairs):
        raise GeometryError(f"expected {len(pairs)} weights, got {len(weights)}")
    return [SkeletonSegment(i, j, w) for (i, j), w in zip(pairs, weights)]


@dataclass
class GridHeatmap:
    values: torch.Tensor  # M x M x M
    spec: GridSpec
    sigma: float


def normalize_unit_cube(cloud: PointCloud) -> tuple[PointCloud, NormalizeTransform]:
    """Center the tightest bounding box at the origin and scale it into [-0.5, 0.5]^3."""
    if cloud.frame != Frame.RAW:
        raise GeometryError("normalize_unit_cube expects a raw-frame cloud")
    pts = cloud.points
    lo = pts.min(dim=0).values
    hi = pts.max(dim=0).values
    max_extent = (hi - lo).max().item()
    if max_extent <= 0:
        raise GeometryError("zero extent: all points identical")
    center = (lo + hi) / 2
    tf = NormalizeTransform(offset=tuple((-center).tolist()), scale=1.0 / max_extent)
    out = tf.apply(pts)
    # clamp float round-off at the box faces
    out = out.clamp(-0.5, 0.5)
    return PointCloud(out, id=cloud.id, frame=Frame.UNIT_CUBE), tf


def farthest_point_sampling(cloud, num_samples: int, seed_index: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling; ties broken by lowest index.

    When no seed index is given, the lexicographically smallest point seeds the
    walk so that the selected coordinate sequence is invariant to input
    permutation.
    """
    pts = _as_tensor(cloud).detach().cpu().numpy().astype(np.float64)
    n = pts.shape[0]
    if not 1 <= num_samples <= n:
        raise GeometryError(f"cannot sample {num_samples} points from a cloud of {n}")
    if seed_index is None:
        seed_index = int(np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))[0])
    if not 0 <= seed_index < n:
        raise GeometryError(f"seed index {seed_index} out of range for {n} points")

    chosen = np.empty(num_samples, dtype=np.int64)
    chosen[0] = seed_index
    min_d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for k in range(1, num_samples):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        chosen[k] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


def chamfer_distance(a, b) -> torch.Tensor:
    """Symmetric Chamfer distance: mean squared nearest-neighbor distance both ways."""
    pa = _as_tensor(a)
    pb = _as_tensor(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise GeometryError("chamfer distance of an empty cloud")
    if pa.dtype != pb.dtype:
        common = torch.promote_types(pa.dtype, pb.dtype)
        pa, pb = pa.to(common), pb.to(common)
    d2 = torch.cdist(pa, pb).pow(2)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def point_segment_distance(p, k_i, k_j) -> torch.Tensor:
    """Distance from p to segment (k_i, k_j); broadcasts over leading dims.

    Uses the clamped-projection form: the foot of the perpendicular when it
    falls inside the segment, else the nearer endpoint. Segments shorter than
    DEGENERATE_SEGMENT_EPS collapse to the point k_i.
    """
    p = _as_tensor(p)
    k_i = _as_tensor(k_i)
    k_j = _as_tensor(k_j)
    seg = k_j - k_i
    len2 = (seg * seg).sum(dim=-1)
    degenerate = len2 < DEGENERATE_SEGMENT_EPS**2
    t = ((p - k_i) * seg).sum(dim=-1) / torch.where(degenerate, torch.ones_like(len2), len2)
    t = torch.where(degenerate, torch.zeros_like(t), t)
    t_clamped = t.clamp(0.0, 1.0)
    foot = k_i + t_clamped.unsqueeze(-1) * seg
    return torch.linalg.vector_norm(p - foot, dim=-1)


def build_heatmap(
    keypoints,
    segments: list[SkeletonSegment],
    spec: GridSpec,
    sigma: float,
    negate_exponent: bool = False,
) -> GridHeatmap:
    """Grid heatmap: each node holds max over segments of weight * exp(d^2 / sigma^2).

    `negate_exponent=True` switches to the conventional Gaussian exp(-d^2 / sigma^2).
    """
    if sigma <= 0:
        raise GeometryError("sigma must be positive")
    kp = _as_tensor(keypoints)
    if kp.shape[0] < 2:
        raise GeometryError("heatmap needs at least two keypoints")
    if not segments:
        raise GeometryError("heatmap needs at least one segment")
    nodes = spec.nodes(dtype=kp.dtype)  # (M^3, 3)

    idx_i = torch.tensor([s.i for s in segments])
    idx_j = torch.tensor([s.j for s in segments])
    weights = torch.stack([
        w if isinstance(w, torch.Tensor) else torch.as_tensor(w, dtype=kp.dtype)
        for w in (s.weight for s in segments)
    ]).to(kp.dtype)

    d = point_segment_distance(
        nodes.unsqueeze(1), kp[idx_i].unsqueeze(0), kp[idx_j].unsqueeze(0)
    )  # (M^3, S)
    arg = d.pow(2) / sigma**2
    if not negate_exponent and arg.detach().max().item() > EXP_OVERFLOW_GUARD:
        raise GeometryError("sigma too small for cube")
    if negate_exponent:
        arg = -arg
    values = (weights.unsqueeze(0) * torch.exp(arg)).max(dim=1).values
    m = spec.m
    return GridHeatmap(values=values.reshape(m, m, m), spec=spec, sigma=float(sigma))


def sample_heatmap(heatmap: GridHeatmap, queries) -> torch.Tensor:
    """Trilinear interpolation of heatmap values at Q query points.

    Queries outside the cube are clamped to the boundary; exact at grid nodes.
    """
    spec = heatmap.spec
    vals = heatmap.values
    q = _as_tensor(queries).to(vals.dtype)
    lo = torch.as_tensor(spec.lo, dtype=q.dtype)
    hi = torch.as_tensor(spec.hi, dtype=q.dtype)
    step = (hi - lo) / (spec.m - 1)

    u = ((q.clamp(min=lo, max=hi) - lo) / step)  # in [0, M-1]
    base = u.floor().long().clamp(max=spec.m - 2)
    frac = u - base.to(u.dtype)

    ix, iy, iz = base[:, 0], base[:, 1], base[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]

    def corner(dx, dy, dz):
        return vals[ix + dx, iy + dy, iz + dz]

    wx = torch.stack([1 - fx, fx])
    wy = torch.stack([1 - fy, fy])
    wz = torch.stack([1 - fz, fz])
    out = torch.zeros_like(fx)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                out = out + wx[dx] * wy[dy] * wz[dz] * corner(dx, dy, dz)
    return out


def add_gaussian_noise(cloud: PointCloud, scale: float, seed: int) -> PointCloud:
    """Perturb every coordinate with iid zero-mean Gaussian noise of stddev `scale`."""
    if scale < 0:
        raise GeometryError("noise scale must be nonnegative")
    if scale == 0:
        return PointCloud(cloud.points.clone(), id=cloud.id, frame=cloud.frame)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, scale, size=(len(cloud), 3))
    pts = cloud.points + torch.as_tensor(noise, dtype=cloud.points.dtype)
    # noise can push a normalized cloud outside the cube; the result is raw-frame
    return PointCloud(pts, id=cloud.id, frame=Frame.RAW)


def downsample(cloud: PointCloud, factor: int, seed_index: int | None = None) -> PointCloud:
    """Keep the floor(N / factor)-point farthest-point-sampling subset."""
    if factor < 1:
        raise GeometryError("downsample factor must be >= 1")
    target = len(cloud) // factor
    if target < 1:
        raise GeometryError(f"factor {factor} leaves no points from a cloud of {len(cloud)}")
    idx = farthest_point_sampling(cloud, target, seed_index=seed_index)
    return PointCloud(cloud.points[idx], id=cloud.id, frame=cloud.frame)
