"""Shape primitives, signed-distance queries, uniform sampling, voxel grids.

Sign convention: sdf < 0 inside, > 0 outside, 0 on the surface. All
primitives carry a rigid pose (translation + unit quaternion); queries are
mapped into the local frame, so every SDF is exact under rigid motion and
1-Lipschitz in the query point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import GridBoundsError, GridSpecMismatch, SamplingFailure, UndefinedIoU
from .rotations import IDENTITY_QUAT, quat_normalize, quat_to_mat

_EPS = 1e-12


# ---------------------------------------------------------------------------
# Particle clouds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParticleCloud:
    """Uniform-mass point set standing in for a soft body or template.

    Masses are equal and sum to 1 (uniform-density assumption); only the
    relative weighting matters downstream.
    """

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("points must be a nonempty (N, 3) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        m = np.ascontiguousarray(self.masses, dtype=float)
        if m.shape != (pts.shape[0],):
            raise ValueError("masses must be (N,)")
        if not np.all(m > 0) or not np.allclose(m, m[0]):
            raise ValueError("masses must be strictly positive and uniform")
        pts.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", m)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "ParticleCloud":
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        return cls(points=points, masses=np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def translated(self, offset) -> "ParticleCloud":
        return ParticleCloud(points=self.points + np.asarray(offset, dtype=float),
                             masses=self.masses)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShapePrimitive:
    """Base: a rigid-posed solid with an exact signed-distance function."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quat: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        q = np.asarray(self.quat, dtype=float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("pose rotation must be a unit quaternion")
        q = quat_normalize(q)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "quat", q)
        self._validate()

    def _validate(self):
        pass

    # -- local-frame geometry, implemented per subclass ---------------------

    def _sdf_local(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _grad_local(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _bbox_local(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    @property
    def kind(self) -> str:
        raise NotImplementedError

    # -- world-frame queries -------------------------------------------------

    def _to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.center) @ quat_to_mat(self.quat)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance at (N, 3) points (scalar input -> scalar output)."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        d = self._sdf_local(self._to_local(points))
        return float(d[0]) if single else d

    def sdf_grad(self, points: np.ndarray) -> np.ndarray:
        """Unit outward gradient of the SDF at (N, 3) points."""
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        g = self._grad_local(self._to_local(points)) @ quat_to_mat(self.quat).T
        return g[0] if single else g

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """World-frame axis-aligned bounding box."""
        lo, hi = self._bbox_local()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        world = corners @ quat_to_mat(self.quat).T + self.center
        return world.min(axis=0), world.max(axis=0)

    def at(self, center=None, quat=None) -> "ShapePrimitive":
        """Copy of the shape with a replaced pose."""
        kw = {}
        if center is not None:
            kw["center"] = np.asarray(center, dtype=float)
        if quat is not None:
            kw["quat"] = np.asarray(quat, dtype=float)
        return replace(self, **kw)

    def largest_dimension(self) -> float:
        lo, hi = self._bbox_local()
        return float(np.max(hi - lo))

    def smallest_dimension(self) -> float:
        lo, hi = self._bbox_local()
        return float(np.min(hi - lo))


def _norm_rows(p: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", p, p))


@dataclass(frozen=True)
class Sphere(ShapePrimitive):
    radius: float = 1.0

    def _validate(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def kind(self) -> str:
        return "sphere"

    def _sdf_local(self, p):
        return _norm_rows(p) - self.radius

    def _grad_local(self, p):
        r = np.maximum(_norm_rows(p), _EPS)[:, None]
        g = p / r
        # direction at the exact center is arbitrary; pick +y
        g[np.squeeze(r, 1) <= _EPS] = (0.0, 1.0, 0.0)
        return g

    def _bbox_local(self):
        r = self.radius
        return np.full(3, -r), np.full(3, r)


@dataclass(frozen=True)
class Capsule(ShapePrimitive):
    """Capsule along the local y axis: segment of half_length, inflated by radius."""

    radius: float = 1.0
    half_length: float = 1.0

    def _validate(self):
        if self.radius <= 0 or self.half_length <= 0:
            raise ValueError("capsule parameters must be positive")

    @property
    def kind(self) -> str:
        return "capsule"

    def _core(self, p):
        u = p.copy()
        u[:, 1] -= np.clip(p[:, 1], -self.half_length, self.half_length)
        return u

    def _sdf_local(self, p):
        return _norm_rows(self._core(p)) - self.radius

    def _grad_local(self, p):
        u = self._core(p)
        r = np.maximum(_norm_rows(u), _EPS)[:, None]
        g = u / r
        g[np.squeeze(r, 1) <= _EPS] = (0.0, 1.0, 0.0)
        return g

    def _bbox_local(self):
        r, h = self.radius, self.half_length
        return np.array([-r, -h - r, -r]), np.array([r, h + r, r])


@dataclass(frozen=True)
class RoundedBox(ShapePrimitive):
    """Core box of given half extents, inflated outward by radius."""

    half_extents: np.ndarray = field(default_factory=lambda: np.ones(3))
    radius: float = 0.0

    def _validate(self):
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        object.__setattr__(self, "half_extents", he)
        if not np.all(he > 0) or self.radius < 0:
            raise ValueError("half extents must be positive, radius nonnegative")
        if np.all(he <= 0) and self.radius <= 0:
            raise ValueError("degenerate rounded box")

    @property
    def kind(self) -> str:
        return "rounded-box"

    def _sdf_local(self, p):
        q = np.abs(p) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside - self.radius

    def _grad_local(self, p):
        q = np.abs(p) - self.half_extents
        pos = np.maximum(q, 0.0)
        r = _norm_rows(pos)
        g = np.zeros_like(p)
        out = r > _EPS
        g[out] = pos[out] / r[out, None] * np.sign(p[out])
        if np.any(~out):
            # inside the core box: outward along the least-penetrated axis
            idx = np.argmax(q[~out], axis=1)
            rows = np.where(~out)[0]
            g[rows, idx] = np.sign(p[rows, idx])
            zero = g[rows, idx] == 0.0
            g[rows[zero], idx[zero]] = 1.0
        return g

    def _bbox_local(self):
        e = self.half_extents + self.radius
        return -e, e


@dataclass(frozen=True)
class Box(RoundedBox):
    """Sharp-cornered box (zero rounding radius)."""

    @property
    def kind(self) -> str:
        return "box"


@dataclass(frozen=True)
class Union(ShapePrimitive):
    """Pointwise minimum of child SDFs (children posed in the union frame)."""

    children: Sequence[ShapePrimitive] = ()

    def _validate(self):
        if len(self.children) == 0:
            raise ValueError("union needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def kind(self) -> str:
        return "composite-union"

    def _sdf_local(self, p):
        return np.min([c.sdf(p) for c in self.children], axis=0)

    def _grad_local(self, p):
        vals = np.stack([c.sdf(p) for c in self.children])
        grads = np.stack([c.sdf_grad(p) for c in self.children])
        pick = np.argmin(vals, axis=0)
        return grads[pick, np.arange(p.shape[0])]

    def _bbox_local(self):
        los, his = zip(*(c.bbox() for c in self.children))
        return np.min(los, axis=0), np.max(his, axis=0)


# ---------------------------------------------------------------------------
# Uniform interior sampling
# ---------------------------------------------------------------------------

ATTEMPT_BUDGET_FACTOR = 1000


def sample_uniform(shape: ShapePrimitive, n: int, seed: int,
                   exclude: Sequence[ShapePrimitive] = ()) -> ParticleCloud:
    """Sample n points uniformly from the shape interior (sdf < 0).

    Rejection sampling inside the world-frame bounding box; deterministic for
    a fixed seed. Points inside any `exclude` shape are rejected, which is how
    goal templates with carved-out regions are built.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = shape.bbox()
    if not np.all(hi > lo):
        raise SamplingFailure("shape bounding box has no volume")
    rng = np.random.default_rng(seed)
    budget = ATTEMPT_BUDGET_FACTOR * n
    out = np.empty((n, 3))
    have = 0
    used = 0
    while have < n:
        batch = min(max(2 * (n - have), 256), budget - used)
        if batch <= 0:
            raise SamplingFailure(
                f"rejection sampling exceeded {budget} attempts "
                f"({have}/{n} accepted)")
        used += batch
        cand = rng.uniform(lo, hi, size=(batch, 3))
        ok = shape.sdf(cand) < 0.0
        for ex in exclude:
            ok &= ex.sdf(cand) >= 0.0
        take = cand[ok][: n - have]
        out[have: have + len(take)] = take
        have += len(take)
    return ParticleCloud.from_points(out)


def interior_fraction(shape: ShapePrimitive, seed: int = 0, n: int = 20000) -> float:
    """Monte-Carlo estimate of volume(shape) / volume(bbox)."""
    lo, hi = shape.bbox()
    rng = np.random.default_rng(seed)
    cand = rng.uniform(lo, hi, size=(n, 3))
    return float(np.mean(shape.sdf(cand) < 0.0))


# ---------------------------------------------------------------------------
# Occupancy grids and IoU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel lattice: `resolution` cells of size `cell` from `origin`."""

    resolution: tuple[int, int, int]
    origin: np.ndarray
    cell: float

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if any(r < 1 for r in res):
            raise ValueError("resolution must be >= 1 per axis")
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=float).reshape(3))

    @classmethod
    def unit_domain(cls, n: int = 32) -> "GridSpec":
        return cls(resolution=(n, n, n), origin=np.zeros(3), cell=1.0 / n)

    def matches(self, other: "GridSpec") -> bool:
        return (self.resolution == other.resolution
                and np.allclose(self.origin, other.origin)
                and np.isclose(self.cell, other.cell))


@dataclass(frozen=True)
class OccupancyGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.spec.resolution:
            raise ValueError("values shape must match the grid resolution")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("occupancies must lie in [0, 1]")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


# One particle saturates a cell; the IoU then behaves like a binary overlap.
REFERENCE_DENSITY = 1.0


def voxelize(cloud: ParticleCloud, spec: GridSpec) -> OccupancyGrid:
    """Occupancy = clip(particles per cell / reference density, 0, 1)."""
    rel = (cloud.points - spec.origin) / spec.cell
    idx = np.floor(rel).astype(int)
    res = np.array(spec.resolution)
    # particles sitting exactly on the upper face belong to the last cell
    on_top = (idx == res) & np.isclose(rel, res)
    idx[on_top] -= 1
    if np.any(idx < 0) or np.any(idx >= res):
        raise GridBoundsError("particles outside the voxel grid")
    flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), spec.resolution)
    counts = np.bincount(flat, minlength=int(np.prod(spec.resolution)))
    values = np.clip(counts.reshape(spec.resolution) / REFERENCE_DENSITY, 0.0, 1.0)
    return OccupancyGrid(spec=spec, values=values)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    """Soft intersection-over-union: sum(min) / sum(max)."""
    if not a.spec.matches(b.spec):
        raise GridSpecMismatch("grids have different specs")
    union = np.maximum(a.values, b.values).sum()
    if union == 0.0:
        raise UndefinedIoU("both grids are empty")
    return float(np.minimum(a.values, b.values).sum() / union)
