"""Discrete geometry: grid, body descriptors, region masks and measures.

The computational domain is a uniform Cartesian box truncating the exterior
of the heated body.  Fields live on grid nodes; region measures use sub-cell
linear interpolation so that volumes and contour lengths converge at O(h^2)
and O(h) respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np
from skimage import measure as _skmeasure

from .errors import ConfigError, EmptyBoundaryError, ShapeError

__all__ = [
    "CellClass",
    "GridSpec",
    "Ball",
    "Ellipsoid",
    "Slab",
    "DomainSpec",
    "ScalarField",
    "VectorField",
    "RegionMask",
    "build_grid",
    "classify",
    "gradient",
    "measure_volume",
    "cell_positive_fractions",
    "region_volume",
    "surface_measure",
    "contour_points",
    "field_to_csv",
    "unit_ball_volume",
]

MIN_RESOLUTION = 8
BODY_MARGIN_CELLS = 4


def unit_ball_volume(n: int) -> float:
    """Volume of the unit ball in n dimensions."""
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


class CellClass(IntEnum):
    BODY = 0
    ACTIVE = 1
    DEAD = 2
    DIRICHLET_INNER = 3
    DIRICHLET_OUTER = 4


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid: node (i_1,..,i_n) sits at origin + h*(i_1,..,i_n)."""

    dims: tuple[int, ...]
    h: float
    origin: np.ndarray

    def __post_init__(self):
        if any(d < MIN_RESOLUTION for d in self.dims):
            raise ConfigError(f"grid needs >= {MIN_RESOLUTION} nodes per axis, got {self.dims}")
        if self.h <= 0:
            raise ConfigError(f"grid spacing must be positive, got {self.h}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin.copy()
        hi = self.origin + self.h * (np.asarray(self.dims) - 1)
        return lo, hi

    def axes(self) -> list[np.ndarray]:
        return [self.origin[k] + self.h * np.arange(self.dims[k]) for k in range(self.ndim)]

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape dims + (n,), row-major."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def node_count(self) -> int:
        return int(np.prod(self.dims))


# ---------------------------------------------------------------------------
# body descriptors


class _BodyBase:
    """Shape of the heated body D.  Signed distance is negative inside D."""

    def sdist(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inside(self, pts: np.ndarray) -> np.ndarray:
        return self.sdist(pts) < 0.0

    def volume(self, n: int) -> float:
        raise NotImplementedError

    def bbox(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def boundary_quadrature(self, m: int, grid: Optional[GridSpec] = None):
        """Sample points on the body surface.

        Returns (points, normals, weights) where normals point away from the
        body into the insulation region and weights sum to the surface measure.
        """
        raise NotImplementedError


@dataclass(frozen=True)
class Ball(_BodyBase):
    center: tuple[float, ...]
    radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("ball radius must be positive")

    def sdist(self, pts):
        c = np.asarray(self.center, dtype=float)
        return np.linalg.norm(np.asarray(pts, dtype=float) - c, axis=-1) - self.radius

    def volume(self, n):
        return unit_ball_volume(n) * self.radius**n

    def bbox(self, n):
        c = np.asarray(self.center, dtype=float)
        r = self.radius
        return c - r, c + r

    def boundary_quadrature(self, m, grid=None):
        c = np.asarray(self.center, dtype=float)
        n = c.size
        if n == 2:
            theta = (np.arange(m) + 0.5) * (2.0 * math.pi / m)
            normals = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
            pts = c + self.radius * normals
            w = np.full(m, 2.0 * math.pi * self.radius / m)
            return pts, normals, w
        if n == 3:
            # Fibonacci sphere: near-uniform points, equal weights.
            k = np.arange(m)
            z = 1.0 - (2.0 * k + 1.0) / m
            phi = k * math.pi * (3.0 - math.sqrt(5.0))
            rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
            normals = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)
            pts = c + self.radius * normals
            w = np.full(m, 4.0 * math.pi * self.radius**2 / m)
            return pts, normals, w
        raise ConfigError(f"unsupported dimension {n}")


@dataclass(frozen=True)
class Ellipsoid(_BodyBase):
    """Axis-aligned ellipsoid.  Signed distance is the scaled-implicit
    approximation (exact on the surface, first order nearby)."""

    center: tuple[float, ...]
    semi_axes: tuple[float, ...]

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ConfigError("ellipsoid semi-axes must be positive")

    def sdist(self, pts):
        c = np.asarray(self.center, dtype=float)
        a = np.asarray(self.semi_axes, dtype=float)
        y = (np.asarray(pts, dtype=float) - c) / a
        rho = np.linalg.norm(y, axis=-1)
        rho_safe = np.maximum(rho, 1e-30)
        grad_norm = np.linalg.norm(y / a, axis=-1) / rho_safe
        return (rho - 1.0) / np.maximum(grad_norm, 1e-30)

    def volume(self, n):
        return unit_ball_volume(n) * float(np.prod(self.semi_axes))

    def bbox(self, n):
        c = np.asarray(self.center, dtype=float)
        a = np.asarray(self.semi_axes, dtype=float)
        return c - a, c + a

    def boundary_quadrature(self, m, grid=None):
        c = np.asarray(self.center, dtype=float)
        a = np.asarray(self.semi_axes, dtype=float)
        if c.size != 2:
            raise ConfigError("ellipsoid boundary quadrature implemented for 2 axes")
        theta = (np.arange(m) + 0.5) * (2.0 * math.pi / m)
        pts = c + np.stack([a[0] * np.cos(theta), a[1] * np.sin(theta)], axis=-1)
        # arc length element and outward normal of an axis-aligned ellipse
        ds = np.sqrt((a[0] * np.sin(theta)) ** 2 + (a[1] * np.cos(theta)) ** 2)
        w = ds * (2.0 * math.pi / m)
        normals = np.stack([np.cos(theta) / a[0], np.sin(theta) / a[1]], axis=-1)
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        return pts, normals, w


@dataclass(frozen=True)
class Slab(_BodyBase):
    """Half-space body {x_axis <= position}; used for slab test geometries."""

    axis: int = 0
    position: float = 0.0

    def sdist(self, pts):
        return np.asarray(pts, dtype=float)[..., self.axis] - self.position

    def volume(self, n):
        return 0.0  # box-clipped slab volume is geometry-dependent; unused

    def bbox(self, n):
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        hi[self.axis] = self.position
        return lo, hi

    def boundary_quadrature(self, m, grid=None):
        if grid is None:
            raise ConfigError("slab boundary quadrature needs the grid for lateral extent")
        if grid.ndim != 2:
            raise ConfigError("slab boundary quadrature implemented for 2 axes")
        lo, hi = grid.box
        other = 1 - self.axis
        t = np.linspace(lo[other], hi[other], m)
        pts = np.zeros((m, 2))
        pts[:, self.axis] = self.position
        pts[:, other] = t
        normals = np.zeros((m, 2))
        normals[:, self.axis] = 1.0
        length = hi[other] - lo[other]
        w = np.full(m, length / m)
        return pts, normals, w


@dataclass(frozen=True)
class DomainSpec:
    """Body D plus its boundary temperature."""

    body: _BodyBase
    phi: float | Callable[[np.ndarray], np.ndarray] = 1.0

    def phi_at(self, pts: np.ndarray) -> np.ndarray:
        if callable(self.phi):
            vals = np.asarray(self.phi(pts), dtype=float)
        else:
            vals = np.full(np.asarray(pts).shape[:-1], float(self.phi))
        if np.any(vals <= 0):
            raise ConfigError("boundary temperature must be positive everywhere on the body")
        return vals

    def max_phi(self) -> float:
        if callable(self.phi):
            raise ConfigError("max_phi for callable temperatures needs sampling; pass a constant")
        return float(self.phi)


# ---------------------------------------------------------------------------
# fields


@dataclass
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.dims:
            raise ShapeError(f"field shape {self.values.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("field contains non-finite values")

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class VectorField:
    grid: GridSpec
    values: np.ndarray  # shape dims + (n,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.dims + (self.grid.ndim,):
            raise ShapeError(f"vector field shape {self.values.shape} mismatches grid {self.grid.dims}")

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)


@dataclass
class RegionMask:
    """Per-node classification plus the geometric helpers every consumer needs.

    body_sd caches the body signed distance at nodes (negative inside D);
    psi is the level-set values when a free boundary is present (None before
    the optimizer runs); body_volume is the exact measure of D so that
    sub-cell volumes of {u>0} can subtract it without re-meshing the body.
    """

    grid: GridSpec
    cls: np.ndarray
    body_sd: np.ndarray
    psi: Optional[np.ndarray] = None
    body_volume: float = 0.0
    body: Optional[_BodyBase] = field(default=None, repr=False)

    def count(self, c: CellClass) -> int:
        return int(np.count_nonzero(self.cls == c))

    def fluid(self) -> np.ndarray:
        """Nodes carrying PDE unknowns: the positivity region outside D."""
        return (self.cls == CellClass.ACTIVE) | (self.cls == CellClass.DIRICHLET_INNER)

    def exterior(self) -> np.ndarray:
        return self.cls != CellClass.BODY


def _adjacent_to(flag: np.ndarray) -> np.ndarray:
    """Nodes with a face neighbor where flag is set."""
    out = np.zeros_like(flag)
    for ax in range(flag.ndim):
        sl_lo = [slice(None)] * flag.ndim
        sl_hi = [slice(None)] * flag.ndim
        sl_lo[ax] = slice(None, -1)
        sl_hi[ax] = slice(1, None)
        out[tuple(sl_lo)] |= flag[tuple(sl_hi)]
        out[tuple(sl_hi)] |= flag[tuple(sl_lo)]
    return out


def classify(grid: GridSpec, domain: Optional[DomainSpec], psi: Optional[np.ndarray] = None) -> RegionMask:
    """Build the region mask from the body and (optionally) a level set."""
    nodes = grid.nodes()
    if domain is not None:
        body_sd = np.asarray(domain.body.sdist(nodes), dtype=float)
        body_volume = domain.body.volume(grid.ndim)
        body = domain.body
    else:
        body_sd = np.full(grid.dims, np.inf)
        body_volume = 0.0
        body = None

    is_body = body_sd < 0.0
    cls = np.full(grid.dims, CellClass.ACTIVE, dtype=np.uint8)
    cls[is_body] = CellClass.BODY

    if psi is not None:
        if psi.shape != grid.dims:
            raise ShapeError("level set shape mismatches grid")
        dead = (~is_body) & (psi >= 0.0)
        cls[dead] = CellClass.DEAD

    near_body = _adjacent_to(is_body) & (~is_body) & (cls != CellClass.DEAD)
    cls[near_body] = CellClass.DIRICHLET_INNER

    live = (cls == CellClass.ACTIVE) | (cls == CellClass.DIRICHLET_INNER)
    outer = _adjacent_to(live) & (cls == CellClass.DEAD)
    cls[outer] = CellClass.DIRICHLET_OUTER

    return RegionMask(grid=grid, cls=cls, body_sd=body_sd, psi=psi,
                      body_volume=body_volume, body=body)


def build_grid(domain: DomainSpec, resolution: int, box_margin: float) -> tuple[GridSpec, RegionMask]:
    """Grid over the body's bounding box inflated by box_margin on every side."""
    if resolution < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    lo_b, hi_b = None, None
    # bounding box of the body; infer dimension from the center descriptor
    if isinstance(domain.body, Ball):
        n = len(domain.body.center)
    elif isinstance(domain.body, Ellipsoid):
        n = len(domain.body.center)
    else:
        raise ConfigError("build_grid supports ball and ellipsoid bodies")
    lo_b, hi_b = domain.body.bbox(n)
    lo = lo_b - box_margin
    hi = hi_b + box_margin
    length = float(np.max(hi - lo))
    # equal spacing on all axes; expand shorter axes symmetrically
    h = length / (resolution - 1)
    dims = []
    origin = np.empty(n)
    for k in range(n):
        m = int(round((hi[k] - lo[k]) / h)) + 1
        m = max(m, MIN_RESOLUTION)
        pad = ((m - 1) * h - (hi[k] - lo[k])) / 2.0
        origin[k] = lo[k] - pad
        dims.append(m)
    grid = GridSpec(tuple(dims), h, origin)
    glo, ghi = grid.box
    margin = BODY_MARGIN_CELLS * h
    if np.any(lo_b - glo < margin - 1e-12) or np.any(ghi - hi_b < margin - 1e-12):
        raise ConfigError(
            f"box must contain the body with margin >= {BODY_MARGIN_CELLS}h = {margin:.4g}; "
            f"increase box_margin (= {box_margin:.4g})")
    return grid, classify(grid, domain)


# ---------------------------------------------------------------------------
# differential / measure operators


def gradient(u: ScalarField) -> VectorField:
    """Centered differences inside, one-sided on box faces; exact on affine fields."""
    g = np.gradient(u.values, u.grid.h, edge_order=1)
    if u.grid.ndim == 1:
        g = [g]
    return VectorField(u.grid, np.stack(g, axis=-1))


def _simplex_positive_fraction(vals: np.ndarray) -> np.ndarray:
    """Volume fraction of {linear interpolant > 0} on simplices.

    vals has shape (K, d+1) for K d-simplices.  Uses the divided-difference
    identity: fraction = sum over positive vertices of f_v^d / prod(f_v - f_w).
    Exact for linear data; ties are jittered deterministically.
    """
    vals = np.array(vals, dtype=float)
    k, m = vals.shape
    d = m - 1
    scale = np.max(np.abs(vals), axis=1, keepdims=True)
    scale[scale == 0.0] = 1.0
    # deterministic jitter breaks exact ties between vertex values
    jitter = scale * 1e-13 * (np.arange(m) + 1.0)
    v = vals + jitter
    frac = np.zeros(k)
    for i in range(m):
        fi = v[:, i]
        denom = np.ones(k)
        for j in range(m):
            if j == i:
                continue
            denom *= fi - v[:, j]
        term = np.where(fi > 0.0, fi**d / denom, 0.0)
        frac += term
    return np.clip(frac, 0.0, 1.0)


def _cell_corner_values(s: np.ndarray) -> list[np.ndarray]:
    """Corner value arrays for every grid cell, shape (dims-1) each."""
    nd = s.ndim
    corners = []
    for bits in range(2**nd):
        sl = []
        for ax in range(nd):
            if (bits >> ax) & 1:
                sl.append(slice(1, None))
            else:
                sl.append(slice(None, -1))
        corners.append(s[tuple(sl)])
    return corners


_TET_SPLIT_3D = [
    # Kuhn subdivision of the unit cube into 6 tetrahedra, corners as bitmasks
    (0b000, 0b001, 0b011, 0b111),
    (0b000, 0b001, 0b101, 0b111),
    (0b000, 0b010, 0b011, 0b111),
    (0b000, 0b010, 0b110, 0b111),
    (0b000, 0b100, 0b101, 0b111),
    (0b000, 0b100, 0b110, 0b111),
]


def cell_positive_fractions(s: np.ndarray) -> np.ndarray:
    """Per-cell fraction of {s > 0}, shape dims-1 on every axis.

    2D cells split into four triangles around the cell center; 3D cells into
    six tetrahedra.  Pure sign counting on uniform cells, exact linear
    fractions on mixed cells.
    """
    nd = s.ndim
    corners = _cell_corner_values(s)
    npos = np.zeros_like(corners[0], dtype=np.int8)
    for c in corners:
        npos += c > 0.0
    frac_all = (npos == len(corners)).astype(float)
    mixed = (npos > 0) & (npos < len(corners))
    if not np.any(mixed):
        return frac_all
    vals = np.stack([c[mixed] for c in corners], axis=1)  # (K, 2^nd)
    if nd == 2:
        center = vals.mean(axis=1)
        # corner order around the cell: 00, 10, 11, 01  (bitmask: ax0 -> bit0)
        ring = [0b00, 0b01, 0b11, 0b10]
        frac = np.zeros(vals.shape[0])
        for a, b in zip(ring, ring[1:] + ring[:1]):
            tri = np.stack([vals[:, a], vals[:, b], center], axis=1)
            frac += 0.25 * _simplex_positive_fraction(tri)
    elif nd == 3:
        frac = np.zeros(vals.shape[0])
        for tet in _TET_SPLIT_3D:
            tv = np.stack([vals[:, c] for c in tet], axis=1)
            frac += _simplex_positive_fraction(tv) / 6.0
    else:
        raise ConfigError(f"cell fractions support 2 or 3 axes, got {nd}")
    frac_all[mixed] = frac
    return frac_all


def region_volume(s: np.ndarray, h: float) -> float:
    """Measure of {s > 0} using sub-cell linear interpolation."""
    return float(cell_positive_fractions(s).sum()) * h ** s.ndim


def measure_volume(u: ScalarField, mask: RegionMask, threshold: float = 0.0) -> float:
    """Measure of {u > threshold} outside the body.

    When the superlevel set covers the body (all body-node values above the
    threshold) the exact body volume is subtracted, so the body wall does not
    contribute an O(h) staircase error.  Otherwise body nodes are excluded by
    forcing them below the threshold.
    """
    if threshold < 0:
        raise ConfigError("threshold must be >= 0")
    s = u.values - threshold
    is_body = mask.cls == CellClass.BODY
    if np.any(is_body):
        if np.all(s[is_body] > 0.0):
            return max(0.0, region_volume(s, u.grid.h) - mask.body_volume)
        s = s.copy()
        scale = max(float(np.max(np.abs(s))), 1.0)
        s[is_body] = -scale
    return region_volume(s, u.grid.h)


def surface_measure(levelset) -> float:
    """H^{n-1} measure of the zero contour of a level set."""
    psi = np.asarray(levelset.psi, dtype=float)
    grid: GridSpec = levelset.grid
    if psi.min() >= 0.0 or psi.max() <= 0.0:
        raise EmptyBoundaryError("level set has no zero contour")
    if grid.ndim == 2:
        total = 0.0
        for poly in _skmeasure.find_contours(psi, 0.0):
            seg = np.diff(poly, axis=0)
            total += float(np.sum(np.linalg.norm(seg, axis=1))) * grid.h
        if total == 0.0:
            raise EmptyBoundaryError("level set has no zero contour")
        return total
    if grid.ndim == 3:
        verts, faces, _, _ = _skmeasure.marching_cubes(psi, 0.0, spacing=(grid.h,) * 3)
        return float(_skmeasure.mesh_surface_area(verts, faces))
    raise ConfigError(f"surface_measure supports 2 or 3 axes, got {grid.ndim}")


def _bilinear(values: np.ndarray, grid: GridSpec, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of nodal values at physical points."""
    pts = np.asarray(pts, dtype=float)
    idx = (pts - grid.origin) / grid.h
    nd = grid.ndim
    base = np.floor(idx).astype(int)
    for k in range(nd):
        base[..., k] = np.clip(base[..., k], 0, grid.dims[k] - 2)
    frac = idx - base
    out = np.zeros(pts.shape[:-1])
    for bits in range(2**nd):
        w = np.ones(pts.shape[:-1])
        loc = []
        for ax in range(nd):
            b = (bits >> ax) & 1
            w = w * (frac[..., ax] if b else 1.0 - frac[..., ax])
            loc.append(base[..., ax] + b)
        out += w * values[tuple(loc)]
    return out


def contour_points(levelset):
    """Sample the zero contour: points, outward normals (from {psi<0} into
    {psi>=0}), and measure weights.  2D uses marching squares vertices, 3D
    marching cubes triangle centroids."""
    psi = np.asarray(levelset.psi, dtype=float)
    grid: GridSpec = levelset.grid
    if psi.min() >= 0.0 or psi.max() <= 0.0:
        raise EmptyBoundaryError("level set has no zero contour")
    gpsi = np.stack(np.gradient(psi, grid.h, edge_order=1), axis=-1)
    if grid.ndim == 2:
        pts_list, w_list = [], []
        for poly in _skmeasure.find_contours(psi, 0.0):
            p = grid.origin + poly * grid.h
            closed = np.allclose(poly[0], poly[-1])
            if closed:
                p = p[:-1]
            m = len(p)
            if m < 2:
                continue
            nxt = np.roll(p, -1, axis=0)
            prv = np.roll(p, 1, axis=0)
            seg_n = np.linalg.norm(nxt - p, axis=1)
            seg_p = np.linalg.norm(p - prv, axis=1)
            if not closed:
                seg_n[-1] = 0.0
                seg_p[0] = 0.0
            w = 0.5 * (seg_n + seg_p)
            pts_list.append(p)
            w_list.append(w)
        pts = np.concatenate(pts_list, axis=0)
        w = np.concatenate(w_list, axis=0)
    elif grid.ndim == 3:
        verts, faces, _, _ = _skmeasure.marching_cubes(psi, 0.0, spacing=(grid.h,) * 3)
        verts = verts + grid.origin
        tri = verts[faces]
        pts = tri.mean(axis=1)
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        w = 0.5 * np.linalg.norm(cross, axis=1)
    else:
        raise ConfigError("contour_points supports 2 or 3 axes")
    normals = np.stack([_bilinear(gpsi[..., k], grid, pts) for k in range(grid.ndim)], axis=-1)
    norms = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = normals / np.maximum(norms, 1e-30)
    return pts, normals, w


def field_to_csv(u: ScalarField, path) -> None:
    """Dump nodal values as CSV: header x1,..,xn,u, one node per row, row-major."""
    nd = u.grid.ndim
    header = ",".join(f"x{k+1}" for k in range(nd)) + ",u"
    coords = u.grid.nodes().reshape(-1, nd)
    vals = u.values.reshape(-1, 1)
    data = np.hstack([coords, vals])
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in data:
            f.write(",".join("%.12g" % x for x in row) + "\n")
