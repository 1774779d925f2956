"""Planar domains, boundary distance functions and area quadrature.

A domain is one of: a disk, an axis-aligned rectangle, or a simple polygon
with counterclockwise vertices.  The boundary distance ``delta`` is exact for
all three shapes.  Quadrature rules are midpoint rules on the bounding-box
grid; cells cut by the boundary are clipped exactly (the disk is clipped
against a fine inscribed polygon), and a polar patch can be placed around a
point where the integrand has a ``1/|z - w|`` type singularity.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import shapely

# Distance functions are 1-Lipschitz, so max(|grad delta|, 1) is always 1.
C0 = 1.0


class DomainError(ValueError):
    """Raised when a point lies outside the closed domain or a region is empty."""


@dataclass(frozen=True)
class PlanarDomain:
    """A bounded planar domain.

    ``kind`` is ``"disk"``, ``"rectangle"`` or ``"polygon"``.  Disks use
    ``center`` and ``radius``; rectangles and polygons use ``vertices``
    (counterclockwise, as complex numbers).  Instances are hashable so that
    quadrature rules built on them can be cached.
    """

    kind: str
    vertices: tuple = ()
    center: complex = 0j
    radius: float = 1.0

    def __post_init__(self):
        if self.kind == "disk":
            if not self.radius > 0:
                raise ValueError("disk radius must be positive")
            return
        if self.kind not in ("rectangle", "polygon"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        verts = tuple(complex(v) for v in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ValueError("polygon needs at least three vertices")
        poly = shapely.Polygon([(v.real, v.imag) for v in verts])
        if not poly.is_valid or not poly.exterior.is_simple:
            raise ValueError("polygon must be simple")
        if poly.area <= 0:
            raise ValueError("polygon must have positive area")
        if not poly.exterior.is_ccw:
            raise ValueError("polygon vertices must be counterclockwise")

    # -- metadata -------------------------------------------------------
    @property
    def c0(self) -> float:
        return C0

    @property
    def area(self) -> float:
        if self.kind == "disk":
            return math.pi * self.radius**2
        return float(self._shape().area)

    @property
    def diameter(self) -> float:
        if self.kind == "disk":
            return 2.0 * self.radius
        v = np.asarray(self.vertices)
        return float(np.max(np.abs(v[:, None] - v[None, :])))

    @property
    def boundary_length(self) -> float:
        if self.kind == "disk":
            return 2.0 * math.pi * self.radius
        v = np.asarray(self.vertices)
        return float(np.sum(np.abs(np.roll(v, -1) - v)))

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        if self.kind == "disk":
            c, r = self.center, self.radius
            return (c.real - r, c.imag - r, c.real + r, c.imag + r)
        v = np.asarray(self.vertices)
        return (v.real.min(), v.imag.min(), v.real.max(), v.imag.max())

    @property
    def max_delta(self) -> float:
        """Inradius: the largest value of the distance function."""
        if self.kind == "disk":
            return self.radius
        return float(_inradius(self))

    def _shape(self, arc_vertices: int = 4096):
        return _shapely_domain(self, arc_vertices)

    def to_dict(self) -> dict:
        if self.kind == "disk":
            return {"shape": "disk", "center": [self.center.real, self.center.imag],
                    "radius": self.radius}
        return {"shape": self.kind,
                "vertices": [[v.real, v.imag] for v in self.vertices]}


def unit_disk() -> PlanarDomain:
    return PlanarDomain("disk")


def disk(radius: float = 1.0, center: complex = 0j) -> PlanarDomain:
    return PlanarDomain("disk", center=complex(center), radius=float(radius))


def rectangle(x0: float, y0: float, x1: float, y1: float) -> PlanarDomain:
    if not (x1 > x0 and y1 > y0):
        raise ValueError("rectangle corners must satisfy x0 < x1 and y0 < y1")
    verts = (complex(x0, y0), complex(x1, y0), complex(x1, y1), complex(x0, y1))
    return PlanarDomain("rectangle", vertices=verts)


def unit_square() -> PlanarDomain:
    return rectangle(0.0, 0.0, 1.0, 1.0)


def polygon(vertices: Sequence[complex]) -> PlanarDomain:
    return PlanarDomain("polygon", vertices=tuple(complex(v) for v in vertices))


def l_shape() -> PlanarDomain:
    """The L-shaped hexagon [0,2]^2 minus [1,2]x[1,2]."""
    return polygon([0, 2, 2 + 1j, 1 + 1j, 1 + 2j, 2j])


def load_domain(path) -> tuple[PlanarDomain, Optional[int]]:
    """Read a domain description file.

    The file is JSON with ``shape`` (``disk``, ``rectangle`` or ``polygon``),
    ``vertices`` as ``[[re, im], ...]`` for polygons and rectangles (a
    rectangle may give just two opposite corners), optional ``center`` and
    ``radius`` for disks, and an optional ``resolution``.
    """
    data = json.loads(Path(path).read_text())
    return domain_from_dict(data), data.get("resolution")


def domain_from_dict(data: dict) -> PlanarDomain:
    shape = data.get("shape")
    if shape == "disk":
        c = data.get("center", [0.0, 0.0])
        return disk(float(data.get("radius", 1.0)), complex(c[0], c[1]))
    verts = [complex(float(a), float(b)) for a, b in data.get("vertices", [])]
    if shape == "rectangle":
        if len(verts) == 2:
            a, b = verts
            return rectangle(min(a.real, b.real), min(a.imag, b.imag),
                             max(a.real, b.real), max(a.imag, b.imag))
        return PlanarDomain("rectangle", vertices=tuple(verts))
    if shape == "polygon":
        return polygon(verts)
    raise ValueError(f"unknown shape {shape!r}")


@lru_cache(maxsize=64)
def _shapely_domain(domain: PlanarDomain, arc_vertices: int = 4096):
    if domain.kind == "disk":
        t = 2 * np.pi * np.arange(arc_vertices) / arc_vertices
        pts = domain.center + domain.radius * np.exp(1j * t)
        poly = shapely.Polygon(np.column_stack([pts.real, pts.imag]))
    else:
        poly = shapely.Polygon([(v.real, v.imag) for v in domain.vertices])
    shapely.prepare(poly)
    return poly


@lru_cache(maxsize=64)
def _inradius(domain: PlanarDomain) -> float:
    from scipy.optimize import minimize

    poly = domain._shape()
    x0, y0, x1, y1 = domain.bbox
    n = 64
    xs, ys = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
    z = (xs + 1j * ys).ravel()
    z = z[shapely.contains_xy(poly, z.real, z.imag)]
    d = delta(domain, z)
    start = z[np.argmax(d)]
    res = minimize(lambda p: -delta(domain, np.array([complex(p[0], p[1])]))[0],
                   [start.real, start.imag], method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14})
    return float(-res.fun)


# -- distance function --------------------------------------------------

@dataclass(frozen=True)
class DistanceEval:
    """Boundary distance with its gradient and d/dzbar = (d_x + i d_y)/2."""

    value: float
    gradient: tuple[float, float]
    wirtinger: complex


def _edges(domain: PlanarDomain):
    v = np.asarray(domain.vertices)
    return v, np.roll(v, -1)


def _as_complex(z) -> np.ndarray:
    # keeps extended precision inputs (used by finite-difference oracles)
    z = np.asarray(z)
    return z if z.dtype.kind == "c" else z.astype(complex)


def _nearest_boundary(domain: PlanarDomain, z: np.ndarray):
    """Distance to the boundary and the nearest boundary point.

    Ties go to the feature with the smallest index: the lowest edge index
    for polygons, angle 0 for the disk center.
    """
    z = _as_complex(z)
    if domain.kind == "disk":
        rel = z - domain.center
        r = np.abs(rel)
        safe = np.where(r > 1e-300, r, 1.0)
        unit = np.where(r > 1e-300, rel.real / safe + 1j * (rel.imag / safe), 1.0)
        return np.abs(domain.radius - r), domain.center + domain.radius * unit
    a, b = _edges(domain)
    best = np.full(z.shape, np.inf)
    point = np.zeros(z.shape, dtype=complex)
    for ai, bi in zip(a, b):
        e = bi - ai
        t = np.clip(((z - ai) * np.conj(e)).real / abs(e) ** 2, 0.0, 1.0)
        p = ai + t * e
        d = np.abs(z - p)
        # strict comparison keeps the earlier edge on ties
        better = d < best * (1 - 1e-13)
        best = np.where(better, d, best)
        point = np.where(better, p, point)
    return best, point


def contains(domain: PlanarDomain, z, closed: bool = True) -> np.ndarray:
    """Membership test, vectorized over ``z``."""
    z = np.asarray(z, dtype=complex)
    if domain.kind == "disk":
        r = np.abs(z - domain.center)
        tol = 1e-12 * domain.radius
        return r <= domain.radius + tol if closed else r < domain.radius - tol
    poly = domain._shape()
    inside = shapely.contains_xy(poly, z.real, z.imag)
    if closed:
        d, _ = _nearest_boundary(domain, z)
        inside = inside | (d <= 1e-12 * domain.diameter)
    return inside


def delta(domain: PlanarDomain, z) -> np.ndarray:
    """Vectorized boundary distance (no membership check)."""
    d, _ = _nearest_boundary(domain, z)
    return d


def delta_and_dbar(domain: PlanarDomain, z):
    """Vectorized ``(delta(z), d delta / d zbar)`` for interior points."""
    z = _as_complex(z)
    d, p = _nearest_boundary(domain, z)
    g = z - p
    safe = np.where(d > 0, d, 1.0)
    grad = np.where(d > 0, g / safe, 0.0)
    if domain.kind == "disk":
        # the disk center is a medial point; fall back to angle 0
        grad = np.where(np.abs(z - domain.center) > 0, grad, -1.0 + 0j)
    return d, 0.5 * grad


def distance(domain: PlanarDomain, z: complex) -> DistanceEval:
    """Boundary distance at one point of the closed domain."""
    z = complex(z)
    if not contains(domain, np.array([z]))[0]:
        raise DomainError(f"point {z} lies outside the domain")
    d, w = delta_and_dbar(domain, np.array([z]))
    grad = 2.0 * w[0]
    return DistanceEval(float(d[0]), (float(grad.real), float(grad.imag)), complex(w[0]))


# -- quadrature ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes and positive area weights for integration over a planar region.

    ``patch`` is a slice into the node arrays covering the polar patch around
    ``refinement_center`` (empty when there is no refinement).
    """

    nodes: np.ndarray
    weights: np.ndarray
    refinement_center: Optional[complex] = None
    patch_radius: float = 0.0
    patch: slice = slice(0, 0)
    clipped: bool = False
    resolution: int = 0

    def __len__(self):
        return len(self.nodes)

    def integrate(self, values) -> complex:
        return complex(np.dot(self.weights, values))

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class _Pieces:
    """Base grid: full interior cells plus clipped boundary pieces."""

    nodes: np.ndarray
    weights: np.ndarray
    cell_w: float
    cell_h: float
    x0: float
    y0: float
    nx: int
    ny: int
    cell_index: np.ndarray  # flat grid index of each node
    geoms: dict = field(default_factory=dict)  # cell index -> clipped geometry


def _arc_vertices(resolution: int) -> int:
    return max(4096, 64 * resolution)


def _region_shape(domain, exclude, resolution):
    """Shapely geometry of the domain, optionally minus ``exclude`` (a domain)."""
    shape = domain._shape(_arc_vertices(resolution))
    if exclude is not None:
        # slightly enlarged polygon of the hole so that every node stays outside it
        hole = exclude._shape(_arc_vertices(resolution))
        if exclude.kind == "disk":
            n = _arc_vertices(resolution)
            hole = shapely.affinity.scale(hole, 1 / math.cos(math.pi / n), 1 / math.cos(math.pi / n),
                                          origin=(exclude.center.real, exclude.center.imag))
        shape = shape.difference(hole)
    return shape


@lru_cache(maxsize=32)
def _base_pieces(domain: PlanarDomain, resolution: int, exclude: Optional[PlanarDomain] = None) -> _Pieces:
    x0, y0, x1, y1 = domain.bbox
    nx = ny = resolution
    cw, ch = (x1 - x0) / nx, (y1 - y0) / ny
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    centers = (x0 + (ix + 0.5) * cw) + 1j * (y0 + (iy + 0.5) * ch)
    half_diag = 0.5 * math.hypot(cw, ch)

    shape = _region_shape(domain, exclude, resolution)
    inside = contains(domain, centers, closed=False)
    d = delta(domain, centers)
    full = inside & (d > half_diag * (1 + 1e-9))
    if exclude is not None:
        rel = delta(exclude, centers)
        in_hole = contains(exclude, centers, closed=True)
        full &= ~in_hole & (rel > half_diag * (1 + 1e-9))
    candidates = np.flatnonzero(~full)
    # a cell can only meet the region if its center is within half a diagonal
    near = inside | (d <= half_diag * (1 + 1e-9))
    candidates = candidates[near[candidates]]

    nodes = [centers[full]]
    weights = [np.full(full.sum(), cw * ch)]
    index = [np.flatnonzero(full)]
    geoms = {}
    if len(candidates):
        cx, cy = centers[candidates].real, centers[candidates].imag
        boxes = shapely.box(cx - cw / 2, cy - ch / 2, cx + cw / 2, cy + ch / 2)
        pieces = shapely.intersection(boxes, shape)
        areas = shapely.area(pieces)
        keep = areas > 1e-13 * cw * ch
        pieces, areas, cand = pieces[keep], areas[keep], candidates[keep]
        pts = _interior_points(pieces)
        nodes.append(pts)
        weights.append(areas)
        index.append(cand)
        geoms = {int(c): g for c, g in zip(cand, pieces)}
    return _Pieces(np.concatenate(nodes), np.concatenate(weights), cw, ch, x0, y0, nx, ny,
                   np.concatenate(index), geoms)


def _interior_points(geoms) -> np.ndarray:
    """Centroids, replaced by a representative point when the centroid falls outside."""
    cent = shapely.centroid(geoms)
    ok = shapely.contains(geoms, cent)
    pts = np.where(ok, cent, shapely.point_on_surface(geoms))
    xy = shapely.get_coordinates(pts)
    return xy[:, 0] + 1j * xy[:, 1]


def radial_rule(radius: float, n_radial: int, levels: int = 0, order: int = 3):
    """Radial nodes and weights for ``int_0^radius g(r) r dr``.

    With ``levels == 0`` this is the plain midpoint rule.  Otherwise the
    interval is split geometrically (ratio 1/2) into ``levels`` shells, each
    integrated by Gauss-Legendre of the given order, plus an inner midpoint
    rule; the outer shells are subdivided so no subinterval is wider than
    ``radius / n_radial``.
    """
    if levels == 0:
        dr = radius / n_radial
        r = (np.arange(n_radial) + 0.5) * dr
        return r, r * dr
    x, wx = np.polynomial.legendre.leggauss(order)
    edges = [0.0] + [radius * 0.5**p for p in range(levels, -1, -1)]
    width = radius / n_radial
    rs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        pieces = max(1, int(math.ceil((hi - lo) / width - 1e-9)))
        for q in range(pieces):
            a = lo + (hi - lo) * q / pieces
            b = lo + (hi - lo) * (q + 1) / pieces
            r = 0.5 * (a + b) + 0.5 * (b - a) * x
            rs.append(r)
            ws.append(0.5 * (b - a) * wx * r)
    return np.concatenate(rs), np.concatenate(ws)


def polar_patch(center: complex, radius: float, n_radial: int, n_angular: int, levels: int = 0):
    """Polar product rule on a disk: radial rule times uniform angular midpoints."""
    r, wr = radial_rule(radius, n_radial, levels)
    dt = 2 * np.pi / n_angular
    t = (np.arange(n_angular) + 0.5) * dt
    rr, tt = np.meshgrid(r, t, indexing="ij")
    nodes = center + (rr * np.exp(1j * tt)).ravel()
    weights = (wr[:, None] * dt * np.ones_like(tt)).ravel()
    return nodes, weights


def _patch_counts(radius: float, cell: float) -> tuple[int, int]:
    n_r = max(6, int(math.ceil(2 * radius / cell)))
    return n_r, max(24, 4 * n_r)


def build_rule(domain: PlanarDomain, resolution: int, refine_at: Optional[complex] = None,
               refine_radius: Optional[float] = None, exclude: Optional[PlanarDomain] = None,
               patch_counts: Optional[tuple[int, int]] = None, graded: int = 0) -> QuadratureRule:
    """Area quadrature rule on a ``resolution x resolution`` bounding-box grid.

    With ``refine_at`` the grid cells meeting the disk ``|w - refine_at| <
    refine_radius`` are cut back to the part outside that disk and the disk
    itself is covered by a polar midpoint rule.  A radius larger than the
    distance to the boundary is clipped to it and ``clipped`` is set.

    ``exclude`` removes a closed subdomain, giving a rule on ``domain`` minus
    the closure of ``exclude``.  ``graded`` switches the patch to a radial rule
    graded geometrically toward its center over that many levels.

    Parameters
    ----------
    domain : PlanarDomain
    resolution : int
        Number of grid cells along each side of the bounding box (at least 8).
    refine_at : complex, optional
        Center of the polar patch.
    refine_radius : float, optional
        Patch radius; defaults to ``min(0.1, delta(refine_at) / 2)``.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    if refine_at is None:
        return _cached_rule(domain, int(resolution), None, 0.0, exclude, patch_counts, 0)
    refine_at = complex(refine_at)
    if exclude is not None and contains(exclude, np.array([refine_at]))[0]:
        raise DomainError("refinement center lies in the excluded subdomain")
    if not contains(domain, np.array([refine_at]), closed=False)[0]:
        raise DomainError(f"refinement center {refine_at} is not interior")
    d = float(delta(domain, np.array([refine_at]))[0])
    if exclude is not None:
        d = min(d, float(delta(exclude, np.array([refine_at]))[0]))
    if refine_radius is None:
        refine_radius = min(0.1, d / 2)
    clipped = False
    if refine_radius > d:
        warnings.warn("refinement radius exceeds the boundary distance; clipped", RuntimeWarning,
                      stacklevel=2)
        refine_radius, clipped = d, True
    rule = _cached_rule(domain, int(resolution), refine_at, float(refine_radius), exclude,
                        patch_counts, int(graded))
    if clipped:
        rule = QuadratureRule(rule.nodes, rule.weights, rule.refinement_center, rule.patch_radius,
                              rule.patch, True, rule.resolution)
    return rule


@lru_cache(maxsize=256)
def _cached_rule(domain, resolution, refine_at, radius, exclude, patch_counts, graded) -> QuadratureRule:
    base = _base_pieces(domain, resolution, exclude)
    if refine_at is None:
        return QuadratureRule(base.nodes, base.weights, resolution=resolution)
    cell = min(base.cell_w, base.cell_h)
    n_r, n_t = patch_counts or _patch_counts(radius, cell)
    p_nodes, p_weights = polar_patch(refine_at, radius, n_r, n_t, graded)

    # grid items whose cell meets the patch disk
    ix = base.cell_index % base.nx
    iy = base.cell_index // base.nx
    cx = base.x0 + (ix + 0.5) * base.cell_w
    cy = base.y0 + (iy + 0.5) * base.cell_h
    dx = np.maximum(np.abs(cx - refine_at.real) - base.cell_w / 2, 0.0)
    dy = np.maximum(np.abs(cy - refine_at.imag) - base.cell_h / 2, 0.0)
    hit = np.hypot(dx, dy) < radius
    keep_nodes = [base.nodes[~hit]]
    keep_weights = [base.weights[~hit]]

    hole = shapely.Point(refine_at.real, refine_at.imag).buffer(radius, quad_segs=256)
    hits = np.flatnonzero(hit)
    if len(hits):
        geoms = []
        for i in hits:
            c = int(base.cell_index[i])
            g = base.geoms.get(c)
            if g is None:
                g = shapely.box(cx[i] - base.cell_w / 2, cy[i] - base.cell_h / 2,
                                cx[i] + base.cell_w / 2, cy[i] + base.cell_h / 2)
            geoms.append(g)
        geoms = shapely.difference(np.array(geoms, dtype=object), hole)
        areas = shapely.area(geoms)
        ok = areas > 1e-13 * base.cell_w * base.cell_h
        if ok.any():
            keep_nodes.append(_interior_points(geoms[ok]))
            keep_weights.append(areas[ok])
    nodes = np.concatenate(keep_nodes + [p_nodes])
    weights = np.concatenate(keep_weights + [p_weights])
    start = len(nodes) - len(p_nodes)
    return QuadratureRule(nodes, weights, refine_at, radius, slice(start, len(nodes)), False,
                          resolution)


# -- inner regions --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ShrunkRegion:
    """The inner region ``{delta > 1/m}`` of a domain."""

    domain: PlanarDomain
    m: float
    rule: QuadratureRule

    @property
    def level(self) -> float:
        return 1.0 / self.m

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return contains(self.domain, z, closed=False) & (delta(self.domain, z) > self.level)

    def area(self) -> float:
        return self.rule.total_weight


def shrink(domain: PlanarDomain, m: float, resolution: int = 128) -> ShrunkRegion:
    """Return ``{z : delta(z) > 1/m}`` with a quadrature rule restricted to it."""
    if m <= 0:
        raise ValueError("m must be positive")
    level = 1.0 / m
    if level >= domain.max_delta * (1 - 1e-12):
        raise DomainError(f"region delta > {level} is empty")
    shape = domain._shape(_arc_vertices(resolution))
    inner = shape.buffer(-level, quad_segs=256)
    if inner.is_empty:
        raise DomainError(f"region delta > {level} is empty")
    x0, y0, x1, y1 = domain.bbox
    cw, ch = (x1 - x0) / resolution, (y1 - y0) / resolution
    ix = np.arange(resolution)
    gx, gy = np.meshgrid(x0 + (ix + 0.5) * cw, y0 + (ix + 0.5) * ch)
    cx, cy = gx.ravel(), gy.ravel()
    boxes = shapely.box(cx - cw / 2, cy - ch / 2, cx + cw / 2, cy + ch / 2)
    pieces = shapely.intersection(boxes, inner)
    areas = shapely.area(pieces)
    ok = areas > 1e-13 * cw * ch
    nodes = _interior_points(pieces[ok])
    rule = QuadratureRule(nodes, areas[ok], resolution=resolution)
    return ShrunkRegion(domain, float(m), rule)


def interior_samples(domain: PlanarDomain, count: int, rng: np.random.Generator,
                     min_delta: float = 0.0) -> np.ndarray:
    """Uniform random interior points with ``delta > min_delta`` (rejection sampling)."""
    x0, y0, x1, y1 = domain.bbox
    out = []
    have = 0
    while have < count:
        m = max(64, 2 * (count - have))
        z = rng.uniform(x0, x1, m) + 1j * rng.uniform(y0, y1, m)
        z = z[contains(domain, z, closed=False)]
        if min_delta > 0:
            z = z[delta(domain, z) > min_delta]
        out.append(z)
        have += len(z)
    return np.concatenate(out)[:count]


# -- ray-polar rules ------------------------------------------------------

def ray_intervals(domain: PlanarDomain, center: complex, angles: np.ndarray) -> list:
    """For each direction, the list of ``(r_in, r_out)`` with ``center + r e^{it}`` inside."""
    c = complex(center)
    if domain.kind == "disk":
        e = np.exp(1j * angles)
        p = c - domain.center
        b = (np.conj(p) * e).real
        r_out = -b + np.sqrt(np.maximum(domain.radius**2 - abs(p) ** 2 + b**2, 0.0))
        return [[(0.0, float(r))] for r in r_out]
    poly = domain._shape()
    reach = 2.0 * domain.diameter + abs(c - complex(*poly.centroid.coords[0]))
    ends = c + reach * np.exp(1j * angles)
    lines = shapely.linestrings([[(c.real, c.imag), (e.real, e.imag)] for e in ends])
    cuts = shapely.intersection(lines, poly)
    out = []
    for g in cuts:
        parts = list(getattr(g, "geoms", [g]))
        iv = []
        for part in parts:
            if part.is_empty or part.geom_type != "LineString":
                continue
            xy = np.asarray(part.coords)
            r = np.abs(xy[:, 0] + 1j * xy[:, 1] - c)
            lo, hi = float(r.min()), float(r.max())
            if hi - lo > 1e-14 * reach:
                iv.append((0.0 if lo < 1e-12 * reach else lo, hi))
        out.append(sorted(iv))
    return out


def ray_exit(domain: PlanarDomain, center: complex, angles) -> np.ndarray:
    """Distance from ``center`` to the first boundary crossing along each direction."""
    c = complex(center)
    e = np.exp(1j * np.asarray(angles, dtype=float))
    if domain.kind == "disk":
        p = c - domain.center
        b = (np.conj(p) * e).real
        return -b + np.sqrt(np.maximum(domain.radius**2 - abs(p) ** 2 + b**2, 0.0))
    a, b = _edges(domain)
    # solve c + t e = a + s (b - a) for every (direction, edge)
    d = (b - a)[None, :]
    rel = (a - c)[None, :]
    ee = e[:, None]
    den = (np.conj(ee) * d).imag
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (np.conj(rel) * d).imag / den
        s = (np.conj(ee) * rel).imag / den * -1.0
    hit = (np.abs(den) > 1e-15) & (t > 1e-14) & (s >= -1e-12) & (s <= 1 + 1e-12)
    return np.where(hit, t, np.inf).min(axis=1)


def is_star_center(domain: PlanarDomain, z: complex) -> bool:
    """True if every point of the domain is visible from ``z`` along a straight segment."""
    if domain.kind == "disk":
        return bool(contains(domain, np.array([complex(z)]), closed=False)[0])
    poly = _shapely_domain(domain).buffer(1e-12)
    verts = np.asarray(domain.vertices)
    segs = shapely.linestrings([[(z.real, z.imag), (v.real, v.imag)] for v in verts])
    return bool(np.all(shapely.covers(poly, segs)))


def _graded_breaks(a: float, b: float, levels_a: int, levels_b: int, width: float) -> np.ndarray:
    """Breakpoints on [a, b], geometric (ratio 1/2) toward each end over a quarter of
    the interval, and at most ``width`` apart in between."""
    span = (b - a) / 4
    pts = [a + span * 0.5 ** np.arange(levels_a + 1), b - span * 0.5 ** np.arange(levels_b + 1)]
    lo, hi = a + span, b - span
    m = max(1, int(math.ceil((hi - lo) / width - 1e-9)))
    pts.append(lo + (hi - lo) * np.arange(m + 1) / m)
    pts.append(np.array([a, b]))
    return np.unique(np.concatenate(pts))


def _directions(domain, center, n_dir, order, extra=None, phase=0.0):
    """Angular nodes and weights.

    Uniform midpoints for the disk (the ray length is smooth and periodic),
    with a panel edge at angle ``phase``.
    For polygons the ray length has kinks in the vertex directions, so the
    circle is split at those directions and each sector gets Gauss-Legendre
    panels about ``2 pi / n_dir * order`` wide.  ``extra`` is a second domain
    whose vertex directions are kinks as well.
    """
    kinks = []
    for dom in (domain, extra):
        if dom is not None and dom.kind != "disk":
            kinks.append(np.asarray(dom.vertices) - center)
    if not kinks:
        dt = 2 * np.pi / n_dir
        return (np.arange(n_dir) + 0.5) * dt + phase, np.full(n_dir, dt)
    phi = np.unique(np.mod(np.angle(np.concatenate(kinks)), 2 * np.pi))
    edges = np.concatenate([phi, [phi[0] + 2 * np.pi]])
    x, wx = np.polynomial.legendre.leggauss(order)
    target = 2 * np.pi / n_dir * order
    ts, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo < 1e-14:
            continue
        m = max(1, int(math.ceil((hi - lo) / target)))
        for q in range(m):
            a = lo + (hi - lo) * q / m
            b = lo + (hi - lo) * (q + 1) / m
            ts.append(0.5 * (a + b) + 0.5 * (b - a) * x)
            ws.append(0.5 * (b - a) * wx)
    return np.concatenate(ts), np.concatenate(ws)


def polar_rule(domain: PlanarDomain, center: complex, resolution: int, order: int = 3,
               center_levels: Optional[int] = None, boundary_levels: Optional[int] = None) -> QuadratureRule:
    """Quadrature in polar coordinates about an interior point, covering the whole domain.

    ``resolution / 2`` uniform directions; along each ray Gauss-Legendre
    panels at most ``8 * diameter / resolution`` long, graded geometrically toward
    the center and toward every boundary crossing.  This resolves kernels that
    are singular at ``center`` together with boundary layers of functions of
    the distance ``delta``.  The node count is close to that of the
    ``resolution x resolution`` grid rule.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    center = complex(center)
    if not contains(domain, np.array([center]), closed=False)[0]:
        raise DomainError(f"polar center {center} is not interior")
    if center_levels is None:
        center_levels = 10 + int(round(math.log2(resolution / 8)))
    if boundary_levels is None:
        boundary_levels = 6 + int(round(math.log2(resolution / 8)))
    return _cached_polar(domain, center, int(resolution), order, center_levels, boundary_levels)


@lru_cache(maxsize=256)
def _cached_polar(domain, center, resolution, order, center_levels, boundary_levels):
    # polygon sectors need enough Gauss nodes for the 1/cos profile of each edge
    n_dir = max(8 if domain.kind == "disk" else 32, resolution // 2)
    # delta has a gradient kink at the disk center; pinning it to a cell corner
    # (an angular edge plus a radial break) keeps the error smooth in ``center``
    kink = domain.center - center if domain.kind == "disk" else 0j
    r_kink = abs(kink) if abs(kink) > 1e-12 * domain.diameter else 0.0
    angles, dts = _directions(domain, center, n_dir, 8, phase=float(np.angle(kink)) if r_kink else 0.0)
    width = 8.0 * domain.diameter / resolution
    x, wx = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for t, dt, ivs in zip(angles, dts, ray_intervals(domain, center, angles)):
        e = np.exp(1j * t)
        for lo, hi in ivs:
            # a ray starting at the center is graded toward the singular point,
            # every other interval end is a boundary crossing
            br = _graded_breaks(lo, hi, center_levels if lo == 0.0 else boundary_levels,
                                boundary_levels, width)
            if lo < r_kink < hi:
                br = np.unique(np.append(br, r_kink))
            a, b = br[:-1], br[1:]
            r = (0.5 * (a + b))[:, None] + (0.5 * (b - a))[:, None] * x[None, :]
            w = (0.5 * (b - a))[:, None] * wx[None, :] * r
            nodes.append(center + r.ravel() * e)
            weights.append(w.ravel() * dt)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    return QuadratureRule(nodes, weights, center, 0.0, slice(0, 0), False, resolution)


def _inner_center(inner: PlanarDomain) -> complex:
    if inner.kind == "disk":
        return complex(inner.center)
    c = _shapely_domain(inner).centroid
    return complex(c.x, c.y)


def complement_rule(domain: PlanarDomain, inner: PlanarDomain, resolution: int,
                    order: int = 3, boundary_levels: Optional[int] = None) -> QuadratureRule:
    """Polar quadrature on ``domain`` minus the closure of ``inner``.

    Rays leave from the center of ``inner``; both domains must be
    star-shaped about it.  Along each ray the interval between the two
    boundaries gets Gauss-Legendre panels graded toward both ends, with the
    same width and direction counts as ``polar_rule``.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    c = _inner_center(inner)
    if not (is_star_center(domain, c) and is_star_center(inner, c)):
        raise DomainError("complement rule needs both domains star-shaped about the inner center")
    if boundary_levels is None:
        boundary_levels = 6 + int(round(math.log2(resolution / 8)))
    return _cached_complement(domain, inner, int(resolution), order, boundary_levels)


@lru_cache(maxsize=16)
def _cached_complement(domain, inner, resolution, order, boundary_levels):
    c = _inner_center(inner)
    n_dir = max(8, resolution // 2)
    angles, dts = _directions(domain, c, n_dir, 8, extra=inner)
    width = 8.0 * domain.diameter / resolution
    x, wx = np.polynomial.legendre.leggauss(order)
    r_in = ray_exit(inner, c, angles)
    r_out = ray_exit(domain, c, angles)
    if np.any(r_out <= r_in):
        raise DomainError("inner domain is not inside the outer domain")
    nodes, weights = [], []
    for t, dt, lo, hi in zip(angles, dts, r_in, r_out):
        br = _graded_breaks(lo, hi, boundary_levels, boundary_levels, width)
        a, b = br[:-1], br[1:]
        r = (0.5 * (a + b))[:, None] + (0.5 * (b - a))[:, None] * x[None, :]
        w = (0.5 * (b - a))[:, None] * wx[None, :] * r
        nodes.append(c + r.ravel() * np.exp(1j * t))
        weights.append(w.ravel() * dt)
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    return QuadratureRule(nodes, weights, None, 0.0, slice(0, 0), False, resolution)
