"""The rasterization backend: viewports, conservative rasterization, and
discrete canvas construction for data geometry and distance constraints.

A discrete canvas stores three planes (point/line/polygon) of per-pixel
4-tuples (v0 object id, v1 primitive ordinal, v2 value slot, v_b boundary
entry ref). Alongside the spec tuples the canvas keeps the exactness
machinery: an ``interior_id`` grid (object whose interior fully covers the
pixel square) and a CSR table of boundary-index entry refs per boundary
pixel. Classification is sound: an interior-marked pixel square lies wholly
inside its object, an unmarked square is disjoint from every object, and
every partially-covered square is boundary-marked.

Pixel (c, r) covers the half-open square
``[min_x + c*sx, min_x + (c+1)*sx) x [min_y + r*sy, min_y + (r+1)*sy)``;
pixel (0, 0) sits at the minimum corner. Conservative tests use the closed
square.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import CanvasError, DataError, DegenerateGeometryError
from .geometry import (
    GeometryRecord,
    Point2,
    Segment,
    Triangle,
    features,
    orient,
    segments_array,
)

PLANES = ("point", "line", "polygon")
NULL_ID = -1


class PixelTuple(NamedTuple):
    """One plane's per-pixel slots: object id, primitive ordinal, value,
    boundary-entry ref (all -1 / NaN when NULL); v_b >= 0 marks a boundary
    pixel and implies v0 >= 0."""

    v0: int
    v1: int
    v2: float
    v_b: int

    @property
    def is_null(self) -> bool:
        return self.v0 == NULL_ID


NULL_TUPLE = PixelTuple(NULL_ID, -1, float("nan"), -1)


# ---------------------------------------------------------------------------
# Viewport
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Viewport:
    min_x: float
    min_y: float
    max_x: float
    max_y: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise CanvasError("degenerate viewport bounds")
        if not (1 <= self.width_px <= 32768 and 1 <= self.height_px <= 32768):
            raise CanvasError("viewport resolution outside [1, 32768]")

    @property
    def sx(self) -> float:
        return (self.max_x - self.min_x) / self.width_px

    @property
    def sy(self) -> float:
        return (self.max_y - self.min_y) / self.height_px

    def window_for_bbox(self, bbox) -> tuple | None:
        """Inclusive (c0, c1, r0, r1) pixel window covering a world bbox,
        expanded one pixel outward so closed-square touching is never missed;
        None when the bbox cannot touch the grid."""
        x0, y0, x1, y1 = bbox
        if x1 < self.min_x or x0 > self.max_x or y1 < self.min_y or y0 > self.max_y:
            return None
        c0 = int(np.floor((x0 - self.min_x) / self.sx)) - 1
        c1 = int(np.floor((x1 - self.min_x) / self.sx)) + 1
        r0 = int(np.floor((y0 - self.min_y) / self.sy)) - 1
        r1 = int(np.floor((y1 - self.min_y) / self.sy)) + 1
        c0, c1 = max(c0, 0), min(c1, self.width_px - 1)
        r0, r1 = max(r0, 0), min(r1, self.height_px - 1)
        if c0 > c1 or r0 > r1:
            return None
        return (c0, c1, r0, r1)

    def corner_xs(self, c0: int, c1: int) -> np.ndarray:
        return self.min_x + np.arange(c0, c1 + 2, dtype=float) * self.sx

    def corner_ys(self, r0: int, r1: int) -> np.ndarray:
        return self.min_y + np.arange(r0, r1 + 2, dtype=float) * self.sy

    def center_xs(self, c0: int, c1: int) -> np.ndarray:
        return self.min_x + (np.arange(c0, c1 + 1, dtype=float) + 0.5) * self.sx

    def center_ys(self, r0: int, r1: int) -> np.ndarray:
        return self.min_y + (np.arange(r0, r1 + 1, dtype=float) + 0.5) * self.sy

    def pixel_of_points(self, pts: np.ndarray) -> tuple:
        """(cols, rows) of each point's covering pixel, clipped to the grid."""
        cols = np.floor((pts[:, 0] - self.min_x) / self.sx).astype(np.int64)
        rows = np.floor((pts[:, 1] - self.min_y) / self.sy).astype(np.int64)
        np.clip(cols, 0, self.width_px - 1, out=cols)
        np.clip(rows, 0, self.height_px - 1, out=rows)
        return cols, rows

    def in_bounds(self, pts: np.ndarray) -> np.ndarray:
        return ((pts[:, 0] >= self.min_x) & (pts[:, 0] <= self.max_x)
                & (pts[:, 1] >= self.min_y) & (pts[:, 1] <= self.max_y))


def viewport_from_bounds(bounds, resolution: int) -> Viewport:
    """Viewport over ``bounds`` expanded by one pre-expansion pixel per side
    (guard band), so conservative pixels of rim geometry stay on the grid."""
    x0, y0, x1, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise CanvasError(f"degenerate bounds {bounds}")
    if not 16 <= resolution <= 32768:
        raise CanvasError(f"resolution {resolution} outside [16, 32768]")
    gx = (x1 - x0) / resolution
    gy = (y1 - y0) / resolution
    return Viewport(x0 - gx, y0 - gy, x1 + gx, y1 + gy, resolution, resolution)


# ---------------------------------------------------------------------------
# Exact per-pixel masks over a window
# ---------------------------------------------------------------------------

def _corner_min_max(f: np.ndarray) -> tuple:
    """Per-pixel min/max over the 4 corners of a corner-lattice field."""
    fmin = np.minimum(np.minimum(f[:-1, :-1], f[:-1, 1:]),
                      np.minimum(f[1:, :-1], f[1:, 1:]))
    fmax = np.maximum(np.maximum(f[:-1, :-1], f[:-1, 1:]),
                      np.maximum(f[1:, :-1], f[1:, 1:]))
    return fmin, fmax


def _bbox_overlap_mask(vp: Viewport, window, bbox) -> np.ndarray:
    c0, c1, r0, r1 = window
    xs = vp.corner_xs(c0, c1)
    ys = vp.corner_ys(r0, r1)
    x0, y0, x1, y1 = bbox
    col_ok = (xs[:-1] <= x1) & (xs[1:] >= x0)
    row_ok = (ys[:-1] <= y1) & (ys[1:] >= y0)
    return row_ok[:, None] & col_ok[None, :]


def seg_touch_mask(vp: Viewport, window, ax, ay, bx, by) -> np.ndarray:
    """Pixels of the window whose closed square intersects the closed segment.

    Exact: the square and segment (both convex) intersect iff their bboxes
    overlap on both axes and the segment's supporting line straddles the
    square's corners.
    """
    c0, c1, r0, r1 = window
    xs = vp.corner_xs(c0, c1)
    ys = vp.corner_ys(r0, r1)
    f = orient(ax, ay, bx, by, xs[None, :], ys[:, None])
    fmin, fmax = _corner_min_max(f)
    straddle = (fmin <= 0.0) & (fmax >= 0.0)
    bbox = (min(ax, bx), min(ay, by), max(ax, bx), max(ay, by))
    return straddle & _bbox_overlap_mask(vp, window, bbox)


def tri_touch_mask(vp: Viewport, window, tri: np.ndarray) -> np.ndarray:
    """Pixels whose closed square intersects the closed CCW triangle (SAT)."""
    c0, c1, r0, r1 = window
    xs = vp.corner_xs(c0, c1)
    ys = vp.corner_ys(r0, r1)
    (x0, y0), (x1, y1), (x2, y2) = tri
    ok = _bbox_overlap_mask(vp, window,
                            (min(x0, x1, x2), min(y0, y1, y2),
                             max(x0, x1, x2), max(y0, y1, y2)))
    for (ax, ay, bx, by, cx, cy) in ((x0, y0, x1, y1, x2, y2),
                                     (x1, y1, x2, y2, x0, y0),
                                     (x2, y2, x0, y0, x1, y1)):
        f = orient(ax, ay, bx, by, xs[None, :], ys[:, None])
        fmin, fmax = _corner_min_max(f)
        third = orient(ax, ay, bx, by, cx, cy)
        tmin, tmax = min(0.0, third), max(0.0, third)
        ok &= (fmax >= tmin) & (fmin <= tmax)
    return ok


def tri_center_mask(vp: Viewport, window, tri: np.ndarray) -> np.ndarray:
    """Pixels whose center lies in the closed CCW triangle."""
    c0, c1, r0, r1 = window
    cx = vp.center_xs(c0, c1)[None, :]
    cy = vp.center_ys(r0, r1)[:, None]
    (x0, y0), (x1, y1), (x2, y2) = tri
    return ((orient(x0, y0, x1, y1, cx, cy) >= 0.0)
            & (orient(x1, y1, x2, y2, cx, cy) >= 0.0)
            & (orient(x2, y2, x0, y0, cx, cy) >= 0.0))


def point_pixels(vp: Viewport, x: float, y: float) -> list:
    """All grid pixels whose closed square contains the point (up to 4)."""
    if not (vp.min_x <= x <= vp.max_x and vp.min_y <= y <= vp.max_y):
        return []
    cc = int(np.floor((x - vp.min_x) / vp.sx))
    rr = int(np.floor((y - vp.min_y) / vp.sy))
    out = []
    for c in (cc - 1, cc, cc + 1):
        if not 0 <= c < vp.width_px:
            continue
        if not (vp.min_x + c * vp.sx <= x <= vp.min_x + (c + 1) * vp.sx):
            continue
        for r in (rr - 1, rr, rr + 1):
            if not 0 <= r < vp.height_px:
                continue
            if vp.min_y + r * vp.sy <= y <= vp.min_y + (r + 1) * vp.sy:
                out.append((c, r))
    return out


def _mask_to_pixels(window, mask: np.ndarray) -> set:
    c0, _, r0, _ = window
    rows, cols = np.nonzero(mask)
    return {(int(c + c0), int(r + r0)) for r, c in zip(rows, cols)}


def rasterize_conservative(prim, vp: Viewport) -> set:
    """Exactly the pixels whose closed square intersects the closed primitive,
    clipped to the viewport grid."""
    if isinstance(prim, Segment):
        bbox = (min(prim.a.x, prim.b.x), min(prim.a.y, prim.b.y),
                max(prim.a.x, prim.b.x), max(prim.a.y, prim.b.y))
        window = vp.window_for_bbox(bbox)
        if window is None:
            return set()
        return _mask_to_pixels(window, seg_touch_mask(vp, window, prim.a.x, prim.a.y,
                                                      prim.b.x, prim.b.y))
    if isinstance(prim, Triangle):
        tri = np.array([(prim.v0.x, prim.v0.y), (prim.v1.x, prim.v1.y),
                        (prim.v2.x, prim.v2.y)])
        window = vp.window_for_bbox((tri[:, 0].min(), tri[:, 1].min(),
                                     tri[:, 0].max(), tri[:, 1].max()))
        if window is None:
            return set()
        return _mask_to_pixels(window, tri_touch_mask(vp, window, tri))
    if isinstance(prim, Point2):
        return set(point_pixels(vp, prim.x, prim.y))
    raise TypeError(f"cannot rasterize {type(prim)!r}")


def rasterize_interior(tri: Triangle, vp: Viewport) -> set:
    """Pixels whose center lies in the closed triangle."""
    arr = np.array([(tri.v0.x, tri.v0.y), (tri.v1.x, tri.v1.y), (tri.v2.x, tri.v2.y)])
    window = vp.window_for_bbox((arr[:, 0].min(), arr[:, 1].min(),
                                 arr[:, 0].max(), arr[:, 1].max()))
    if window is None:
        return set()
    return _mask_to_pixels(window, tri_center_mask(vp, window, arr))


def rect_to_triangles(mn, mx) -> tuple:
    """Split an axis-aligned rectangle into two CCW triangles."""
    x0, y0 = mn if not isinstance(mn, Point2) else (mn.x, mn.y)
    x1, y1 = mx if not isinstance(mx, Point2) else (mx.x, mx.y)
    if not (x1 > x0 and y1 > y0):
        raise DegenerateGeometryError(f"degenerate rectangle ({x0},{y0})-({x1},{y1})")
    t1 = Triangle(Point2(x0, y0), Point2(x1, y0), Point2(x1, y1))
    t2 = Triangle(Point2(x0, y0), Point2(x1, y1), Point2(x0, y1))
    return t1, t2


# ---------------------------------------------------------------------------
# Discrete canvas
# ---------------------------------------------------------------------------

class PlaneData:
    """One primitive plane of a discrete canvas (arrays indexed [row, col])."""

    def __init__(self, height: int, width: int):
        self.v0 = np.full((height, width), NULL_ID, dtype=np.int64)
        self.v1 = np.full((height, width), -1, dtype=np.int32)
        self.v2 = np.full((height, width), np.nan, dtype=np.float64)
        self.vb = np.full((height, width), -1, dtype=np.int64)
        # Exactness structures: the object whose interior fully covers the
        # pixel square, plus CSR buckets of boundary entry refs per pixel.
        self.interior_id = np.full((height, width), NULL_ID, dtype=np.int64)
        self.bp_flat = np.zeros(0, dtype=np.int64)
        self.bp_start = np.zeros(1, dtype=np.int64)
        self.bp_entries = np.zeros(0, dtype=np.int64)

    def entries_at(self, flat: int) -> np.ndarray:
        i = np.searchsorted(self.bp_flat, flat)
        if i >= len(self.bp_flat) or self.bp_flat[i] != flat:
            return self.bp_entries[0:0]
        return self.bp_entries[self.bp_start[i]:self.bp_start[i + 1]]

    def tuple_at(self, c: int, r: int) -> PixelTuple:
        return PixelTuple(int(self.v0[r, c]), int(self.v1[r, c]),
                          float(self.v2[r, c]), int(self.vb[r, c]))

    def set_tuple(self, c: int, r: int, t: PixelTuple):
        if t.v_b >= 0 and t.v0 == NULL_ID:
            raise CanvasError("v_b set on a NULL tuple")
        self.v0[r, c] = t.v0
        self.v1[r, c] = t.v1
        self.v2[r, c] = t.v2
        self.vb[r, c] = t.v_b

    def equal(self, other: "PlaneData") -> bool:
        return (np.array_equal(self.v0, other.v0)
                and np.array_equal(self.v1, other.v1)
                and np.array_equal(self.v2, other.v2, equal_nan=True)
                and np.array_equal(self.vb, other.vb)
                and np.array_equal(self.interior_id, other.interior_id)
                and np.array_equal(self.bp_flat, other.bp_flat)
                and np.array_equal(self.bp_start, other.bp_start)
                and np.array_equal(self.bp_entries, other.bp_entries))


class DiscreteCanvas:
    """Three pixel planes over one viewport plus the boundary-entry table."""

    def __init__(self, viewport: Viewport, bindex=None, entries_complete: bool = False):
        self.viewport = viewport
        self.bindex = bindex
        # True when boundary buckets already reference every primitive
        # touching the pixel (distance canvases); polygon canvases may need
        # escalation to all triangles of an object touching the pixel.
        self.entries_complete = entries_complete
        self._planes: dict = {}

    def plane(self, name: str) -> PlaneData:
        if name not in PLANES:
            raise CanvasError(f"unknown plane {name!r}")
        if name not in self._planes:
            self._planes[name] = PlaneData(self.viewport.height_px, self.viewport.width_px)
        return self._planes[name]

    def has_plane(self, name: str) -> bool:
        return name in self._planes

    def flat(self, cols, rows):
        return rows * self.viewport.width_px + cols

    def equal(self, other: "DiscreteCanvas") -> bool:
        if self.viewport != other.viewport:
            return False
        for name in PLANES:
            a, b = self.has_plane(name), other.has_plane(name)
            if a != b:
                empty = PlaneData(self.viewport.height_px, self.viewport.width_px)
                if not (self.plane(name) if a else empty).equal(
                        other.plane(name) if b else empty):
                    return False
            elif a and not self.plane(name).equal(other.plane(name)):
                return False
        return True

    def dump_plane(self, name: str) -> str:
        """PGM-style text grid: object id per pixel, '.' for NULL; rows are
        printed top-down (max y first)."""
        vp = self.viewport
        lines = [f"{vp.width_px} {vp.height_px}"]
        v0 = self.plane(name).v0
        for r in range(vp.height_px - 1, -1, -1):
            lines.append(" ".join("." if v == NULL_ID else str(int(v)) for v in v0[r]))
        return "\n".join(lines) + "\n"


class _Builder:
    """Accumulates per-record writes, then finalizes bucket CSR tables.

    Records must be fed in ascending id order with primitives in ascending
    ordinal order; plain overwrites then realize the (plane, higher object
    id, higher v1) conflict rule, making the result record-order independent.
    """

    def __init__(self, vp: Viewport, bindex, entries_complete=False):
        self.canvas = DiscreteCanvas(vp, bindex, entries_complete)
        self._pix: dict = {name: [] for name in PLANES}
        self._refs: dict = {name: [] for name in PLANES}

    def write_interior(self, plane_name, window, mask, rid, v1, value):
        plane = self.canvas.plane(plane_name)
        c0, _, r0, _ = window
        view = np.s_[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]]
        plane.interior_id[view][mask] = rid
        plane.v0[view][mask] = rid
        plane.v1[view][mask] = v1
        plane.vb[view][mask] = -1
        plane.v2[view][mask] = value

    def write_boundary(self, plane_name, window, mask, rid, v1, value, entry_ref):
        plane = self.canvas.plane(plane_name)
        c0, _, r0, _ = window
        rows, cols = np.nonzero(mask)
        if len(rows) == 0:
            return
        view = np.s_[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]]
        plane.v0[view][mask] = rid
        plane.v1[view][mask] = v1
        plane.vb[view][mask] = entry_ref
        plane.v2[view][mask] = value
        # A pixel the object's own boundary touches is not fully covered by
        # it; revoke this object's interior claim (others' claims stand).
        sub = plane.interior_id[view]
        sub[mask & (sub == rid)] = NULL_ID
        flat = (rows + r0) * self.canvas.viewport.width_px + (cols + c0)
        self._pix[plane_name].append(flat)
        self._refs[plane_name].append(np.full(len(flat), entry_ref, dtype=np.int64))

    def write_boundary_pixels(self, plane_name, pixels, rid, v1, value, entry_ref):
        plane = self.canvas.plane(plane_name)
        for c, r in pixels:
            plane.v0[r, c] = rid
            plane.v1[r, c] = v1
            plane.vb[r, c] = entry_ref
            plane.v2[r, c] = value
        if pixels:
            flat = np.array([r * self.canvas.viewport.width_px + c for c, r in pixels],
                            dtype=np.int64)
            self._pix[plane_name].append(flat)
            self._refs[plane_name].append(np.full(len(flat), entry_ref, dtype=np.int64))

    def finalize(self) -> DiscreteCanvas:
        for name in PLANES:
            if not self._pix[name]:
                continue
            plane = self.canvas.plane(name)
            flat = np.concatenate(self._pix[name])
            refs = np.concatenate(self._refs[name])
            order = np.lexsort((refs, flat))
            flat, refs = flat[order], refs[order]
            uniq, start = np.unique(flat, return_index=True)
            plane.bp_flat = uniq
            plane.bp_start = np.append(start, len(flat)).astype(np.int64)
            plane.bp_entries = refs
        return self.canvas


def render_geometry_canvas(records, vp: Viewport, bindex) -> DiscreteCanvas:
    """Render data records into a discrete canvas.

    Points land conservatively in the point plane; polyline segments land
    conservatively in the line plane (v_b set); polygons get a center-sampled
    interior pass (v_b NULL) overwritten by a conservative boundary pass
    whose v_b references the edge's incident-triangle entry.
    """
    recs = sorted(records, key=lambda rec: rec.id)
    ids = [rec.id for rec in recs]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate record ids in one canvas")
    b = _Builder(vp, bindex)
    for rec in recs:
        value = np.nan if rec.value is None else float(rec.value)
        start, _count = bindex.offsets[rec.id]
        if rec.kind == "point":
            p = rec.geometry
            pix = point_pixels(vp, p.x, p.y)
            b.write_boundary_pixels("point", pix, rec.id, 0, value, start)
        elif rec.kind == "polyline":
            segs = segments_array(rec)
            for si, (ax, ay, bx, by) in enumerate(segs):
                window = vp.window_for_bbox((min(ax, bx), min(ay, by),
                                             max(ax, bx), max(ay, by)))
                if window is None:
                    continue
                mask = seg_touch_mask(vp, window, ax, ay, bx, by)
                b.write_boundary("line", window, mask, rec.id, si, value, start + si)
        else:
            tri_base = 0
            for part in rec.geometry:
                for ti, tri in enumerate(part.triangles):
                    window = vp.window_for_bbox((tri[:, 0].min(), tri[:, 1].min(),
                                                 tri[:, 0].max(), tri[:, 1].max()))
                    if window is None:
                        continue
                    mask = tri_center_mask(vp, window, tri)
                    b.write_interior("polygon", window, mask, rec.id, tri_base + ti, value)
                tri_base += len(part.triangles)
            edge_base = 0
            for part in rec.geometry:
                edges = part.boundary_edges()
                for ei, (ax, ay, bx, by) in enumerate(edges):
                    window = vp.window_for_bbox((min(ax, bx), min(ay, by),
                                                 max(ax, bx), max(ay, by)))
                    if window is None:
                        continue
                    mask = seg_touch_mask(vp, window, ax, ay, bx, by)
                    b.write_boundary("polygon", window, mask, rec.id, edge_base + ei,
                                     value, start + edge_base + ei)
                edge_base += len(edges)
    return b.finalize()


# ---------------------------------------------------------------------------
# Distance canvases (Minkowski buffers)
# ---------------------------------------------------------------------------

def _point_to_square_dist(px, py, xs0, xs1, ys0, ys1):
    dx = np.maximum(np.maximum(xs0 - px, px - xs1), 0.0)
    dy = np.maximum(np.maximum(ys0 - py, py - ys1), 0.0)
    return np.hypot(dx, dy)


def _corner_dist_field(vp, window, feat) -> np.ndarray:
    """Distance from every window corner-lattice point to the feature."""
    c0, c1, r0, r1 = window
    xs = vp.corner_xs(c0, c1)[None, :]
    ys = vp.corner_ys(r0, r1)[:, None]
    if isinstance(feat, Point2):
        return np.hypot(xs - feat.x, ys - feat.y)
    if isinstance(feat, Segment):
        from .geometry import _point_seg_dist
        return _point_seg_dist(xs, ys, feat.a.x, feat.a.y, feat.b.x, feat.b.y)
    from .geometry import _point_seg_dist
    t = ((feat.v0.x, feat.v0.y), (feat.v1.x, feat.v1.y), (feat.v2.x, feat.v2.y))
    d = np.minimum(np.minimum(
        _point_seg_dist(xs, ys, t[0][0], t[0][1], t[1][0], t[1][1]),
        _point_seg_dist(xs, ys, t[1][0], t[1][1], t[2][0], t[2][1])),
        _point_seg_dist(xs, ys, t[2][0], t[2][1], t[0][0], t[0][1]))
    inside = ((orient(t[0][0], t[0][1], t[1][0], t[1][1], xs, ys) >= 0)
              & (orient(t[1][0], t[1][1], t[2][0], t[2][1], xs, ys) >= 0)
              & (orient(t[2][0], t[2][1], t[0][0], t[0][1], xs, ys) >= 0))
    d[inside] = 0.0
    return d


def feature_square_dminmax(vp: Viewport, window, feat) -> tuple:
    """Exact per-pixel (min, max) distance from the closed pixel square to a
    convex feature. min is 0 when they touch; max is attained at a corner
    because distance-to-a-convex-set is convex."""
    c0, c1, r0, r1 = window
    corner = _corner_dist_field(vp, window, feat)
    cmin, cmax = _corner_min_max(corner)
    xs = vp.corner_xs(c0, c1)
    ys = vp.corner_ys(r0, r1)
    xs0, xs1 = xs[None, :-1], xs[None, 1:]
    ys0, ys1 = ys[:-1, None], ys[1:, None]
    if isinstance(feat, Point2):
        dmin = _point_to_square_dist(feat.x, feat.y, xs0, xs1, ys0, ys1)
        return dmin, cmax
    if isinstance(feat, Segment):
        dmin = np.minimum(cmin, np.minimum(
            _point_to_square_dist(feat.a.x, feat.a.y, xs0, xs1, ys0, ys1),
            _point_to_square_dist(feat.b.x, feat.b.y, xs0, xs1, ys0, ys1)))
        touch = seg_touch_mask(vp, window, feat.a.x, feat.a.y, feat.b.x, feat.b.y)
    else:
        tri = np.array([(feat.v0.x, feat.v0.y), (feat.v1.x, feat.v1.y),
                        (feat.v2.x, feat.v2.y)])
        dmin = cmin
        for vx, vy in tri:
            dmin = np.minimum(dmin, _point_to_square_dist(vx, vy, xs0, xs1, ys0, ys1))
        touch = tri_touch_mask(vp, window, tri)
    dmin = np.where(touch, 0.0, dmin)
    return dmin, cmax


def _sub_window(outer, inner):
    """Relative slice of ``inner`` window inside ``outer`` window."""
    oc0, _, or0, _ = outer
    c0, c1, r0, r1 = inner
    return np.s_[r0 - or0:r1 - or0 + 1, c0 - oc0:c1 - oc0 + 1]


class DistanceCanvasBuilder:
    """Renders Minkowski buffers of one or more sources into a canvas.

    Every boundary pixel's bucket lists all generating features whose buffer
    touches the pixel, so membership tests reduce to exact_distance <= r and
    no escalation is ever needed (entries_complete canvas).
    """

    def __init__(self, vp: Viewport, bindex):
        self._b = _Builder(vp, bindex, entries_complete=True)
        self.vp = vp
        self.bindex = bindex

    def add_source(self, source: GeometryRecord, r: float):
        if not (r > 0) or not np.isfinite(r):
            raise DataError(f"distance radius must be positive, got {r}")
        vp = self.vp
        x0, y0, x1, y1 = source.bbox()
        window = vp.window_for_bbox((x0 - r, y0 - r, x1 + r, y1 + r))
        if window is None:
            return
        c0, c1, r0, r1 = window
        shape = (r1 - r0 + 1, c1 - c0 + 1)
        interior = np.zeros(shape, dtype=bool)
        feats = features(source)
        start, _ = self.bindex.offsets[source.id]
        per_feat = []
        for fi, feat in enumerate(feats):
            fx0, fy0, fx1, fy1 = _feat_bbox(feat)
            fwin = vp.window_for_bbox((fx0 - r, fy0 - r, fx1 + r, fy1 + r))
            if fwin is None:
                per_feat.append(None)
                continue
            dmin, dmax = feature_square_dminmax(vp, fwin, feat)
            sl = _sub_window(window, fwin)
            interior[sl] |= dmax <= r
            per_feat.append((fwin, dmin <= r))
        value = np.nan if source.value is None else float(source.value)
        self._b.write_interior("polygon", window, interior, source.id, 0, value)
        for fi, item in enumerate(per_feat):
            if item is None:
                continue
            fwin, touched = item
            sl = _sub_window(window, fwin)
            boundary = touched & ~interior[sl]
            self._b.write_boundary("polygon", fwin, boundary, source.id, fi,
                                   value, start + fi)

    def finalize(self) -> DiscreteCanvas:
        return self._b.finalize()


def _feat_bbox(feat):
    if isinstance(feat, Point2):
        return (feat.x, feat.y, feat.x, feat.y)
    if isinstance(feat, Segment):
        return (min(feat.a.x, feat.b.x), min(feat.a.y, feat.b.y),
                max(feat.a.x, feat.b.x), max(feat.a.y, feat.b.y))
    xs = (feat.v0.x, feat.v1.x, feat.v2.x)
    ys = (feat.v0.y, feat.v1.y, feat.v2.y)
    return (min(xs), min(ys), max(xs), max(ys))


def render_distance_canvas(source: GeometryRecord, r: float, vp: Viewport):
    """Canvas of the radius-r Minkowski buffer of one source record.

    Returns (canvas, boundary index); boundary entries carry the generating
    feature plus r, so exact membership is exact_distance(probe, feature) <= r.
    """
    from .canvas_index import BoundaryIndex
    if not (r > 0):
        raise DataError(f"distance radius must be positive, got {r}")
    bindex = BoundaryIndex.for_distance_sources([source], [r])
    builder = DistanceCanvasBuilder(vp, bindex)
    builder.add_source(source, r)
    return builder.finalize(), bindex
