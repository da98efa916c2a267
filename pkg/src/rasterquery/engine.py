"""Query evaluation: selection, joins, distance queries, kNN, and spatial
aggregation, composed from canvas rendering, exact boundary tests, and the
Map operator per plan.

Every query is exact: raster classification only routes work (interior hits
are certain, boundary pixels fall back to exact primitive tests), so results
are independent of the canvas resolution. All functions are read-only over
their inputs and safe to call concurrently.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import instrument
from .canvas import (
    DiscreteCanvas,
    DistanceCanvasBuilder,
    Viewport,
    seg_touch_mask,
    tri_touch_mask,
    viewport_from_bounds,
)
from .canvas_index import (
    BoundaryIndex,
    LayerIndex,
    PixelMatcher,
    build_boundary_index_direct,
    build_distance_layer_index,
    build_layer_index,
)
from .config import DEFAULT, Config
from .errors import DataError
from .geometry import (
    GeometryRecord,
    Point2,
    PolygonGeom,
    Segment,
    Triangle,
    points_to_record_distance,
    polygon_record,
    project_points_4326_to_3857,
    segments_array,
    triangles_array,
)
from .operators import compact, map_one_pass, map_two_pass
from .optimizer import ONE_PASS, QueryDescriptor, choose_map_impl, estimate_nmax

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionResult:
    ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(sorted(set(self.ids))))


@dataclass(frozen=True)
class JoinResult:
    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(sorted(set(self.pairs))))


@dataclass(frozen=True)
class AggregationResult:
    """Rows of (constraint id, count, sum-of-values-or-None), count > 0."""

    rows: tuple


@dataclass(frozen=True)
class KnnConfig:
    alpha: float = 2.0
    circle_count: int | None = None
    r_max: float | None = None
    radius_floor: float = 1e-3
    circle_cap: int = 64

    def __post_init__(self):
        if self.alpha <= 1.0:
            raise DataError("kNN alpha must be > 1")

    def radii(self, r_max: float) -> list:
        """Shrinking radius schedule r_max / alpha^i, largest first."""
        if self.circle_count is not None:
            c = self.circle_count
        else:
            c = math.ceil(math.log(max(r_max / self.radius_floor, 1.0), self.alpha))
            c = min(max(c, 1), self.circle_cap)
        return [r_max / self.alpha ** i for i in range(c + 1)]


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------

class PreparedPoints:
    """Point dataset pre-flattened to arrays for repeated queries."""

    def __init__(self, records):
        recs = sorted(records, key=lambda r: r.id)
        if any(r.kind != "point" for r in recs):
            raise DataError("PreparedPoints requires point records")
        self.records = recs
        self.ids = np.array([r.id for r in recs], dtype=np.int64)
        self.xy = np.array([(r.geometry.x, r.geometry.y) for r in recs], dtype=float)
        self.values = np.array([np.nan if r.value is None else r.value for r in recs])

    def __len__(self):
        return len(self.ids)


def _split_kinds(records):
    pts, others = [], []
    for rec in records:
        (pts if rec.kind == "point" else others).append(rec)
    return pts, others


def _as_constraint_record(constraint) -> GeometryRecord:
    if isinstance(constraint, GeometryRecord):
        if constraint.kind != "polygon":
            raise DataError("constraint must be a polygon")
        return constraint
    if isinstance(constraint, PolygonGeom):
        return GeometryRecord(0, "polygon", [constraint])
    if isinstance(constraint, list) and constraint and isinstance(constraint[0], PolygonGeom):
        return GeometryRecord(0, "polygon", list(constraint))
    raise DataError(f"invalid constraint {type(constraint)!r}")


def _bounds_union(boxes):
    arr = np.asarray(boxes, dtype=float)
    b = (float(arr[:, 0].min()), float(arr[:, 1].min()),
         float(arr[:, 2].max()), float(arr[:, 3].max()))
    if not (b[2] > b[0] and b[3] > b[1]):
        pad = max(abs(b[0]), abs(b[1]), 1.0) * 1e-9 + 1e-12
        b = (b[0] - pad, b[1] - pad, b[2] + pad, b[3] + pad)
    return b


# ---------------------------------------------------------------------------
# Probe classification against a constraint canvas
# ---------------------------------------------------------------------------

def match_points(matcher: PixelMatcher, pts_xy: np.ndarray) -> np.ndarray:
    """Per-point matched constraint id (-1 when none). Constraint objects in
    one canvas are pairwise disjoint, so a point matches at most one.

    Interior pixels resolve wholesale from the interior grid; points on
    boundary pixels run exact per-pixel tests grouped by pixel.
    """
    vp = matcher.vp
    out = np.full(len(pts_xy), -1, dtype=np.int64)
    if len(pts_xy) == 0:
        return out
    idx = np.flatnonzero(vp.in_bounds(pts_xy))
    if len(idx) == 0:
        return out
    cols, rows = vp.pixel_of_points(pts_xy[idx])
    flat = rows * vp.width_px + cols
    interior = matcher.plane.interior_id.ravel()[flat]
    hit = interior >= 0
    out[idx[hit]] = interior[hit]
    bpf = matcher.plane.bp_flat
    if len(bpf) == 0:
        return out
    rem = np.flatnonzero(~hit)
    if len(rem) == 0:
        return out
    rflat, ridx = flat[rem], idx[rem]
    pos = np.minimum(np.searchsorted(bpf, rflat), len(bpf) - 1)
    onb = bpf[pos] == rflat
    rflat, ridx = rflat[onb], ridx[onb]
    if len(rflat) == 0:
        return out
    order = np.argsort(rflat, kind="stable")
    rflat, ridx = rflat[order], ridx[order]
    starts = np.flatnonzero(np.r_[True, rflat[1:] != rflat[:-1]])
    bounds = np.append(starts, len(rflat))
    for s, e in zip(bounds[:-1], bounds[1:]):
        pidx = ridx[s:e]
        out[pidx] = _points_vs_pixel(matcher, int(rflat[s]), pts_xy[pidx])
    return out


def _points_vs_pixel(matcher: PixelMatcher, flat: int, pts: np.ndarray) -> np.ndarray:
    """Exact tests of a batch of points against one boundary pixel's entries
    (vectorized per entry), escalating per object when entry tests fail."""
    bindex = matcher.bindex
    refs = matcher.entries_at(flat)
    res = np.full(len(pts), -1, dtype=np.int64)
    px, py = pts[:, 0], pts[:, 1]
    objs_here = []
    for ref in refs:
        ref = int(ref)
        oid = int(bindex.obj_ids[ref])
        if oid not in objs_here:
            objs_here.append(oid)
        todo = res == -1
        if not todo.any():
            break
        kind = bindex.kinds[ref]
        c = bindex.coords[ref]
        r = bindex.aux_r[ref]
        if np.isnan(r):
            m = _points_hit_entry(px, py, kind, c)
        else:
            m = _points_dist_entry(px, py, kind, c) <= r
        res[todo & m] = oid
    if not matcher.complete:
        for oid in objs_here:
            todo = res == -1
            if not todo.any():
                break
            prims = matcher._esc_cache.get((oid, flat))
            if prims is None:
                from .canvas_index import object_prims_touching_square, pixel_square
                c0 = flat % matcher.vp.width_px
                r0 = flat // matcher.vp.width_px
                prims = object_prims_touching_square(
                    bindex.records[oid], pixel_square(matcher.vp, c0, r0))
                matcher._esc_cache[(oid, flat)] = prims
            for prim in prims:
                todo = res == -1
                if not todo.any():
                    break
                if isinstance(prim, Triangle):
                    m = _points_hit_entry(px, py, 2, (prim.v0.x, prim.v0.y, prim.v1.x,
                                                      prim.v1.y, prim.v2.x, prim.v2.y))
                elif isinstance(prim, Segment):
                    m = _points_hit_entry(px, py, 1, (prim.a.x, prim.a.y,
                                                      prim.b.x, prim.b.y, 0, 0))
                else:
                    m = _points_hit_entry(px, py, 0, (prim.x, prim.y, 0, 0, 0, 0))
                res[todo & m] = oid
    return res


def _points_hit_entry(px, py, kind, c):
    from .geometry import orient
    if kind == 0:
        return (px == c[0]) & (py == c[1])
    if kind == 1:
        on_line = orient(c[0], c[1], c[2], c[3], px, py) == 0.0
        return (on_line
                & (px >= min(c[0], c[2])) & (px <= max(c[0], c[2]))
                & (py >= min(c[1], c[3])) & (py <= max(c[1], c[3])))
    return ((orient(c[0], c[1], c[2], c[3], px, py) >= 0.0)
            & (orient(c[2], c[3], c[4], c[5], px, py) >= 0.0)
            & (orient(c[4], c[5], c[0], c[1], px, py) >= 0.0))


def _points_dist_entry(px, py, kind, c):
    from .geometry import _point_seg_dist, orient
    if kind == 0:
        return np.hypot(px - c[0], py - c[1])
    if kind == 1:
        return _point_seg_dist(px, py, c[0], c[1], c[2], c[3])
    d = np.minimum(np.minimum(
        _point_seg_dist(px, py, c[0], c[1], c[2], c[3]),
        _point_seg_dist(px, py, c[2], c[3], c[4], c[5])),
        _point_seg_dist(px, py, c[4], c[5], c[0], c[1]))
    inside = ((orient(c[0], c[1], c[2], c[3], px, py) >= 0.0)
              & (orient(c[2], c[3], c[4], c[5], px, py) >= 0.0)
              & (orient(c[4], c[5], c[0], c[1], px, py) >= 0.0))
    return np.where(inside, 0.0, d)


def _record_prims(rec: GeometryRecord):
    if rec.kind == "point":
        yield rec.geometry, None
    elif rec.kind == "polyline":
        for s, arr in zip(rec.geometry, segments_array(rec)):
            yield s, ("seg", arr)
    else:
        for t in triangles_array(rec):
            yield Triangle(Point2(*t[0]), Point2(*t[1]), Point2(*t[2])), ("tri", t)


def match_record(matcher: PixelMatcher, rec: GeometryRecord,
                 stop_after_first: bool = False) -> set:
    """Constraint ids the record's geometry intersects: every primitive is
    rasterized conservatively and classified per pixel (interior pixels match
    outright, boundary pixels run exact tests)."""
    vp = matcher.vp
    hits: set = set()
    interior_grid = matcher.plane.interior_id
    bpf = matcher.plane.bp_flat
    for prim, tagged in _record_prims(rec):
        if tagged is None:
            p = prim
            sub = match_points(matcher, np.array([[p.x, p.y]]))
            if sub[0] >= 0:
                hits.add(int(sub[0]))
            continue
        kind, arr = tagged
        if kind == "seg":
            bbox = (min(arr[0], arr[2]), min(arr[1], arr[3]),
                    max(arr[0], arr[2]), max(arr[1], arr[3]))
        else:
            bbox = (arr[:, 0].min(), arr[:, 1].min(), arr[:, 0].max(), arr[:, 1].max())
        window = vp.window_for_bbox(bbox)
        if window is None:
            continue
        mask = (seg_touch_mask(vp, window, arr[0], arr[1], arr[2], arr[3])
                if kind == "seg" else tri_touch_mask(vp, window, arr))
        c0, _, r0, _ = window
        rws, cls = np.nonzero(mask)
        if len(rws) == 0:
            continue
        sub_int = interior_grid[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]][mask]
        for cid in np.unique(sub_int[sub_int >= 0]):
            hits.add(int(cid))
        if stop_after_first and hits:
            return hits
        if len(bpf) == 0:
            continue
        flats = (rws + r0).astype(np.int64) * vp.width_px + (cls + c0)
        pos = np.minimum(np.searchsorted(bpf, flats), len(bpf) - 1)
        for flat in np.unique(flats[bpf[pos] == flats]):
            hits |= matcher.matches_at(int(flat), prim, skip=hits)
            if stop_after_first and hits:
                return hits
    return hits


# ---------------------------------------------------------------------------
# Map plumbing
# ---------------------------------------------------------------------------

def _run_map(stream_items, n_max, slot_fn, config: Config, force_impl=None):
    impl = force_impl or choose_map_impl(n_max, config=config)
    if impl == ONE_PASS:
        return compact(map_one_pass(iter(stream_items), n_max, slot_fn))
    return list(map_two_pass(lambda: iter(stream_items),
                             ceiling=config.two_pass_ceiling))


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _constraint_matcher(cons: GeometryRecord, resolution: int):
    with instrument.phase("polygon"):
        bindex = build_boundary_index_direct([cons])
    vp = viewport_from_bounds(cons.bbox(), resolution)
    with instrument.phase("raster"):
        canvas = render_constraint(cons, vp, bindex)
    return PixelMatcher(canvas), vp


def render_constraint(cons: GeometryRecord, vp: Viewport, bindex) -> DiscreteCanvas:
    from .canvas import render_geometry_canvas
    return render_geometry_canvas([cons], vp, bindex)


def select(dataset, constraint, resolution: int | None = None,
           config: Config = DEFAULT, force_map_impl=None) -> SelectionResult:
    """Ids of all objects whose geometry intersects the closed constraint
    polygon: render the constraint canvas plus boundary index, stream the
    dataset through transform/blend/mask, then compact via Map."""
    resolution = resolution or config.resolution
    cons = _as_constraint_record(constraint)
    matcher, vp = _constraint_matcher(cons, resolution)
    prepared = dataset if isinstance(dataset, PreparedPoints) else None
    records = prepared.records if prepared else list(dataset)
    n_max = estimate_nmax(QueryDescriptor("selection", object_count=len(records)))

    matched_ids = []
    with instrument.phase("raster"):
        if prepared is not None:
            cid = match_points(matcher, prepared.xy)
            matched_ids.extend(int(i) for i in prepared.ids[cid >= 0])
        else:
            pts, others = _split_kinds(records)
            if pts:
                xy = np.array([(r.geometry.x, r.geometry.y) for r in pts])
                ids = np.array([r.id for r in pts], dtype=np.int64)
                cid = match_points(matcher, xy)
                matched_ids.extend(int(i) for i in ids[cid >= 0])
            for rec in others:
                if match_record(matcher, rec, stop_after_first=True):
                    matched_ids.append(rec.id)

    ordinal = {rid: i for i, rid in enumerate(sorted(r.id for r in records))}
    out = _run_map(matched_ids, n_max, lambda rid: ordinal[rid], config,
                   force_impl=force_map_impl)
    return SelectionResult(tuple(out))


# ---------------------------------------------------------------------------
# Joins
# ---------------------------------------------------------------------------

def _layer_records(layer_ids, by_id):
    return [by_id[i] for i in layer_ids]


def join(d1, d2, resolution: int | None = None, config: Config = DEFAULT,
         d1_layers: LayerIndex | None = None, d2_layers: LayerIndex | None = None,
         force_map_impl=None) -> JoinResult:
    """All intersecting (d1 id, d2 id) pairs. d1 must be polygons; d2 points
    or polygons. Runs one selection per layer of the side with fewer layers
    (disjoint layer members share one constraint canvas)."""
    resolution = resolution or config.resolution
    d1, d2 = list(d1), list(d2)
    if any(r.kind != "polygon" for r in d1):
        raise DataError("join: D1 must be a polygon dataset")
    kinds2 = {r.kind for r in d2}
    if kinds2 - {"point", "polygon"}:
        raise DataError("join: D2 must be points or polygons")
    if not d1 or not d2:
        return JoinResult(())

    poly_poly = kinds2 == {"polygon"}
    if d1_layers is None:
        log.warning("join: building layer index for D1 on demand")
        d1_layers = build_layer_index(d1)
    swapped = False
    if poly_poly:
        if d2_layers is None:
            log.warning("join: building layer index for D2 on demand")
            d2_layers = build_layer_index(d2)
        if d2_layers.layer_count < d1_layers.layer_count:
            d1, d2 = d2, d1
            d1_layers = d2_layers
            swapped = True

    pairs = _join_layers(d1, d2, d1_layers, resolution, config, poly_poly,
                         force_map_impl)
    if swapped:
        pairs = [(b, a) for a, b in pairs]
    return JoinResult(tuple(pairs))


def _join_layers(d1, d2, layers: LayerIndex, resolution, config, poly_poly,
                 force_map_impl=None):
    by_id = {r.id: r for r in d1}
    d2_sorted = sorted(d2, key=lambda r: r.id)
    d2_ordinal = {r.id: i for i, r in enumerate(d2_sorted)}
    n = len(d2_sorted)
    pts2, others2 = _split_kinds(d2_sorted)
    xy2 = np.array([(r.geometry.x, r.geometry.y) for r in pts2]) if pts2 else None
    ids2 = np.array([r.id for r in pts2], dtype=np.int64) if pts2 else None

    pairs = []
    for layer_ids in layers.layers:
        members = _layer_records(layer_ids, by_id)
        vp = viewport_from_bounds(_bounds_union([m.bbox() for m in members]), resolution)
        with instrument.phase("polygon"):
            bindex = build_boundary_index_direct(members)
        with instrument.phase("raster"):
            from .canvas import render_geometry_canvas
            canvas = render_geometry_canvas(members, vp, bindex)
        matcher = PixelMatcher(canvas)
        m = len(members)
        desc = QueryDescriptor("join_poly_poly" if poly_poly else "join_poly_point",
                               layer_m=m, data_n=n)
        n_max = estimate_nmax(desc)
        member_index = {rid: j for j, rid in enumerate(sorted(layer_ids))}

        layer_pairs = []
        with instrument.phase("raster"):
            if pts2:
                cid = match_points(matcher, xy2)
                got = cid >= 0
                layer_pairs.extend((int(c), int(i)) for c, i in zip(cid[got], ids2[got]))
            for rec in others2:
                for c in match_record(matcher, rec):
                    layer_pairs.append((int(c), rec.id))

        if poly_poly:
            def slot_fn(pair, _mi=member_index, _n=n, _do=d2_ordinal):
                return _mi[pair[0]] * _n + _do[pair[1]]
        else:
            def slot_fn(pair, _do=d2_ordinal):
                return _do[pair[1]]
        pairs.extend(_run_map(layer_pairs, n_max, slot_fn, config,
                              force_impl=force_map_impl))
    return pairs


# ---------------------------------------------------------------------------
# Distance queries
# ---------------------------------------------------------------------------

def _maybe_project(records, geographic):
    if not geographic:
        return records
    from .geometry import project_record_4326_to_3857
    return [project_record_4326_to_3857(r) for r in records]


def distance_select(dataset, source: GeometryRecord, r: float,
                    resolution: int | None = None, config: Config = DEFAULT,
                    geographic: bool = False) -> SelectionResult:
    """Ids within distance r of the source's closed geometry; exact via
    distance boundary entries (never the rasterized buffer outline)."""
    if not (r > 0):
        raise DataError(f"distance radius must be positive, got {r}")
    resolution = resolution or config.resolution
    records = list(dataset)
    if geographic:
        records = _maybe_project(records, True)
        source = _maybe_project([source], True)[0]
    x0, y0, x1, y1 = source.bbox()
    vp = viewport_from_bounds((x0 - r, y0 - r, x1 + r, y1 + r), resolution)
    with instrument.phase("polygon"):
        bindex = BoundaryIndex.for_distance_sources([source], [r])
    with instrument.phase("raster"):
        builder = DistanceCanvasBuilder(vp, bindex)
        builder.add_source(source, r)
        canvas = builder.finalize()
    matcher = PixelMatcher(canvas)
    matched = []
    with instrument.phase("raster"):
        pts, others = _split_kinds(records)
        if pts:
            xy = np.array([(p.geometry.x, p.geometry.y) for p in pts])
            ids = np.array([p.id for p in pts], dtype=np.int64)
            cid = match_points(matcher, xy)
            matched.extend(int(i) for i in ids[cid >= 0])
        for rec in others:
            if match_record(matcher, rec, stop_after_first=True):
                matched.append(rec.id)
    n_max = estimate_nmax(QueryDescriptor("selection", object_count=len(records)))
    ordinal = {rid: i for i, rid in enumerate(sorted(rec.id for rec in records))}
    out = _run_map(matched, n_max, lambda rid: ordinal[rid], config)
    return SelectionResult(tuple(out))


def distance_join(d1, d2, radii, resolution: int | None = None,
                  config: Config = DEFAULT, geographic: bool = False) -> JoinResult:
    """Pairs within distance: a single radius (type 1, the smaller dataset
    becomes the constraint side) or one radius per D1 object (type 2). The
    layer index over the generated buffers is built on the fly."""
    resolution = resolution or config.resolution
    d1, d2 = list(d1), list(d2)
    if geographic:
        d1 = _maybe_project(d1, True)
        d2 = _maybe_project(d2, True)
    if not d1 or not d2:
        return JoinResult(())
    if np.isscalar(radii):
        r = float(radii)
        if not r > 0:
            raise DataError("distance radius must be positive")
        if len(d2) < len(d1):
            sources, probes, flip = d2, d1, True
        else:
            sources, probes, flip = d1, d2, False
        rmap = {rec.id: r for rec in sources}
    else:
        radii_list = [float(x) for x in radii]
        if len(radii_list) != len(d1):
            raise DataError(f"radii length {len(radii_list)} != |D1| {len(d1)}")
        if any(x <= 0 for x in radii_list):
            raise DataError("all radii must be positive")
        sources, probes, flip = d1, d2, False
        rmap = {rec.id: rr for rec, rr in zip(d1, radii_list)}

    sources = sorted(sources, key=lambda rec: rec.id)
    layers = build_distance_layer_index(sources, [rmap[s.id] for s in sources])
    by_id = {s.id: s for s in sources}
    probes_sorted = sorted(probes, key=lambda rec: rec.id)
    probe_ordinal = {rec.id: i for i, rec in enumerate(probes_sorted)}
    pts, others = _split_kinds(probes_sorted)
    xy = np.array([(p.geometry.x, p.geometry.y) for p in pts]) if pts else None
    ids = np.array([p.id for p in pts], dtype=np.int64) if pts else None

    pairs = []
    for layer_ids in layers.layers:
        members = [by_id[i] for i in layer_ids]
        boxes = []
        for mrec in members:
            x0, y0, x1, y1 = mrec.bbox()
            rr = rmap[mrec.id]
            boxes.append((x0 - rr, y0 - rr, x1 + rr, y1 + rr))
        vp = viewport_from_bounds(_bounds_union(boxes), resolution)
        with instrument.phase("polygon"):
            bindex = BoundaryIndex.for_distance_sources(members,
                                                        [rmap[m.id] for m in members])
        with instrument.phase("raster"):
            builder = DistanceCanvasBuilder(vp, bindex)
            for mrec in members:
                builder.add_source(mrec, rmap[mrec.id])
            canvas = builder.finalize()
        matcher = PixelMatcher(canvas)
        layer_pairs = []
        with instrument.phase("raster"):
            if pts:
                cid = match_points(matcher, xy)
                got = cid >= 0
                layer_pairs.extend((int(c), int(i)) for c, i in zip(cid[got], ids[got]))
            for rec in others:
                for c in match_record(matcher, rec):
                    layer_pairs.append((int(c), rec.id))
        n_max = estimate_nmax(QueryDescriptor("join_poly_point", data_n=len(probes)))
        pairs.extend(_run_map(layer_pairs, n_max,
                              lambda pr: probe_ordinal[pr[1]], config))
    if flip:
        pairs = [(b, a) for a, b in pairs]
    return JoinResult(tuple(pairs))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(constraints, data, mode: str = "count",
              resolution: int | None = None, config: Config = DEFAULT,
              layer_index: LayerIndex | None = None) -> AggregationResult:
    """Per-constraint count (or sum of value payloads) of intersecting data
    objects. Point data uses the blend plan (per-pixel accumulation, interior
    pixels resolved wholesale, boundary pixels re-resolved exactly); other
    data folds the join pairs."""
    if mode not in ("count", "sum"):
        raise DataError(f"unknown aggregation mode {mode!r}")
    resolution = resolution or config.resolution
    constraints = list(constraints)
    data = list(data)
    if any(r.kind != "polygon" for r in constraints):
        raise DataError("aggregation constraints must be polygons")
    if mode == "sum" and any(r.value is None for r in data):
        raise DataError("sum aggregation over a value-less dataset")
    if layer_index is None:
        log.warning("aggregate: building constraint layer index on demand")
        layer_index = build_layer_index(constraints)

    counts: dict = {}
    sums: dict = {}
    all_points = all(r.kind == "point" for r in data)
    if all_points and data:
        by_id = {r.id: r for r in constraints}
        xy = np.array([(r.geometry.x, r.geometry.y) for r in data])
        ids = np.array([r.id for r in data], dtype=np.int64)
        vals = np.array([np.nan if r.value is None else r.value for r in data])
        for layer_ids in layer_index.layers:
            members = [by_id[i] for i in layer_ids]
            vp = viewport_from_bounds(_bounds_union([m.bbox() for m in members]),
                                      resolution)
            with instrument.phase("polygon"):
                bindex = build_boundary_index_direct(members)
            with instrument.phase("raster"):
                from .canvas import render_geometry_canvas
                canvas = render_geometry_canvas(members, vp, bindex)
                cid = match_points(PixelMatcher(canvas), xy)
            got = np.flatnonzero(cid >= 0)
            for gi in got:
                c = int(cid[gi])
                counts[c] = counts.get(c, 0) + 1
                if mode == "sum":
                    sums[c] = sums.get(c, 0.0) + float(vals[gi])
    else:
        result = join(constraints, data, resolution=resolution, config=config,
                      d1_layers=layer_index)
        value_of = {r.id: r.value for r in data}
        for cid, did in result.pairs:
            counts[cid] = counts.get(cid, 0) + 1
            if mode == "sum":
                sums[cid] = sums.get(cid, 0.0) + float(value_of[did])
    rows = tuple((cid, counts[cid], sums.get(cid) if mode == "sum" else None)
                 for cid in sorted(counts))
    return AggregationResult(rows)


# ---------------------------------------------------------------------------
# kNN
# ---------------------------------------------------------------------------

def _prepared_points(dataset) -> PreparedPoints:
    if isinstance(dataset, PreparedPoints):
        return dataset
    return PreparedPoints(list(dataset))


def _count_within(prepared: PreparedPoints, center: Point2, r: float,
                  config: Config, resolution: int) -> int:
    """Exact count of dataset points within r of center, via a distance
    canvas (any resolution yields the exact count)."""
    src = GeometryRecord(0, "point", center)
    vp = viewport_from_bounds((center.x - r, center.y - r,
                               center.x + r, center.y + r), resolution)
    bindex = BoundaryIndex.for_distance_sources([src], [r])
    builder = DistanceCanvasBuilder(vp, bindex)
    builder.add_source(src, r)
    matcher = PixelMatcher(builder.finalize())
    return int((match_points(matcher, prepared.xy) >= 0).sum())


def _knn_radius(prepared: PreparedPoints, center: Point2, k: int,
                cfg: KnnConfig, config: Config) -> float:
    """Smallest ladder radius whose circle holds at least k points: binary
    search over the monotone aggregation counts."""
    box = _bounds_union([(prepared.xy[:, 0].min(), prepared.xy[:, 1].min(),
                          prepared.xy[:, 0].max(), prepared.xy[:, 1].max())])
    corners = [(box[0], box[1]), (box[2], box[1]), (box[0], box[3]), (box[2], box[3])]
    r_max = cfg.r_max or max(math.hypot(center.x - cx, center.y - cy)
                             for cx, cy in corners)
    if r_max <= 0:
        r_max = cfg.radius_floor
    radii = cfg.radii(r_max)  # descending
    count_res = max(min(128, config.resolution), 16)
    lo, hi = 0, len(radii) - 1  # counts decrease with index
    # invariant: count(radii[lo]) >= k; find the largest index still >= k
    if _count_within(prepared, center, radii[hi], config, count_res) >= k:
        return radii[hi]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _count_within(prepared, center, radii[mid], config, count_res) >= k:
            lo = mid
        else:
            hi = mid
    return radii[lo]


def knn_select(dataset, p, k: int, cfg: KnnConfig | None = None,
               resolution: int | None = None, config: Config = DEFAULT,
               geographic: bool = False) -> list:
    """The k nearest dataset points to p as (id, distance) sorted by
    (distance, id). Ties at the k-th distance break toward ascending id."""
    cfg = cfg or KnnConfig(alpha=config.alpha, radius_floor=config.knn_radius_floor,
                           circle_cap=config.circle_cap)
    resolution = resolution or config.resolution
    prepared = _prepared_points(dataset)
    if geographic:
        prepared = PreparedPoints(_maybe_project(prepared.records, True))
        px, py = project_points_4326_to_3857(np.array([[p[0] if not isinstance(p, Point2) else p.x,
                                                        p[1] if not isinstance(p, Point2) else p.y]]))[0]
        p = Point2(px, py)
    elif not isinstance(p, Point2):
        p = Point2(float(p[0]), float(p[1]))
    n = len(prepared)
    if k <= 0:
        raise DataError("k must be positive")
    if k > n:
        raise DataError(f"k={k} exceeds dataset size {n}")
    r = _knn_radius(prepared, p, k, cfg, config)
    ids = distance_select(prepared.records, GeometryRecord(0, "point", p), r,
                          resolution=resolution, config=config).ids
    idx = np.searchsorted(prepared.ids, np.array(ids, dtype=np.int64))
    d = np.hypot(prepared.xy[idx, 0] - p.x, prepared.xy[idx, 1] - p.y)
    order = sorted(zip(d, ids))[:k]
    return [(int(i), float(dd)) for dd, i in order]


def knn_join(d1, d2, k: int, cfg: KnnConfig | None = None,
             resolution: int | None = None, config: Config = DEFAULT,
             geographic: bool = False) -> list:
    """Per D1 point, its k nearest D2 points: a per-point radius from the
    shrinking-circle aggregation, one type-2 distance join with those radii,
    then a per-point distance sort."""
    cfg = cfg or KnnConfig(alpha=config.alpha, radius_floor=config.knn_radius_floor,
                           circle_cap=config.circle_cap)
    resolution = resolution or config.resolution
    left = _prepared_points(d1)
    right = _prepared_points(d2)
    if geographic:
        left = PreparedPoints(_maybe_project(left.records, True))
        right = PreparedPoints(_maybe_project(right.records, True))
    if k <= 0:
        raise DataError("k must be positive")
    if k > len(right):
        raise DataError(f"k={k} exceeds |D2|={len(right)}")
    radii = [_knn_radius(right, Point2(x, y), k, cfg, config)
             for x, y in left.xy]
    pairs = distance_join(left.records, right.records, radii,
                          resolution=resolution, config=config).pairs
    by_left: dict = {int(i): [] for i in left.ids}
    right_pos = {int(rid): j for j, rid in enumerate(right.ids)}
    left_pos = {int(lid): j for j, lid in enumerate(left.ids)}
    for lid, rid in pairs:
        li, ri = left_pos[lid], right_pos[rid]
        d = math.hypot(left.xy[li, 0] - right.xy[ri, 0],
                       left.xy[li, 1] - right.xy[ri, 1])
        by_left[lid].append((d, rid))
    out = []
    for lid in sorted(by_left):
        neigh = sorted(by_left[lid])[:k]
        out.append((lid, [int(rid) for _, rid in neigh]))
    return out
