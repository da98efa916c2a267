"""rasterquery: exact spatial queries evaluated on a software rasterizer.

Geometry is rendered into discrete pixel canvases; canvas-specific indexes
(boundary index, layer index) turn raster candidates into exact answers, and
a clustered grid index supports datasets larger than memory.
"""

from .config import Config, load_config
from .geometry import (
    GeometryRecord,
    Point2,
    PolygonGeom,
    Segment,
    Triangle,
    box_record,
    convex_hull,
    exact_distance,
    exact_intersects,
    line_record,
    parse_wkt,
    point_record,
    polygon_from_rings,
    polygon_record,
    project_4326_to_3857,
    triangulate,
)

__all__ = [
    "Config",
    "load_config",
    "GeometryRecord",
    "Point2",
    "PolygonGeom",
    "Segment",
    "Triangle",
    "box_record",
    "convex_hull",
    "exact_distance",
    "exact_intersects",
    "line_record",
    "parse_wkt",
    "point_record",
    "polygon_from_rings",
    "polygon_record",
    "project_4326_to_3857",
    "triangulate",
]

__version__ = "0.1.0"
