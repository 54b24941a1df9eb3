"""Census-tract boundaries and point-in-polygon reverse geocoding.

Containment uses even-odd ray casting (the classic pnpoly test, see
W. R. Franklin, "PNPOLY - Point Inclusion in Polygon Test") in planar lon/lat
degree space, which is accurate at tract scale. Points exactly on a ring edge
count as inside, and ties across shared boundaries resolve to the
lexicographically smallest GEOID so assignments are reproducible.

Lookups go through a uniform lat/lon grid: each cell lists every polygon whose
bounding box intersects it, so a cell lookup yields a superset of the true
containers and grid-accelerated assignment agrees exactly with an exhaustive
scan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import GeometryError, ParseError, SchemaError
from .gbfs_client import BikeObservation

DEFAULT_CELL_SIZE = 0.05

GEOID_LENGTH = 11
COUNTY_PREFIX_LENGTH = 5

# A ring is a closed sequence of (lon, lat) pairs: first point equals last.
Ring = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class BoundingBox:
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def contains(self, lon: float, lat: float) -> bool:
        return (
            self.min_lon <= lon <= self.max_lon
            and self.min_lat <= lat <= self.max_lat
        )


@dataclass(frozen=True)
class TractPolygon:
    tract_geoid: str
    county_geoid: str
    rings: tuple[Ring, ...]  # first ring is the outer boundary, rest are holes
    bbox: BoundingBox


class TractIndex:
    """Immutable uniform-grid spatial index over tract polygons."""

    def __init__(self, polygons: list[TractPolygon], cell_size: float = DEFAULT_CELL_SIZE):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.polygons = list(polygons)
        self.cell_size = float(cell_size)
        self._grid: dict[tuple[int, int], list[int]] = {}
        for index, poly in enumerate(self.polygons):
            for cell in self._cells_for_bbox(poly.bbox):
                self._grid.setdefault(cell, []).append(index)

    def _cell_of(self, lon: float, lat: float) -> tuple[int, int]:
        return (
            math.floor(lon / self.cell_size),
            math.floor(lat / self.cell_size),
        )

    def _cells_for_bbox(self, bbox: BoundingBox):
        x0, y0 = self._cell_of(bbox.min_lon, bbox.min_lat)
        x1, y1 = self._cell_of(bbox.max_lon, bbox.max_lat)
        for x in range(x0, x1 + 1):
            for y in range(y0, y1 + 1):
                yield (x, y)

    def candidates(self, lat: float, lon: float) -> list[TractPolygon]:
        """Polygons whose grid cell matches the point; a superset of containers."""
        indices = self._grid.get(self._cell_of(lon, lat), [])
        return [self.polygons[i] for i in indices]

    def geoids(self) -> list[str]:
        """Sorted unique tract GEOIDs covered by the index."""
        return sorted({poly.tract_geoid for poly in self.polygons})


def _build_ring(raw, feature_index: int) -> Ring:
    if not isinstance(raw, list) or len(raw) < 4:
        raise GeometryError(
            f"feature {feature_index}: ring with {len(raw) if isinstance(raw, list) else 0} "
            "points (closed rings need at least 4)"
        )
    points = []
    for pair in raw:
        if not isinstance(pair, (list, tuple)) or len(pair) < 2:
            raise GeometryError(f"feature {feature_index}: malformed coordinate pair")
        points.append((float(pair[0]), float(pair[1])))
    if points[0] != points[-1]:
        raise GeometryError(f"feature {feature_index}: ring is not closed")
    return tuple(points)


def _build_polygon(geoid: str, raw_rings, feature_index: int) -> TractPolygon:
    if not isinstance(raw_rings, list) or not raw_rings:
        raise GeometryError(f"feature {feature_index}: polygon without rings")
    rings = tuple(_build_ring(raw, feature_index) for raw in raw_rings)
    lons = [point[0] for ring in rings for point in ring]
    lats = [point[1] for ring in rings for point in ring]
    return TractPolygon(
        tract_geoid=geoid,
        county_geoid=geoid[:COUNTY_PREFIX_LENGTH],
        rings=rings,
        bbox=BoundingBox(min(lons), min(lats), max(lons), max(lats)),
    )


def load_boundaries(
    path: str | Path, cell_size: float = DEFAULT_CELL_SIZE
) -> TractIndex:
    """Load a GeoJSON FeatureCollection of tract boundaries into a TractIndex.

    Each feature must carry a GEOID property (fallback: geoid) with the
    11-character state+county+tract id. MultiPolygon features are split into
    one TractPolygon per part, all sharing the GEOID. Coordinates are read in
    GeoJSON lon,lat order.
    """
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read boundary file {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"boundary file is not valid JSON at offset {exc.pos}", offset=exc.pos
        ) from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise SchemaError("boundary file is not a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise SchemaError("boundary file has no features array")
    polygons: list[TractPolygon] = []
    for feature_index, feature in enumerate(features):
        properties = feature.get("properties") or {}
        geoid = properties.get("GEOID", properties.get("geoid"))
        if geoid is None:
            raise SchemaError(f"feature {feature_index} has no GEOID property")
        geoid = str(geoid)
        if len(geoid) != GEOID_LENGTH:
            raise SchemaError(
                f"feature {feature_index}: GEOID {geoid!r} is not an "
                f"{GEOID_LENGTH}-character tract id"
            )
        geometry = feature.get("geometry") or {}
        geom_type = geometry.get("type")
        coordinates = geometry.get("coordinates")
        if geom_type == "Polygon":
            parts = [coordinates]
        elif geom_type == "MultiPolygon":
            parts = coordinates if isinstance(coordinates, list) else []
        else:
            raise SchemaError(
                f"feature {feature_index}: unsupported geometry type {geom_type!r}"
            )
        for part in parts:
            polygons.append(_build_polygon(geoid, part, feature_index))
    return TractIndex(polygons, cell_size=cell_size)


def _on_ring_edge(lon: float, lat: float, ring: Ring) -> bool:
    for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
        if min(x1, x2) <= lon <= max(x1, x2) and min(y1, y2) <= lat <= max(y1, y2):
            cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
            if cross == 0.0:
                return True
    return False


def _in_ring(lon: float, lat: float, ring: Ring) -> bool:
    """Even-odd ray cast; the closing point is skipped so each edge counts once."""
    inside = False
    j = len(ring) - 2
    for i in range(len(ring) - 1):
        xi, yi = ring[i]
        xj, yj = ring[j]
        if (yi > lat) != (yj > lat) and lon < (xj - xi) * (lat - yi) / (yj - yi) + xi:
            inside = not inside
        j = i
    return inside


def point_in_polygon(lat: float, lon: float, poly: TractPolygon) -> bool:
    """True iff the point is inside the outer ring and outside every hole.

    Points exactly on any ring edge (outer or hole boundary) count as inside.
    Points outside the bounding box are rejected without ring evaluation.
    """
    if not poly.bbox.contains(lon, lat):
        return False
    outer = poly.rings[0]
    if _on_ring_edge(lon, lat, outer):
        return True
    if not _in_ring(lon, lat, outer):
        return False
    for hole in poly.rings[1:]:
        if _on_ring_edge(lon, lat, hole):
            return True
        if _in_ring(lon, lat, hole):
            return False
    return True


def assign_tract(obs: BikeObservation, index: TractIndex) -> str | None:
    """GEOID of the tract containing the observation, or None if no tract does.

    When a point sits on a boundary shared by several tracts, the
    lexicographically smallest GEOID wins.
    """
    matches = [
        poly.tract_geoid
        for poly in index.candidates(obs.lat, obs.lon)
        if point_in_polygon(obs.lat, obs.lon, poly)
    ]
    if not matches:
        return None
    return min(matches)
