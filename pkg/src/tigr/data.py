"""Trajectory and road-network data model, ingestion, and preprocessing.

Trajectories exist in three forms: raw lon/lat point sequences, grid-cell
token sequences, and road-segment token sequences. Grid discretization uses
an equirectangular meter projection about the bounding-box center (adequate
at city scale, keeps the artifact dependency-free).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

EARTH_M_PER_DEG = 111194.9  # pi * 6371000 / 180

ROAD_CLASSES = ("residential", "secondary", "primary", "other")


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class RawTrajectory:
    """GPS point sequence: points[i] = (lon, lat, unix_seconds)."""

    id: str
    points: np.ndarray  # (n, 3) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.points[:, 2]


@dataclass
class GridSpec:
    """Regular M x N partition of a lon/lat bounding box into square cells.

    Cell (m, n), 1-based, maps to flat id (m-1)*N + (n-1). Rows (m) run
    along latitude, columns (n) along longitude.
    """

    min_x: float
    min_y: float
    max_x: float
    max_y: float
    cell_size_m: float
    M: int = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        if self.max_x <= self.min_x or self.max_y <= self.min_y:
            raise ConfigError("grid bounding box is empty")
        if self.cell_size_m <= 0:
            raise ConfigError("cell_size_m must be positive")
        self.N = max(1, math.ceil(self.width_m / self.cell_size_m))
        self.M = max(1, math.ceil(self.height_m / self.cell_size_m))

    @property
    def center_lat(self) -> float:
        return 0.5 * (self.min_y + self.max_y)

    @property
    def m_per_deg_lon(self) -> float:
        return EARTH_M_PER_DEG * math.cos(math.radians(self.center_lat))

    @property
    def m_per_deg_lat(self) -> float:
        return EARTH_M_PER_DEG

    @property
    def width_m(self) -> float:
        return (self.max_x - self.min_x) * self.m_per_deg_lon

    @property
    def height_m(self) -> float:
        return (self.max_y - self.min_y) * self.m_per_deg_lat

    @property
    def n_cells(self) -> int:
        return self.M * self.N

    def contains(self, lon: float, lat: float) -> bool:
        return self.min_x <= lon <= self.max_x and self.min_y <= lat <= self.max_y

    def cell_of(self, lon: float, lat: float) -> int:
        """Flat cell id of an in-box point (points on the max edge clamp in)."""
        xm = (lon - self.min_x) * self.m_per_deg_lon
        ym = (lat - self.min_y) * self.m_per_deg_lat
        n = min(self.N - 1, int(xm // self.cell_size_m))
        m = min(self.M - 1, int(ym // self.cell_size_m))
        return m * self.N + n

    def to_lonlat(self, x_m: float, y_m: float) -> tuple[float, float]:
        """Inverse projection: meter offsets from the box min corner."""
        return (self.min_x + x_m / self.m_per_deg_lon,
                self.min_y + y_m / self.m_per_deg_lat)


@dataclass
class GridTrajectory:
    """Grid-cell token sequence; consecutive duplicate cells collapsed."""

    id: str
    cells: np.ndarray  # (n,) int64
    times: np.ndarray  # (n,) float64

    def __len__(self) -> int:
        return self.cells.shape[0]


@dataclass
class RoadNetwork:
    """Directed road-segment graph with a per-segment feature matrix.

    Feature columns: [length_m/1000, speed_kmh/100, one-hot class...];
    lengths and speeds are rescaled so columns share magnitude.
    """

    adjacency: list[np.ndarray]  # successors per segment, sorted
    features: np.ndarray  # (n, f) float32
    geometry: list[np.ndarray]  # (k, 2) lon/lat polyline per segment
    lengths_m: np.ndarray  # (n,) float64
    speed_limits_kmh: np.ndarray  # (n,) float64
    feature_names: tuple[str, ...]

    @property
    def n_segments(self) -> int:
        return len(self.adjacency)


@dataclass
class RoadTrajectory:
    """Road-segment token sequence: tokens[i] = (segment_id, entry time)."""

    id: str
    segments: np.ndarray  # (n,) int64
    times: np.ndarray  # (n,) float64

    def __len__(self) -> int:
        return self.segments.shape[0]


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


# ---------------------------------------------------------------------------
# file ingestion
# ---------------------------------------------------------------------------


def _require_header(header: list[str], expected: list[str], path: str) -> None:
    if header != expected:
        raise ParseError(f"{path}:1: expected header {','.join(expected)!r}, got {','.join(header)!r}")


def load_raw_csv(path) -> tuple[list[RawTrajectory], list[str]]:
    """Read raw trajectories (traj_id,point_idx,lon,lat,timestamp).

    Structural problems (bad header, non-numeric fields, duplicate point
    indices) raise ParseError with a line number; per-trajectory issues
    (too short, non-increasing timestamps) drop the trajectory into the
    returned report.
    """
    rows: dict[str, dict[int, tuple[float, float, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}:1: empty file")
        _require_header(header, ["traj_id", "point_idx", "lon", "lat", "timestamp"], str(path))
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            tid = row[0]
            try:
                idx = int(row[1])
                lon, lat, ts = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if tid not in rows:
                rows[tid] = {}
                order.append(tid)
            bucket = rows[tid]
            if idx in bucket:
                raise ParseError(f"{path}:{lineno}: duplicate (traj_id, point_idx) = ({tid}, {idx})")
            bucket[idx] = (lon, lat, ts)
    trajs: list[RawTrajectory] = []
    report: list[str] = []
    for tid in order:
        pts = [rows[tid][i] for i in sorted(rows[tid])]
        arr = np.array(pts, dtype=np.float64)
        if arr.shape[0] < 2:
            report.append(f"{tid}: fewer than 2 points")
            continue
        if not np.all(np.diff(arr[:, 2]) > 0):
            report.append(f"{tid}: timestamps not strictly increasing")
            continue
        trajs.append(RawTrajectory(tid, arr))
    return trajs, report


def parse_wkt_linestring(text: str) -> np.ndarray:
    body = text.strip()
    if not body.upper().startswith("LINESTRING"):
        raise ParseError(f"not a WKT LINESTRING: {text[:40]!r}")
    inner = body[body.index("(") + 1:body.rindex(")")]
    pts = []
    for pair in inner.split(","):
        x, y = pair.split()
        pts.append((float(x), float(y)))
    return np.array(pts, dtype=np.float64)


def wkt_linestring(points: np.ndarray) -> str:
    coords = ", ".join(f"{x:.7f} {y:.7f}" for x, y in points)
    return f"LINESTRING ({coords})"


def load_road_network(segments_path, edges_path) -> tuple[RoadNetwork, list[str]]:
    """Read segment and edge CSVs into a validated RoadNetwork.

    Segment ids must be dense 0..n-1. Unknown highway classes map to the
    'other' one-hot column with a warning in the returned report; dangling
    edge endpoints raise.
    """
    report: list[str] = []
    seg_rows: dict[int, tuple[float, float, str, np.ndarray]] = {}
    with open(segments_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{segments_path}:1: empty file")
        _require_header(header, ["segment_id", "length_m", "speed_kmh", "class", "wkt_polyline"],
                        str(segments_path))
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = int(row[0])
                length, speed = float(row[1]), float(row[2])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{segments_path}:{lineno}: bad segment row ({exc})") from None
            if sid in seg_rows:
                raise ParseError(f"{segments_path}:{lineno}: duplicate segment_id {sid}")
            cls = row[3]
            if cls not in ROAD_CLASSES[:-1]:
                if cls != "other":
                    report.append(f"segment {sid}: unknown class {cls!r} mapped to 'other'")
                cls = "other"
            seg_rows[sid] = (length, speed, cls, parse_wkt_linestring(row[4]))
    n = len(seg_rows)
    if sorted(seg_rows) != list(range(n)):
        raise ParseError(f"{segments_path}: segment ids must be dense 0..{n - 1}")

    succ: list[list[int]] = [[] for _ in range(n)]
    with open(edges_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{edges_path}:1: empty file")
        _require_header(header, ["from_segment", "to_segment"], str(edges_path))
        for lineno, row in enumerate(reader, start=2):
            try:
                a, b = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{edges_path}:{lineno}: bad edge row ({exc})") from None
            if not (0 <= a < n and 0 <= b < n):
                raise ParseError(f"{edges_path}:{lineno}: edge {a}->{b} references unknown segment")
            succ[a].append(b)

    lengths = np.array([seg_rows[i][0] for i in range(n)])
    speeds = np.array([seg_rows[i][1] for i in range(n)])
    classes = [seg_rows[i][2] for i in range(n)]
    onehot = np.zeros((n, len(ROAD_CLASSES)), dtype=np.float32)
    for i, c in enumerate(classes):
        onehot[i, ROAD_CLASSES.index(c)] = 1.0
    features = np.column_stack([
        (lengths / 1000.0).astype(np.float32),
        (speeds / 100.0).astype(np.float32),
        onehot,
    ])
    if not np.all(np.isfinite(features)):
        raise ParseError(f"{segments_path}: non-finite feature values")
    net = RoadNetwork(
        adjacency=[np.array(sorted(set(s)), dtype=np.int64) for s in succ],
        features=features,
        geometry=[seg_rows[i][3] for i in range(n)],
        lengths_m=lengths,
        speed_limits_kmh=speeds,
        feature_names=("length_km", "speed_limit_100kmh") + tuple(f"class_{c}" for c in ROAD_CLASSES),
    )
    return net, report


def load_matched_csv(path, net: RoadNetwork) -> tuple[list[RoadTrajectory], list[str]]:
    """Read map-matched trajectories (traj_id,point_idx,segment_id,timestamp).

    Trajectories violating road-network adjacency or time ordering are
    dropped and reported.
    """
    rows: dict[str, dict[int, tuple[int, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}:1: empty file")
        _require_header(header, ["traj_id", "point_idx", "segment_id", "timestamp"], str(path))
        for lineno, row in enumerate(reader, start=2):
            try:
                tid, idx, sid, ts = row[0], int(row[1]), int(row[2]), float(row[3])
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: bad row ({exc})") from None
            if not 0 <= sid < net.n_segments:
                raise ParseError(f"{path}:{lineno}: unknown segment id {sid}")
            if tid not in rows:
                rows[tid] = {}
                order.append(tid)
            bucket = rows[tid]
            if idx in bucket:
                raise ParseError(f"{path}:{lineno}: duplicate (traj_id, point_idx) = ({tid}, {idx})")
            bucket[idx] = (sid, ts)
    trajs: list[RoadTrajectory] = []
    report: list[str] = []
    for tid in order:
        pairs = [rows[tid][i] for i in sorted(rows[tid])]
        segs = np.array([p[0] for p in pairs], dtype=np.int64)
        times = np.array([p[1] for p in pairs], dtype=np.float64)
        if segs.shape[0] < 2:
            report.append(f"{tid}: fewer than 2 tokens")
            continue
        if not np.all(np.diff(times) >= 0):
            report.append(f"{tid}: timestamps decrease")
            continue
        ok = True
        for a, b in zip(segs[:-1], segs[1:]):
            if int(b) not in net.adjacency[int(a)]:
                report.append(f"{tid}: segments {a}->{b} not adjacent")
                ok = False
                break
        if ok:
            trajs.append(RoadTrajectory(tid, segs, times))
    return trajs, report


# ---------------------------------------------------------------------------
# discretization / filtering / splitting
# ---------------------------------------------------------------------------


def map_to_grid(traj: RawTrajectory, spec: GridSpec) -> GridTrajectory | None:
    """Map in-box points to cell ids, dropping out-of-box points and
    collapsing consecutive duplicate cells (first timestamp kept).
    Returns None when no point falls inside the box."""
    cells: list[int] = []
    times: list[float] = []
    for lon, lat, t in traj.points:
        if not spec.contains(lon, lat):
            continue
        c = spec.cell_of(lon, lat)
        if cells and cells[-1] == c:
            continue
        cells.append(c)
        times.append(t)
    if not cells:
        return None
    return GridTrajectory(traj.id, np.array(cells, dtype=np.int64), np.array(times, dtype=np.float64))


def filter_trajectories(trajs: list[RawTrajectory], min_len: int = 20, max_len: int = 200,
                        spec: GridSpec | None = None) -> tuple[list[RawTrajectory], Counter]:
    """Keep trajectories whose in-box point count lies in [min_len, max_len].

    Out-of-box points are pruned first; retained trajectories are the pruned
    copies. The report counts rejections by reason plus pruned points.
    """
    report: Counter = Counter()
    retained: list[RawTrajectory] = []
    for traj in trajs:
        pts = traj.points
        if spec is not None:
            inside = np.array([spec.contains(x, y) for x, y, _ in pts])
            pruned = int((~inside).sum())
            if pruned:
                report["points_pruned"] += pruned
                pts = pts[inside]
        n = pts.shape[0]
        if n < min_len:
            report["too_short"] += 1
        elif n > max_len:
            report["too_long"] += 1
        else:
            report["retained"] += 1
            retained.append(RawTrajectory(traj.id, pts))
    return retained, report


def split_dataset(ids: list[str], fractions: tuple[float, float, float], rng) -> DatasetSplit:
    """Deterministic shuffled split into disjoint covering train/val/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions)!r}, expected 1")
    n = len(ids)
    order = [ids[i] for i in rng.permutation(n)]
    base = [int(math.floor(n * f)) for f in fractions]
    remainders = [n * f - b for f, b in zip(fractions, base)]
    for _ in range(n - sum(base)):
        i = int(np.argmax(remainders))
        base[i] += 1
        remainders[i] = -1.0
    a, b = base[0], base[0] + base[1]
    return DatasetSplit(train=order[:a], validation=order[a:b], test=order[b:])
