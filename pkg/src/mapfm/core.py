"""Geometry and data-model foundation for vectorized BEV maps.

Frame conventions used throughout the package:
  - Ego frame: x forward, y left, z up (meters). Map elements live on z = 0.
  - BEV grid: row 0 is the front edge (largest x), col 0 is the left edge
    (largest y). Cell (row, col) has its center at
        x = x_max - (row + 0.5) * resolution
        y = y_max - (col + 0.5) * resolution
  - Camera frame: x right, y down, z forward (pinhole looking along +z).
    ``extrinsic`` maps ego-frame homogeneous points into the camera frame;
    ``intrinsic`` maps camera-frame points to pixel coordinates (u, v) with
    u along image width and v along image height.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_EPS = 1e-9


class MapClass(enum.Enum):
    DIVIDER = "divider"
    PED_CROSSING = "ped_crossing"
    BOUNDARY = "boundary"


# Fixed class ordering shared by decoder logits, loss targets and evaluation.
CLASS_ORDER: tuple[MapClass, ...] = (
    MapClass.DIVIDER,
    MapClass.PED_CROSSING,
    MapClass.BOUNDARY,
)
CLASS_INDEX = {c: i for i, c in enumerate(CLASS_ORDER)}
NUM_CLASSES = len(CLASS_ORDER)


class DegeneratePolylineError(ValueError):
    pass


class OpenBoundaryError(ValueError):
    pass


class OutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class BEVGridSpec:
    """Metric <-> cell mapping of the H x W bird's-eye-view grid."""

    rows: int
    cols: int
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    resolution: float

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if abs(self.rows * self.resolution - (self.x_range[1] - self.x_range[0])) > 1e-9:
            raise ValueError("rows * resolution must equal x_max - x_min")
        if abs(self.cols * self.resolution - (self.y_range[1] - self.y_range[0])) > 1e-9:
            raise ValueError("cols * resolution must equal y_max - y_min")

    @property
    def x_extent(self) -> float:
        return self.x_range[1] - self.x_range[0]

    @property
    def y_extent(self) -> float:
        return self.y_range[1] - self.y_range[0]

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise OutOfRangeError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        x = self.x_range[1] - (row + 0.5) * self.resolution
        y = self.y_range[1] - (col + 0.5) * self.resolution
        return (x, y)

    def metric_to_cell(self, point: Sequence[float]) -> tuple[int, int]:
        """Floor-based inverse of :meth:`cell_center`; points exactly on the
        low edge fall into the last row/col."""
        x, y = float(point[0]), float(point[1])
        if not (self.x_range[0] <= x <= self.x_range[1]) or not (self.y_range[0] <= y <= self.y_range[1]):
            raise OutOfRangeError(f"point ({x}, {y}) outside BEV range")
        row = min(int(math.floor((self.x_range[1] - x) / self.resolution)), self.rows - 1)
        col = min(int(math.floor((self.y_range[1] - y) / self.resolution)), self.cols - 1)
        return (row, col)

    def cell_centers(self) -> np.ndarray:
        """All cell centers, shape (rows, cols, 2)."""
        xs = self.x_range[1] - (np.arange(self.rows, dtype=np.float64) + 0.5) * self.resolution
        ys = self.y_range[1] - (np.arange(self.cols, dtype=np.float64) + 0.5) * self.resolution
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "resolution": self.resolution,
        }

    @staticmethod
    def from_dict(d: dict) -> "BEVGridSpec":
        return BEVGridSpec(
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            x_range=(float(d["x_range"][0]), float(d["x_range"][1])),
            y_range=(float(d["y_range"][0]), float(d["y_range"][1])),
            resolution=float(d["resolution"]),
        )


@dataclass
class MapElement:
    """One class-labeled ordered polyline in ego-metric coordinates."""

    class_label: MapClass
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"polyline needs at least 2 2D points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline points must be finite")
        # repeated consecutive points are allowed: regressed polylines can
        # legitimately collapse edges, and the geometry ops tolerate them
        self.points = pts

    def in_range(self, grid: BEVGridSpec, margin: float = 0.0) -> bool:
        x, y = self.points[:, 0], self.points[:, 1]
        return bool(
            np.all(x >= grid.x_range[0] - margin)
            and np.all(x <= grid.x_range[1] + margin)
            and np.all(y >= grid.y_range[0] - margin)
            and np.all(y <= grid.y_range[1] + margin)
        )


@dataclass
class VectorMap:
    elements: list[MapElement] = field(default_factory=list)

    def by_class(self, cls: MapClass) -> list[MapElement]:
        return [e for e in self.elements if e.class_label is cls]


@dataclass
class ScoredMap:
    """Confidence-scored predicted map, sorted by descending confidence."""

    elements: list[tuple[MapElement, float]] = field(default_factory=list)

    def __post_init__(self):
        scores = [s for _, s in self.elements]
        if any(not math.isfinite(s) for s in scores):
            raise ValueError("non-finite confidence score")
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise ValueError("elements must be sorted by descending confidence")


def make_scored_map(pairs: Sequence[tuple[MapElement, float]]) -> ScoredMap:
    """Stable-sort (element, score) pairs by descending score."""
    order = sorted(range(len(pairs)), key=lambda i: -pairs[i][1])
    return ScoredMap([pairs[i] for i in order])


@dataclass
class BEVMaskSet:
    """The two road-surface masks (drivable area, pedestrian crossings)."""

    drivable: np.ndarray
    ped_crossing: np.ndarray

    K_SEG = 2

    def __post_init__(self):
        d = np.asarray(self.drivable, dtype=np.uint8)
        p = np.asarray(self.ped_crossing, dtype=np.uint8)
        if d.shape != p.shape or d.ndim != 2:
            raise ValueError("mask shapes must match and be 2D")
        for m in (d, p):
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("masks must be binary")
        self.drivable = d
        self.ped_crossing = p


@dataclass
class CameraParams:
    """Pinhole camera: 3x3 intrinsic, 4x4 ego-to-camera extrinsic."""

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    image_size: tuple[int, int]  # (height, width) in pixels
    z_near: float = 0.05

    def __post_init__(self):
        K = np.asarray(self.intrinsic, dtype=np.float64)
        E = np.asarray(self.extrinsic, dtype=np.float64)
        if K.shape != (3, 3) or abs(K[2, 2] - 1.0) > 1e-12:
            raise ValueError("intrinsic must be 3x3 with [2][2] == 1")
        if E.shape != (4, 4) or not np.allclose(E[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("extrinsic must be 4x4 rigid with bottom row (0,0,0,1)")
        R = E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("extrinsic rotation block not orthonormal")
        self.intrinsic = K
        self.extrinsic = E

    def to_dict(self) -> dict:
        return {
            "intrinsic": self.intrinsic.tolist(),
            "extrinsic": self.extrinsic.tolist(),
            "image_size": list(self.image_size),
            "z_near": self.z_near,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraParams":
        return CameraParams(
            intrinsic=np.array(d["intrinsic"], dtype=np.float64),
            extrinsic=np.array(d["extrinsic"], dtype=np.float64),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
            z_near=float(d["z_near"]),
        )


# ---------------------------------------------------------------------------
# polyline operations


def polyline_length(points: np.ndarray, closed: bool = False) -> float:
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg.sum())
    if closed:
        total += float(np.linalg.norm(pts[0] - pts[-1]))
    return total


def resample_polyline(points: np.ndarray, n: int, closed: bool = False) -> np.ndarray:
    """Resample to exactly ``n`` points at equal arc-length spacing.

    Open polylines keep both endpoints; closed polylines are sampled around
    the loop with the first vertex preserved and no duplicated closure point.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise DegeneratePolylineError("degenerate polyline")
    if closed and np.linalg.norm(pts[0] - pts[-1]) > _EPS:
        pts = np.vstack([pts, pts[0]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= _EPS:
        raise DegeneratePolylineError("degenerate polyline")
    if closed:
        targets = np.arange(n, dtype=np.float64) * (total / n)
    else:
        targets = np.linspace(0.0, total, n)
    x = np.interp(targets, arc, pts[:, 0])
    y = np.interp(targets, arc, pts[:, 1])
    out = np.stack([x, y], axis=1)
    if not closed:
        out[0] = pts[0]
        out[-1] = pts[-1]
    return out


def chamfer_distance(
    a: np.ndarray,
    b: np.ndarray,
    n_interp: int,
    closed_a: bool = False,
    closed_b: bool = False,
) -> float:
    """Symmetric Chamfer distance between two polylines, both resampled to
    ``n_interp`` points first."""
    ra = resample_polyline(a, n_interp, closed=closed_a)
    rb = resample_polyline(b, n_interp, closed=closed_b)
    d = np.linalg.norm(ra[:, None, :] - rb[None, :, :], axis=2)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def points_in_polygon(points: np.ndarray, rings: Sequence[np.ndarray]) -> np.ndarray:
    """Even-odd ray casting over one or more rings (implicitly closed).

    Returns a boolean array, one entry per query point.
    """
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    for ring in rings:
        r = np.asarray(ring, dtype=np.float64)
        nv = len(r)
        for i in range(nv):
            x0, y0 = r[i]
            x1, y1 = r[(i + 1) % nv]
            if y0 == y1:
                continue
            crosses = ((y0 > y) != (y1 > y)) & (x < (x1 - x0) * (y - y0) / (y1 - y0) + x0)
            inside ^= crosses
    return inside


def _segments_of(element: MapElement) -> np.ndarray:
    """Edge list (S, 2, 2) of a polyline, including the closure edge."""
    pts = element.points
    segs = np.stack([pts[:-1], pts[1:]], axis=1)
    if element.closed and np.linalg.norm(pts[-1] - pts[0]) > _EPS:
        segs = np.concatenate([segs, np.stack([pts[-1:], pts[:1]], axis=1)], axis=0)
    return segs


def _dist_points_to_segments(points: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Min distance from each point to any segment. points (P,2), segs (S,2,2)."""
    p = points[:, None, :]
    a = segs[None, :, 0, :]
    b = segs[None, :, 1, :]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), _EPS**2)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1).min(axis=1)


def _chain_boundary_ring(elements: list[MapElement]) -> list[np.ndarray]:
    """Assemble fill rings from boundary elements.

    Closed elements each contribute their own ring; open ones are chained
    end-to-end by nearest endpoints into a single implicitly closed ring.
    """
    rings = [e.points for e in elements if e.closed]
    open_elems = [e.points for e in elements if not e.closed]
    if open_elems:
        chain = [open_elems[0]]
        end = open_elems[0][-1]
        remaining = list(open_elems[1:])
        while remaining:
            dists = []
            for pts in remaining:
                dists.append(min(np.linalg.norm(end - pts[0]), np.linalg.norm(end - pts[-1])))
            k = int(np.argmin(dists))
            nxt = remaining.pop(k)
            if np.linalg.norm(end - nxt[-1]) < np.linalg.norm(end - nxt[0]):
                nxt = nxt[::-1]
            chain.append(nxt)
            end = nxt[-1]
        ring = np.vstack(chain)
        keep = np.ones(len(ring), dtype=bool)
        keep[1:] = np.linalg.norm(np.diff(ring, axis=0), axis=1) > _EPS
        rings.append(ring[keep])
    for ring in rings:
        if len(ring) < 3 or abs(_ring_area(ring)) < _EPS:
            raise OpenBoundaryError("open drivable boundary")
    return rings


def _ring_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rasterize_map(
    vmap: VectorMap,
    grid: BEVGridSpec,
    line_thickness: float,
) -> tuple[BEVMaskSet, dict[MapClass, np.ndarray]]:
    """Rasterize a vector map onto the BEV grid.

    Returns the road-surface mask set (drivable area filled from boundary
    elements, pedestrian area filled from ped-crossing polygons) and one
    line mask per class marking cells whose center lies within
    ``line_thickness / 2`` of a polyline of that class.
    """
    if line_thickness <= 0:
        raise ValueError("line_thickness must be positive")
    shape = (grid.rows, grid.cols)
    centers = grid.cell_centers().reshape(-1, 2)

    line_masks: dict[MapClass, np.ndarray] = {}
    for cls in CLASS_ORDER:
        elems = vmap.by_class(cls)
        if not elems:
            line_masks[cls] = np.zeros(shape, dtype=np.uint8)
            continue
        segs = np.concatenate([_segments_of(e) for e in elems], axis=0)
        near = _dist_points_to_segments(centers, segs) <= line_thickness / 2.0
        line_masks[cls] = near.reshape(shape).astype(np.uint8)

    boundary_elems = vmap.by_class(MapClass.BOUNDARY)
    if boundary_elems:
        rings = _chain_boundary_ring(boundary_elems)
        drivable = points_in_polygon(centers, rings).reshape(shape).astype(np.uint8)
    else:
        drivable = np.zeros(shape, dtype=np.uint8)

    ped = np.zeros(shape, dtype=bool)
    for e in vmap.by_class(MapClass.PED_CROSSING):
        ped |= points_in_polygon(centers, [e.points]).reshape(shape)

    return BEVMaskSet(drivable=drivable, ped_crossing=ped.astype(np.uint8)), line_masks


# ---------------------------------------------------------------------------
# camera projection


def project_points(points: np.ndarray, cam: CameraParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project ego-frame 3D points into a camera.

    Returns (pixels (K,2), depths (K,), valid (K,)). A point is valid iff
    its camera depth exceeds ``z_near`` and the pixel lies inside the image.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    homo = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    cam_pts = (cam.extrinsic @ homo.T).T[:, :3]
    proj = (cam.intrinsic @ cam_pts.T).T
    z = proj[:, 2]
    safe_z = np.where(np.abs(z) > _EPS, z, _EPS)
    pix = proj[:, :2] / safe_z[:, None]
    h, w = cam.image_size
    valid = (z > cam.z_near) & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
    return pix, z, valid


def project_to_camera(point: Sequence[float], cam: CameraParams) -> tuple[np.ndarray, bool]:
    pix, _, valid = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), cam)
    return pix[0], bool(valid[0])


# ---------------------------------------------------------------------------
# clipping


def clip_polyline_to_box(
    points: np.ndarray,
    x_range: tuple[float, float],
    y_range: tuple[float, float],
) -> list[np.ndarray]:
    """Clip a polyline to an axis-aligned box; returns the surviving pieces."""
    pts = np.asarray(points, dtype=np.float64)
    pieces: list[list[np.ndarray]] = []
    cur: list[np.ndarray] = []

    def flush():
        nonlocal cur
        if len(cur) >= 2:
            pieces.append(cur)
        cur = []

    for i in range(len(pts) - 1):
        p, q = pts[i], pts[i + 1]
        seg = _clip_segment(p, q, x_range, y_range)
        if seg is None:
            flush()
            continue
        a, b = seg
        if cur and np.linalg.norm(cur[-1] - a) > _EPS:
            flush()
        if not cur:
            cur.append(a)
        if np.linalg.norm(b - cur[-1]) > _EPS:
            cur.append(b)
    flush()
    return [np.asarray(p) for p in pieces]


def _clip_segment(p, q, x_range, y_range):
    """Liang-Barsky segment/box clip; None if fully outside."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for coord, (lo, hi) in ((0, x_range), (1, y_range)):
        if d[coord] == 0.0:
            if p[coord] < lo or p[coord] > hi:
                return None
            continue
        ta = (lo - p[coord]) / d[coord]
        tb = (hi - p[coord]) / d[coord]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    return p + t0 * d, p + t1 * d


# ---------------------------------------------------------------------------
# serialization (JSON maps, PGM/PPM images)


def map_to_dict(vmap: VectorMap | ScoredMap) -> dict:
    elements = []
    if isinstance(vmap, ScoredMap):
        for elem, score in vmap.elements:
            elements.append(
                {
                    "class": elem.class_label.value,
                    "closed": elem.closed,
                    "score": float(score),
                    "points": elem.points.tolist(),
                }
            )
    else:
        for elem in vmap.elements:
            elements.append(
                {
                    "class": elem.class_label.value,
                    "closed": elem.closed,
                    "points": elem.points.tolist(),
                }
            )
    return {"elements": elements}


def map_from_dict(d: dict) -> VectorMap | ScoredMap:
    """Parse the JSON map schema; a ScoredMap when any element carries a score."""
    elems = []
    scored = any("score" in e for e in d["elements"])
    for e in d["elements"]:
        elem = MapElement(
            class_label=MapClass(e["class"]),
            points=np.array(e["points"], dtype=np.float64),
            closed=bool(e["closed"]),
        )
        if scored:
            elems.append((elem, float(e.get("score", 0.0))))
        else:
            elems.append(elem)
    if scored:
        return make_scored_map(elems)
    return VectorMap(elems)


def save_map_json(vmap: VectorMap | ScoredMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(map_to_dict(vmap)), encoding="utf-8")


def load_map_json(path: str | Path) -> VectorMap | ScoredMap:
    return map_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Binary P5, 8-bit: 0 = background, 255 = foreground, rows = BEV rows."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("PGM mask must be 2D")
    data = np.where(m > 0, 255, 0).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    magic, dims, maxval, payload = _parse_netpbm(Path(path).read_bytes())
    if magic != b"P5":
        raise ValueError(f"not a binary PGM file: {path}")
    w, h = dims
    data = np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w)
    return (data >= 128).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6, 8-bit RGB. Accepts float in [0,1] or uint8, shape (h, w, 3)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM image must be (h, w, 3)")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Returns uint8 RGB, shape (h, w, 3)."""
    magic, dims, maxval, payload = _parse_netpbm(Path(path).read_bytes())
    if magic != b"P6":
        raise ValueError(f"not a binary PPM file: {path}")
    w, h = dims
    return np.frombuffer(payload[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def _parse_netpbm(raw: bytes) -> tuple[bytes, tuple[int, int], int, bytes]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise ValueError("truncated netpbm header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    i += 1  # single whitespace after maxval
    magic = tokens[0]
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported netpbm maxval {maxval}")
    return magic, (w, h), maxval, raw[i:]
