"""Procedural synthetic road scenes with multi-camera rendering.

A scene is a seeded random road layout: a straight or circular-arc
centerline, lane boundaries and dividers at fixed lateral offsets, and
up to a few pedestrian crossings perpendicular to the road. Rendering
projects the map into every camera, stamps perspective lane masks, and
paints the stamped pixels with per-class colors over a textured noise
background so the images carry enough signal to learn from scratch.

Ego frame: x forward, y left, z up; map elements live on the ground
plane z = 0.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    BEVGridSpec,
    BEVMaskSet,
    CameraParams,
    MapClass,
    MapElement,
    VectorMap,
    clip_polyline_to_box,
    load_map_json,
    map_to_dict,
    polyline_length,
    rasterize_map,
    read_pgm,
    read_ppm,
    resample_polyline,
    save_map_json,
    write_pgm,
    write_ppm,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1

# image paint colors per class, RGB in [0, 1]
CLASS_COLORS = {
    MapClass.DIVIDER: (1.0, 0.8, 0.1),
    MapClass.PED_CROSSING: (0.9, 0.15, 0.15),
    MapClass.BOUNDARY: (0.15, 0.4, 1.0),
}

_MAX_CURVATURE = 0.05

_DEFAULT_YAWS = {
    1: (0.0,),
    2: (30.0, -30.0),
    6: (0.0, 55.0, -55.0, 110.0, -110.0, 180.0),
}


class BlindRigError(RuntimeError):
    """No map element is visible in any camera."""


def make_camera_rig(
    num_cameras: int = 2,
    image_size: tuple[int, int] = (64, 128),
    focal_px: float = 64.0,
    cam_height: float = 1.6,
    yaw_degrees: tuple[float, ...] | None = None,
) -> tuple[CameraParams, ...]:
    """Build a ring of cameras at the ego origin, yawed about +z.

    Positive yaw turns the optical axis to the left. The default
    two-camera rig points front-left/front-right with a 60 degree
    separation so their 90 degree fields of view overlap ahead.
    """
    if yaw_degrees is None:
        if num_cameras in _DEFAULT_YAWS:
            yaw_degrees = _DEFAULT_YAWS[num_cameras]
        else:
            yaw_degrees = tuple(i * 360.0 / num_cameras for i in range(num_cameras))
    if len(yaw_degrees) != num_cameras:
        raise ValueError("yaw_degrees length must match num_cameras")
    h, w = image_size
    intrinsic = np.array(
        [[focal_px, 0.0, w / 2.0], [0.0, focal_px, h / 2.0], [0.0, 0.0, 1.0]]
    )
    pos = np.array([0.0, 0.0, cam_height])
    rig = []
    for yaw in yaw_degrees:
        psi = math.radians(yaw)
        # rows are the camera axes (right, down, forward) in ego coords
        rot = np.array(
            [
                [math.sin(psi), -math.cos(psi), 0.0],
                [0.0, 0.0, -1.0],
                [math.cos(psi), math.sin(psi), 0.0],
            ]
        )
        extrinsic = np.eye(4)
        extrinsic[:3, :3] = rot
        extrinsic[:3, 3] = -rot @ pos
        rig.append(CameraParams(intrinsic=intrinsic, extrinsic=extrinsic, image_size=image_size))
    return tuple(rig)


@dataclass(frozen=True)
class SceneGenConfig:
    """Sampling ranges for scene layout plus the fixed grid and rig."""

    grid: BEVGridSpec
    rig: tuple[CameraParams, ...]
    num_lanes_choices: tuple[int, ...] = (2, 3)
    lane_width_range: tuple[float, float] = (3.2, 4.4)
    lateral_offset_range: tuple[float, float] = (-2.0, 2.0)
    curvature_range: tuple[float, float] = (-0.02, 0.02)
    straight_fraction: float = 0.25
    max_crossings: int = 3
    crossing_length: float = 3.0
    crossing_gap: float = 2.0
    s_max: float = 34.0
    fit_margin: float = 1.0

    def __post_init__(self):
        if not self.rig:
            raise ValueError("rig must contain at least one camera")
        if not self.num_lanes_choices or min(self.num_lanes_choices) < 1:
            raise ValueError("num_lanes_choices must be positive")
        for lo, hi in (self.lane_width_range, self.lateral_offset_range, self.curvature_range):
            if lo > hi:
                raise ValueError("empty sampling range")
        if max(abs(self.curvature_range[0]), abs(self.curvature_range[1])) > _MAX_CURVATURE:
            raise ValueError(f"curvature range exceeds +/-{_MAX_CURVATURE}")
        if not 0.0 <= self.straight_fraction <= 1.0:
            raise ValueError("straight_fraction must be in [0, 1]")
        if self.max_crossings < 0 or self.crossing_length <= 0 or self.s_max <= 0:
            raise ValueError("crossing/extent settings must be positive")
        y_lo, y_hi = self.grid.y_range
        widest = max(self.num_lanes_choices) * self.lane_width_range[1] / 2.0
        offset = max(abs(self.lateral_offset_range[0]), abs(self.lateral_offset_range[1]))
        if widest + offset + self.fit_margin > (y_hi - y_lo) / 2.0:
            raise ValueError("road wider than BEV range")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = self.grid.to_dict()
        d["rig"] = [cam.to_dict() for cam in self.rig]
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        kw = dict(d)
        kw["grid"] = BEVGridSpec.from_dict(kw["grid"])
        kw["rig"] = tuple(CameraParams.from_dict(c) for c in kw["rig"])
        for key in (
            "num_lanes_choices",
            "lane_width_range",
            "lateral_offset_range",
            "curvature_range",
        ):
            kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class RenderConfig:
    """Rasterization and image-painting settings."""

    sample_step: float = 0.5  # m between polyline vertices in the gt map
    stamp_step: float = 0.1  # m between projected stamp centers
    line_thickness: float = 1.0  # m, BEV line-mask half-band is half this
    stamp_radius_px: float = 1.8
    noise_base: float = 0.35
    noise_amplitude: float = 0.12
    noise_cells: int = 8

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        return cls(**d)


def default_scene_config(
    grid: BEVGridSpec | None = None, num_cameras: int = 2
) -> SceneGenConfig:
    if grid is None:
        grid = BEVGridSpec(60, 30, (-30.0, 30.0), (-15.0, 15.0), 1.0)
    return SceneGenConfig(grid=grid, rig=make_camera_rig(num_cameras))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Deterministic description of one road layout."""

    seed: int
    curvature: float  # 1/m, 0 means straight
    lateral_offset: float  # centerline y at s = 0
    road_half_width: float
    num_lanes: int
    crossing_slots: tuple[float, ...]  # longitudinal centers, meters
    crossing_length: float
    s_max: float
    rig: tuple[CameraParams, ...]

    def __post_init__(self):
        if abs(self.curvature) > _MAX_CURVATURE:
            raise ValueError(f"curvature outside +/-{_MAX_CURVATURE}")
        if self.num_lanes < 1 or self.road_half_width <= 0:
            raise ValueError("need at least one lane of positive width")
        slots = self.crossing_slots
        for i in range(len(slots)):
            for j in range(i + 1, len(slots)):
                if abs(slots[i] - slots[j]) < self.crossing_length:
                    raise ValueError("overlapping crossings")

    def offset_point(self, s: float, d: float) -> np.ndarray:
        """Point at arc length s on the curve offset d to the left."""
        return _offset_point(self.curvature, self.lateral_offset, s, d)

    def offset_polyline(self, d: float, step: float) -> np.ndarray:
        n = max(2, int(round(2.0 * self.s_max / step)) + 1)
        svals = np.linspace(-self.s_max, self.s_max, n)
        return _offset_points(self.curvature, self.lateral_offset, svals, d)

    def divider_offsets(self) -> list[float]:
        lane = 2.0 * self.road_half_width / self.num_lanes
        return [-self.road_half_width + i * lane for i in range(1, self.num_lanes)]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "curvature": self.curvature,
            "lateral_offset": self.lateral_offset,
            "road_half_width": self.road_half_width,
            "num_lanes": self.num_lanes,
            "crossing_slots": list(self.crossing_slots),
            "crossing_length": self.crossing_length,
            "s_max": self.s_max,
            "rig": [cam.to_dict() for cam in self.rig],
        }


def _offset_points(kappa: float, y0: float, svals: np.ndarray, d: float) -> np.ndarray:
    theta = kappa * np.asarray(svals, dtype=np.float64)
    if abs(kappa) < 1e-12:
        x = np.asarray(svals, dtype=np.float64)
        y = np.full_like(x, y0 + d)
    else:
        x = np.sin(theta) / kappa - d * np.sin(theta)
        y = y0 + (1.0 - np.cos(theta)) / kappa + d * np.cos(theta)
    return np.column_stack([x, y])


def _offset_point(kappa: float, y0: float, s: float, d: float) -> np.ndarray:
    return _offset_points(kappa, y0, np.array([s]), d)[0]


def _crossing_corners(kappa: float, y0: float, w: float, s0: float, length: float) -> np.ndarray:
    half = length / 2.0
    return np.array(
        [
            _offset_point(kappa, y0, s0 - half, w),
            _offset_point(kappa, y0, s0 + half, w),
            _offset_point(kappa, y0, s0 + half, -w),
            _offset_point(kappa, y0, s0 - half, -w),
        ]
    )


def generate_scene(seed: int, cfg: SceneGenConfig) -> SceneSpec:
    """Sample one road layout; a pure function of (seed, cfg)."""
    rng = np.random.default_rng(seed)
    num_lanes = int(rng.choice(np.asarray(cfg.num_lanes_choices)))
    lane_width = float(rng.uniform(*cfg.lane_width_range))
    half_width = num_lanes * lane_width / 2.0
    y0 = float(rng.uniform(*cfg.lateral_offset_range))
    kappa = 0.0
    if float(rng.uniform()) >= cfg.straight_fraction:
        kappa = float(rng.uniform(*cfg.curvature_range))

    y_lo, y_hi = cfg.grid.y_range
    room = min(y_hi - y0, y0 - y_lo) - half_width - cfg.fit_margin
    if room <= 0:
        raise ValueError("road wider than BEV range")
    # shrink curvature until the arc's lateral drift keeps the road inside
    while abs(kappa) > 1e-12:
        drift = (1.0 - math.cos(abs(kappa) * cfg.s_max)) / abs(kappa)
        if drift <= room:
            break
        kappa *= 0.8
        if abs(kappa) < 1e-4:
            kappa = 0.0

    x_lo, x_hi = cfg.grid.x_range
    n_cross = int(rng.integers(0, cfg.max_crossings + 1))
    slots: list[float] = []
    for _ in range(n_cross):
        for _attempt in range(20):
            s = float(rng.uniform(-0.65 * cfg.s_max, 0.65 * cfg.s_max))
            if any(abs(s - t) < cfg.crossing_length + cfg.crossing_gap for t in slots):
                continue
            corners = _crossing_corners(kappa, y0, half_width, s, cfg.crossing_length)
            pad = 0.5
            if (
                corners[:, 0].min() >= x_lo + pad
                and corners[:, 0].max() <= x_hi - pad
                and corners[:, 1].min() >= y_lo + pad
                and corners[:, 1].max() <= y_hi - pad
            ):
                slots.append(s)
                break
    slots.sort()

    return SceneSpec(
        seed=seed,
        curvature=kappa,
        lateral_offset=y0,
        road_half_width=half_width,
        num_lanes=num_lanes,
        crossing_slots=tuple(slots),
        crossing_length=cfg.crossing_length,
        s_max=cfg.s_max,
        rig=cfg.rig,
    )


@dataclass(frozen=True, eq=False)
class SceneSample:
    """Rendered inputs and every ground-truth target for one scene."""

    images: tuple[np.ndarray, ...]  # (h, w, 3) float in [0, 1] per camera
    gt_map: VectorMap
    gt_bev_masks: BEVMaskSet
    gt_line_masks: dict  # MapClass -> (rows, cols) uint8
    gt_pv_masks: tuple[np.ndarray, ...]  # (h, w) uint8 per camera

    def __post_init__(self):
        if not self.gt_map.elements:
            raise ValueError("gt_map must be non-empty")
        if len(self.images) != len(self.gt_pv_masks):
            raise ValueError("images and pv masks must pair up per camera")
        for img, pv in zip(self.images, self.gt_pv_masks):
            if img.shape[:2] != pv.shape:
                raise ValueError("image and pv mask shapes disagree")
        if self.gt_bev_masks.drivable.shape != next(iter(self.gt_line_masks.values())).shape:
            raise ValueError("bev mask shapes disagree")


def _scene_elements(spec: SceneSpec, grid: BEVGridSpec, rc: RenderConfig) -> list[MapElement]:
    elements: list[MapElement] = []
    for d in (spec.road_half_width, -spec.road_half_width):
        raw = spec.offset_polyline(d, rc.sample_step)
        for piece in clip_polyline_to_box(raw, grid.x_range, grid.y_range):
            elements.append(MapElement(MapClass.BOUNDARY, piece))
    for d in spec.divider_offsets():
        raw = spec.offset_polyline(d, rc.sample_step)
        for piece in clip_polyline_to_box(raw, grid.x_range, grid.y_range):
            elements.append(MapElement(MapClass.DIVIDER, piece))
    for s0 in spec.crossing_slots:
        corners = _crossing_corners(
            spec.curvature, spec.lateral_offset, spec.road_half_width, s0, spec.crossing_length
        )
        elements.append(MapElement(MapClass.PED_CROSSING, corners, closed=True))
    return elements


def _noise_background(seed: int, cam_idx: int, h: int, w: int, rc: RenderConfig) -> np.ndarray:
    rng = np.random.default_rng((seed, 101, cam_idx))
    cells_h = rc.noise_cells
    cells_w = max(1, round(cells_h * w / h))
    coarse = rng.uniform(-1.0, 1.0, size=(cells_h, cells_w, 3))
    up = np.repeat(coarse, -(-h // cells_h), axis=0)[:h]
    up = np.repeat(up, -(-w // cells_w), axis=1)[:, :w]
    return np.clip(rc.noise_base + rc.noise_amplitude * up, 0.0, 1.0)


def _stamp_disks(
    mask: np.ndarray, image: np.ndarray, centers: np.ndarray, radius: float, color
) -> int:
    """Stamp filled disks into mask/image; returns how many landed in frame."""
    h, w = mask.shape
    hits = 0
    r_int = int(math.ceil(radius))
    col = np.asarray(color, dtype=np.float64)
    for u, v in centers:
        if u < -radius or u >= w + radius or v < -radius or v >= h + radius:
            continue
        u0 = max(0, int(math.floor(u)) - r_int)
        u1 = min(w - 1, int(math.floor(u)) + r_int)
        v0 = max(0, int(math.floor(v)) - r_int)
        v1 = min(h - 1, int(math.floor(v)) + r_int)
        if u0 > u1 or v0 > v1:
            continue
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
        inside = (uu + 0.5 - u) ** 2 + (vv + 0.5 - v) ** 2 <= radius * radius
        if inside.any():
            mask[vv[inside], uu[inside]] = 1
            image[vv[inside], uu[inside]] = col
            hits += 1
    return hits


def _project_stamp_centers(points: np.ndarray, closed: bool, cam: CameraParams, step: float) -> np.ndarray:
    """Project a ground polyline into a camera as dense 2D stamp centers."""
    n = max(2, int(math.ceil(polyline_length(points, closed=closed) / step)) + 1)
    dense = resample_polyline(points, n, closed=closed)
    world = np.column_stack([dense, np.zeros(len(dense))])
    rot = cam.extrinsic[:3, :3]
    trans = cam.extrinsic[:3, 3]
    pc = world @ rot.T + trans
    ahead = pc[:, 2] > cam.z_near
    pc = pc[ahead]
    if len(pc) == 0:
        return np.empty((0, 2))
    fx, fy = cam.intrinsic[0, 0], cam.intrinsic[1, 1]
    cx, cy = cam.intrinsic[0, 2], cam.intrinsic[1, 2]
    u = fx * pc[:, 0] / pc[:, 2] + cx
    v = fy * pc[:, 1] / pc[:, 2] + cy
    return np.column_stack([u, v])


def render_sample(spec: SceneSpec, grid: BEVGridSpec, rc: RenderConfig | None = None) -> SceneSample:
    """Render one scene; a pure function of (spec, grid, rc)."""
    rc = rc or RenderConfig()
    elements = _scene_elements(spec, grid, rc)
    gt_map = VectorMap(elements)
    bev_masks, line_masks = rasterize_map(gt_map, grid, rc.line_thickness)

    # dividers drawn last so they stay visible where they cross a crossing
    paint_order = [MapClass.PED_CROSSING, MapClass.BOUNDARY, MapClass.DIVIDER]
    images = []
    pv_masks = []
    total_hits = 0
    for cam_idx, cam in enumerate(spec.rig):
        h, w = cam.image_size
        image = _noise_background(spec.seed, cam_idx, h, w, rc)
        mask = np.zeros((h, w), dtype=np.uint8)
        for cls in paint_order:
            for elem in elements:
                if elem.class_label is not cls:
                    continue
                centers = _project_stamp_centers(elem.points, elem.closed, cam, rc.stamp_step)
                total_hits += _stamp_disks(
                    mask, image, centers, rc.stamp_radius_px, CLASS_COLORS[cls]
                )
        images.append(image)
        pv_masks.append(mask)
    if total_hits == 0:
        raise BlindRigError("blind rig")

    return SceneSample(
        images=tuple(images),
        gt_map=gt_map,
        gt_bev_masks=bev_masks,
        gt_line_masks=line_masks,
        gt_pv_masks=tuple(pv_masks),
    )


# ---------------------------------------------------------------------------
# dataset on disk


_LINE_MASK_FILES = {
    MapClass.DIVIDER: "bev_line_divider.pgm",
    MapClass.PED_CROSSING: "bev_line_ped_crossing.pgm",
    MapClass.BOUNDARY: "bev_line_boundary.pgm",
}


def build_dataset(
    cfg: SceneGenConfig,
    num_scenes: int,
    out_dir,
    master_seed: int = 0,
    render_cfg: RenderConfig | None = None,
) -> dict:
    """Generate and write a dataset; returns the manifest.

    Scene i uses seed master_seed + i, so any single scene is
    reproducible without generating the ones before it.
    """
    rc = render_cfg or RenderConfig()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(num_scenes):
        seed = master_seed + i
        spec = generate_scene(seed, cfg)
        sample = render_sample(spec, cfg.grid, rc)
        scene_dir = root / f"scene_{i}"
        scene_dir.mkdir(exist_ok=True)
        for j, img in enumerate(sample.images):
            write_ppm(scene_dir / f"cam_{j}.ppm", img)
        for j, pv in enumerate(sample.gt_pv_masks):
            write_pgm(scene_dir / f"pv_{j}.pgm", pv)
        save_map_json(sample.gt_map, scene_dir / "gt_map.json")
        write_pgm(scene_dir / "bev_drivable.pgm", sample.gt_bev_masks.drivable)
        write_pgm(scene_dir / "bev_ped_crossing.pgm", sample.gt_bev_masks.ped_crossing)
        for cls, fname in _LINE_MASK_FILES.items():
            write_pgm(scene_dir / fname, sample.gt_line_masks[cls])
        entries.append({"index": i, "seed": seed, "dir": scene_dir.name})
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "master_seed": master_seed,
        "num_scenes": num_scenes,
        "grid": cfg.grid.to_dict(),
        "rig": [cam.to_dict() for cam in cfg.rig],
        "scene_config": cfg.to_dict(),
        "render_config": rc.to_dict(),
        "scenes": entries,
    }
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(root) -> dict:
    with open(Path(root) / MANIFEST_NAME, encoding="utf-8") as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format_version: {version!r}")
    return manifest


def load_scene(root, manifest: dict, index: int) -> SceneSample:
    """Read one scene back from disk as a SceneSample."""
    entry = manifest["scenes"][index]
    scene_dir = Path(root) / entry["dir"]
    num_cams = len(manifest["rig"])
    images = tuple(
        read_ppm(scene_dir / f"cam_{j}.ppm").astype(np.float64) / 255.0
        for j in range(num_cams)
    )
    pv_masks = tuple(read_pgm(scene_dir / f"pv_{j}.pgm") for j in range(num_cams))
    gt_map = load_map_json(scene_dir / "gt_map.json")
    bev_masks = BEVMaskSet(
        drivable=read_pgm(scene_dir / "bev_drivable.pgm"),
        ped_crossing=read_pgm(scene_dir / "bev_ped_crossing.pgm"),
    )
    line_masks = {cls: read_pgm(scene_dir / fname) for cls, fname in _LINE_MASK_FILES.items()}
    return SceneSample(
        images=images,
        gt_map=gt_map,
        gt_bev_masks=bev_masks,
        gt_line_masks=line_masks,
        gt_pv_masks=pv_masks,
    )


def dataset_digest(root) -> str:
    """SHA-256 over every file's relative path and bytes, sorted."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(p.read_bytes())
    return h.hexdigest()
