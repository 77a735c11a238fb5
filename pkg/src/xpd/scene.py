"""Procedural piecewise-planar scenes with exact depth and instance labels.

A scene is a camera looking into a room-like arrangement of planar patches
(floor, walls, box faces). Rendering casts one ray per pixel center and
keeps the nearest polygon hit, so depth and labels are consistent by
construction. ``corrupt_boundaries`` manufactures the smooth annotation
noise that plane-fitting pipelines produce, which the boundary-weighted
losses are designed to survive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, GenerationError, PreconditionError, ShapeError

FORMAT_VERSION = 1
VISIBILITY_FLOOR = 0.005
MIN_CAMERA_CLEARANCE = 0.05
CLIP_Z = 0.12
LIGHT_DIR = np.array([0.35, -0.8, 0.45]) / np.linalg.norm([0.35, -0.8, 0.45])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera; pixel (r, c) casts the ray ((c-cx)/fx, (r-cy)/fy, 1)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ConfigurationError("principal point must lie inside the image")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d):
        return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                                width=d["width"], height=d["height"])


@dataclass
class PlanePrimitive:
    """A planar patch: unit normal, plane offset (n . X = offset), polygon, albedo."""

    normal: np.ndarray
    offset: float
    polygon: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise PreconditionError("plane normal must be unit length")
        if self.polygon.ndim != 2 or self.polygon.shape[0] < 3 or self.polygon.shape[1] != 3:
            raise PreconditionError("polygon needs at least 3 vertices in 3-D")
        residual = np.abs(self.polygon @ self.normal - self.offset)
        if residual.max() > 1e-6:
            raise PreconditionError(f"polygon vertices off the plane by {residual.max():.2e} m")


@dataclass
class SceneConfig:
    """Knobs for the generator; ranges are inclusive."""

    num_planes: tuple[int, int] = (3, 7)
    depth_range: tuple[float, float] = (1.5, 7.0)
    image_size: tuple[int, int] = (192, 256)
    rotation_scale: float = 1.0
    boxes: bool = True
    palette_size: int = 3

    def validate(self):
        lo, hi = self.num_planes
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"num_planes range {self.num_planes} is empty or zero")
        zmin, zmax = self.depth_range
        if zmin <= 0 or zmax < zmin:
            raise ConfigurationError(f"depth_range {self.depth_range} must be positive and non-empty")
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ConfigurationError("image size must be at least 32x32")
        if self.rotation_scale < 0:
            raise ConfigurationError("rotation_scale must be >= 0")
        if self.palette_size < 1:
            raise ConfigurationError("palette_size must be >= 1")

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.image_size
        f = 0.8 * w
        return CameraIntrinsics(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h)


@dataclass
class PlanarScene:
    """One unit of training/evaluation data with pixel-exact ground truth."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    intrinsics: CameraIntrinsics
    planes: list[PlanePrimitive]
    seed: int

    def validate(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.rgb.shape != shape + (3,) or self.depth.shape != shape or self.labels.shape != shape:
            raise ShapeError("rgb/depth/labels spatial shapes disagree with intrinsics")
        if np.any((self.labels > 0) & (self.depth <= 0)):
            raise ShapeError("labeled pixel with non-positive depth")
        ids = np.unique(self.labels)
        ids = ids[ids > 0]
        if ids.size and ids.max() > len(self.planes):
            raise ShapeError("label id without a backing plane")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _ray_directions(intr: CameraIntrinsics) -> np.ndarray:
    cols = (np.arange(intr.width) - intr.cx) / intr.fx
    rows = (np.arange(intr.height) - intr.cy) / intr.fy
    d = np.empty((intr.height, intr.width, 3))
    d[..., 0] = cols[None, :]
    d[..., 1] = rows[:, None]
    d[..., 2] = 1.0
    return d


def _plane_basis(plane: PlanePrimitive):
    u = plane.polygon[1] - plane.polygon[0]
    u = u / np.linalg.norm(u)
    v = np.cross(plane.normal, u)
    return plane.polygon[0], u, v


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly2d: np.ndarray) -> np.ndarray:
    """Even-odd rule crossing test, vectorized over query points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = poly2d.shape[0]
    j = n - 1
    for i in range(n):
        xi, yi = poly2d[i]
        xj, yj = poly2d[j]
        crosses = (yi > py) != (yj > py)
        if np.any(crosses):
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = (xj - xi) * (py - yi) / (yj - yi) + xi
            inside ^= crosses & (px < xint)
        j = i
    return inside


def render_depth(planes: list[PlanePrimitive], intrinsics: CameraIntrinsics):
    """Cast a ray per pixel center and keep the nearest polygon hit.

    Returns ``(depth, labels)`` where depth is the z coordinate of the hit in
    meters (0 where nothing is hit) and labels holds the 1-based index of the
    hit plane (0 for background). A plane parallel to a ray is a non-hit.
    """
    for k, p in enumerate(planes):
        if np.any(p.polygon[:, 2] <= MIN_CAMERA_CLEARANCE):
            raise PreconditionError(f"plane {k} has polygon vertices behind the camera clearance")
    dirs = _ray_directions(intrinsics)
    depth = np.full((intrinsics.height, intrinsics.width), np.inf)
    labels = np.zeros((intrinsics.height, intrinsics.width), dtype=np.int32)
    for k, plane in enumerate(planes):
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = plane.offset / denom
        candidate = (np.abs(denom) > 1e-12) & (t > 0) & (t < depth)
        if not np.any(candidate):
            continue
        pts = t[..., None] * dirs
        origin, u, v = _plane_basis(plane)
        rel = pts - origin
        px = rel @ u
        py = rel @ v
        poly2d = np.stack([(plane.polygon - origin) @ u, (plane.polygon - origin) @ v], axis=1)
        hit = candidate & _points_in_polygon(px, py, poly2d)
        depth[hit] = t[hit]
        labels[hit] = k + 1
    depth[labels == 0] = 0.0
    return depth, labels


def shade_rgb(planes, labels, depth, light_dir=LIGHT_DIR):
    """Lambertian flat shading with a mild radial depth falloff."""
    h, w = labels.shape
    rgb = np.zeros((h, w, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        falloff = np.where(depth > 0, (1.8 / (1.0 + depth)) ** 0.4, 0.0)
    falloff = np.clip(falloff, 0.0, 1.0)
    for k, plane in enumerate(planes):
        mask = labels == k + 1
        if not np.any(mask):
            continue
        lambert = 0.3 + 0.7 * abs(float(plane.normal @ light_dir))
        shade = np.clip(lambert * falloff[mask], 0.0, 1.0)
        rgb[mask] = plane.albedo[None, :] * shade[:, None]
    return np.clip(rgb, 0.0, 1.0)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _rect(p0, p1, p2, p3):
    return np.array([p0, p1, p2, p3], dtype=np.float64)


def _clip_to_front(polygon: np.ndarray, zmin: float = CLIP_Z):
    """Sutherland-Hodgman clip of a polygon against the halfspace z >= zmin."""
    out = []
    n = polygon.shape[0]
    for i in range(n):
        a = polygon[i]
        b = polygon[(i + 1) % n]
        a_in = a[2] >= zmin
        b_in = b[2] >= zmin
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (zmin - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if len(out) >= 3 else None


def _rotation(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ rx @ ry


def _make_plane(normal, point_on_plane, polygon, albedo):
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    offset = float(np.asarray(point_on_plane) @ normal)
    return PlanePrimitive(normal=normal, offset=offset, polygon=polygon, albedo=albedo)


def _candidate_planes(rng: np.random.Generator, config: SceneConfig, target: int):
    """Sample a room roster of roughly ``target`` planar patches (world frame)."""
    zmin, zmax = config.depth_range
    z_back = rng.uniform(zmin + 0.6 * (zmax - zmin), zmax)
    ext = 8.0
    palette = rng.uniform(0.15, 0.95, size=(config.palette_size, 3))

    def albedo():
        base = palette[rng.integers(0, config.palette_size)]
        return np.clip(base + rng.uniform(-0.06, 0.06, size=3), 0.05, 0.98)

    specs = []
    # back wall, always present and generous enough to act as a backdrop
    specs.append(((0.0, 0.0, -1.0), (0.0, 0.0, z_back),
                  _rect([-ext, -ext, z_back], [ext, -ext, z_back],
                        [ext, ext, z_back], [-ext, ext, z_back])))
    if target >= 2:
        y_floor = rng.uniform(0.7, 1.5)
        specs.append(((0.0, -1.0, 0.0), (0.0, y_floor, 0.0),
                      _rect([-ext, y_floor, CLIP_Z], [ext, y_floor, CLIP_Z],
                            [ext, y_floor, z_back], [-ext, y_floor, z_back])))
    else:
        y_floor = None

    extras = []
    x_left = -rng.uniform(0.9, 2.4)
    extras.append(((1.0, 0.0, 0.0), (x_left, 0.0, 0.0),
                   _rect([x_left, -ext, CLIP_Z], [x_left, ext, CLIP_Z],
                         [x_left, ext, z_back], [x_left, -ext, z_back])))
    x_right = rng.uniform(0.9, 2.4)
    extras.append(((-1.0, 0.0, 0.0), (x_right, 0.0, 0.0),
                   _rect([x_right, -ext, CLIP_Z], [x_right, ext, CLIP_Z],
                         [x_right, ext, z_back], [x_right, -ext, z_back])))
    y_ceil = -rng.uniform(0.5, 1.3)
    extras.append(((0.0, 1.0, 0.0), (0.0, y_ceil, 0.0),
                   _rect([-ext, y_ceil, CLIP_Z], [ext, y_ceil, CLIP_Z],
                         [ext, y_ceil, z_back], [-ext, y_ceil, z_back])))
    rng.shuffle(extras)
    while len(specs) < target and extras:
        specs.append(extras.pop())

    # box faces fill the remainder: front panel, then top, then a side
    while len(specs) < target and config.boxes and y_floor is not None:
        sx = rng.uniform(0.22, 0.6)
        sz = rng.uniform(0.22, 0.6)
        bh = rng.uniform(0.35, max(0.36, 0.75 * y_floor))
        bx = rng.uniform(max(x_left + sx + 0.2, -1.4), min(x_right - sx - 0.2, 1.4))
        bz = rng.uniform(zmin + 0.35 * (z_back - zmin), z_back - 0.5)
        y_top = y_floor - bh
        faces = [((0.0, 0.0, -1.0), (0.0, 0.0, bz - sz),
                  _rect([bx - sx, y_top, bz - sz], [bx + sx, y_top, bz - sz],
                        [bx + sx, y_floor, bz - sz], [bx - sx, y_floor, bz - sz])),
                 ((0.0, -1.0, 0.0), (0.0, y_top, 0.0),
                  _rect([bx - sx, y_top, bz - sz], [bx + sx, y_top, bz - sz],
                        [bx + sx, y_top, bz + sz], [bx - sx, y_top, bz + sz]))]
        if bx - sx > 0.25:
            faces.append(((-1.0, 0.0, 0.0), (bx - sx, 0.0, 0.0),
                          _rect([bx - sx, y_top, bz - sz], [bx - sx, y_floor, bz - sz],
                                [bx - sx, y_floor, bz + sz], [bx - sx, y_top, bz + sz])))
        elif bx + sx < -0.25:
            faces.append(((1.0, 0.0, 0.0), (bx + sx, 0.0, 0.0),
                          _rect([bx + sx, y_top, bz - sz], [bx + sx, y_floor, bz - sz],
                                [bx + sx, y_floor, bz + sz], [bx + sx, y_top, bz + sz])))
        for f in faces:
            if len(specs) < target:
                specs.append(f)

    yaw = rng.uniform(-0.25, 0.25) * config.rotation_scale
    pitch = rng.uniform(-0.1, 0.18) * config.rotation_scale
    roll = rng.uniform(-0.06, 0.06) * config.rotation_scale
    rot = _rotation(yaw, pitch, roll)

    planes = []
    for normal, point, polygon in specs:
        poly_cam = polygon @ rot.T
        poly_cam = _clip_to_front(poly_cam)
        if poly_cam is None:
            continue
        n_cam = rot @ np.asarray(normal, dtype=np.float64)
        planes.append(_make_plane(n_cam, poly_cam[0], poly_cam, albedo()))
    return planes


def generate_scene(seed: int, config: SceneConfig) -> PlanarScene:
    """Deterministically sample a scene satisfying the visibility contract.

    Resamples the arrangement up to 100 times until every visible instance
    covers at least 0.5% of the pixels and the visible count lies inside
    ``config.num_planes``; raises GenerationError otherwise.
    """
    config.validate()
    intr = config.intrinsics()
    n_px = intr.height * intr.width
    lo, hi = config.num_planes
    for attempt in range(100):
        rng = np.random.default_rng([int(seed), attempt, 0x5CE4E])
        target = int(rng.integers(lo, hi + 1))
        planes = _candidate_planes(rng, config, target)
        if not planes:
            continue
        depth, labels = render_depth(planes, intr)
        ids, counts = np.unique(labels[labels > 0], return_counts=True)
        if ids.size < lo or ids.size > hi:
            continue
        if counts.min() < VISIBILITY_FLOOR * n_px:
            continue
        # drop never-hit planes, relabel compactly
        keep = {int(i): new + 1 for new, i in enumerate(ids)}
        new_labels = np.zeros_like(labels)
        for old, new in keep.items():
            new_labels[labels == old] = new
        kept_planes = [planes[int(i) - 1] for i in ids]
        light = LIGHT_DIR + rng.uniform(-0.15, 0.15, size=3)
        light = light / np.linalg.norm(light)
        rgb = shade_rgb(kept_planes, new_labels, depth, light_dir=light)
        scene = PlanarScene(rgb=rgb, depth=depth, labels=new_labels,
                            intrinsics=intr, planes=kept_planes, seed=int(seed))
        scene.validate()
        return scene
    raise GenerationError(f"no acceptable arrangement after 100 attempts (seed={seed})")


# ---------------------------------------------------------------------------
# boundary corruption
# ---------------------------------------------------------------------------

def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels adjacent (4-neighborhood) to a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[1:, :] != labels[:-1, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return b


def _smooth_field(shape, rng: np.random.Generator, step: int) -> np.ndarray:
    """Low-frequency field in [-1, 1]: coarse iid grid, bilinear upsampling."""
    h, w = shape
    gh = max(2, h // step + 2)
    gw = max(2, w // step + 2)
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ri = np.linspace(0, gh - 1, h)
    ci = np.linspace(0, gw - 1, w)
    r0 = np.floor(ri).astype(int)
    c0 = np.floor(ci).astype(int)
    r1 = np.minimum(r0 + 1, gh - 1)
    c1 = np.minimum(c0 + 1, gw - 1)
    fr = (ri - r0)[:, None]
    fc = (ci - c0)[None, :]
    return ((1 - fr) * (1 - fc) * coarse[np.ix_(r0, c0)]
            + (1 - fr) * fc * coarse[np.ix_(r0, c1)]
            + fr * (1 - fc) * coarse[np.ix_(r1, c0)]
            + fr * fc * coarse[np.ix_(r1, c1)])


def corrupt_boundaries(labels: np.ndarray, radius: int, seed: int) -> np.ndarray:
    """Displace instance boundaries by a smooth random field of magnitude <= radius.

    Only pixels within Chebyshev distance ``radius`` of an original boundary
    may change; the output is still a partition and keeps the instance id
    set. Deterministic in (labels, radius, seed).
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError("labels must be 2-D")
    if radius < 0:
        raise ConfigurationError("radius must be >= 0")
    h, w = labels.shape
    if radius > min(h, w) // 2:
        raise ConfigurationError(f"radius {radius} exceeds half the smaller image dimension")
    if radius == 0:
        return labels.copy()

    original_ids = set(np.unique(labels).tolist())
    band = ndimage.binary_dilation(boundary_mask(labels),
                                   structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    step = max(12, min(h, w) // 6)
    for attempt in range(20):
        rng = np.random.default_rng([int(seed), attempt, 0xD15F])
        dr = np.clip(np.rint(radius * _smooth_field((h, w), rng, step)), -radius, radius).astype(int)
        dc = np.clip(np.rint(radius * _smooth_field((h, w), rng, step)), -radius, radius).astype(int)
        src_r = np.clip(rr + dr, 0, h - 1)
        src_c = np.clip(cc + dc, 0, w - 1)
        out = np.where(band, labels[src_r, src_c], labels)
        if set(np.unique(out).tolist()) == original_ids:
            return out
    # restore pixels of any id the field erased; stays inside the band
    lost = original_ids - set(np.unique(out).tolist())
    for lid in lost:
        out[labels == lid] = lid
    return out


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def save_scene(scene: PlanarScene, directory, noisy_labels: np.ndarray | None = None):
    """Write one scene directory: rgb.png, depth.png (16-bit mm), labels.png, meta.json.

    Labels round-trip bit-exactly; depth round-trips to 1 mm. A parallel
    corrupted label map may be stored alongside as labels_noisy.png.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb8 = np.clip(np.rint(scene.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(directory / "rgb.png")
    depth_mm = np.clip(np.rint(scene.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(depth_mm).save(directory / "depth.png")
    if scene.labels.max() > 255:
        raise ShapeError("more than 255 instances cannot be stored as 8-bit labels")
    Image.fromarray(scene.labels.astype(np.uint8), mode="L").save(directory / "labels.png")
    if noisy_labels is not None:
        Image.fromarray(noisy_labels.astype(np.uint8), mode="L").save(directory / "labels_noisy.png")
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": int(scene.seed),
        "intrinsics": scene.intrinsics.to_dict(),
        "planes": [
            {
                "normal": p.normal.tolist(),
                "offset": float(p.offset),
                "polygon": p.polygon.tolist(),
                "albedo": p.albedo.tolist(),
            }
            for p in scene.planes
        ],
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def load_scene(directory) -> tuple[PlanarScene, np.ndarray | None]:
    """Load a scene directory; returns (scene, noisy_labels or None)."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported scene format_version {meta.get('format_version')}")
    rgb = np.asarray(Image.open(directory / "rgb.png"), dtype=np.float64) / 255.0
    depth = np.asarray(Image.open(directory / "depth.png"), dtype=np.float64) / 1000.0
    labels = np.asarray(Image.open(directory / "labels.png"), dtype=np.int32)
    intr = CameraIntrinsics.from_dict(meta["intrinsics"])
    planes = [
        PlanePrimitive(normal=np.array(p["normal"]), offset=p["offset"],
                       polygon=np.array(p["polygon"]), albedo=np.array(p["albedo"]))
        for p in meta["planes"]
    ]
    scene = PlanarScene(rgb=rgb, depth=depth, labels=labels,
                        intrinsics=intr, planes=planes, seed=int(meta["seed"]))
    noisy_path = directory / "labels_noisy.png"
    noisy = np.asarray(Image.open(noisy_path), dtype=np.int32) if noisy_path.exists() else None
    return scene, noisy
