"""Dataset directories, target preparation, and training augmentations.

A dataset is a directory of scene subdirectories plus a manifest. Training
targets (positive cells, per-pair masks, boundary maps, depth-guided
weights) are functions of ground truth only, so they are computed once per
scene and cached; flips commute with every cached quantity (all stencils
are symmetric and replicate-padded), so augmentation just flips arrays.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import raster
from .config import GenerateSpec, RunConfig
from .errors import ConfigurationError
from .losses import ImageTargets
from .metrics import DOWNSAMPLE_OFFSET, GTInstance, build_gt_instances
from .net import assign_instances_to_cells
from .scene import PlanarScene, corrupt_boundaries, generate_scene, load_scene, save_scene

MANIFEST = "manifest.json"


def scene_seed(base_seed: int, index: int) -> int:
    return int(base_seed) * 1_000_003 + index


def write_dataset(root, spec: GenerateSpec, base_seed: int) -> dict:
    """Generate and store ``spec.num_scenes`` scenes under ``root``.

    When ``corruption_radius`` > 0 a corrupted label map is stored next to
    the clean one; clean labels play the role of the manually-corrected
    evaluation annotation.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = spec.scene_config()
    seeds = []
    names = []
    for i in range(spec.num_scenes):
        s = scene_seed(base_seed, i)
        scene = generate_scene(s, cfg)
        noisy = None
        if spec.corruption_radius > 0:
            noisy = corrupt_boundaries(scene.labels, spec.corruption_radius, seed=s + 7)
        name = f"scene_{i:05d}"
        save_scene(scene, root / name, noisy_labels=noisy)
        seeds.append(s)
        names.append(name)
    manifest = {
        "format_version": 1,
        "base_seed": int(base_seed),
        "scene_seeds": seeds,
        "scenes": names,
        "corruption_radius": spec.corruption_radius,
        "image_size": list(spec.image_size),
        "spec_hash": hashlib.sha256(json.dumps(
            {k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()},
            sort_keys=True).encode()).hexdigest()[:16],
    }
    (root / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


class SceneDataset:
    """Lazy-loading view over a dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST
        if not manifest_path.exists():
            raise ConfigurationError(f"no dataset manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        self.names = self.manifest["scenes"]
        self._cache: dict[int, tuple[PlanarScene, np.ndarray | None]] = {}

    def __len__(self):
        return len(self.names)

    def load(self, i: int):
        if i not in self._cache:
            self._cache[i] = load_scene(self.root / self.names[i])
        return self._cache[i]

    def labels_for(self, i: int, which: str) -> np.ndarray:
        scene, noisy = self.load(i)
        if which == "corrupted" and noisy is not None:
            return noisy
        return scene.labels

    def dataset_hash(self, which_labels: str) -> str:
        blob = json.dumps(self.manifest, sort_keys=True) + "|" + which_labels
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training target preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedScene:
    """Cached forward-ready arrays for one scene at base orientation."""

    rgb: np.ndarray            # (3, H, W)
    depth: np.ndarray          # (H, W)
    depth_valid: np.ndarray    # (H, W)
    positive_grid: np.ndarray  # (S_r, S_c)
    cells: np.ndarray          # (P, 2)
    gt_masks: np.ndarray       # (P, h, w)
    gt_boundaries: np.ndarray  # (P, h, w)
    weights: np.ndarray | None  # (P, h, w) depth-guided weights


def prepare_scene(scene: PlanarScene, labels: np.ndarray, *, need_weights: bool,
                  weight_mode: str = raster.FULL_FIELD, dtype=np.float32) -> PreparedScene:
    h_full, w_full = labels.shape
    grid = (h_full // 16, w_full // 16)
    cell_inst = assign_instances_to_cells(labels, grid)
    positive_grid = cell_inst > 0
    rows, cols = np.nonzero(positive_grid)
    cells = np.stack([rows, cols], axis=1) if rows.size else np.zeros((0, 2), dtype=int)

    ds = labels[DOWNSAMPLE_OFFSET::4, DOWNSAMPLE_OFFSET::4]
    ids = cell_inst[rows, cols] if rows.size else np.array([], dtype=int)
    unique_ids = np.unique(ids)
    mask_by_id = {int(k): (ds == k).astype(dtype) for k in unique_ids}
    boundary_by_id = {k: raster.laplacian_boundary(m).astype(dtype)
                      for k, m in mask_by_id.items()}

    weights_by_id = {}
    if need_weights:
        pooled, pooled_valid = raster.pool_depth(scene.depth, 4)
        for k, m in mask_by_id.items():
            weights_by_id[k] = raster.instance_weight_map(
                m, pooled, depth_valid=pooled_valid, mode=weight_mode).astype(dtype)

    hq, wq = ds.shape
    p = len(cells)
    gt_masks = np.zeros((p, hq, wq), dtype=dtype)
    gt_bounds = np.zeros((p, hq, wq), dtype=dtype)
    weights = np.zeros((p, hq, wq), dtype=dtype) if need_weights else None
    for n, k in enumerate(ids):
        gt_masks[n] = mask_by_id[int(k)]
        gt_bounds[n] = boundary_by_id[int(k)]
        if need_weights:
            weights[n] = weights_by_id[int(k)]

    return PreparedScene(
        rgb=np.ascontiguousarray(scene.rgb.transpose(2, 0, 1), dtype=dtype),
        depth=scene.depth.astype(dtype),
        depth_valid=scene.depth > 0,
        positive_grid=positive_grid,
        cells=cells,
        gt_masks=gt_masks,
        gt_boundaries=gt_bounds,
        weights=weights,
    )


def _flip_cells(cells, grid_shape, flip_h, flip_v):
    out = cells.copy()
    if flip_v:
        out[:, 0] = grid_shape[0] - 1 - out[:, 0]
    if flip_h:
        out[:, 1] = grid_shape[1] - 1 - out[:, 1]
    return out


def augment_sample(prep: PreparedScene, rng: np.random.Generator, spec) -> tuple[np.ndarray, ImageTargets]:
    """Draw one augmented training sample: flips + photometric jitter + noise.

    Flips apply consistently to image, depth, and every cached target;
    photometric distortion and Gaussian noise touch the image only.
    """
    flip_h = rng.random() < spec.hflip
    flip_v = rng.random() < spec.vflip

    def fl(a, axes=(-2, -1)):
        if flip_v:
            a = np.flip(a, axis=axes[0])
        if flip_h:
            a = np.flip(a, axis=axes[1])
        return a

    rgb = fl(prep.rgb)
    contrast = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
    brightness = rng.uniform(-spec.jitter, spec.jitter)
    rgb = rgb * contrast + brightness
    if spec.noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, spec.noise_sigma, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0).astype(prep.rgb.dtype)

    targets = ImageTargets(
        positive_grid=np.ascontiguousarray(fl(prep.positive_grid)),
        cells=_flip_cells(prep.cells, prep.positive_grid.shape, flip_h, flip_v),
        gt_masks=np.ascontiguousarray(fl(prep.gt_masks)),
        gt_boundaries=np.ascontiguousarray(fl(prep.gt_boundaries)),
        boundary_weights=None if prep.weights is None else np.ascontiguousarray(fl(prep.weights)),
        depth=np.ascontiguousarray(fl(prep.depth)),
        depth_valid=np.ascontiguousarray(fl(prep.depth_valid)),
    )
    return rgb, targets


def plain_sample(prep: PreparedScene) -> tuple[np.ndarray, ImageTargets]:
    """The unaugmented view of a prepared scene."""
    targets = ImageTargets(
        positive_grid=prep.positive_grid, cells=prep.cells, gt_masks=prep.gt_masks,
        gt_boundaries=prep.gt_boundaries, boundary_weights=prep.weights,
        depth=prep.depth, depth_valid=prep.depth_valid)
    return prep.rgb, targets


def eval_gt_instances(labels: np.ndarray) -> list[GTInstance]:
    return build_gt_instances(labels)


def config_dataset_hash(config: RunConfig, ds: SceneDataset, which_labels: str) -> str:
    return ds.dataset_hash(which_labels)
