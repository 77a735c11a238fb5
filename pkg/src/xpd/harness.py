"""Training/evaluation drivers and image-emitting visualization.

Commands are plain functions over a validated RunConfig; the CLI is a thin
shell on top. Run artifacts land in ``config.out_dir``:
config.json, log.jsonl (one loss breakdown per step), ckpt-epochN.npz,
report.json / report.txt, and viz/ images.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as lmod
from . import raster
from .config import RunConfig
from .data import (PreparedScene, SceneDataset, augment_sample, eval_gt_instances,
                   plain_sample, prepare_scene, write_dataset)
from .errors import ConfigurationError
from .metrics import EvalItem, MetricsReport, evaluate_items
from .net import (InstancePrediction, XPDNet, assemble_cell_masks, assemble_instances,
                  load_checkpoint, save_checkpoint, xpdnet_forward)

TRAIN_DTYPE = np.float32
INCOMPLETE_MARKER = "INCOMPLETE"


class _incomplete_marker:
    """Marks an output directory as in-progress; removed on clean completion."""

    def __init__(self, directory):
        self.path = Path(directory) / INCOMPLETE_MARKER

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("run in progress or aborted\n")
        return self

    def __exit__(self, exc_type, *rest):
        if exc_type is None and self.path.exists():
            self.path.unlink()
        return False


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: RunConfig) -> dict:
    """Write the configured dataset; returns its manifest.

    Scenes are keyed by their own derived seeds, so sharding generation
    across workers would be bit-identical to this serial loop.
    """
    config.validate()
    if not config.dataset:
        raise ConfigurationError("cmd_generate needs config.dataset as the output directory")
    config.echo()
    with _incomplete_marker(config.dataset):
        return write_dataset(config.dataset, config.generate, config.seed)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _prepare_all(ds: SceneDataset, config: RunConfig) -> list[PreparedScene]:
    need_weights = config.train.boundary_loss == lmod.BOUNDARY_DGBPL
    out = []
    for i in range(len(ds)):
        scene, _ = ds.load(i)
        labels = ds.labels_for(i, config.train.labels)
        out.append(prepare_scene(scene, labels, need_weights=need_weights,
                                 weight_mode=config.train.weight_mode, dtype=TRAIN_DTYPE))
    return out


def train_step(net: XPDNet, batch, weights, boundary_kind, w_squared,
               constraints_fn=None):
    """One forward/backward pass; returns (total tensor, breakdown)."""
    xs = np.stack([x for x, _ in batch])
    targets = [t for _, t in batch]
    seg, depth_out = xpdnet_forward(net, xs)
    pred_masks = [None if len(t.cells) == 0 else assemble_cell_masks(seg, i, t.cells)
                  for i, t in enumerate(targets)]
    focal, dice, rmse = lmod.base_task_losses(seg, depth_out, targets, pred_masks)
    boundary = lmod.boundary_losses(seg, targets, boundary_kind, pred_masks,
                                    w_squared=w_squared)
    constraints = 0.0 if constraints_fn is None else constraints_fn(seg, depth_out, targets)
    total, breakdown = lmod.composite_loss(focal, dice, rmse, boundary, constraints, weights)
    return total, breakdown


def cmd_train(config: RunConfig, constraints_fn=None) -> Path:
    """Run the optimization loop; returns the final checkpoint path.

    Fully seeded: identical config and seed give an identical trajectory and
    (via the closing evaluation) an identical report.json. A non-finite loss
    aborts with the step index and the last finite breakdown.
    """
    config.validate()
    if not config.dataset:
        raise ConfigurationError("cmd_train needs config.dataset")
    out = Path(config.out_dir)
    config.echo()
    ds = SceneDataset(config.dataset)
    prepared = _prepare_all(ds, config)

    net = XPDNet(variant=config.variant, seed=config.seed, dtype=TRAIN_DTYPE)
    opt = ad.Adam(net.parameters(), lr=config.train.optimizer.lr)
    n = len(prepared)
    bs = min(config.train.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = steps_per_epoch * config.train.epochs
    decay_step = int(config.train.optimizer.decay_at * total_steps)
    rng = np.random.default_rng([config.seed, 0x7EA1])

    last_finite = None
    step = 0
    log_path = out / "log.jsonl"
    ckpt_path = out / "checkpoint.npz"
    with _incomplete_marker(out), open(log_path, "w") as log:
        for epoch in range(config.train.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, bs):
                batch_idx = order[lo:lo + bs]
                batch = [augment_sample(prepared[i], rng, config.train.augment)
                         for i in batch_idx]
                opt.zero_grad()
                total, breakdown = train_step(net, batch, config.train.loss_weights,
                                              config.train.boundary_loss,
                                              config.train.w_squared, constraints_fn)
                if not np.isfinite(breakdown.total):
                    raise RuntimeError(
                        f"non-finite loss at step {step}; last finite breakdown: "
                        f"{None if last_finite is None else last_finite.to_dict()}")
                last_finite = breakdown
                total.backward()
                if step == decay_step and step > 0:
                    opt.lr *= config.train.optimizer.decay_factor
                opt.step()
                log.write(json.dumps({"step": step, "epoch": epoch, "lr": opt.lr,
                                      **breakdown.to_dict()}) + "\n")
                step += 1
            save_checkpoint(net, out / f"ckpt-epoch{epoch + 1}.npz")
        save_checkpoint(net, ckpt_path)
        if config.eval_dataset:
            report = evaluate_checkpoint(config, ckpt_path)
            _write_report(report, out)
    return ckpt_path


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _forward_predictions(net: XPDNet, rgb: np.ndarray, ev):
    with ad.no_grad():
        seg, depth_out = xpdnet_forward(net, rgb[None])
    preds = assemble_instances(seg, ev.score_thresh, ev.nms_iou, batch_index=0)
    return preds, depth_out.depth.data[0]


def evaluate_checkpoint(config: RunConfig, checkpoint) -> MetricsReport:
    """Inference + metric aggregation over the configured eval dataset."""
    config.validate()
    root = config.eval_dataset or config.dataset
    if not root:
        raise ConfigurationError("cmd_eval needs a dataset")
    ds = SceneDataset(root)
    net = None
    if not config.eval.oracle:
        net = XPDNet(variant=config.variant, seed=config.seed, dtype=TRAIN_DTYPE)
        net = load_checkpoint(checkpoint, net=net)
    items = []
    for i in range(len(ds)):
        scene, _ = ds.load(i)
        labels = ds.labels_for(i, config.eval.labels)
        gts = eval_gt_instances(labels)
        if config.eval.oracle:
            preds = [InstancePrediction(mask=g.mask.astype(np.float64), score=1.0, box=g.box)
                     for g in gts]
            depth_pred = scene.depth.copy()
        else:
            x = scene.rgb.transpose(2, 0, 1).astype(TRAIN_DTYPE)
            preds, depth_pred = _forward_predictions(net, x, config.eval)
        items.append(EvalItem(predictions=preds, gts=gts,
                              depth_pred=np.asarray(depth_pred, dtype=np.float64),
                              depth_gt=scene.depth, depth_valid=scene.depth > 0))
    metadata = {
        "dataset_hash": ds.dataset_hash(config.eval.labels),
        "config_hash": config.config_hash(),
        "eval_labels": config.eval.labels,
        "variant": config.variant,
        "oracle": config.eval.oracle,
        "score_thresh": config.eval.score_thresh,
        "nms_iou": config.eval.nms_iou,
    }
    return evaluate_items(items, match_iou=config.eval.match_iou,
                          dilate_px=config.eval.dilate_px, metadata=metadata)


def _write_report(report: MetricsReport, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    (out / "report.txt").write_text(report.table() + "\n")


def cmd_eval(config: RunConfig) -> MetricsReport:
    config.validate()
    if not config.eval.oracle and not config.eval.checkpoint:
        raise ConfigurationError("cmd_eval needs eval.checkpoint (or eval.oracle=true)")
    config.echo()
    report = evaluate_checkpoint(config, config.eval.checkpoint)
    _write_report(report, Path(config.out_dir))
    return report


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(verbose: bool = True, corrupt: str | None = None):
    from .gradcheck import run_all_checks

    report = run_all_checks(corrupt=corrupt, verbose=verbose)
    return report


# ---------------------------------------------------------------------------
# visualize
# ---------------------------------------------------------------------------

def normals_from_depth(depth: np.ndarray, fx: float, fy: float, cx: float, cy: float):
    """Central-difference surface normals of a depth map, camera-facing."""
    h, w = depth.shape
    u = np.arange(w) - cx
    v = np.arange(h) - cy
    x = depth * (u[None, :] / fx)
    y = depth * (v[:, None] / fy)
    dxu, dxv = np.gradient(x, axis=1), np.gradient(x, axis=0)
    dyu, dyv = np.gradient(y, axis=1), np.gradient(y, axis=0)
    dzu, dzv = np.gradient(depth, axis=1), np.gradient(depth, axis=0)
    tu = np.stack([dxu, dyu, dzu], axis=-1)
    tv = np.stack([dxv, dyv, dzv], axis=-1)
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), 0.0)
    flip = n[..., 2:3] > 0
    return np.where(flip, -n, n)


def _save_png(arr01: np.ndarray, path: Path):
    from PIL import Image

    img = np.clip(np.rint(arr01 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def _colormap(values: np.ndarray, cmap_name: str) -> np.ndarray:
    import matplotlib

    v = values.astype(np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return matplotlib.colormaps[cmap_name](norm)[..., :3]


def _instance_palette(n: int) -> np.ndarray:
    import matplotlib

    return matplotlib.colormaps["tab20"](np.linspace(0, 1, max(n, 1)) % 1.0)[:, :3]


def overlay_instances(rgb: np.ndarray, labels: np.ndarray) -> np.ndarray:
    from .scene import boundary_mask

    out = rgb.copy()
    ids = np.unique(labels)
    ids = ids[ids > 0]
    palette = _instance_palette(len(ids))
    for color, k in zip(palette, ids):
        m = labels == k
        out[m] = 0.45 * out[m] + 0.55 * color
    edges = boundary_mask(labels)
    out[edges] = (1.0, 1.0, 1.0)
    return np.clip(out, 0, 1)


def _save_png16(values: np.ndarray, path: Path, scale: float):
    from PIL import Image

    arr = np.clip(np.rint(values * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def visualize_scene(scene, labels: np.ndarray, out_dir: Path, stem: str,
                    depth: np.ndarray | None = None, weights: np.ndarray | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    d = scene.depth if depth is None else depth
    intr = scene.intrinsics
    _save_png(overlay_instances(scene.rgb, labels), out_dir / f"{stem}_overlay.png")
    _save_png(_colormap(d, "viridis"), out_dir / f"{stem}_depth.png")
    normals = normals_from_depth(d, intr.fx, intr.fy, intr.cx, intr.cy)
    _save_png((normals + 1.0) / 2.0, out_dir / f"{stem}_normals.png")
    if weights is not None:
        big = np.kron(weights, np.ones((4, 4)))
        _save_png(_colormap(big, "magma"), out_dir / f"{stem}_weights.png")
    # raw 16-bit debug dumps at mask resolution: gradient mask in mm/px,
    # boundary map and weights in 1/65535 steps
    pooled, pooled_valid = raster.pool_depth(scene.depth, 4)
    g, _ = raster.sobel_gradient_mask(pooled, pooled_valid)
    _save_png16(g, out_dir / f"{stem}_gradient16.png", 1000.0)
    ds = labels[2::4, 2::4]
    b_all = np.zeros_like(pooled)
    for k in np.unique(ds):
        if k:
            b_all = np.maximum(b_all, raster.laplacian_boundary((ds == k).astype(float)))
    _save_png16(b_all, out_dir / f"{stem}_boundary16.png", 65535.0)
    if weights is not None:
        _save_png16(weights, out_dir / f"{stem}_weights16.png", 65535.0)


def _combined_weight_map(scene, labels) -> np.ndarray:
    ds = labels[2::4, 2::4]
    pooled, pooled_valid = raster.pool_depth(scene.depth, 4)
    combined = np.zeros_like(pooled)
    for k in np.unique(ds):
        if k == 0:
            continue
        w = raster.instance_weight_map((ds == k).astype(np.float64), pooled,
                                       depth_valid=pooled_valid)
        combined = np.maximum(combined, w)
    return combined


def labels_from_predictions(preds: list[InstancePrediction], full_shape) -> np.ndarray:
    """Paint predictions (highest score last wins lowest priority) into an id map."""
    h4 = np.zeros((full_shape[0] // 4, full_shape[1] // 4), dtype=np.int32)
    for i, p in enumerate(sorted(preds, key=lambda q: q.score)):
        h4[p.mask >= 0.5] = i + 1
    return np.kron(h4, np.ones((4, 4), dtype=np.int32))


def cmd_visualize(config: RunConfig, max_scenes: int = 4) -> Path:
    """Emit overlay / depth / normal / weight images for a few scenes.

    With a checkpoint configured the overlays show the model's predictions
    and the depth/normal panels its depth estimate; otherwise ground truth.
    """
    config.validate()
    root = config.eval_dataset or config.dataset
    if not root:
        raise ConfigurationError("cmd_visualize needs a dataset")
    ds = SceneDataset(root)
    out = Path(config.out_dir) / "viz"
    net = None
    if config.eval.checkpoint:
        net = load_checkpoint(config.eval.checkpoint,
                              net=XPDNet(variant=config.variant, seed=0, dtype=TRAIN_DTYPE))
    for i in range(min(len(ds), max_scenes)):
        scene, _ = ds.load(i)
        labels = ds.labels_for(i, config.eval.labels)
        weights = _combined_weight_map(scene, labels)
        if net is None:
            visualize_scene(scene, labels, out, f"scene{i:04d}", weights=weights)
        else:
            x = scene.rgb.transpose(2, 0, 1).astype(TRAIN_DTYPE)
            preds, depth_pred = _forward_predictions(net, x, config.eval)
            pred_labels = labels_from_predictions(preds, labels.shape)
            visualize_scene(scene, pred_labels, out, f"scene{i:04d}",
                            depth=np.asarray(depth_pred, dtype=np.float64), weights=weights)
    return out
