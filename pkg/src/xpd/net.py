"""The toy dual-branch network: shared backbone, grid-cell instance head with
dynamic mask kernels, depth decoder, and the cross-task distillation hookup.

Layout is NCHW throughout. The backbone emits a three-level pyramid (strides
4/8/16 with 64/128/256 channels); the segmentation branch cuts instance
masks out of a 32-channel stride-4 mask feature with per-cell 1x1 dynamic
kernels; the depth branch decodes top-down to a 64-channel stride-4
aggregated feature before its 1-channel head. The two stride-4 features are
where the distillation messages cross.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distill import DistillationParams, dual_distill
from .errors import CheckpointMismatchError, ConfigurationError, ShapeError

MASK_CHANNELS = 32
PYRAMID_CHANNELS = (64, 128, 256)
HEAD_CHANNELS = 64
DEPTH_FLOOR = 0.01
GN_GROUPS = 8
GN_EPS = 1e-5
CENTER_REGION_SCALE = 0.2


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    def __init__(self, rng, c_in, c_out, k=3, stride=1, dilation=1, dtype=np.float64):
        fan_in = c_in * k * k
        bound = np.sqrt(2.0 / fan_in)
        self.weight = ad.parameter(rng.normal(0.0, bound, size=(c_out, c_in, k, k)).astype(dtype))
        self.bias = ad.parameter(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.dilation = dilation
        self.pad = dilation * (k - 1) // 2

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         dilation=self.dilation, pad=self.pad)

    def named(self, prefix):
        return [(f"{prefix}.w", self.weight), (f"{prefix}.b", self.bias)]


class GroupNorm:
    """Per-group normalization; batch-independent, identical in train/eval."""

    def __init__(self, channels, dtype=np.float64, zero_init=False, groups=GN_GROUPS):
        self.groups = groups if channels % groups == 0 else 1
        init = 0.0 if zero_init else 1.0
        self.gamma = ad.parameter(np.full(channels, init, dtype=dtype))
        self.beta = ad.parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = ad.reshape(x, (b, g, (c // g) * h * w))
        mu = ad.tmean(xg, axis=2, keepdims=True)
        centered = xg - mu
        var = ad.tmean(ad.mul(centered, centered), axis=2, keepdims=True)
        normed = ad.mul(centered, ad.power(var + GN_EPS, -0.5))
        normed = ad.reshape(normed, (b, c, h, w))
        gamma = ad.reshape(self.gamma, (1, c, 1, 1))
        beta = ad.reshape(self.beta, (1, c, 1, 1))
        return ad.add(ad.mul(normed, gamma), beta)

    def named(self, prefix):
        return [(f"{prefix}.g", self.gamma), (f"{prefix}.beta", self.beta)]


class ConvNormRelu:
    def __init__(self, rng, c_in, c_out, k=3, stride=1, dtype=np.float64):
        self.conv = Conv(rng, c_in, c_out, k=k, stride=stride, dtype=dtype)
        self.norm = GroupNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return ad.relu(self.norm(self.conv(x)))

    def named(self, prefix):
        return self.conv.named(f"{prefix}.conv") + self.norm.named(f"{prefix}.norm")


class ResBlock:
    """Two 3x3 convs with a zero-initialized final norm, so the block starts
    as the identity."""

    def __init__(self, rng, channels, dtype=np.float64):
        self.conv1 = Conv(rng, channels, channels, dtype=dtype)
        self.norm1 = GroupNorm(channels, dtype=dtype)
        self.conv2 = Conv(rng, channels, channels, dtype=dtype)
        self.norm2 = GroupNorm(channels, dtype=dtype, zero_init=True)

    def __call__(self, x):
        y = ad.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return ad.relu(ad.add(x, y))

    def named(self, prefix):
        return (self.conv1.named(f"{prefix}.c1") + self.norm1.named(f"{prefix}.n1")
                + self.conv2.named(f"{prefix}.c2") + self.norm2.named(f"{prefix}.n2"))


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

@dataclass
class FeaturePyramid:
    p2: Tensor  # stride 4
    p3: Tensor  # stride 8
    p4: Tensor  # stride 16


@dataclass
class SegOutputs:
    scores: Tensor        # (B, S_r, S_c) plane-ness probabilities
    kernels: Tensor       # (B, E, S_r, S_c) dynamic 1x1 mask kernels
    mask_feature: Tensor  # (B, E, H/4, W/4), post-merge
    score_logits: Tensor  # pre-sigmoid scores, used by the focal loss


@dataclass
class DepthOutputs:
    depth: Tensor               # (B, H, W), meters, strictly positive
    aggregated_feature: Tensor  # (B, 64, H/4, W/4) feature feeding the depth head


@dataclass
class InstancePrediction:
    mask: np.ndarray  # (H/4, W/4) soft mask in [0, 1]
    score: float
    box: tuple        # (r0, c0, r1, c1) full-resolution, half-open


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class XPDNet:
    """Shared backbone + segmentation and depth branches + dual distillation."""

    def __init__(self, variant: str = "xpd", seed: int = 0, dtype=np.float64):
        if variant not in ("none", "pad_net", "xpd"):
            raise ConfigurationError(f"unknown variant {variant!r}")
        self.variant = variant
        self.dtype = dtype
        rng = np.random.default_rng([int(seed), 0xA11CE])
        c2, c3, c4 = PYRAMID_CHANNELS

        self.stem = ConvNormRelu(rng, 3, 32, stride=2, dtype=dtype)
        self.down2 = ConvNormRelu(rng, 32, c2, stride=2, dtype=dtype)
        self.block2 = ResBlock(rng, c2, dtype=dtype)
        self.down3 = ConvNormRelu(rng, c2, c3, stride=2, dtype=dtype)
        self.block3 = ResBlock(rng, c3, dtype=dtype)
        self.down4 = ConvNormRelu(rng, c3, c4, stride=2, dtype=dtype)
        self.block4 = ResBlock(rng, c4, dtype=dtype)

        # segmentation head towers on P4
        self.cat_tower = [ConvNormRelu(rng, c4, HEAD_CHANNELS, dtype=dtype),
                          ConvNormRelu(rng, HEAD_CHANNELS, HEAD_CHANNELS, dtype=dtype)]
        self.cat_out = Conv(rng, HEAD_CHANNELS, 1, k=1, dtype=dtype)
        self.kern_tower = [ConvNormRelu(rng, c4, HEAD_CHANNELS, dtype=dtype),
                           ConvNormRelu(rng, HEAD_CHANNELS, HEAD_CHANNELS, dtype=dtype)]
        self.kern_out = Conv(rng, HEAD_CHANNELS, MASK_CHANNELS, k=1, dtype=dtype)

        # unified mask feature: aligned pyramid sum then two 3x3 convs -> E
        self.mask_align2 = Conv(rng, c2, HEAD_CHANNELS, k=1, dtype=dtype)
        self.mask_align3 = Conv(rng, c3, HEAD_CHANNELS, k=1, dtype=dtype)
        self.mask_align4 = Conv(rng, c4, HEAD_CHANNELS, k=1, dtype=dtype)
        self.mask_conv1 = ConvNormRelu(rng, HEAD_CHANNELS, HEAD_CHANNELS, dtype=dtype)
        self.mask_conv2 = Conv(rng, HEAD_CHANNELS, MASK_CHANNELS, dtype=dtype)

        # depth decoder: top-down with 1x1 lateral sums
        self.lat4 = Conv(rng, c4, HEAD_CHANNELS, k=1, dtype=dtype)
        self.lat3 = Conv(rng, c3, HEAD_CHANNELS, k=1, dtype=dtype)
        self.lat2 = Conv(rng, c2, HEAD_CHANNELS, k=1, dtype=dtype)
        self.dec3 = ConvNormRelu(rng, HEAD_CHANNELS, HEAD_CHANNELS, dtype=dtype)
        self.dec2 = ConvNormRelu(rng, HEAD_CHANNELS, HEAD_CHANNELS, dtype=dtype)
        self.depth_out = Conv(rng, HEAD_CHANNELS, 1, dtype=dtype)

        self.distill_s2d = DistillationParams.create(variant, MASK_CHANNELS, HEAD_CHANNELS,
                                                     rng=rng, dtype=dtype)
        self.distill_d2s = DistillationParams.create(variant, HEAD_CHANNELS, MASK_CHANNELS,
                                                     rng=rng, dtype=dtype)

    # -- parameter registry --------------------------------------------------
    def named_parameters(self):
        named = []
        named += self.stem.named("stem")
        named += self.down2.named("down2") + self.block2.named("block2")
        named += self.down3.named("down3") + self.block3.named("block3")
        named += self.down4.named("down4") + self.block4.named("block4")
        for i, m in enumerate(self.cat_tower):
            named += m.named(f"cat{i}")
        named += self.cat_out.named("cat_out")
        for i, m in enumerate(self.kern_tower):
            named += m.named(f"kern{i}")
        named += self.kern_out.named("kern_out")
        named += self.mask_align2.named("malign2") + self.mask_align3.named("malign3")
        named += self.mask_align4.named("malign4")
        named += self.mask_conv1.named("mconv1") + self.mask_conv2.named("mconv2")
        named += self.lat4.named("lat4") + self.lat3.named("lat3") + self.lat2.named("lat2")
        named += self.dec3.named("dec3") + self.dec2.named("dec2")
        named += self.depth_out.named("depth_out")
        named += self.distill_s2d.named_parameters("s2d")
        named += self.distill_d2s.named_parameters("d2s")
        return named

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def seg_parameters(self):
        """Parameters of the segmentation branch only (no backbone/depth)."""
        keep = ("cat", "kern", "malign", "mconv", "d2s")
        return [t for n, t in self.named_parameters() if n.startswith(keep)]

    def depth_parameters(self):
        keep = ("lat", "dec", "depth_out", "s2d")
        return [t for n, t in self.named_parameters() if n.startswith(keep)]

    def architecture(self) -> dict:
        return {
            "format_version": 1,
            "variant": self.variant,
            "pyramid_channels": list(PYRAMID_CHANNELS),
            "mask_channels": MASK_CHANNELS,
            "head_channels": HEAD_CHANNELS,
            "gn_groups": GN_GROUPS,
            "param_shapes": {n: list(t.shape) for n, t in self.named_parameters()},
        }

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- forward passes -------------------------------------------------------
    def backbone_forward(self, rgb) -> FeaturePyramid:
        x = rgb if isinstance(rgb, Tensor) else ad.constant(np.asarray(rgb, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone expects (B, 3, H, W), got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"input dims {x.shape[2:]} must be divisible by 16")
        x = self.stem(x)
        p2 = self.block2(self.down2(x))
        p3 = self.block3(self.down3(p2))
        p4 = self.block4(self.down4(p3))
        return FeaturePyramid(p2=p2, p3=p3, p4=p4)

    def mask_feature_forward(self, pyr: FeaturePyramid) -> Tensor:
        """Pre-merge unified mask feature (stride 4, E channels)."""
        h, w = pyr.p2.shape[2], pyr.p2.shape[3]
        fused = ad.add(self.mask_align2(pyr.p2),
                       ad.add(ad.resize_bilinear(self.mask_align3(pyr.p3), (h, w)),
                              ad.resize_bilinear(self.mask_align4(pyr.p4), (h, w))))
        return self.mask_conv2(self.mask_conv1(fused))

    def aggregated_feature_forward(self, pyr: FeaturePyramid) -> Tensor:
        """Pre-merge depth aggregated feature (stride 4, 64 channels)."""
        d4 = self.lat4(pyr.p4)
        h3, w3 = pyr.p3.shape[2], pyr.p3.shape[3]
        d3 = self.dec3(ad.add(ad.resize_bilinear(d4, (h3, w3)), self.lat3(pyr.p3)))
        h2, w2 = pyr.p2.shape[2], pyr.p2.shape[3]
        return self.dec2(ad.add(ad.resize_bilinear(d3, (h2, w2)), self.lat2(pyr.p2)))

    def seg_head_forward(self, pyr: FeaturePyramid, distilled_mask_feature: Tensor) -> SegOutputs:
        """Category + kernel towers on P4; the mask feature is the post-merge one."""
        c = pyr.p4
        for m in self.cat_tower:
            c = m(c)
        logits = self.cat_out(c)
        k = pyr.p4
        for m in self.kern_tower:
            k = m(k)
        kernels = self.kern_out(k)
        b, _, sr, sc = logits.shape
        logits2 = ad.reshape(logits, (b, sr, sc))
        return SegOutputs(scores=ad.sigmoid(logits2), kernels=kernels,
                          mask_feature=distilled_mask_feature, score_logits=logits2)

    def depth_head(self, aggregated: Tensor) -> Tensor:
        b, _, h, w = aggregated.shape
        logits = self.depth_out(aggregated)
        up = ad.resize_bilinear(logits, (4 * h, 4 * w))
        depth = ad.softplus(up) + DEPTH_FLOOR
        return ad.reshape(depth, (b, 4 * h, 4 * w))

    def depth_decoder_forward(self, pyr: FeaturePyramid, distill_hook=None) -> DepthOutputs:
        """Decoder + head; ``distill_hook`` maps the pre-merge aggregated
        feature to its post-merge version (identity when absent)."""
        agg = self.aggregated_feature_forward(pyr)
        if distill_hook is not None:
            agg = distill_hook(agg)
        return DepthOutputs(depth=self.depth_head(agg), aggregated_feature=agg)

    def forward(self, rgb):
        """Full pass: backbone -> pre-merge features -> dual distillation -> heads."""
        pyr = self.backbone_forward(rgb)
        mask_raw = self.mask_feature_forward(pyr)
        agg_raw = self.aggregated_feature_forward(pyr)
        mask_merged, agg_merged = dual_distill(mask_raw, agg_raw,
                                               self.distill_s2d, self.distill_d2s)
        seg = self.seg_head_forward(pyr, mask_merged)
        depth = DepthOutputs(depth=self.depth_head(agg_merged), aggregated_feature=agg_merged)
        return seg, depth


def xpdnet_forward(net: XPDNet, rgb):
    """Functional alias for the composed forward pass."""
    return net.forward(rgb)


# ---------------------------------------------------------------------------
# instance assembly
# ---------------------------------------------------------------------------

def assemble_cell_masks(seg: SegOutputs, batch_index: int, cells: np.ndarray) -> Tensor:
    """Soft masks for the given grid cells of one image, on the tape.

    ``cells`` is an (P, 2) array of (row, col) grid coordinates; the result
    is a (P, H/4, W/4) tensor of sigmoid dynamic-convolution masks.
    """
    b, e, sr, sc = seg.kernels.shape
    _, _, h, w = seg.mask_feature.shape
    flat_idx = cells[:, 0] * sc + cells[:, 1]
    kern = ad.reshape(ad.gather(seg.kernels, batch_index), (e, sr * sc))
    kern = ad.gather(kern, (slice(None), flat_idx))          # (E, P)
    feat = ad.reshape(ad.gather(seg.mask_feature, batch_index), (e, h * w))
    logits = ad.matmul(ad.permute(kern, (1, 0)), feat)       # (P, H*W)
    return ad.reshape(ad.sigmoid(logits), (len(cells), h, w))


def _mask_iou_binary(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def mask_box(binary_mask: np.ndarray, scale: int = 4):
    """Tight half-open box of a binary mask, scaled to full resolution."""
    rows, cols = np.nonzero(binary_mask)
    if rows.size == 0:
        return None
    return (int(rows.min()) * scale, int(cols.min()) * scale,
            (int(rows.max()) + 1) * scale, (int(cols.max()) + 1) * scale)


def assemble_instances(seg: SegOutputs, score_thresh: float, nms_iou: float,
                       batch_index: int = 0) -> list[InstancePrediction]:
    """Decode one image's grid into instances with greedy mask NMS.

    Cells at or above ``score_thresh`` are assembled into soft masks; greedy
    NMS in descending score order drops any candidate whose binarized-mask
    IoU with a kept one exceeds ``nms_iou``. Candidates whose binarized mask
    is empty are dropped. Idempotent over its own output.
    """
    if not (0.0 < score_thresh < 1.0) or not (0.0 < nms_iou < 1.0):
        raise ConfigurationError("score_thresh and nms_iou must lie in (0, 1)")
    scores = seg.scores.data[batch_index]
    kernels = seg.kernels.data[batch_index]
    feat = seg.mask_feature.data[batch_index]
    e, h, w = feat.shape
    rows, cols = np.nonzero(scores >= score_thresh)
    if rows.size == 0:
        return []
    cell_scores = scores[rows, cols]
    order = np.lexsort((rows * scores.shape[1] + cols, -cell_scores))
    kern = kernels[:, rows, cols].T                     # (P, E)
    logits = kern @ feat.reshape(e, h * w)
    masks = (1.0 / (1.0 + np.exp(-logits))).reshape(-1, h, w)

    kept: list[InstancePrediction] = []
    kept_bin: list[np.ndarray] = []
    for idx in order:
        soft = masks[idx]
        binary = soft >= 0.5
        box = mask_box(binary)
        if box is None:
            continue
        if any(_mask_iou_binary(binary, kb) > nms_iou for kb in kept_bin):
            continue
        kept.append(InstancePrediction(mask=soft, score=float(cell_scores[idx]), box=box))
        kept_bin.append(binary)
    return kept


# ---------------------------------------------------------------------------
# ground-truth cell assignment
# ---------------------------------------------------------------------------

def assign_instances_to_cells(labels: np.ndarray, grid_shape: tuple[int, int],
                              cell_stride: int = 16):
    """Map instances to the grid cells whose centers fall in their center region.

    The center region is centroid +- CENTER_REGION_SCALE * bbox extent per
    axis. An instance whose region catches no cell center is assigned the
    cell containing its centroid, so every instance has at least one
    positive cell. Conflicts go to the smaller instance.
    """
    sr, sc = grid_shape
    ids = np.unique(labels)
    ids = ids[ids > 0]
    cell_inst = np.full((sr, sc), -1, dtype=np.int64)
    cell_area = np.full((sr, sc), np.inf)
    centers_r = (np.arange(sr) + 0.5) * cell_stride
    centers_c = (np.arange(sc) + 0.5) * cell_stride
    centroids = {}
    for k in ids:
        rr, cc = np.nonzero(labels == k)
        area = rr.size
        cr, ccen = rr.mean(), cc.mean()
        centroids[int(k)] = (cr, ccen)
        dh = CENTER_REGION_SCALE * (rr.max() - rr.min() + 1)
        dw = CENTER_REGION_SCALE * (cc.max() - cc.min() + 1)
        region = np.outer(np.abs(centers_r - cr) <= dh, np.abs(centers_c - ccen) <= dw)
        claim = region & (area < cell_area)
        cell_inst[claim] = k
        cell_area[claim] = area
    for k in ids:
        if not np.any(cell_inst == k):
            cr, ccen = centroids[int(k)]
            cell_inst[min(int(cr // cell_stride), sr - 1),
                      min(int(ccen // cell_stride), sc - 1)] = k
    return cell_inst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: XPDNet, path):
    arch = net.architecture()
    manifest = {
        "format_version": 1,
        "variant": net.variant,
        "architecture_hash": net.architecture_hash(),
        "channels": {"pyramid": arch["pyramid_channels"],
                     "mask": arch["mask_channels"],
                     "head": arch["head_channels"]},
    }
    arrays = {f"param/{n}": t.data for n, t in net.named_parameters()}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def read_manifest(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__manifest__"]).decode())


def load_checkpoint(path, net: XPDNet | None = None, dtype=None) -> XPDNet:
    """Load parameters into ``net`` (architecture hash must match) or build a
    fresh network from the stored manifest."""
    manifest = read_manifest(path)
    if net is None:
        net = XPDNet(variant=manifest["variant"], seed=0,
                     dtype=dtype or np.float64)
    if net.architecture_hash() != manifest["architecture_hash"]:
        raise CheckpointMismatchError(
            f"checkpoint hash {manifest['architecture_hash']} != network hash {net.architecture_hash()}")
    with np.load(path) as z:
        for n, t in net.named_parameters():
            t.data = z[f"param/{n}"].astype(net.dtype)
    return net
