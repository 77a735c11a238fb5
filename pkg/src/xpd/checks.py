"""The named finite-difference suite behind the ``gradcheck`` command.

Every differentiable subsystem gets one check at float64 on fixed seeds:
the distillation operators, both head stacks, the boundary losses, the
composite objective, and an end-to-end pass over a small synthetic scene.
Module-level checks run at rtol 1e-4; the end-to-end check at 1e-3.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses as lmod
from .distill import DistillationParams, attention_map, distill_message, dual_distill, merge_message
from .gradcheck import fd_check
from .net import XPDNet, assemble_cell_masks, xpdnet_forward

E2E_RTOL = 1e-3
MODULE_RTOL = 1e-4


def _proj(rng, shape):
    return ad.constant(rng.normal(size=shape))


def _params_by_name(net: XPDNet, patterns):
    chosen = []
    for name, t in net.named_parameters():
        if any(p in name for p in patterns):
            chosen.append(t)
    return chosen


def check_attention_map(corrupt=False):
    rng = np.random.default_rng(101)
    params = DistillationParams.create("xpd", 4, 8, rng=rng)
    f = ad.parameter(rng.normal(size=(1, 4, 6, 7)))
    proj = _proj(rng, (1, 8, 6, 7))
    inputs = [f, params.attention_weight, params.attention_bias]

    def fn():
        return ad.tsum(ad.mul(attention_map(f, params), proj))

    return fd_check(fn, inputs, rtol=MODULE_RTOL, rng=np.random.default_rng(1), corrupt=corrupt)


def _check_message(variant, seed, corrupt):
    rng = np.random.default_rng(seed)
    params = DistillationParams.create(variant, 4, 8, rng=rng)
    f = ad.parameter(rng.normal(size=(1, 4, 6, 7)))
    proj = _proj(rng, (1, 8, 6, 7))
    inputs = [f, params.attention_weight, params.attention_bias] + list(params.feature_weights) \
        + list(params.feature_biases)

    def fn():
        return ad.tsum(ad.mul(distill_message(f, params), proj))

    return fd_check(fn, inputs, rtol=MODULE_RTOL, rng=np.random.default_rng(seed + 1),
                    corrupt=corrupt)


def check_message_xpd(corrupt=False):
    return _check_message("xpd", 202, corrupt)


def check_message_pad_net(corrupt=False):
    return _check_message("pad_net", 303, corrupt)


def check_merge(corrupt=False):
    rng = np.random.default_rng(404)
    a = ad.parameter(rng.normal(size=(1, 3, 5, 5)))
    b = ad.parameter(rng.normal(size=(1, 3, 5, 5)))
    proj = _proj(rng, (1, 3, 5, 5))

    def fn():
        return ad.tsum(ad.mul(merge_message(a, b), proj))

    return fd_check(fn, [a, b], rtol=MODULE_RTOL, rng=np.random.default_rng(405), corrupt=corrupt)


def check_dual_distill(corrupt=False):
    rng = np.random.default_rng(505)
    p_s2d = DistillationParams.create("xpd", 4, 8, rng=rng)
    p_d2s = DistillationParams.create("xpd", 8, 4, rng=rng)
    seg = ad.parameter(rng.normal(size=(1, 4, 6, 5)))
    dep = ad.parameter(rng.normal(size=(1, 8, 6, 5)))
    proj_s = _proj(rng, (1, 4, 6, 5))
    proj_d = _proj(rng, (1, 8, 6, 5))
    inputs = [seg, dep] + p_s2d.parameters() + p_d2s.parameters()

    def fn():
        s, d = dual_distill(seg, dep, p_s2d, p_d2s)
        return ad.add(ad.tsum(ad.mul(s, proj_s)), ad.tsum(ad.mul(d, proj_d)))

    return fd_check(fn, inputs, rtol=MODULE_RTOL, max_coords=10,
                    rng=np.random.default_rng(506), corrupt=corrupt)


def _tiny_net_and_input(seed=7, variant="xpd"):
    net = XPDNet(variant=variant, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rgb = ad.parameter(rng.uniform(0.0, 1.0, size=(1, 3, 32, 32)))
    return net, rgb, rng


def check_seg_head(corrupt=False):
    net, rgb, rng = _tiny_net_and_input(seed=606)
    proj_s = _proj(rng, (1, 2, 2))
    proj_k = _proj(rng, (1, 32, 2, 2))
    proj_m = _proj(rng, (1, 32, 8, 8))
    params = _params_by_name(net, ["stem.conv.w", "block2.c1.w", "cat0.conv", "cat_out",
                                   "kern_out.w", "malign2.w", "mconv2", "d2s.attn",
                                   "d2s.feat0", "lat2.w"])

    def fn():
        seg, _ = xpdnet_forward(net, rgb)
        return (ad.tsum(ad.mul(seg.scores, proj_s))
                + ad.tsum(ad.mul(seg.kernels, proj_k))
                + ad.tsum(ad.mul(seg.mask_feature, proj_m)))

    return fd_check(fn, [rgb] + params, rtol=MODULE_RTOL, max_coords=6,
                    rng=np.random.default_rng(607), corrupt=corrupt)


def check_depth_decoder(corrupt=False):
    net, rgb, rng = _tiny_net_and_input(seed=707)
    proj_d = _proj(rng, (1, 32, 32))
    proj_a = _proj(rng, (1, 64, 8, 8))
    params = _params_by_name(net, ["lat4.w", "lat3.w", "dec3.conv", "dec2.norm",
                                   "depth_out", "s2d.attn", "s2d.feat2", "down4.conv.w"])

    def fn():
        _, dep = xpdnet_forward(net, rgb)
        return (ad.tsum(ad.mul(dep.depth, proj_d))
                + ad.tsum(ad.mul(dep.aggregated_feature, proj_a)))

    return fd_check(fn, [rgb] + params, rtol=MODULE_RTOL, max_coords=6,
                    rng=np.random.default_rng(708), corrupt=corrupt)


def _square_gt(h=10, w=11):
    gt = np.zeros((h, w))
    gt[2:7, 3:9] = 1.0
    return gt


def check_vanilla_boundary(corrupt=False):
    rng = np.random.default_rng(808)
    gt = _square_gt()
    logits = ad.parameter(rng.normal(scale=1.5, size=gt.shape))

    def fn():
        return lmod.vanilla_boundary_loss(gt, ad.sigmoid(logits))

    return fd_check(fn, [logits], rtol=MODULE_RTOL, max_coords=40,
                    rng=np.random.default_rng(809), corrupt=corrupt)


def check_dgbpl(corrupt=False):
    rng = np.random.default_rng(909)
    gt = _square_gt()
    depth = np.full(gt.shape, 2.0)
    depth[:, 6:] = 3.2  # geometric edge crossing the instance
    logits = ad.parameter(rng.normal(scale=1.5, size=gt.shape))

    def fn():
        return lmod.dgbpl(gt, ad.sigmoid(logits), depth)

    return fd_check(fn, [logits], rtol=MODULE_RTOL, max_coords=40,
                    rng=np.random.default_rng(910), corrupt=corrupt)


def check_composite(corrupt=False):
    rng = np.random.default_rng(111)
    p = ad.parameter(rng.normal(size=(12,)))
    weights = lmod.LossWeights(focal=0.7, dice=1.3, rmse=0.9, boundary=1.1, constraints=0.5)
    k = ad.constant(rng.normal(size=(12,)))

    def fn():
        focal = ad.tmean(ad.mul(p, p))
        dice = ad.tmean(ad.sigmoid(p))
        rmse = ad.sqrt(ad.tmean(ad.mul(p, p)) + 1.0)
        boundary = ad.tmean(ad.mul(ad.mul(p, p), ad.mul(p, p)))
        constraints = ad.tmean(ad.mul(p, k))
        total, _ = lmod.composite_loss(focal, dice, rmse, boundary, constraints, weights)
        return total

    return fd_check(fn, [p], rtol=MODULE_RTOL, rng=np.random.default_rng(112), corrupt=corrupt)


def check_end_to_end(corrupt=False):
    """Composite training loss through the whole network on a 32x32 scene.

    A short deterministic warmup moves the dynamic masks away from the
    symmetric 0.5 state where the boundary map's |Laplacian| sits on its
    kink; the check itself then probes a representative parameter slice.
    """
    from .data import plain_sample, prepare_scene
    from .scene import SceneConfig, corrupt_boundaries, generate_scene

    cfg = SceneConfig(num_planes=(2, 4), depth_range=(1.5, 5.0), image_size=(32, 32))
    scene = generate_scene(20, cfg)
    noisy = corrupt_boundaries(scene.labels, 2, seed=3)
    prep = prepare_scene(scene, noisy, need_weights=True, dtype=np.float64)
    x, targets = plain_sample(prep)

    net = XPDNet(variant="xpd", seed=808, dtype=np.float64)
    rgb = ad.parameter(x[None].astype(np.float64))
    weights = lmod.LossWeights()

    def fn():
        seg, depth_out = xpdnet_forward(net, rgb)
        pred_masks = [assemble_cell_masks(seg, 0, targets.cells)]
        focal, dice, rmse = lmod.base_task_losses(seg, depth_out, [targets], pred_masks)
        boundary = lmod.boundary_losses(seg, [targets], lmod.BOUNDARY_DGBPL, pred_masks)
        total, _ = lmod.composite_loss(focal, dice, rmse, boundary, 0.0, weights)
        return total

    opt = ad.Adam(net.parameters(), lr=3e-3)
    for _ in range(8):
        opt.zero_grad()
        fn().backward()
        opt.step()
    # nudge every parameter off exact zero so no pre-activation sits exactly
    # on a ReLU kink, where the one-sided FD disagrees with any subgradient
    jitter = np.random.default_rng(77)
    for p in net.parameters():
        p.data += jitter.uniform(-1e-3, 1e-3, size=p.data.shape)

    params = _params_by_name(net, ["stem.conv.w", "block3.n2.g", "down2.conv.w",
                                   "cat_out", "kern_out.w", "mconv2.w", "lat3.w",
                                   "dec2.conv.w", "depth_out", "s2d.attn.w",
                                   "d2s.feat1.w", "block4.n2.g"])
    return fd_check(fn, [rgb] + params, rtol=E2E_RTOL, h=1e-6, max_coords=5,
                    rng=np.random.default_rng(113), corrupt=corrupt)


def named_checks():
    return [
        ("attention_map", check_attention_map),
        ("distill_message[xpd]", check_message_xpd),
        ("distill_message[pad_net]", check_message_pad_net),
        ("merge_message", check_merge),
        ("dual_distill", check_dual_distill),
        ("seg_head", check_seg_head),
        ("depth_decoder", check_depth_decoder),
        ("vanilla_boundary_loss", check_vanilla_boundary),
        ("dgbpl", check_dgbpl),
        ("composite_loss", check_composite),
        ("end_to_end_32px", check_end_to_end),
    ]
