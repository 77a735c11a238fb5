"""Attention-gated cross-task message passing between the two branches.

A message from a secondary-task feature F is ``A * stack(F)`` where
``A = sigmoid(conv1x1(F))`` gates element-wise and ``stack`` is either a
bank of four dilated 3x3 convolutions whose outputs are concatenated
(variant ``xpd``), a single 3x3 convolution (variant ``pad_net``), or
nothing at all (variant ``none``). Messages are merged into the primary
branch by element-wise addition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ShapeError

VARIANTS = ("none", "pad_net", "xpd")
DILATION_RATES = (1, 3, 6, 12)


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


@dataclass
class DistillationParams:
    """Learnable state of one directed distillation module (src -> dst)."""

    variant: str
    c_src: int
    c_dst: int
    attention_weight: Tensor | None = None
    attention_bias: Tensor | None = None
    feature_weights: list = field(default_factory=list)
    feature_biases: list = field(default_factory=list)

    @staticmethod
    def create(variant: str, c_src: int, c_dst: int, rng=None, dtype=np.float64):
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown distillation variant {variant!r}")
        params = DistillationParams(variant=variant, c_src=c_src, c_dst=c_dst)
        if variant == "none":
            return params
        rng = rng or np.random.default_rng(0)
        params.attention_weight = _fan_in_uniform(rng, (c_dst, c_src, 1, 1), c_src, dtype)
        params.attention_bias = ad.parameter(np.zeros(c_dst, dtype=dtype))
        if variant == "pad_net":
            params.feature_weights = [_fan_in_uniform(rng, (c_dst, c_src, 3, 3), c_src * 9, dtype)]
            params.feature_biases = [ad.parameter(np.zeros(c_dst, dtype=dtype))]
        else:
            if c_dst % 4 != 0:
                raise ConfigurationError(f"xpd variant needs c_dst divisible by 4, got {c_dst}")
            c_branch = c_dst // 4
            params.feature_weights = [
                _fan_in_uniform(rng, (c_branch, c_src, 3, 3), c_src * 9, dtype)
                for _ in DILATION_RATES
            ]
            params.feature_biases = [
                ad.parameter(np.zeros(c_branch, dtype=dtype)) for _ in DILATION_RATES
            ]
        return params

    def parameters(self):
        out = []
        if self.attention_weight is not None:
            out += [self.attention_weight, self.attention_bias]
        out += list(self.feature_weights) + list(self.feature_biases)
        return out

    def named_parameters(self, prefix: str):
        names = []
        if self.attention_weight is not None:
            names += [(f"{prefix}.attn.w", self.attention_weight),
                      (f"{prefix}.attn.b", self.attention_bias)]
        for i, (w, b) in enumerate(zip(self.feature_weights, self.feature_biases)):
            names += [(f"{prefix}.feat{i}.w", w), (f"{prefix}.feat{i}.b", b)]
        return names


def _check_feature(f: Tensor, c_src: int, op: str):
    if f.ndim != 4:
        raise ShapeError(f"{op} expects a rank-4 feature block, got shape {f.shape}")
    if f.shape[1] != c_src:
        raise ShapeError(f"{op}: feature has {f.shape[1]} channels, params expect {c_src}")


def attention_map(f: Tensor, params: DistillationParams) -> Tensor:
    """Sigmoid-gated attention A = sigmoid(conv1x1(F)); entries in (0, 1)."""
    if params.variant == "none":
        raise ConfigurationError("variant 'none' has no attention map")
    _check_feature(f, params.c_src, "attention_map")
    logits = ad.conv2d(f, params.attention_weight, params.attention_bias)
    return ad.sigmoid(logits)


def distill_message(f: Tensor, params: DistillationParams) -> Tensor:
    """Message F' = A * stack(F); all-zero block under variant 'none'.

    The xpd stack concatenates four dilated 3x3 convolutions (rates 1/3/6/12,
    zero padding sized to preserve the spatial dims, c_dst/4 channels each);
    pad_net uses a single rate-1 convolution to c_dst channels.
    """
    _check_feature(f, params.c_src, "distill_message")
    if params.variant == "none":
        b, _, h, w = f.shape
        return ad.constant(np.zeros((b, params.c_dst, h, w), dtype=f.dtype))
    a = attention_map(f, params)
    if params.variant == "pad_net":
        stack = ad.conv2d(f, params.feature_weights[0], params.feature_biases[0], pad=1)
    else:
        if params.c_dst % 4 != 0:
            raise ConfigurationError("xpd variant needs c_dst divisible by 4")
        branches = [
            ad.conv2d(f, w, b, stride=1, dilation=rate, pad=rate)
            for rate, w, b in zip(DILATION_RATES, params.feature_weights, params.feature_biases)
        ]
        stack = ad.concat(branches, axis=1)
    return ad.mul(a, stack)


def merge_message(primary: Tensor, message: Tensor) -> Tensor:
    """Element-wise sum; the merge the primary branch sees."""
    if primary.shape != message.shape:
        raise ShapeError(f"merge shape mismatch: {primary.shape} vs {message.shape}")
    return ad.add(primary, message)


def dual_distill(seg_feat: Tensor, depth_feat: Tensor,
                 params_s2d: DistillationParams, params_d2s: DistillationParams):
    """Symmetric exchange: both messages come from the pre-merge inputs.

    seg' = seg + M(depth; d2s) and depth' = depth + M(seg; s2d), computed in
    parallel so swapping (features, params) swaps the outputs. Inputs pass
    through untouched under variant 'none'.
    """
    if seg_feat.shape[2:] != depth_feat.shape[2:]:
        raise ShapeError(f"resolution mismatch: {seg_feat.shape} vs {depth_feat.shape}")
    msg_to_seg = None if params_d2s.variant == "none" else distill_message(depth_feat, params_d2s)
    msg_to_depth = None if params_s2d.variant == "none" else distill_message(seg_feat, params_s2d)
    seg_out = seg_feat if msg_to_seg is None else merge_message(seg_feat, msg_to_seg)
    depth_out = depth_feat if msg_to_depth is None else merge_message(depth_feat, msg_to_depth)
    return seg_out, depth_out
