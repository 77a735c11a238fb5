"""The evaluation stack on hand-built cases.

Average precision, boundary IoU, and depth errors each come with small
closed-form cases that make the conventions concrete (101-point
interpolation, greedy matching, strict delta thresholds).
"""

import numpy as np

from xpd.metrics import (GTInstance, average_precision, boundary_iou, depth_metrics,
                         mask_iou)
from xpd.net import InstancePrediction, mask_box


def pred(mask, score):
    mask = np.asarray(mask, float)
    return InstancePrediction(mask=mask, score=score, box=mask_box(mask >= 0.5))


def gt(mask):
    mask = np.asarray(mask, bool)
    return GTInstance(mask=mask, box=mask_box(mask))


def rect(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w))
    m[r0:r1, c0:c1] = 1.0
    return m


# two 2x4 rectangles offset by two columns share a 2x2 patch
a, b = rect(8, 8, 0, 0, 2, 4), rect(8, 8, 0, 2, 2, 6)
print(f"mask IoU of offset rectangles: {mask_iou(a, b):.4f} (= 1/3)")

# a perfect detection of one of two objects: precision 1 up to recall 0.5
m1, m2 = rect(12, 12, 0, 0, 4, 4), rect(12, 12, 6, 6, 10, 10)
ap50 = average_precision([[pred(m1, 0.9)]], [[gt(m1), gt(m2)]], iou_thresholds=(0.5,))[0]
print(f"AP50 with one of two objects found: {ap50:.5f} (= 51/101)")

# score scale does not matter, only ranks do
scaled = [[pred(m1, 90.0)]]
assert average_precision(scaled, [[gt(m1), gt(m2)]], iou_thresholds=(0.5,))[0] == ap50
print("AP is invariant under monotone score transforms")

# boundary IoU: shift a mask by one column and the boundary sets share half
g2 = np.zeros((2, 10))
g2[:, 2:6] = 1.0
p2 = np.zeros((2, 10))
p2[:, 3:7] = 1.0
print(f"boundary IoU of one-column shift: {boundary_iou([[gt(g2)]], [[pred(p2, 1.0)]]):.4f}"
      f" (= 1/3)")

# depth metrics: a uniform 10% error and the strict 1.25 threshold edge
base = np.full((16, 16), 2.0)
rel, log10, rms, d1, d2, d3 = depth_metrics(1.1 * base, base)
print(f"uniform 1.1x depth: rel={rel:.3f} delta1={d1:.0%}")
rel, _, _, d1, d2, _ = depth_metrics(1.25 * base, base)
print(f"uniform 1.25x depth: delta1={d1:.0%} (strict <), delta2={d2:.0%}")
