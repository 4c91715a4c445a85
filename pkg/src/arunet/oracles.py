"""Brute-force reference implementations used only for verification.

Nothing here is shared with the engine's forward or backward paths; the
point is an independent second route to the same numbers. All loops run in
plain Python over 64-bit floats with a fixed summation order (kernel v, h,
w, then input channel).
"""

from __future__ import annotations

import numpy as np


def same_padding(extent: int, kernel: int, dilation: int, stride: int) -> tuple[int, int, int]:
    """(output extent, leading pad, trailing pad); extra voxel trails when odd."""
    effective = (kernel - 1) * dilation + 1
    out = -(-extent // stride)
    total = max((out - 1) * stride + effective - extent, 0)
    lead = total // 2
    return out, lead, total - lead


def conv3d_reference(x: np.ndarray, w: np.ndarray, bias: np.ndarray,
                     dilation: int = 1, stride: int = 1,
                     padding: str = "same") -> np.ndarray:
    """Direct nested-loop dilated convolution.

    x: (N, V, H, W, Cin), w: (kV, kH, kW, Cin, Cout), bias: (Cout,).
    Out-of-range taps read zero, which is exactly zero padding.
    """
    n_, v_, h_, w_dim, cin = x.shape
    kv, kh, kw, wcin, cout = w.shape
    assert wcin == cin
    geom = []
    for extent, k in ((v_, kv), (h_, kh), (w_dim, kw)):
        if padding == "same":
            out, lead, _ = same_padding(extent, k, dilation, stride)
        else:
            effective = (k - 1) * dilation + 1
            out, lead = (extent - effective) // stride + 1, 0
        geom.append((out, lead))
    (vo, pv), (ho, ph), (wo, pw) = geom
    y = np.zeros((n_, vo, ho, wo, cout), dtype=np.float64)
    for n in range(n_):
        for ov in range(vo):
            for oh in range(ho):
                for ow in range(wo):
                    for co in range(cout):
                        acc = float(bias[co])
                        for a in range(kv):
                            iv = ov * stride + a * dilation - pv
                            if iv < 0 or iv >= v_:
                                continue
                            for b in range(kh):
                                ih = oh * stride + b * dilation - ph
                                if ih < 0 or ih >= h_:
                                    continue
                                for c in range(kw):
                                    iw = ow * stride + c * dilation - pw
                                    if iw < 0 or iw >= w_dim:
                                        continue
                                    for ci in range(cin):
                                        acc += float(x[n, iv, ih, iw, ci]) * \
                                               float(w[a, b, c, ci, co])
                        y[n, ov, oh, ow, co] = acc
    return y


def inflate_kernel(w: np.ndarray, dilation: int) -> np.ndarray:
    """Insert dilation-1 zeros between taps, turning a dilated kernel dense."""
    kv, kh, kw, cin, cout = w.shape
    ext = lambda k: (k - 1) * dilation + 1
    dense = np.zeros((ext(kv), ext(kh), ext(kw), cin, cout), dtype=w.dtype)
    dense[::dilation, ::dilation, ::dilation] = w
    return dense


def maxpool2_reference(x: np.ndarray) -> np.ndarray:
    """Window-scan 2x2x2 stride-2 max pool over (N, V, H, W, C)."""
    n_, v_, h_, w_, c_ = x.shape
    y = np.empty((n_, v_ // 2, h_ // 2, w_ // 2, c_), dtype=x.dtype)
    for n in range(n_):
        for ov in range(v_ // 2):
            for oh in range(h_ // 2):
                for ow in range(w_ // 2):
                    block = x[n, 2 * ov:2 * ov + 2, 2 * oh:2 * oh + 2,
                              2 * ow:2 * ow + 2, :]
                    y[n, ov, oh, ow, :] = block.reshape(8, c_).max(axis=0)
    return y


def confusion_reference(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    """Set-based confusion counts (TP, FP, TN, FN) over flat voxel indices."""
    p = {int(i) for i in np.flatnonzero(pred.ravel() != 0)}
    g = {int(i) for i in np.flatnonzero(gt.ravel() != 0)}
    total = pred.size
    tp = len(p & g)
    fp = len(p - g)
    fn = len(g - p)
    tn = total - tp - fp - fn
    return tp, fp, tn, fn


def dice_reference(pred: np.ndarray, gt: np.ndarray) -> float:
    """Set-overlap dice 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    tp, fp, _, fn = confusion_reference(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def window_starts_reference(depth: int, window: int, stride: int) -> list[int]:
    """Enumerate slab starts by simulation: march by stride, anchor the tail."""
    starts = []
    s = 0
    while s + window <= depth:
        starts.append(s)
        s += stride
    tail = depth - window
    if starts[-1] != tail:
        starts.append(tail)
    return starts
