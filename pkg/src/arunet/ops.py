"""Differentiable operations recorded onto an autodiff tape.

Each op computes its forward value eagerly with numpy and registers a
backward rule as a closure. Saved state is chosen per rule: convolution
saves its input and re-gathers patches, sigmoid saves its output, relu
saves its sign mask, the normalizers save the normalized map and the
inverse deviation. Convolution runs one matrix product per sample so a
volume's output does not depend on what else shares its batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Node, Parameter, Tape
from .errors import ShapeError
from .tensor import Tensor


def _as_node(tape: Tape, v) -> Node:
    if isinstance(v, Node):
        return v
    if isinstance(v, Parameter):
        return tape.watch(v)
    if isinstance(v, Tensor):
        return tape.constant(v)
    raise ShapeError(f"expected Node, Parameter or Tensor, got {type(v).__name__}")


def _tape_of(*vs) -> Tape:
    for v in vs:
        if isinstance(v, Node):
            return v.tape
    raise ShapeError("at least one operand must already be on a tape")


# ---------------------------------------------------------------------------
# arithmetic, concatenation, reductions


def add(a, b) -> Node:
    """Element-wise sum; shapes must match exactly."""
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    out = T.elementwise_add(a.value, b.value)

    def bwd(gy):
        return gy, gy

    return tape.record("add", out, (a, b), bwd)


def mul(a, b) -> Node:
    """Element-wise product; b may broadcast along its singleton dims."""
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    out = T.elementwise_mul(a.value, b.value)
    a_arr, b_arr = a.value.data, b.value.data
    span = tuple(i for i, (da, db) in enumerate(zip(a_arr.shape, b_arr.shape))
                 if db == 1 and da != 1)

    def bwd(gy):
        ga = gy * b_arr
        gb = gy * a_arr
        if span:
            gb = gb.sum(axis=span, keepdims=True)
        return ga, gb

    return tape.record("mul", out, (a, b), bwd)


def concat_channels(a, b) -> Node:
    """Concatenate along the trailing channel axis; a takes the leading block."""
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    out = T.concat_channels(a.value, b.value)
    split = a.value.dims[-1]

    def bwd(gy):
        return gy[..., :split], gy[..., split:]

    return tape.record("concat", out, (a, b), bwd)


def reduce(x, axes, mode: str) -> Node:
    """Reduce over axes keeping singleton extents; max routes to the first hit."""
    tape = _tape_of(x)
    x = _as_node(tape, x)
    out = T.reduce(x.value, axes, mode)
    axes = tuple(int(a) for a in axes)
    in_dims = x.value.dims
    count = int(np.prod([in_dims[a] for a in axes]))

    if mode in ("sum", "mean"):
        scale = 1.0 if mode == "sum" else 1.0 / count

        def bwd(gy):
            g = np.broadcast_to(gy * np.asarray(scale, dtype=gy.dtype), in_dims)
            return (np.ascontiguousarray(g),)

    else:
        kept = tuple(i for i in range(len(in_dims)) if i not in axes)
        moved_shape = tuple(in_dims[i] for i in kept) + (count,)
        arr = np.moveaxis(x.value.data, axes, range(-len(axes), 0))
        flat = arr.reshape(moved_shape)
        argmax = flat.argmax(-1)  # first maximum: deterministic tie routing

        def bwd(gy):
            gmoved = np.moveaxis(gy, axes, range(-len(axes), 0)).reshape(
                moved_shape[:-1] + (1,))
            g = np.zeros(moved_shape, dtype=gy.dtype)
            np.put_along_axis(g, argmax[..., None], gmoved, -1)
            g = g.reshape(tuple(in_dims[i] for i in kept)
                          + tuple(in_dims[a] for a in axes))
            g = np.moveaxis(g, range(-len(axes), 0), axes)
            return (np.ascontiguousarray(g),)

    return tape.record(f"reduce_{mode}", out, (x,), bwd)


def sum_all(x) -> Node:
    """Sum of every element as a rank-0 scalar."""
    tape = _tape_of(x)
    x = _as_node(tape, x)
    out = Tensor._wrap(np.asarray(x.value.data.sum(), dtype=x.value.dtype))
    dims = x.value.dims

    def bwd(gy):
        return (np.broadcast_to(gy, dims).copy(),)

    return tape.record("sum_all", out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Node:
    """max(0, x); subgradient 0 at the kink."""
    tape = _tape_of(x)
    x = _as_node(tape, x)
    mask = x.value.data > 0
    out = Tensor._wrap(np.where(mask, x.value.data, 0).astype(x.value.dtype))

    def bwd(gy):
        return (gy * mask,)

    return tape.record("relu", out, (x,), bwd)


def _stable_sigmoid(arr: np.ndarray) -> np.ndarray:
    # Branch form avoids overflow in exp for large |x|.
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Node:
    """Logistic function, computed branch-wise for stability."""
    tape = _tape_of(x)
    x = _as_node(tape, x)
    s = _stable_sigmoid(x.value.data)
    out = Tensor._wrap(s)

    def bwd(gy):
        return (gy * s * (1.0 - s),)

    return tape.record("sigmoid", out, (x,), bwd)


# ---------------------------------------------------------------------------
# dense layer and the shared bottleneck MLP


def dense(x, w) -> Node:
    """Channel-mixing linear map on (N,1,1,1,Cin) with weights (Cout, Cin)."""
    tape = _tape_of(x, w)
    x, w = _as_node(tape, x), _as_node(tape, w)
    xd, wd = x.value.data, w.value.data
    if xd.ndim != 5 or xd.shape[1:4] != (1, 1, 1):
        raise ShapeError(f"dense expects (N,1,1,1,C), got {xd.shape}")
    if wd.ndim != 2 or wd.shape[1] != xd.shape[4]:
        raise ShapeError(f"dense weights {wd.shape} do not match C={xd.shape[4]}")
    if xd.dtype != wd.dtype:
        raise ShapeError("dense: mixed precision operands")
    n = xd.shape[0]
    x2 = xd.reshape(n, -1)
    # One product per sample keeps a row's bits independent of its batch.
    y = np.stack([wd @ x2[i] for i in range(n)])
    out = Tensor._wrap(y.reshape(n, 1, 1, 1, wd.shape[0]))

    def bwd(gy):
        g2 = gy.reshape(n, -1)
        gx = np.stack([g2[i] @ wd for i in range(n)]).reshape(xd.shape)
        gw = g2.T @ x2
        return gx, gw

    return tape.record("dense", out, (x, w), bwd)


def shared_mlp(f, w0, w1) -> Node:
    """Bottleneck MLP w1 @ relu(w0 @ f) on a pooled (N,1,1,1,C) descriptor.

    The same w0/w1 instances serve every call, so their gradients sum over
    the average- and max-pooled branches.
    """
    tape = _tape_of(f, w0, w1)
    f, w0, w1 = (_as_node(tape, v) for v in (f, w0, w1))
    return dense(relu(dense(f, w0)), w1)


# ---------------------------------------------------------------------------
# dilated 3D convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 3D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    dilation: int = 1
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.dilation < 1 or self.stride < 1:
            raise ShapeError(f"dilation and stride must be >= 1, got "
                             f"{self.dilation}, {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        if any(k < 1 for k in self.kernel):
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel}")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def effective_kernel(self) -> tuple[int, int, int]:
        return tuple((k - 1) * self.dilation + 1 for k in self.kernel)

    def weight_dims(self) -> tuple[int, ...]:
        return (*self.kernel, self.in_channels, self.out_channels)


def _conv_geometry(spatial: tuple[int, int, int], spec: ConvSpec):
    outs, leads, padded = [], [], []
    for extent, k, eff in zip(spatial, spec.kernel, spec.effective_kernel):
        if spec.padding == "same":
            out = -(-extent // spec.stride)
            total = max((out - 1) * spec.stride + eff - extent, 0)
            lead = total // 2  # odd totals put the extra voxel on the trailing side
        else:
            if extent < eff:
                raise ShapeError(f"kernel (effective {eff}) larger than input "
                                 f"extent {extent} with valid padding")
            out = (extent - eff) // spec.stride + 1
            total, lead = 0, 0
        outs.append(out)
        leads.append(lead)
        padded.append(extent + total)
    return tuple(outs), tuple(leads), tuple(padded)


def _tap_slices(spec: ConvSpec, outs: tuple[int, int, int]):
    """(kv, kh, kw, per-axis slice) for every kernel tap, in fixed order."""
    r, s = spec.dilation, spec.stride
    taps = []
    for a in range(spec.kernel[0]):
        for b in range(spec.kernel[1]):
            for d in range(spec.kernel[2]):
                taps.append((a, b, d, tuple(
                    slice(k * r, k * r + (o - 1) * s + 1, s)
                    for k, o in zip((a, b, d), outs))))
    return taps


def conv3d(x, spec: ConvSpec, w, bias) -> Node:
    """Dilated 3D convolution y[i] = sum_k x[i + r*k] w[k] + bias.

    x: (N, V, H, W, Cin) -> (N, V', H', W', Cout). Same padding pads with
    zeros symmetrically, trailing side first when the total is odd. The
    kernel runs one tap-by-tap matrix product per sample, so a sample's
    output bits do not depend on what shares its batch.
    """
    tape = _tape_of(x, w, bias)
    x, w, bias = _as_node(tape, x), _as_node(tape, w), _as_node(tape, bias)
    xd, wd, bd = x.value.data, w.value.data, bias.value.data
    if xd.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input, got {xd.shape}")
    if xd.shape[4] != spec.in_channels:
        raise ShapeError(f"conv3d: input has {xd.shape[4]} channels, "
                         f"spec expects {spec.in_channels}")
    if wd.shape != spec.weight_dims():
        raise ShapeError(f"conv3d: weight shape {wd.shape} != {spec.weight_dims()}")
    if bd.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d: bias shape {bd.shape} != ({spec.out_channels},)")
    if not (xd.dtype == wd.dtype == bd.dtype):
        raise ShapeError("conv3d: mixed precision operands")

    n = xd.shape[0]
    cin, cout = spec.in_channels, spec.out_channels
    spatial = xd.shape[1:4]
    outs, leads, padded = _conv_geometry(spatial, spec)
    pads = [(0, 0)] + [(l, p - e - l) for l, p, e in zip(leads, padded, spatial)] \
        + [(0, 0)]
    need_pad = any(lo or hi for lo, hi in pads)
    taps = _tap_slices(spec, outs)
    m = outs[0] * outs[1] * outs[2]

    def padded_input():
        return np.pad(xd, pads) if need_pad else xd

    xpad = padded_input()
    y = np.empty((n, m, cout), dtype=xd.dtype)
    for i in range(n):
        acc = np.zeros((m, cout), dtype=xd.dtype)
        for a, b, d, sl in taps:
            window = np.ascontiguousarray(
                xpad[i, sl[0], sl[1], sl[2], :]).reshape(m, cin)
            acc += window @ wd[a, b, d]
        y[i] = acc
    y = y.reshape(n, *outs, cout) + bd
    out = Tensor._wrap(y)
    del xpad  # conv saves its input; the padded copy is rebuilt in backward

    def bwd(gy):
        xpad = padded_input()
        gy2 = gy.reshape(n, m, cout)
        gw = np.zeros_like(wd)
        gpad = np.zeros_like(xpad) if x.requires_grad else None
        for i in range(n):
            gyi = np.ascontiguousarray(gy2[i])
            for a, b, d, sl in taps:
                window = np.ascontiguousarray(
                    xpad[i, sl[0], sl[1], sl[2], :]).reshape(m, cin)
                gw[a, b, d] += window.T @ gyi
                if gpad is not None:
                    gpad[i, sl[0], sl[1], sl[2], :] += (gyi @ wd[a, b, d].T).reshape(
                        outs[0], outs[1], outs[2], cin)
        gb = gy.sum(axis=(0, 1, 2, 3))
        gx = None
        if gpad is not None:
            gx = np.ascontiguousarray(
                gpad[:, leads[0]: leads[0] + spatial[0],
                     leads[1]: leads[1] + spatial[1],
                     leads[2]: leads[2] + spatial[2], :])
        return gx, gw, gb

    return tape.record("conv3d", out, (x, w, bias), bwd)


# ---------------------------------------------------------------------------
# pooling and upsampling


def pool3d(x, mode: str, scope: str) -> Node:
    """3D pooling.

    scope 'global' reduces V,H,W to 1x1x1 per channel, 'channel' reduces C
    to 1 per voxel, 'window' halves V,H,W with a 2x2x2 stride-2 window
    (extents must be even).
    """
    if mode not in ("max", "avg"):
        raise ShapeError(f"pool mode must be 'max' or 'avg', got {mode!r}")
    tape = _tape_of(x)
    x = _as_node(tape, x)
    if x.value.rank != 5:
        raise ShapeError(f"pool3d expects rank-5 input, got {x.value.dims}")
    rmode = "mean" if mode == "avg" else "max"
    if scope == "global":
        return reduce(x, (1, 2, 3), rmode)
    if scope == "channel":
        return reduce(x, (4,), rmode)
    if scope != "window":
        raise ShapeError(f"pool scope must be global, channel or window, got {scope!r}")

    n, v, h, w, c = x.value.dims
    if v % 2 or h % 2 or w % 2:
        raise ShapeError(f"window pooling requires even extents, got {(v, h, w)}")
    blocks = x.value.data.reshape(n, v // 2, 2, h // 2, 2, w // 2, 2, c)
    if mode == "avg":
        # Balanced pairwise sum: averaging the upsampled copies of a value
        # reproduces it bit-exactly (2v, 4v, 8v and /8 are all exact).
        s = blocks[:, :, 0] + blocks[:, :, 1]
        s = s[:, :, :, 0] + s[:, :, :, 1]
        s = s[:, :, :, :, 0] + s[:, :, :, :, 1]
        out = Tensor._wrap(s / np.asarray(8.0, dtype=s.dtype))

        def bwd(gy):
            g = np.broadcast_to(gy.reshape(n, v // 2, 1, h // 2, 1, w // 2, 1, c)
                                / np.asarray(8.0, dtype=gy.dtype),
                                blocks.shape).reshape(n, v, h, w, c)
            return (np.ascontiguousarray(g),)

    else:
        windows = np.transpose(blocks, (0, 1, 3, 5, 7, 2, 4, 6)).reshape(
            n, v // 2, h // 2, w // 2, c, 8)
        argmax = windows.argmax(-1)  # first maximum within each window
        out = Tensor._wrap(np.take_along_axis(
            windows, argmax[..., None], -1)[..., 0])

        def bwd(gy):
            g = np.zeros(windows.shape, dtype=gy.dtype)
            np.put_along_axis(g, argmax[..., None], gy[..., None], -1)
            g = g.reshape(n, v // 2, h // 2, w // 2, c, 2, 2, 2)
            g = np.transpose(g, (0, 1, 5, 2, 6, 3, 7, 4)).reshape(n, v, h, w, c)
            return (np.ascontiguousarray(g),)

    return tape.record(f"pool_window_{mode}", out, (x,), bwd)


def upsample3d(x) -> Node:
    """Nearest-neighbour repetition doubling V, H and W."""
    tape = _tape_of(x)
    x = _as_node(tape, x)
    if x.value.rank != 5:
        raise ShapeError(f"upsample3d expects rank-5 input, got {x.value.dims}")
    n, v, h, w, c = x.value.dims
    arr = x.value.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor._wrap(arr)

    def bwd(gy):
        g = gy.reshape(n, v, 2, h, 2, w, 2, c).sum(axis=(2, 4, 6))
        return (g,)

    return tape.record("upsample", out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Normalize each (sample, channel) slice over V,H,W, then scale and shift.

    Statistics use the biased variance (divide by V*H*W). gamma and beta are
    per-channel vectors.
    """
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    tape = _tape_of(x, gamma, beta)
    x, gamma, beta = (_as_node(tape, v) for v in (x, gamma, beta))
    xd, gd, bd = x.value.data, gamma.value.data, beta.value.data
    if xd.ndim != 5:
        raise ShapeError(f"layer_norm expects rank-5 input, got {xd.shape}")
    c = xd.shape[4]
    if gd.shape != (c,) or bd.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gd.shape}/{bd.shape}")
    axes = (1, 2, 3)
    mu = xd.mean(axis=axes, keepdims=True, dtype=xd.dtype)
    var = np.square(xd - mu).mean(axis=axes, keepdims=True, dtype=xd.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xh = (xd - mu) * inv
    out = Tensor._wrap(gd * xh + bd)

    def bwd(gy):
        gxh = gy * gd
        gx = inv * (gxh - gxh.mean(axis=axes, keepdims=True)
                    - xh * (gxh * xh).mean(axis=axes, keepdims=True))
        ggamma = (gy * xh).sum(axis=(0, 1, 2, 3))
        gbeta = gy.sum(axis=(0, 1, 2, 3))
        return gx, ggamma, gbeta

    return tape.record("layer_norm", out, (x, gamma, beta), bwd)


def batch_norm(x, gamma, beta, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.99,
               eps: float = 1e-5) -> tuple[Node, Tensor, Tensor]:
    """Normalize per channel over (N, V, H, W) in training, or by running stats.

    Returns (output node, new running mean, new running var); the caller owns
    the buffer update so the op itself stays pure. Training mode needs a
    batch of at least 2.
    """
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    tape = _tape_of(x, gamma, beta)
    x, gamma, beta = (_as_node(tape, v) for v in (x, gamma, beta))
    xd, gd, bd = x.value.data, gamma.value.data, beta.value.data
    if xd.ndim != 5:
        raise ShapeError(f"batch_norm expects rank-5 input, got {xd.shape}")
    c = xd.shape[4]
    for name, arr in (("gamma", gd), ("beta", bd),
                      ("running_mean", running_mean.data),
                      ("running_var", running_var.data)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} must have shape ({c},), got {arr.shape}")
    axes = (0, 1, 2, 3)
    epsv = np.asarray(eps, dtype=xd.dtype)

    if training:
        if xd.shape[0] < 2:
            raise ShapeError("batch_norm training mode requires batch >= 2")
        mu = xd.mean(axis=axes, keepdims=True, dtype=xd.dtype)
        var = np.square(xd - mu).mean(axis=axes, keepdims=True, dtype=xd.dtype)
        inv = 1.0 / np.sqrt(var + epsv)
        xh = (xd - mu) * inv
        out = Tensor._wrap(gd * xh + bd)
        mom = np.asarray(momentum, dtype=xd.dtype)
        new_mean = Tensor._wrap(mom * running_mean.data
                                + (1 - mom) * mu.reshape(c))
        new_var = Tensor._wrap(mom * running_var.data
                               + (1 - mom) * var.reshape(c))

        def bwd(gy):
            gxh = gy * gd
            gx = inv * (gxh - gxh.mean(axis=axes, keepdims=True)
                        - xh * (gxh * xh).mean(axis=axes, keepdims=True))
            ggamma = (gy * xh).sum(axis=axes)
            gbeta = gy.sum(axis=axes)
            return gx, ggamma, gbeta

        node = tape.record("batch_norm_train", out, (x, gamma, beta), bwd)
        return node, new_mean, new_var

    inv = 1.0 / np.sqrt(running_var.data + epsv)
    xh = (xd - running_mean.data) * inv
    out = Tensor._wrap(gd * xh + bd)

    def bwd(gy):
        gx = gy * (gd * inv)
        ggamma = (gy * xh).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        return gx, ggamma, gbeta

    node = tape.record("batch_norm_eval", out, (x, gamma, beta), bwd)
    return node, running_mean, running_var


# ---------------------------------------------------------------------------
# gradient-check registry

def _randn(rng, dims, scale=1.0):
    return Tensor((rng.standard_normal(dims) * scale))


def _spread(rng, dims, lo=-1.0, hi=1.0):
    # Distinct, well-separated values: safe around argmax tie-breaking.
    vals = np.linspace(lo, hi, int(np.prod(dims)))
    return Tensor(rng.permutation(vals).reshape(dims))


def _away_from_zero(rng, dims, lo=0.1, hi=1.5):
    signs = rng.choice([-1.0, 1.0], size=dims)
    return Tensor(rng.uniform(lo, hi, size=dims) * signs)


def gradcheck_cases(rng: np.random.Generator) -> list[tuple[str, object, Tensor]]:
    """(name, f, input) triples covering every differentiable op here.

    Each f maps (tape, input node) to a scalar: the op output contracted
    against a fixed random weight tensor, so misplaced or mis-signed
    gradient entries cannot cancel.
    """
    cases = []

    def register(name, f, at):
        cases.append((name, f, at))

    def wsum(node, w):
        return sum_all(mul(node, w))

    dims5 = (2, 3, 2, 2, 4)
    other = _randn(rng, dims5)
    w5 = _randn(rng, dims5)
    register("add", lambda tape, x, o=other, w=w5: wsum(add(x, o), w),
             _randn(rng, dims5))
    register("mul", lambda tape, x, o=other, w=w5: wsum(mul(x, o), w),
             _randn(rng, dims5))
    big = _randn(rng, dims5)
    register("mul_broadcast_channel",
             lambda tape, x, a=big, w=w5: wsum(mul(tape.constant(a), x), w),
             _randn(rng, (1, 1, 1, 1, 4)))
    register("mul_broadcast_volume",
             lambda tape, x, a=big, w=w5: wsum(mul(tape.constant(a), x), w),
             _randn(rng, (2, 3, 2, 2, 1)))

    cat_b = _randn(rng, (2, 3, 2, 2, 2))
    w_cat = _randn(rng, (2, 3, 2, 2, 6))
    register("concat_channels/a",
             lambda tape, x, b=cat_b, w=w_cat: wsum(concat_channels(x, b), w),
             _randn(rng, dims5))
    register("concat_channels/b",
             lambda tape, x, a=big, w=w_cat: wsum(concat_channels(a, x), w),
             _randn(rng, (2, 3, 2, 2, 2)))

    w_red = _randn(rng, (2, 1, 2, 1, 4))
    for mode in ("sum", "mean", "max"):
        register(f"reduce_{mode}",
                 lambda tape, x, w=w_red, m=mode: wsum(reduce(x, (1, 3), m), w),
                 _spread(rng, dims5))
    register("sum_all", lambda tape, x: sum_all(x), _randn(rng, dims5))

    register("relu", lambda tape, x, w=w5: wsum(relu(x), w),
             _away_from_zero(rng, dims5))
    register("sigmoid", lambda tape, x, w=w5: wsum(sigmoid(x), w),
             _randn(rng, dims5, scale=2.0))

    dx = _randn(rng, (2, 1, 1, 1, 8))
    dw = _randn(rng, (3, 8), scale=0.5)
    w_d = _randn(rng, (2, 1, 1, 1, 3))
    register("dense/x", lambda tape, x, w=dw, ww=w_d: wsum(dense(x, w), ww), dx)
    register("dense/w", lambda tape, x, a=dx, ww=w_d: wsum(dense(a, x), ww), dw)

    m0 = _away_from_zero(rng, (2, 8), lo=0.2, hi=0.8)
    m1 = _randn(rng, (8, 2), scale=0.6)
    w_m = _randn(rng, (2, 1, 1, 1, 8))
    mx = _away_from_zero(rng, (2, 1, 1, 1, 8), lo=0.2, hi=1.2)
    register("shared_mlp/x",
             lambda tape, x, a=m0, b=m1, w=w_m: wsum(shared_mlp(x, a, b), w), mx)
    register("shared_mlp/w0",
             lambda tape, x, f=mx, b=m1, w=w_m: wsum(shared_mlp(f, x, b), w), m0)
    register("shared_mlp/w1",
             lambda tape, x, f=mx, a=m0, w=w_m: wsum(shared_mlp(f, a, x), w), m1)

    spec = ConvSpec(2, 3, (3, 3, 3), dilation=1)
    cw = _randn(rng, spec.weight_dims(), scale=0.4)
    cb = _randn(rng, (3,), scale=0.2)
    cx = _randn(rng, (1, 5, 6, 5, 2))
    w_c = _randn(rng, (1, 5, 6, 5, 3))
    register("conv3d/x",
             lambda tape, x, s=spec, w=cw, b=cb, ww=w_c: wsum(conv3d(x, s, w, b), ww),
             cx)
    register("conv3d/w",
             lambda tape, x, s=spec, a=cx, b=cb, ww=w_c: wsum(conv3d(a, s, x, b), ww),
             cw)
    register("conv3d/bias",
             lambda tape, x, s=spec, a=cx, w=cw, ww=w_c: wsum(conv3d(a, s, w, x), ww),
             cb)
    spec_d = ConvSpec(1, 2, (3, 3, 3), dilation=3)
    dwt = _randn(rng, spec_d.weight_dims(), scale=0.4)
    dbt = _randn(rng, (2,), scale=0.2)
    w_cd = _randn(rng, (1, 7, 7, 7, 2))
    register("conv3d_dilated/x",
             lambda tape, x, s=spec_d, w=dwt, b=dbt, ww=w_cd:
             wsum(conv3d(x, s, w, b), ww),
             _randn(rng, (1, 7, 7, 7, 1)))

    w_pg = _randn(rng, (1, 1, 1, 1, 3))
    w_pc = _randn(rng, (1, 4, 4, 4, 1))
    w_pw = _randn(rng, (1, 2, 2, 2, 3))
    px = _spread(rng, (1, 4, 4, 4, 3))
    register("pool_global_avg",
             lambda tape, x, w=w_pg: wsum(pool3d(x, "avg", "global"), w), px)
    register("pool_global_max",
             lambda tape, x, w=w_pg: wsum(pool3d(x, "max", "global"), w), px)
    register("pool_channel_avg",
             lambda tape, x, w=w_pc: wsum(pool3d(x, "avg", "channel"), w), px)
    register("pool_channel_max",
             lambda tape, x, w=w_pc: wsum(pool3d(x, "max", "channel"), w), px)
    register("pool_window_avg",
             lambda tape, x, w=w_pw: wsum(pool3d(x, "avg", "window"), w), px)
    register("pool_window_max",
             lambda tape, x, w=w_pw: wsum(pool3d(x, "max", "window"), w), px)
    w_up = _randn(rng, (1, 4, 6, 4, 2))
    register("upsample3d",
             lambda tape, x, w=w_up: wsum(upsample3d(x), w),
             _randn(rng, (1, 2, 3, 2, 2)))

    ln_x = _randn(rng, (2, 3, 4, 4, 3))
    ln_g = _away_from_zero(rng, (3,), lo=0.5, hi=1.5)
    ln_b = _randn(rng, (3,), scale=0.3)
    w_ln = _randn(rng, (2, 3, 4, 4, 3))
    register("layer_norm/x",
             lambda tape, x, g=ln_g, b=ln_b, w=w_ln:
             wsum(layer_norm(x, g, b, 1e-5), w), ln_x)
    register("layer_norm/gamma",
             lambda tape, x, a=ln_x, b=ln_b, w=w_ln:
             wsum(layer_norm(a, x, b, 1e-5), w), ln_g)
    register("layer_norm/beta",
             lambda tape, x, a=ln_x, g=ln_g, w=w_ln:
             wsum(layer_norm(a, g, x, 1e-5), w), ln_b)

    bn_x = _randn(rng, (3, 2, 2, 2, 2))
    bn_g = _away_from_zero(rng, (2,), lo=0.5, hi=1.5)
    bn_b = _randn(rng, (2,), scale=0.3)
    rm = Tensor(rng.standard_normal(2) * 0.2)
    rv = Tensor(rng.uniform(0.5, 1.5, 2))
    w_bn = _randn(rng, (3, 2, 2, 2, 2))

    def bn_train(tape, x, g=bn_g, b=bn_b, m=rm, v=rv, w=w_bn):
        out, _, _ = batch_norm(x, g, b, m, v, training=True)
        return wsum(out, w)

    def bn_train_gamma(tape, x, a=bn_x, b=bn_b, m=rm, v=rv, w=w_bn):
        out, _, _ = batch_norm(a, x, b, m, v, training=True)
        return wsum(out, w)

    def bn_eval(tape, x, g=bn_g, b=bn_b, m=rm, v=rv, w=w_bn):
        out, _, _ = batch_norm(x, g, b, m, v, training=False)
        return wsum(out, w)

    register("batch_norm_train/x", bn_train, bn_x)
    register("batch_norm_train/gamma", bn_train_gamma, bn_g)
    register("batch_norm_eval/x", bn_eval, bn_x)
    return cases
