"""Self-verification suites: finite-difference gradient checks and
brute-force oracle comparisons, runnable from the CLI.

The grad scope touches no data machinery; the oracle scope additionally
exercises metrics, windowing and augmentation on synthetic inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data, ops, oracles, train
from .autodiff import Tape, finite_diff_check
from .blocks import AtrousResidualPath, AttentionModule3D, ResidualConvBlock
from .model import ModelConfig, build
from .tensor import Tensor

FD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_dev: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max dev {self.max_dev:.3e}{extra}"


def _fd_result(name, f, at, tol=FD_TOL, step=1e-4) -> CheckResult:
    report = finite_diff_check(f, at, tol=tol, step=step)
    detail = "" if report.passed else str(report)
    return CheckResult(name=name, passed=report.passed,
                       max_dev=report.max_rel_error, detail=detail)


def fd_op_checks(seeds=(0, 1, 2)) -> list[CheckResult]:
    """Every registered op, three random small inputs each."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, f, at in ops.gradcheck_cases(rng):
            results.append(_fd_result(f"grad/op/{name}[seed{seed}]", f, at))
    return results


def fd_loss_checks(seed=0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for per_sample in (False, True):
        gt = Tensor((rng.random((2, 4, 4, 4, 1)) < 0.3).astype(np.float64))
        cfg = train.DiceLossConfig(smooth=1.0, per_sample=per_sample)
        probs = Tensor(rng.uniform(0.05, 0.95, (2, 4, 4, 4, 1)))

        def f(tape, x, gt=gt, cfg=cfg):
            return train.soft_dice_loss(ops.sigmoid(x), gt, cfg)

        # Probe through a sigmoid so perturbed inputs stay valid probabilities.
        logits = Tensor(np.log(probs.data / (1 - probs.data)))
        name = "per_sample" if per_sample else "batch"
        results.append(_fd_result(f"grad/loss/dice_{name}", f, logits, tol=1e-5))
    return results


def fd_block_checks(seed=0) -> list[CheckResult]:
    """ARP, attention and residual blocks on 1x4x4x4x8 inputs."""
    rng = np.random.default_rng(seed)
    results = []
    common = dict(rng=rng, precision=64)

    def weighted(block, dims, training=False):
        w = Tensor(rng.standard_normal(dims))

        def f(tape, x, block=block, w=w, training=training):
            return ops.sum_all(ops.mul(block(x, training), w))

        return f

    # Step 1e-5: deep ReLU chains make a 1e-4 probe window likely to straddle
    # a kink; the narrower window stays far above the 64-bit roundoff floor.
    arp = AtrousResidualPath("arp", 8, norm_kind="layer", **common)
    x = Tensor(rng.standard_normal((1, 4, 4, 4, 8)))
    results.append(_fd_result("grad/block/arp_layer",
                              weighted(arp, (1, 4, 4, 4, 8)), x, step=1e-5))

    arp_bn = AtrousResidualPath("arp_bn", 8, norm_kind="batch", **common)
    x2 = Tensor(rng.standard_normal((2, 4, 4, 4, 8)))
    results.append(_fd_result("grad/block/arp_batch",
                              weighted(arp_bn, (2, 4, 4, 4, 8), training=True), x2,
                              step=1e-5))

    attn = AttentionModule3D("attn", 8, rng, 64)
    results.append(_fd_result("grad/block/attention",
                              weighted(attn, (1, 4, 4, 4, 8)), x, step=1e-5))

    res = ResidualConvBlock("res", 8, 16, norm_kind="layer", **common)
    results.append(_fd_result("grad/block/residual",
                              weighted(res, (1, 4, 4, 4, 16)), x, step=1e-5))
    return results


def fd_model_check(seed=0) -> CheckResult:
    """End-to-end dice-loss gradient of the levels=2 model on 8x8x8 input."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(levels=2, base_channels=8, input_shape=(8, 8, 8),
                         norm_kind="layer", seed=seed, precision=64)
    model = build(config)
    gt = Tensor((rng.random((1, 8, 8, 8, 1)) < 0.2).astype(np.float64))

    def f(tape, x):
        return train.soft_dice_loss(model.forward(tape, x), gt)

    at = Tensor(rng.uniform(0.0, 1.0, (1, 8, 8, 8, 1)))
    return _fd_result("grad/model/levels2_dice", f, at, step=1e-5)


def grad_checks() -> list[CheckResult]:
    results = fd_op_checks()
    results.extend(fd_loss_checks())
    results.extend(fd_block_checks())
    results.append(fd_model_check())
    return results


# ---------------------------------------------------------------------------
# oracle scope


def _run_conv(x, spec, w, b):
    tape = Tape()
    return ops.conv3d(tape.constant(x), spec, Tensor(w), Tensor(b)).value.data


def conv_oracle_checks(seed=0) -> list[CheckResult]:
    """Engine convolution vs the nested-loop reference, every model combo."""
    rng = np.random.default_rng(seed)
    combos = [
        ("k1r1", (1, 1, 1), 1, (2, 4, 5, 4, 3), 2),
        ("k3r1", (3, 3, 3), 1, (1, 6, 6, 6, 2), 2),
        ("k3r3", (3, 3, 3), 3, (1, 9, 9, 9, 2), 2),
        ("k3r9", (3, 3, 3), 9, (1, 6, 6, 6, 1), 1),
        ("k7r1", (7, 7, 7), 1, (1, 7, 8, 7, 2), 1),
    ]
    results = []
    for name, kernel, dil, dims, cout in combos:
        worst = 0.0
        for trial in range(4):
            x = rng.standard_normal(dims)
            spec = ops.ConvSpec(dims[-1], cout, kernel, dilation=dil)
            w = rng.standard_normal(spec.weight_dims())
            b = rng.standard_normal(cout)
            got = _run_conv(Tensor(x), spec, w, b)
            ref = oracles.conv3d_reference(x, w, b, dilation=dil)
            worst = max(worst, float(np.abs(got - ref).max()))
        results.append(CheckResult(f"oracle/conv/{name}", worst < 1e-12, worst))
    return results


def dilation_identity_checks(seed=0) -> list[CheckResult]:
    """Dilated conv == dense conv with the zero-inflated kernel.

    Exact equality is asserted on integer-valued tensors, where float
    addition is associative; generic floats are held to 1e-12.
    """
    rng = np.random.default_rng(seed)
    results = []
    for dil in (1, 3, 9):
        x_int = rng.integers(-4, 5, (1, 6, 6, 6, 2)).astype(np.float64)
        spec = ops.ConvSpec(2, 2, (3, 3, 3), dilation=dil)
        w_int = rng.integers(-4, 5, spec.weight_dims()).astype(np.float64)
        b = np.zeros(2)
        dense_w = oracles.inflate_kernel(w_int, dil)
        spec_dense = ops.ConvSpec(2, 2, dense_w.shape[:3], dilation=1)
        got = _run_conv(Tensor(x_int), spec, w_int, b)
        ref = _run_conv(Tensor(x_int), spec_dense, dense_w, b)
        exact = bool(np.array_equal(got, ref))
        results.append(CheckResult(f"oracle/dilation_identity/int/r{dil}", exact,
                                   float(np.abs(got - ref).max())))
        x_f = rng.standard_normal((1, 6, 6, 6, 2))
        w_f = rng.standard_normal(spec.weight_dims())
        got = _run_conv(Tensor(x_f), spec, w_f, b)
        ref = _run_conv(Tensor(x_f), spec_dense, oracles.inflate_kernel(w_f, dil), b)
        dev = float(np.abs(got - ref).max())
        results.append(CheckResult(f"oracle/dilation_identity/float/r{dil}",
                                   dev < 1e-12, dev))
    return results


def layer_norm_checks(seed=0) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)
    for precision in (64, 32):
        x = Tensor(rng.standard_normal((2, 5, 6, 4, 3)), precision=precision)
        gamma = Tensor(np.ones(3), precision=precision)
        beta = Tensor(np.zeros(3), precision=precision)
        tape = Tape()
        out = ops.layer_norm(tape.constant(x), gamma, beta, 1e-5).value.data
        out64 = out.astype(np.float64)
        mu = np.abs(out64.mean(axis=(1, 2, 3))).max()
        var = np.abs(out64.var(axis=(1, 2, 3)) - 1.0).max()
        results.append(CheckResult(f"oracle/ln_stats/f{precision}",
                                   mu < 1e-6 and var < 1e-4, float(max(mu, var)),
                                   f"|mean| {mu:.2e}, |var-1| {var:.2e}"))

    config = ModelConfig(levels=2, base_channels=8, input_shape=(8, 8, 8),
                         norm_kind="layer", seed=7, precision=64)
    model = build(config)
    a = rng.uniform(0, 1, (1, 8, 8, 8, 1))
    b = rng.uniform(0, 1, (1, 8, 8, 8, 1))
    single = model.predict(Tensor(a)).data
    pair = model.predict(Tensor(np.concatenate([a, b]))).data
    bitexact = bool(np.array_equal(single[0], pair[0]))
    dev = float(np.abs(single[0] - pair[0]).max())
    results.append(CheckResult("oracle/ln_batch_composition_bitexact", bitexact, dev))

    bn_x1 = rng.standard_normal((1, 2, 2, 2, 2))
    bn_x2 = rng.standard_normal((1, 2, 2, 2, 2))
    gamma = Tensor(np.ones(2))
    beta = Tensor(np.zeros(2))
    rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))

    def bn_forward(batch):
        tape = Tape()
        out, _, _ = ops.batch_norm(tape.constant(Tensor(batch)), gamma, beta,
                                   rm, rv, training=True)
        return out.value.data

    same = bn_forward(np.concatenate([bn_x1, bn_x1]))[0]
    mixed = bn_forward(np.concatenate([bn_x1, bn_x2]))[0]
    gap = float(np.abs(same - mixed).max())
    results.append(CheckResult("oracle/bn_batch_sensitivity", gap > 1e-3, gap,
                               "training-mode output must depend on batch mates"))
    return results


def attention_checks(seed=0) -> list[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)
    c = 16
    attn = AttentionModule3D("attn", c, rng, 64)
    f = Tensor(rng.standard_normal((2, 4, 4, 4, c)))
    tape = Tape()
    out, mc, mv = attn.gates(tape.constant(f))
    ok_shape = (mc.value.dims == (2, 1, 1, 1, c) and mv.value.dims == (2, 4, 4, 4, 1))
    results.append(CheckResult("oracle/attention/gate_shapes", ok_shape))
    in_range = bool((0 < mc.value.data).all() and (mc.value.data < 1).all()
                    and (0 < mv.value.data).all() and (mv.value.data < 1).all())
    results.append(CheckResult("oracle/attention/gates_in_open_unit", in_range))
    bound = bool((np.abs(out.value.data) <= np.abs(f.data)).all())
    dev = float((np.abs(out.value.data) - np.abs(f.data)).max())
    results.append(CheckResult("oracle/attention/gating_bound", bound, dev))

    # Permutation equivariance. With zeroed MLP weights the channel gate is
    # exactly 0.5 and integer inputs keep every reduction associative, so
    # equality is bitwise; with integer MLP weights the gate and the first
    # product are still bitwise, and the final map is ULP-tight because only
    # the channel-average reassociates.
    perm = rng.permutation(c)
    f_int = Tensor(rng.integers(-8, 9, (1, 4, 4, 4, c)).astype(np.float64))
    f_perm = Tensor(np.ascontiguousarray(f_int.data[..., perm]))

    zero = AttentionModule3D("zero", c, rng, 64)
    for p in (zero.w0, zero.w1):
        p.assign(Tensor(np.zeros(p.value.dims)))
    int_conv_w = rng.integers(-2, 3, zero.conv.spec.weight_dims()).astype(np.float64)
    zero.conv.w.assign(Tensor(int_conv_w))
    zero.conv.b.assign(Tensor(np.zeros(1)))
    base = zero(Tape().constant(f_int)).value.data
    perm_out = zero(Tape().constant(f_perm)).value.data
    exact = bool(np.array_equal(base[..., perm], perm_out))
    results.append(CheckResult("oracle/attention/permutation_exact_zero_mlp", exact,
                               float(np.abs(base[..., perm] - perm_out).max())))

    inta = AttentionModule3D("int", c, rng, 64)
    w0 = rng.integers(-2, 3, inta.w0.value.dims).astype(np.float64)
    w1 = rng.integers(-2, 3, inta.w1.value.dims).astype(np.float64)
    inta.w0.assign(Tensor(w0))
    inta.w1.assign(Tensor(w1))
    inta.conv.w.assign(Tensor(int_conv_w))
    inta.conv.b.assign(Tensor(np.zeros(1)))
    _, mc_a, _ = inta.gates(Tape().constant(f_int))
    perm_attn = AttentionModule3D("intp", c, rng, 64)
    perm_attn.w0.assign(Tensor(np.ascontiguousarray(w0[:, perm])))
    perm_attn.w1.assign(Tensor(np.ascontiguousarray(w1[perm, :])))
    perm_attn.conv.w.assign(Tensor(int_conv_w))
    perm_attn.conv.b.assign(Tensor(np.zeros(1)))
    out_b, mc_b, _ = perm_attn.gates(Tape().constant(f_perm))
    gates_exact = bool(np.array_equal(mc_a.value.data[..., perm], mc_b.value.data))
    results.append(CheckResult("oracle/attention/permutation_gate_exact", gates_exact))
    out_a = inta(Tape().constant(f_int)).value.data
    dev = float(np.abs(out_a[..., perm] - out_b.value.data).max())
    scale = float(np.abs(out_a).max())
    results.append(CheckResult("oracle/attention/permutation_full_ulp",
                               dev <= 4 * np.finfo(np.float64).eps * max(scale, 1.0),
                               dev))
    return results


def metric_checks(seed=0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0
    agree = True
    for _ in range(100):
        dims = tuple(int(d) for d in rng.integers(2, 5, size=3))
        p = (rng.random(dims) < rng.uniform(0.1, 0.9)).astype(np.float64)
        g = (rng.random(dims) < rng.uniform(0.1, 0.9)).astype(np.float64)
        rep = train.evaluate(Tensor(p), Tensor(g))
        tp, fp, tn, fn = oracles.confusion_reference(p, g)
        if (rep.tp, rep.fp, rep.tn, rep.fn) != (tp, fp, tn, fn):
            agree = False
        if rep.dice != oracles.dice_reference(p, g):
            agree = False
        if rep.total != p.size:
            agree = False
    results = [CheckResult("oracle/metrics/random_pairs", agree, float(worst))]

    # Worked case: |gt| = 4, |pred| = 4, overlap 2 on a 3x3x3 grid.
    g = np.zeros((3, 3, 3))
    p = np.zeros((3, 3, 3))
    g.ravel()[[0, 1, 2, 3]] = 1
    p.ravel()[[2, 3, 4, 5]] = 1
    rep = train.evaluate(Tensor(p), Tensor(g))
    ok = (rep.dice == 0.5 and rep.accuracy == (2 + 21) / 27)
    results.append(CheckResult("oracle/metrics/worked_case", ok, rep.dice))
    return results


def windowing_checks() -> list[CheckResult]:
    spec = data.WindowingSpec(window_depth=16, stride=5)
    starts = spec.starts(600)
    ref = oracles.window_starts_reference(600, 16, 5)
    ok = starts == ref and len(starts) == 118
    results = [CheckResult("oracle/windowing/count_600", ok, float(len(starts)))]

    vol = data.synth_volume((31, 16, 16), np.random.default_rng(3), "w")
    wins = data.extract_windows(vol, data.WindowingSpec(16, 5))
    ok = len(wins) == 4
    for w in wins:
        s = w.slice_range[0]
        ok = ok and np.array_equal(w.image.data, vol.image.data[s:s + 16])
        ok = ok and np.array_equal(w.mask.data, vol.mask.data[s:s + 16])
    results.append(CheckResult("oracle/windowing/exact_slabs", ok, float(len(wins))))
    return results


def augmentation_checks(seed=0) -> list[CheckResult]:
    results = []
    vol = data.synth_volume((8, 16, 16), np.random.default_rng(seed), "aug")
    flip2 = data.horizontal_flip(data.horizontal_flip(vol))
    ok_h = np.array_equal(flip2.image.data, vol.image.data) and \
        np.array_equal(flip2.mask.data, vol.mask.data)
    vflip2 = data.vertical_flip(data.vertical_flip(vol))
    ok_v = np.array_equal(vflip2.image.data, vol.image.data)
    rot = vol
    for _ in range(4):
        rot = data.rotate90(rot, 1)
    ok_r = np.array_equal(rot.image.data, vol.image.data)
    results.append(CheckResult("oracle/augment/involutions", ok_h and ok_v and ok_r))

    plan = data.AugmentationPlan(seed=seed)
    rng = np.random.default_rng(seed + 1)
    binary_ok = True
    for mech in data.MECHANISMS:
        out = data._apply_mechanism(mech, vol, rng, plan)
        m = out.mask.data
        binary_ok = binary_ok and bool(np.all((m == 0) | (m == 1)))
    results.append(CheckResult("oracle/augment/mask_binarity", binary_ok))

    samples = [data.synth_volume((8, 16, 16), np.random.default_rng(100 + i), f"s{i}")
               for i in range(7)]
    grown, _ = data.augment(samples, plan)
    expected = 7 + sum(int(np.ceil(0.05 * 7)) for _ in data.MECHANISMS)
    results.append(CheckResult("oracle/augment/size_formula",
                               len(grown) == expected, float(len(grown))))
    return results


def upsample_roundtrip_check(seed=0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 4, 4, 4, 3)))
    tape = Tape()
    up = ops.upsample3d(tape.constant(x))
    down = ops.pool3d(up, "avg", "window")
    ok = bool(np.array_equal(down.value.data, x.data))
    return CheckResult("oracle/upsample_roundtrip", ok,
                       float(np.abs(down.value.data - x.data).max()))


def oracle_checks() -> list[CheckResult]:
    results = conv_oracle_checks()
    results.extend(dilation_identity_checks())
    results.extend(layer_norm_checks())
    results.extend(attention_checks())
    results.extend(metric_checks())
    results.extend(windowing_checks())
    results.extend(augmentation_checks())
    results.append(upsample_roundtrip_check())
    return results


def run(scope: str = "all") -> list[CheckResult]:
    if scope not in ("all", "grad", "oracle"):
        raise ValueError(f"scope must be all, grad or oracle, got {scope!r}")
    results = []
    if scope in ("all", "grad"):
        results.extend(grad_checks())
    if scope in ("all", "oracle"):
        results.extend(oracle_checks())
    return results
