"""Built-in verification suites behind the ``check`` command.

Each suite returns a list of (name, passed, detail) rows; the CLI prints one
PASS/FAIL line per row and signals failure through the exit code.  The
gradient suite is the workhorse: every layer's backward rule, and the full
tiny model, are compared against central finite differences in 64-bit mode.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .data import (dataset_from_arrays, horizontal_flip, make_priors,
                   synth_generate, tile_image)
from .layers import (AvgPool2d, BatchNorm2d, BilinearUpsample, Conv2d,
                     Linear, ResidualUnit)
from .network import FinalHead, FusionTransform, MRFNet, column_specs
from .tensor import (Tensor, finite_difference_check, no_grad, reduce_sum,
                     relu)

GRAD_TOL = 1e-4
F64 = np.float64


def _resolve(root, name: str):
    obj = root
    parts = name.split(".")
    for token in parts[:-1]:
        obj = obj[int(token)] if token.isdigit() else getattr(obj, token)
    return obj, parts[-1]


def _check_wrt_param(module, attr: str, f, eps: float = 1e-5,
                     max_elements=None, rng=None) -> float:
    """Finite differences w.r.t. one parameter: the parameter tensor is
    swapped for the probe so the recorded graph reaches it."""
    param = getattr(module, attr)

    def wrapped(probe: Tensor) -> Tensor:
        saved = getattr(module, attr)
        setattr(module, attr, probe)
        try:
            return f()
        finally:
            setattr(module, attr, saved)

    return finite_difference_check(wrapped, param.detach(), eps,
                                   max_elements=max_elements, rng=rng)


def _sum_outputs(outputs) -> Tensor:
    return (reduce_sum(outputs.aux1) + reduce_sum(outputs.aux2)
            + reduce_sum(outputs.aux3) + reduce_sum(outputs.final))


def _layer_cases():
    rng = np.random.default_rng(7)

    def rand(*shape):
        return Tensor(rng.normal(0, 1, shape), dtype=F64)

    cases = []

    conv = Conv2d(3, 4, 3, 1, 1, bias=True, dtype=F64,
                  rng=np.random.default_rng(3))
    xc = rand(2, 3, 6, 6)
    cases.append(("conv3x3_s1/input", lambda: finite_difference_check(
        lambda t: reduce_sum(conv(t) * conv(t)), xc)))
    cases.append(("conv3x3_s1/weight", lambda: _check_wrt_param(
        conv, "weight", lambda: reduce_sum(conv(xc) * conv(xc)))))
    cases.append(("conv3x3_s1/bias", lambda: _check_wrt_param(
        conv, "bias", lambda: reduce_sum(conv(xc) * conv(xc)))))

    conv_s2 = Conv2d(2, 3, 3, 2, 1, bias=False, dtype=F64,
                     rng=np.random.default_rng(4))
    cases.append(("conv3x3_s2/input", lambda: finite_difference_check(
        lambda t: reduce_sum(conv_s2(t) * conv_s2(t)), rand(1, 2, 8, 8))))

    conv_1 = Conv2d(4, 6, 1, 1, 0, bias=True, dtype=F64,
                    rng=np.random.default_rng(5))
    x1 = rand(2, 4, 5, 5)
    cases.append(("conv1x1/input", lambda: finite_difference_check(
        lambda t: reduce_sum(conv_1(t) * conv_1(t)), x1)))
    cases.append(("conv1x1/weight", lambda: _check_wrt_param(
        conv_1, "weight", lambda: reduce_sum(conv_1(x1) * conv_1(x1)))))

    # non-trivial affine parameters keep every gradient component away
    # from zero, where the relative-error ratio is all round-off noise
    bn_t = BatchNorm2d(3, dtype=F64)
    bn_t.train(True)
    bn_t.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    bn_t.beta.data[...] = rng.uniform(-1.0, 1.0, 3)
    xb = rand(2, 3, 4, 4)
    # the random linear term keeps input-gradient components away from the
    # structural zeros of a pure sum-of-squares loss through normalization
    wb = rand(2, 3, 4, 4)
    cases.append(("batch_norm_train/input", lambda: finite_difference_check(
        lambda t: reduce_sum(bn_t(t) * bn_t(t)) + reduce_sum(bn_t(t) * wb),
        xb, 1e-4)))
    cases.append(("batch_norm_train/gamma", lambda: _check_wrt_param(
        bn_t, "gamma", lambda: reduce_sum(bn_t(xb) * bn_t(xb)), 1e-4)))
    cases.append(("batch_norm_train/beta", lambda: _check_wrt_param(
        bn_t, "beta", lambda: reduce_sum(bn_t(xb) * bn_t(xb)), 1e-4)))

    bn_e = BatchNorm2d(3, dtype=F64)
    bn_e.eval()
    bn_e.running_mean = rng.normal(0, 1, 3)
    bn_e.running_var = rng.uniform(0.5, 2.0, 3)
    bn_e.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    bn_e.beta.data[...] = rng.uniform(-1.0, 1.0, 3)
    cases.append(("batch_norm_eval/input", lambda: finite_difference_check(
        lambda t: reduce_sum(bn_e(t) * bn_e(t)) + reduce_sum(bn_e(t) * wb),
        xb, 1e-4)))
    cases.append(("batch_norm_eval/gamma", lambda: _check_wrt_param(
        bn_e, "gamma", lambda: reduce_sum(bn_e(xb) * bn_e(xb)), 1e-4)))

    xr = rng.normal(0, 1, (3, 4))
    xr = np.where(np.abs(xr) < 0.1, 0.5, xr)  # keep clear of the kink
    cases.append(("relu/input", lambda: finite_difference_check(
        lambda t: reduce_sum(relu(t) * relu(t)), Tensor(xr, dtype=F64))))

    pool = AvgPool2d()
    cases.append(("avg_pool/input", lambda: finite_difference_check(
        lambda t: reduce_sum(pool(t) * pool(t)), rand(2, 3, 4, 4))))

    for factor in (2, 4):
        up = BilinearUpsample(factor)
        cases.append((f"bilinear_upsample_x{factor}/input",
                      lambda up=up: finite_difference_check(
                          lambda t: reduce_sum(up(t) * up(t)), rand(1, 2, 3, 3))))

    lin = Linear(5, 4, dtype=F64, rng=np.random.default_rng(5))
    xl = rand(3, 5)
    cases.append(("linear/input", lambda: finite_difference_check(
        lambda t: reduce_sum(lin(t) * lin(t)), xl)))
    cases.append(("linear/weight", lambda: _check_wrt_param(
        lin, "weight", lambda: reduce_sum(lin(xl) * lin(xl)))))
    cases.append(("linear/bias", lambda: _check_wrt_param(
        lin, "bias", lambda: reduce_sum(lin(xl) * lin(xl)))))

    for kind in ("two_layer", "three_layer"):
        unit = ResidualUnit(8, kind, dtype=F64, rng=np.random.default_rng(11))
        unit.train(True)
        xu = Tensor(np.abs(rng.normal(0, 1, (2, 8, 5, 5))) + 0.3, dtype=F64)
        cases.append((f"residual_unit_{kind}/input",
                      lambda unit=unit, xu=xu: finite_difference_check(
                          lambda t: reduce_sum(unit(t)), xu, 1e-6)))

    specs = column_specs(ModelConfig(base_width=4, patch_side=32))
    for (i, j) in ((1, 3), (3, 1), (2, 3), (2, 1)):
        tr = FusionTransform(specs, i, j, F64, np.random.default_rng(13))
        tr.train(True)
        s = specs[i - 1]
        xf = rand(2, s.channels, s.resolution, s.resolution)
        cases.append((f"fusion_{i}to{j}/input",
                      lambda tr=tr, xf=xf: finite_difference_check(
                          lambda t: reduce_sum(tr(t)), xf, 1e-5)))

    return cases


def _model_gradient_rows(progress=None):
    cfg = ModelConfig(base_width=8, rm_per_phase=(1, 1, 1), patch_side=32)
    model = MRFNet(cfg, dtype=F64, seed=42)
    model.train()
    rng = np.random.default_rng(17)
    n = 2
    i1 = Tensor(rng.uniform(0, 1, (n, 3, 64, 64)), dtype=F64)
    i2 = Tensor(rng.uniform(0, 1, (n, 3, 32, 32)), dtype=F64)
    i3 = Tensor(rng.uniform(0, 1, (n, 3, 16, 16)), dtype=F64)

    err_in = finite_difference_check(
        lambda t: _sum_outputs(model.forward(i1, t, i3)),
        i2.detach(), 1e-6, max_elements=12, rng=np.random.default_rng(5))
    rows = [("gradients/full_model/input", err_in < GRAD_TOL,
             f"max relative error {err_in:.3g}")]
    if progress:
        progress(rows[-1])

    picked = ["stem2.convs.0.conv.weight",
              "phase1.0.units.0.conv1.weight",
              "phase2.0.fusion.transforms.2.downs.0.conv.weight",
              "final_head.merge.bn.gamma",
              "final_head.tail.fc2.weight"]
    for name in picked:
        parent, attr = _resolve(model, name)
        err = _check_wrt_param(
            parent, attr, lambda: _sum_outputs(model.forward(i1, i2, i3)),
            eps=1e-6, max_elements=6, rng=np.random.default_rng(9))
        rows.append((f"gradients/full_model/{name}", err < GRAD_TOL,
                     f"max relative error {err:.3g}"))
        if progress:
            progress(rows[-1])
    return rows


def suite_gradients(progress=None):
    rows = []
    for name, run in _layer_cases():
        err = run()
        rows.append((f"gradients/{name}", err < GRAD_TOL,
                     f"max relative error {err:.3g}"))
        if progress:
            progress(rows[-1])
    rows.extend(_model_gradient_rows(progress))
    return rows


# -- shape conformance ------------------------------------------------------------

DEFAULT_SHAPES = {
    "stem1.out": (1, 256, 64, 64),
    "stem2.out": (1, 64, 32, 32),
    "stem3.out": (1, 128, 16, 16),
    "phase1.col1": (1, 32, 64, 64),
    "transition2.col2": (1, 64, 32, 32),
    "transition3.col3": (1, 128, 16, 16),
    "rh1.conv": (1, 64, 16, 16),
    "rh1.pool": (1, 64, 8, 8),
    "rh1.fc_hidden": (1, 1024),
    "rh1.fc_out": (1, 1),
    "rh2.conv": (1, 64, 8, 8),
    "rh2.fc_hidden": (1, 1024),
    "rh3.conv": (1, 64, 8, 8),
    "final.v5.sum2": (1, 64, 32, 32),
    "final.v5.sum3": (1, 128, 16, 16),
    "final.v5.merge": (1, 64, 16, 16),
    "final.v5.reduce": (1, 64, 8, 8),
    "final.v5.fc_hidden": (1, 1024),
    "final.v5.fc_out": (1, 1),
}

HEAD_CHAIN_SHAPES = {
    "v1": {"final.v1.conv1": (1, 64, 32, 32),
           "final.v1.conv2": (1, 64, 16, 16),
           "final.v1.pool": (1, 64, 8, 8),
           "final.v1.fc_hidden": (1, 1024),
           "final.v1.fc_out": (1, 1)},
    "v2": {"final.v2.open": (1, 64, 32, 32),
           "final.v2.conv2": (1, 64, 16, 16),
           "final.v2.pool": (1, 64, 8, 8),
           "final.v2.fc_hidden": (1, 1024)},
    "v3": {"final.v3.open": (1, 64, 16, 16),
           "final.v3.pool": (1, 64, 8, 8),
           "final.v3.fc_hidden": (1, 1024)},
    "v4": {"final.v4.concat": (1, 224, 64, 64),
           "final.v4.merge": (1, 64, 64, 64),
           "final.v4.conv1": (1, 64, 32, 32),
           "final.v4.conv2": (1, 64, 16, 16),
           "final.v4.pool": (1, 64, 8, 8),
           "final.v4.fc_hidden": (1, 1024)},
}


def head_trace(version: str, config: ModelConfig = None) -> dict:
    """Shape-trace one final-head version on conforming zero columns."""
    config = config or ModelConfig()
    head = FinalHead(version, config, np.float32, np.random.default_rng(0))
    head.eval()
    cols = [Tensor(np.zeros((1, s.channels, s.resolution, s.resolution),
                            dtype=np.float32))
            for s in column_specs(config)]
    trace: dict = {}
    with no_grad():
        head(cols, trace)
    return trace


def suite_shapes(progress=None):
    rows = []
    model = MRFNet(ModelConfig(), seed=0)
    trace = model.shape_trace(batch=1)
    for name, expected in DEFAULT_SHAPES.items():
        got = trace.get(name)
        rows.append((f"shapes/{name}", got == expected,
                     f"expected {expected}, got {got}"))
        if progress:
            progress(rows[-1])
    for version, expectations in HEAD_CHAIN_SHAPES.items():
        trace = head_trace(version)
        for name, expected in expectations.items():
            got = trace.get(name)
            rows.append((f"shapes/{name}", got == expected,
                         f"expected {expected}, got {got}"))
            if progress:
                progress(rows[-1])
    for base in (8, 16, 32):
        specs = column_specs(ModelConfig(base_width=base))
        law = all(specs[i].channels == 2 * specs[i - 1].channels
                  and specs[i].resolution * 2 == specs[i - 1].resolution
                  for i in (1, 2))
        rows.append((f"shapes/column_law_base{base}", law, f"specs {specs}"))
        if progress:
            progress(rows[-1])
    return rows


def suite_fusion(progress=None):
    cfg = ModelConfig(base_width=8, patch_side=32)
    specs = column_specs(cfg)
    rng = np.random.default_rng(3)
    rows = []
    for i in (1, 2, 3):
        for j in (1, 2, 3):
            tr = FusionTransform(specs, i, j, np.float32, rng)
            tr.eval()
            s = specs[i - 1]
            x = Tensor(np.random.default_rng(0).uniform(
                0, 1, (2, s.channels, s.resolution, s.resolution)
            ).astype(np.float32))
            with no_grad():
                y = tr(x)
            t = specs[j - 1]
            ok = tuple(y.shape) == (2, t.channels, t.resolution, t.resolution)
            rows.append((f"fusion/{i}to{j}_conforms", ok, f"got {tuple(y.shape)}"))
            if progress:
                progress(rows[-1])
    two = FusionTransform(specs, 1, 3, np.float32, rng)
    rows.append(("fusion/1to3_uses_2_stride2_convs",
                 two.num_stride2_convs == 2,
                 f"got {two.num_stride2_convs}"))
    if progress:
        progress(rows[-1])
    return rows


def suite_data(progress=None):
    rows = []
    images, annotations = synth_generate(20, (300, 220), (0, 25), 6.0, seed=5)
    conserved = all(
        sum(p.count for p in tile_image(img.astype(np.float32) / 255.0, ann, 128))
        == ann.count
        for img, ann in zip(images, annotations))
    rows.append(("data/count_conservation", conserved, "tiling at 128"))
    if progress:
        progress(rows[-1])

    ds = dataset_from_arrays(images, annotations)
    patch = tile_image(ds.images[0], ds.annotations[0], 128)[0]
    flipped_twice = horizontal_flip(horizontal_flip(patch))
    rows.append(("data/flip_involution",
                 np.array_equal(flipped_twice.pixels, patch.pixels), ""))
    if progress:
        progress(rows[-1])

    a = make_priors(horizontal_flip(patch))
    b = make_priors(patch)
    commute = (np.allclose(a.i1, b.i1[:, :, ::-1], atol=1e-6)
               and np.allclose(a.i3, b.i3[:, :, ::-1], atol=1e-6))
    rows.append(("data/flip_commutes_with_priors", commute, ""))
    if progress:
        progress(rows[-1])
    return rows


SUITES = {
    "gradients": suite_gradients,
    "shapes": suite_shapes,
    "fusion": suite_fusion,
    "data": suite_data,
}


def run_suites(names, printer=print) -> bool:
    ok = True
    for name in names:
        if name not in SUITES:
            raise ValueError(
                f"unknown suite {name!r}; available: {', '.join(SUITES)} or all")

        def show(row):
            printer(f"{'PASS' if row[1] else 'FAIL'} {row[0]}"
                    + (f": {row[2]}" if row[2] and not row[1] else ""))

        rows = SUITES[name](progress=show)
        ok = ok and all(r[1] for r in rows)
    return ok
