"""Finite-difference verification of every layer and of both training objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RexNet, feature_hw, make_region_batch, prepare_image, region_softmax_loss, stage2_loss_and_grads
from .regions import RegionMask, edge_regions, region_label, slic_superpixels
from .roipool import FeatureRoI, mask_roi_pool_backward, mask_roi_pool_forward
from .tensor import (ConvLayer, GradCheckReport, Linear, Tensor, bilinear_upsample, bilinear_upsample_backward,
                     finite_difference_check, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
                     sigmoid_backward, sigmoid_forward, softmax2_backward, softmax2_forward)

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def ok(self) -> bool:
        return self.report.passed(TOLERANCE)


def _check_input_fn(forward, backward, x: np.ndarray, rng) -> GradCheckReport:
    """Scalar loss sum(w * f(x)) with random w; checks d/dx."""
    t = Tensor(x, "input")
    w = rng.standard_normal(forward(t.data).shape)
    analytic = backward(t.data, w)
    return finite_difference_check(lambda: float(np.sum(w * forward(t.data))), [t], [analytic], STEP)


def check_conv(rng, stride=1, dilation=1, padding=1) -> GradCheckReport:
    layer = ConvLayer.create(rng, 2, 3, 3, stride=stride, dilation=dilation, padding=padding, name="conv")
    layer.bias.data[:] = rng.standard_normal(3)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), "conv.input")
    w = rng.standard_normal(layer.forward(x.data).shape)
    for p in layer.params:
        p.zero_grad()
    layer.forward(x.data)
    dx = layer.backward(w)

    def loss():
        return float(np.sum(w * layer.forward(x.data)))

    return _merge([finite_difference_check(loss, layer.params + [x], [layer.weights.grad, layer.bias.grad, dx], STEP)])


def check_linear(rng) -> GradCheckReport:
    layer = Linear.create(rng, 5, 4, "linear")
    x = Tensor(rng.standard_normal((3, 5)), "linear.input")
    w = rng.standard_normal((3, 4))
    layer.forward(x.data)
    dx = layer.backward(w)
    return finite_difference_check(lambda: float(np.sum(w * layer.forward(x.data))), layer.params + [x],
                                   [layer.weights.grad, layer.bias.grad, dx], STEP)


def check_maxpool(rng) -> GradCheckReport:
    x = rng.permutation(64 * 3).reshape(1, 3, 8, 8) / 10.0  # distinct values: no ties
    return _check_input_fn(lambda a: maxpool2x2_forward(a).output,
                           lambda a, g: maxpool2x2_backward(maxpool2x2_forward(a), g), x, rng)


def check_mask_roi_pool(rng) -> GradCheckReport:
    c, h, w = 3, 10, 10
    x = (rng.permutation(c * h * w).reshape(c, h, w) / 10.0)
    labels = np.zeros((h, w), dtype=np.int64)
    labels[:, 5:] = 1
    labels[6:, :5] = 2
    rois = [FeatureRoI(0, (0, 0, 4, 5)), FeatureRoI(1, (5, 0, 9, 9)), FeatureRoI(2, (0, 6, 4, 9)),
            FeatureRoI(1, (0, 0, 9, 9))]

    def fwd(a):
        return np.stack([p.values for p in mask_roi_pool_forward(a, rois, labels)])

    def bwd(a, g):
        return mask_roi_pool_backward(mask_roi_pool_forward(a, rois, labels), g, a.shape)

    return _check_input_fn(fwd, bwd, x, rng)


def check_elementwise(rng) -> list[CheckResult]:
    x = rng.standard_normal((1, 2, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the ReLU kink
    return [
        CheckResult("relu", _check_input_fn(relu_forward, relu_backward, x, rng)),
        CheckResult("sigmoid", _check_input_fn(sigmoid_forward, lambda a, g: sigmoid_backward(sigmoid_forward(a), g),
                                               x, rng)),
        CheckResult("softmax2", _check_input_fn(softmax2_forward,
                                                lambda a, g: softmax2_backward(softmax2_forward(a), g),
                                                rng.standard_normal((4, 3, 2)), rng)),
        CheckResult("bilinear_upsample", _check_input_fn(
            lambda a: bilinear_upsample(a, 4), lambda a, g: bilinear_upsample_backward(g, 4, a.shape[2:]),
            rng.standard_normal((1, 1, 3, 4)), rng)),
    ]


def _merge(reports: list[GradCheckReport]) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(worst.max_rel_error, sum(r.n_checked for r in reports), worst.worst,
                           sum(r.n_kinks for r in reports))


def random_instance(rng, size: int = 32):
    """Random image, gt, superpixel mask and edge-region mask."""
    img = (rng.random((size, size, 3)) * 255).astype(np.uint8)
    img[size // 4:3 * size // 4, size // 4:3 * size // 4] = rng.integers(0, 255, 3)
    gt = np.zeros((size, size), dtype=bool)
    gt[size // 4:3 * size // 4, size // 4:3 * size // 4] = True
    sp = slic_superpixels(img, 12)
    edges = np.zeros((size, size), dtype=bool)
    edges[size // 4 - 1, :] = edges[3 * size // 4, :] = True
    edges[:, size // 4 - 1] = edges[:, 3 * size // 4] = True
    return img, gt, sp, edge_regions(edges)


def check_stage1(rng, max_coords: int = 12) -> GradCheckReport:
    img, gt, sp, em = random_instance(rng)
    model = RexNet(int(rng.integers(1 << 30)), hidden=16)
    net = model.regionnet
    x = prepare_image(img)
    fhw = feature_hw(*x.shape[2:])
    # a 32x32 image gives a 2x2 feature map: use a whole-image region and a quadrant grid
    quad = RegionMask((np.arange(32)[:, None] // 16) * 2 + (np.arange(32)[None, :] // 16))
    batches = [make_region_batch(quad, fhw), make_region_batch(RegionMask(np.zeros((32, 32), np.int64)), fhw)]
    labels = np.concatenate([region_label(b.mask, gt) for b in batches])
    labels[labels < 0] = 0

    def loss():
        _, logits, _ = net.forward(x, batches)
        return region_softmax_loss(np.concatenate(logits), labels)[0]

    for p in net.params:
        p.zero_grad()
    _, logits, _ = net.forward(x, batches)
    _, g = region_softmax_loss(np.concatenate(logits), labels)
    net.backward(g)
    return finite_difference_check(loss, net.params, [p.grad for p in net.params], STEP, max_coords, rng)


def check_stage2(rng, max_coords: int = 12, lambda_edge: float = 0.1) -> GradCheckReport:
    img, gt, sp, em = random_instance(rng)
    model = RexNet(int(rng.integers(1 << 30)))
    x = prepare_image(img)
    taps = model.trunk.forward(x)
    pred = model.predict(img, sp, em)
    s_s, s_e = pred["SS"], pred["SE"]
    gtf = gt.astype(np.float64)

    def loss():
        return stage2_loss_and_grads(model, taps, s_s, s_e, gtf, em.labels, lambda_edge, backward=False).total

    params = model.stage2_params
    for p in params:
        p.zero_grad()
    stage2_loss_and_grads(model, taps, s_s, s_e, gtf, em.labels, lambda_edge)
    return finite_difference_check(loss, params, [p.grad for p in params], STEP, max_coords, rng)


def run_suite(seed: int = 0, max_coords: int = 12) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        CheckResult("conv3x3", check_conv(rng)),
        CheckResult("conv3x3_stride2", check_conv(rng, stride=2)),
        CheckResult("conv3x3_dilation2", check_conv(rng, dilation=2, padding=2)),
        CheckResult("linear", check_linear(rng)),
        CheckResult("maxpool2x2", check_maxpool(rng)),
        CheckResult("mask_roi_pool", check_mask_roi_pool(rng)),
        *check_elementwise(rng),
        CheckResult("stage1_region_loss", check_stage1(rng, max_coords)),
        CheckResult("stage2_full_loss", check_stage2(rng, max_coords)),
    ]
    return results
