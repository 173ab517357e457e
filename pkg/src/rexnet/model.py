"""RegionNet / ContextNet at desk scale, their losses, and map fusion.

The shared trunk is a four-stage micro-VGG (two 3x3 conv + ReLU, then 2x2
max-pool per stage). RegionNet pools the 1/16-scale trunk output per region
with mask-based RoI pooling and classifies each region. ContextNet attaches
one branch after pools 1-3 and one to the last conv before pool 4; branch
strides 4, 2, 1, 1 bring every branch to 1/8 scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .regions import DownsampledMask, RegionMask, downsample_mask, region_rois, resample_labels
from .roipool import POOL_SIZE, FeatureRoI, PooledRegionFeature, mask_roi_pool_backward, mask_roi_pool_forward, \
    to_feature_rois
from .tensor import (ConvLayer, Linear, PoolRecord, Tensor, bilinear_upsample, bilinear_upsample_backward,
                     maxpool2x2_backward, maxpool2x2_forward, pad_even, relu_backward, relu_forward,
                     sigmoid_backward, sigmoid_forward, softmax2_forward)

EPS = 1e-7
FEATURE_STRIDE = 16
MAP_STRIDE = 8
BRANCH_STRIDES = (4, 2, 1, 1)
BRANCH_CHANNELS = (64, 64, 128)
BRANCH_HEAD = 128


def prepare_image(image: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8/float image -> 1 x 3 x H x W centred float64."""
    img = np.asarray(image, dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    return (img - 0.5).transpose(2, 0, 1)[None]


def _unpad_even_grad(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    h, w = shape[2], shape[3]
    if g.shape[3] > w:
        g = g.copy()
        g[:, :, :, w - 1] += g[:, :, :, w]
        g = g[:, :, :, :w]
    if g.shape[2] > h:
        g = g.copy()
        g[:, :, h - 1, :] += g[:, :, h, :]
        g = g[:, :, :h, :]
    return g


class Trunk:
    def __init__(self, rng: np.random.Generator, channels=(8, 16, 32, 32), in_ch: int = 3):
        if len(channels) != 4:
            raise ValueError("the trunk has exactly four stages")
        self.channels = tuple(channels)
        self.stages: list[tuple[ConvLayer, ConvLayer]] = []
        prev = in_ch
        for s, ch in enumerate(channels, 1):
            a = ConvLayer.create(rng, prev, ch, 3, name=f"trunk.s{s}.conv_a")
            b = ConvLayer.create(rng, ch, ch, 3, name=f"trunk.s{s}.conv_b")
            self.stages.append((a, b))
            prev = ch
        self._cache: list | None = None

    @property
    def params(self) -> list[Tensor]:
        return [p for a, b in self.stages for p in a.params + b.params]

    def forward(self, x: np.ndarray) -> dict[str, np.ndarray]:
        taps: dict[str, np.ndarray] = {}
        cache = []
        for s, (ca, cb) in enumerate(self.stages, 1):
            a = ca.forward(x)
            ra = relu_forward(a)
            b = cb.forward(ra)
            rb = relu_forward(b)
            rec = maxpool2x2_forward(pad_even(rb))
            cache.append((a, b, rb.shape, rec))
            taps[f"conv{s}"] = rb
            taps[f"pool{s}"] = rec.output
            x = rec.output
        self._cache = cache
        return taps

    def backward(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("trunk backward called without a forward context")
        g = None
        for s in range(4, 0, -1):
            a, b, rb_shape, rec = self._cache[s - 1]
            ca, cb = self.stages[s - 1]
            gp = grads.get(f"pool{s}")
            if g is not None:
                gp = g if gp is None else gp + g
            grb = np.zeros(rb_shape) if gp is None else _unpad_even_grad(maxpool2x2_backward(rec, gp), rb_shape)
            if f"conv{s}" in grads:
                grb = grb + grads[f"conv{s}"]
            g = ca.backward(relu_backward(a, cb.backward(relu_backward(b, grb))))
        return g


class RegionScoreHead:
    def __init__(self, rng: np.random.Generator, in_features: int, hidden: int = 256):
        self.fc1 = Linear.create(rng, in_features, hidden, name="head.fc1")
        self.fc2 = Linear.create(rng, hidden, 2, name="head.fc2", std=0.01)
        self._h = None

    @property
    def params(self) -> list[Tensor]:
        return self.fc1.params + self.fc2.params

    def forward(self, pooled: np.ndarray) -> np.ndarray:
        """(R, C*P*P) -> logits (R, 2)."""
        self._h = self.fc1.forward(pooled)
        return self.fc2.forward(relu_forward(self._h))

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        return self.fc1.backward(relu_backward(self._h, self.fc2.backward(grad_logits)))


@dataclass
class RegionBatch:
    """Per-mask inputs to RegionNet, precomputable from the mask alone."""

    mask: RegionMask
    ds: DownsampledMask
    rois: list[FeatureRoI]


def make_region_batch(mask: RegionMask, feature_hw: tuple[int, int]) -> RegionBatch:
    ds = downsample_mask(mask, FEATURE_STRIDE)
    if ds.mask.shape != tuple(feature_hw):
        raise ValueError(f"downsampled mask {ds.mask.shape} does not match features {feature_hw}")
    return RegionBatch(mask, ds, to_feature_rois(region_rois(mask), ds, feature_hw))


def feature_hw(h: int, w: int) -> tuple[int, int]:
    for _ in range(4):
        h, w = (h + 1) // 2, (w + 1) // 2
    return h, w


class RegionNet:
    def __init__(self, trunk: Trunk, rng: np.random.Generator, hidden: int = 256):
        self.trunk = trunk
        self.head = RegionScoreHead(rng, trunk.channels[-1] * POOL_SIZE * POOL_SIZE, hidden)
        self._ctx = None

    @property
    def params(self) -> list[Tensor]:
        return self.trunk.params + self.head.params

    def forward(self, x: np.ndarray, batches: list[RegionBatch], taps: dict | None = None):
        """Returns (per-batch salient probabilities, per-batch logits, taps)."""
        if any(len(b.rois) == 0 for b in batches):
            raise ValueError("RegionNet needs at least one region per mask")
        if taps is None:
            taps = self.trunk.forward(x)
        feats = taps["pool4"]
        pooled: list[list[PooledRegionFeature]] = [mask_roi_pool_forward(feats, b.rois, b.ds.mask) for b in batches]
        flat = np.concatenate([np.stack([p.values.ravel() for p in pb]) for pb in pooled])
        logits = self.head.forward(flat)
        probs = softmax2_forward(logits)[:, 1]
        sizes = np.cumsum([0] + [len(b.rois) for b in batches])
        self._ctx = (pooled, feats.shape, sizes)
        return ([probs[sizes[i]:sizes[i + 1]] for i in range(len(batches))],
                [logits[sizes[i]:sizes[i + 1]] for i in range(len(batches))], taps)

    def backward(self, grad_logits: np.ndarray) -> None:
        """Backprop stacked (all batches) logit gradients into head and trunk."""
        pooled, fshape, _ = self._ctx
        gflat = self.head.backward(grad_logits)
        flat_pooled = [p for pb in pooled for p in pb]
        c = fshape[1]
        gfeat = mask_roi_pool_backward(flat_pooled, gflat.reshape(-1, c, POOL_SIZE, POOL_SIZE), fshape[1:])
        self.trunk.backward({"pool4": gfeat[None]})

    @staticmethod
    def paint(probs: np.ndarray, mask: RegionMask) -> np.ndarray:
        return probs[mask.labels]


def region_softmax_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean two-class softmax loss over regions whose label is 0/1; others ignored."""
    use = labels >= 0
    grad = np.zeros_like(logits)
    if not use.any():
        return 0.0, grad
    p = softmax2_forward(logits[use])
    y = labels[use]
    n = int(use.sum())
    loss = -np.log(np.clip(p[np.arange(n), y], 1e-300, None)).mean()
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    grad[use] = g / n
    return float(loss), grad


class Branch:
    def __init__(self, rng: np.random.Generator, in_ch: int, stride: int, dilation: int, name: str):
        c1, c2, c3 = BRANCH_CHANNELS
        self.convs = [
            ConvLayer.create(rng, in_ch, c1, 3, stride=stride, dilation=dilation, name=f"{name}.conv1"),
            ConvLayer.create(rng, c1, c2, 3, dilation=dilation, name=f"{name}.conv2"),
            ConvLayer.create(rng, c2, c3, 3, dilation=dilation, name=f"{name}.conv3"),
            ConvLayer.create(rng, c3, BRANCH_HEAD, 1, name=f"{name}.fc1"),
        ]
        self.out = ConvLayer.create(rng, BRANCH_HEAD, 1, 1, name=f"{name}.fc2")
        self.out.weights.data *= 0.1
        self._pre: list[np.ndarray] = []
        self._y = None

    @property
    def params(self) -> list[Tensor]:
        return [p for c in self.convs for p in c.params] + self.out.params

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (sigmoid map (N,1,h,w), last hidden features (N,128,h,w))."""
        self._pre = []
        for conv in self.convs:
            z = conv.forward(x)
            self._pre.append(z)
            x = relu_forward(z)
        self._y = sigmoid_forward(self.out.forward(x))
        return self._y, x

    def backward(self, grad_map: np.ndarray, grad_feat: np.ndarray | None = None) -> None:
        """``grad_map`` is w.r.t. the sigmoid output; the branch input is frozen."""
        g = self.out.backward(sigmoid_backward(self._y, grad_map))
        if grad_feat is not None:
            g = g + grad_feat
        for conv, z in zip(reversed(self.convs), reversed(self._pre)):
            g = conv.backward(relu_backward(z, g))


class FusionHead:
    """One 1x1 conv over stacked inputs, sigmoid output."""

    def __init__(self, rng: np.random.Generator, in_ch: int, name: str, init: float | None = None):
        self.conv = ConvLayer.create(rng, in_ch, 1, 1, name=name)
        if init is not None:
            self.conv.weights.data[:] = init
        self._y = None

    @property
    def params(self) -> list[Tensor]:
        return self.conv.params

    def forward(self, stacked: np.ndarray) -> np.ndarray:
        self._y = sigmoid_forward(self.conv.forward(stacked))
        return self._y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.conv.backward(sigmoid_backward(self._y, grad))


BRANCH_TAPS = ("pool1", "pool2", "pool3", "conv4")


class ContextNet:
    def __init__(self, trunk_channels, rng: np.random.Generator, dilation: int = 2, fusion_variant: str = "maps"):
        if fusion_variant not in ("maps", "features"):
            raise ValueError(f"unknown fusion variant {fusion_variant!r}")
        in_chs = (trunk_channels[0], trunk_channels[1], trunk_channels[2], trunk_channels[3])
        self.branches = [Branch(rng, c, s, dilation, f"ctx.branch{i + 1}")
                         for i, (c, s) in enumerate(zip(in_chs, BRANCH_STRIDES))]
        self.fusion_variant = fusion_variant
        n_in = 4 if fusion_variant == "maps" else 4 * BRANCH_HEAD
        self.fusion = FusionHead(rng, n_in, "ctx.fusion", init=0.25 if fusion_variant == "maps" else None)
        if fusion_variant == "features":
            self.fusion.conv.weights.data *= 0.1
        self._n_feat = None

    @property
    def params(self) -> list[Tensor]:
        return [p for b in self.branches for p in b.params] + self.fusion.params

    def forward(self, taps: dict[str, np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
        maps, feats = [], []
        for b, tap in zip(self.branches, BRANCH_TAPS):
            m, f = b.forward(taps[tap])
            maps.append(m)
            feats.append(f)
        shapes = {m.shape for m in maps}
        if len(shapes) != 1:
            raise ValueError(f"branch outputs disagree in shape: {sorted(shapes)}")
        stacked = np.concatenate(maps if self.fusion_variant == "maps" else feats, axis=1)
        return maps, self.fusion.forward(stacked)

    def backward(self, grad_maps: list[np.ndarray], grad_sc: np.ndarray) -> None:
        gs = self.fusion.backward(grad_sc)
        for i, b in enumerate(self.branches):
            if self.fusion_variant == "maps":
                b.backward(grad_maps[i] + gs[:, i:i + 1])
            else:
                b.backward(grad_maps[i], gs[:, i * BRANCH_HEAD:(i + 1) * BRANCH_HEAD])


# ------------------------------------------------------------------ losses

def downsample_gt(gt: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Area-average to ``shape`` then threshold at 0.5."""
    g = np.asarray(gt, dtype=np.float64)
    h, w = g.shape
    fy, fx = h // shape[0], w // shape[1]
    if fy * shape[0] != h or fx * shape[1] != w:
        raise ValueError(f"gt shape {g.shape} is not an integer multiple of {shape}")
    area = g.reshape(shape[0], fy, shape[1], fx).mean(axis=(1, 3))
    return (area >= 0.5).astype(np.float64)


def cross_entropy_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with predictions clamped to [EPS, 1-EPS]."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(gt, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != gt shape {t.shape}")
    pc = np.clip(p, EPS, 1 - EPS)
    n = p.size
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    inside = (p > EPS) & (p < 1 - EPS)
    grad = np.where(inside, -(t / pc - (1 - t) / (1 - pc)) / n, 0.0)
    return float(loss), grad


def edge_loss(pred: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Half mean squared deviation from the region-mean map.

    The region-mean term's own gradient cancels because deviations sum to zero
    inside every region.
    """
    p = np.asarray(pred, dtype=np.float64)
    lab = np.asarray(labels)
    if lab.shape != p.shape:
        lab = resample_labels(lab, p.shape)
    n = int(lab.max()) + 1
    counts = np.bincount(lab.ravel(), minlength=n)
    means = np.bincount(lab.ravel(), weights=p.ravel(), minlength=n) / np.maximum(counts, 1)
    d = p - means[lab]
    return float(0.5 * np.mean(d * d)), d / p.size


@dataclass
class LossTerms:
    total: float
    terms: dict[str, float]


def deep_supervised_loss(branch_maps: list[np.ndarray], s_c: np.ndarray, gt: np.ndarray, edge_labels: np.ndarray,
                         lambda_edge: float = 0.1, deep_supervision: bool = True):
    """Cross-entropy + weighted edge loss on every branch map and the fused map.

    Maps are (h, w) or (1, 1, h, w); gt is full resolution. Returns
    (LossTerms, branch grads, fused grad) with grads shaped like the inputs.
    """
    shape = np.squeeze(s_c).shape
    gt_s = downsample_gt(gt, shape)
    lab_s = resample_labels(np.asarray(edge_labels), shape)
    terms: dict[str, float] = {}
    total = 0.0

    def one(m, tag):
        nonlocal total
        lc, gc = cross_entropy_loss(np.squeeze(m), gt_s)
        le, ge = edge_loss(np.squeeze(m), lab_s)
        terms[f"ce_{tag}"] = lc
        terms[f"edge_{tag}"] = le
        total += lc + lambda_edge * le
        return (gc + lambda_edge * ge).reshape(np.shape(m))

    grads = []
    for i, m in enumerate(branch_maps, 1):
        grads.append(one(m, f"b{i}") if deep_supervision else np.zeros(np.shape(m)))
    g_sc = one(s_c, "sc")
    return LossTerms(total, terms), grads, g_sc


def fuse_inputs(s_s: np.ndarray, s_e: np.ndarray, s_c: np.ndarray) -> np.ndarray:
    """Stack full-resolution S_S, S_E with S_C upsampled to match -> (1, 3, H, W)."""
    s_s, s_e = np.asarray(s_s, dtype=np.float64), np.asarray(s_e, dtype=np.float64)
    if s_s.shape != s_e.shape:
        raise ValueError(f"S_S {s_s.shape} and S_E {s_e.shape} differ in shape")
    sc = np.asarray(s_c, dtype=np.float64).reshape(1, 1, *np.squeeze(s_c).shape)
    factor = s_s.shape[0] // sc.shape[2]
    if factor * sc.shape[2] != s_s.shape[0] or factor * sc.shape[3] != s_s.shape[1]:
        raise ValueError(f"S_C {sc.shape[2:]} does not divide full resolution {s_s.shape}")
    up = bilinear_upsample(sc, factor)
    return np.concatenate([s_s[None, None], s_e[None, None], up], axis=1)


def fuse_saliency(head: FusionHead, s_s: np.ndarray, s_e: np.ndarray, s_c: np.ndarray) -> np.ndarray:
    return head.forward(fuse_inputs(s_s, s_e, s_c))[0, 0]


# ------------------------------------------------------------------ model

class RexNet:
    """Shared trunk, RegionNet head, ContextNet branches, and the final fusion."""

    def __init__(self, seed: int = 0, trunk_channels=(8, 16, 32, 32), hidden: int = 256, dilation: int = 2,
                 fusion_variant: str = "maps"):
        rng = np.random.default_rng(seed)
        self.trunk = Trunk(rng, trunk_channels)
        self.regionnet = RegionNet(self.trunk, rng, hidden)
        self.contextnet = ContextNet(trunk_channels, rng, dilation, fusion_variant)
        self.final = FusionHead(rng, 3, "final.fusion", init=1.0)

    @property
    def stage1_params(self) -> list[Tensor]:
        return self.regionnet.params

    @property
    def stage2_params(self) -> list[Tensor]:
        return self.contextnet.params + self.final.params

    @property
    def params(self) -> list[Tensor]:
        return self.stage1_params + self.stage2_params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = {p.name: p for p in self.params}
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in mine.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model {p.data.shape}")
            p.data[...] = state[name]

    def predict(self, image: np.ndarray, sp_mask: RegionMask, edge_mask: RegionMask) -> dict[str, np.ndarray]:
        """Full-resolution S_S, S_E, S (and S_C at 1/8 plus upsampled) for one image."""
        x = prepare_image(image)
        h, w = x.shape[2:]
        if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
            raise ValueError(f"image size {(h, w)} must be a multiple of {FEATURE_STRIDE}")
        fhw = feature_hw(h, w)
        batches = [make_region_batch(sp_mask, fhw), make_region_batch(edge_mask, fhw)]
        probs, _, taps = self.regionnet.forward(x, batches)
        s_s = RegionNet.paint(probs[0], sp_mask)
        s_e = RegionNet.paint(probs[1], edge_mask)
        maps, s_c = self.contextnet.forward(taps)
        s = fuse_saliency(self.final, s_s, s_e, s_c)
        up = bilinear_upsample(s_c, MAP_STRIDE)[0, 0]
        return {"SS": s_s, "SE": s_e, "SC": np.clip(up, 0.0, 1.0), "S": s,
                "SC_small": s_c[0, 0], "branches": [m[0, 0] for m in maps]}


def stage2_loss_and_grads(model: RexNet, taps: dict[str, np.ndarray], s_s: np.ndarray, s_e: np.ndarray,
                          gt: np.ndarray, edge_labels: np.ndarray, lambda_edge: float,
                          deep_supervision: bool = True, backward: bool = True) -> LossTerms:
    """Forward the stage-2 objective for one image and (optionally) accumulate grads."""
    maps, s_c = model.contextnet.forward(taps)
    terms, g_maps, g_sc = deep_supervised_loss(maps, s_c, gt, edge_labels, lambda_edge, deep_supervision)
    stacked = fuse_inputs(s_s, s_e, s_c)
    s = model.final.forward(stacked)
    l_fuse, g_s = cross_entropy_loss(s[0, 0], gt)
    terms.terms["ce_final"] = l_fuse
    terms.total += l_fuse
    if backward:
        g_stack = model.final.backward(g_s[None, None])
        g_sc = g_sc + bilinear_upsample_backward(g_stack[:, 2:3], s_s.shape[0] // s_c.shape[2], s_c.shape[2:])
        model.contextnet.backward(g_maps, g_sc)
    return terms
