"""The segmentation network: edge guidance, scale-aware convolution and
cross-level fusion modules wired into a top-down decoder with four
edge-weighted side outputs, plus the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import engine
from .backbone import Backbone, BackboneConfig
from .engine import (Tensor, bilinear_resize, concat_channels,
                     global_avg_pool, relu, sigmoid)
from .layers import Conv2d, ConvBNReLU, Module


@dataclass
class ModelConfig:
    common_width: int = 32              # shared channel width K after each SCM
    dilation_rates: tuple = (2, 4, 8)
    cfm_reduction: int = 4              # channel bottleneck ratio t inside CFM
    beta_edge: float = 5.0              # weight of the edge loss term
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if (2 * self.common_width) % self.cfm_reduction:
            raise ValueError(
                f"cfm_reduction={self.cfm_reduction} must divide "
                f"2*common_width={2 * self.common_width}")


@dataclass
class ModelOutput:
    """Side-output logits S1..S4 and edge logits Se at input resolution,
    plus the internal edge feature Fe (at stride 2)."""
    side_logits: list            # [S1, S2, S3, S4]
    edge_logits: Tensor          # Se
    edge_feature: Tensor         # Fe


@dataclass
class LossBreakdown:
    seg_losses: list             # scalar Tensors, one per side output
    edge_loss: Tensor
    total: Tensor

    def values(self):
        return ([float(t.data) for t in self.seg_losses],
                float(self.edge_loss.data), float(self.total.data))


class EdgeGuidance(Module):
    """Fuses F1, F2 and F5 into an edge feature and edge-map logits."""

    def __init__(self, c1, c2, c5, width, rng, dtype):
        super().__init__()
        self.reduce2 = Conv2d(c2, width, 1, rng, dtype=dtype)
        self.reduce5 = Conv2d(c5, width, 1, rng, dtype=dtype)
        self.fuse12 = ConvBNReLU(c1 + width, width, 3, rng, dtype=dtype)
        self.fuse_edge = ConvBNReLU(2 * width, width, 3, rng, dtype=dtype)
        self.edge_out = Conv2d(width, 1, 1, rng, dtype=dtype)

    def __call__(self, f1, f2, f5, out_h, out_w):
        with engine.scoped(self.scope):
            return self._forward(f1, f2, f5, out_h, out_w)

    def _forward(self, f1, f2, f5, out_h, out_w):
        h, w = f1.shape[2], f1.shape[3]
        f2r = bilinear_resize(self.reduce2(f2), h, w)
        f5r = bilinear_resize(self.reduce5(f5), h, w)
        f12 = self.fuse12(concat_channels([f1, f2r]))
        fe = self.fuse_edge(concat_channels([f12, f5r]))
        se = bilinear_resize(self.edge_out(fe), out_h, out_w)
        return fe, se


class ScaleAwareConv(Module):
    """Parallel dilated 3x3 branches plus a residual 1x1 path."""

    def __init__(self, cin, width, rates, rng, dtype):
        super().__init__()
        self.pre_a = Conv2d(cin, width, 1, rng, dtype=dtype)
        self.pre_b = Conv2d(cin, width, 1, rng, dtype=dtype)
        self.branches = _Branches()
        for i, r in enumerate(rates):
            setattr(self.branches, f"rate{r}",
                    ConvBNReLU(width, width, 3, rng, dilation=r, dtype=dtype))
        self.rates = tuple(rates)
        self.fuse_cat = ConvBNReLU(len(rates) * width, width, 3, rng, dtype=dtype)
        self.fuse_res = ConvBNReLU(width, width, 3, rng, dtype=dtype)
        self.out = ConvBNReLU(width, width, 3, rng, dtype=dtype)

    def __call__(self, x):
        with engine.scoped(self.scope):
            return self._forward(x)

    def _forward(self, x):
        a = self.pre_a(x)
        b = self.pre_b(x)
        scaled = [getattr(self.branches, f"rate{r}")(a) for r in self.rates]
        merged = self.fuse_cat(concat_channels(scaled)) + self.fuse_res(b)
        return self.out(merged)


class _Branches(Module):
    pass


class CrossLevelFusion(Module):
    """Concatenates two same-size features and re-weights them with local
    (per-pixel) and global (pooled) sigmoid attention before reduction."""

    def __init__(self, width, reduction, rng, dtype):
        super().__init__()
        c = 2 * width
        mid = c // reduction
        self.branch1 = ConvBNReLU(c, c, 3, rng, dtype=dtype)
        self.branch2 = ConvBNReLU(c, c, 3, rng, dtype=dtype)
        self.branch3 = ConvBNReLU(c, c, 3, rng, dtype=dtype)
        self.local_pwc1 = Conv2d(c, mid, 1, rng, dtype=dtype)
        self.local_pwc2 = Conv2d(mid, c, 1, rng, dtype=dtype)
        self.global_pwc1 = Conv2d(c, mid, 1, rng, dtype=dtype)
        self.global_pwc2 = Conv2d(mid, c, 1, rng, dtype=dtype)
        self.out = ConvBNReLU(3 * c, width, 3, rng, dtype=dtype)

    def __call__(self, fa, fb):
        with engine.scoped(self.scope):
            return self._forward(fa, fb)

    def _forward(self, fa, fb):
        if fa.shape[2:] != fb.shape[2:]:
            raise ValueError(
                f"cross-level fusion needs matching spatial sizes, got "
                f"{fa.shape} vs {fb.shape}")
        cat1 = self.branch1(concat_channels([fa, fb]))
        cat2 = self.branch2(concat_channels([fa, fb]))
        cat3 = self.branch3(concat_channels([fa, fb]))
        w_local = sigmoid(self.local_pwc2(relu(self.local_pwc1(cat1))))
        w_global = sigmoid(self.global_pwc2(relu(self.global_pwc1(
            global_avg_pool(cat2)))))
        en1 = cat1 * w_local + cat1
        en2 = cat2 * w_global + cat2
        return self.out(concat_channels([en1, en2, cat3]))


class SideHead(Module):
    """Two 3x3 conv blocks followed by a 1x1 conv to one logit channel."""

    def __init__(self, width, rng, dtype):
        super().__init__()
        self.block1 = ConvBNReLU(width, width, 3, rng, dtype=dtype)
        self.block2 = ConvBNReLU(width, width, 3, rng, dtype=dtype)
        self.out = Conv2d(width, 1, 1, rng, dtype=dtype)

    def __call__(self, x):
        with engine.scoped(self.scope):
            return self.out(self.block2(self.block1(x)))


class EFANet(Module):
    def __init__(self, config: ModelConfig, seed=0, dtype=np.float64):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        k = config.common_width
        chans = config.backbone.channels_per_level
        self.backbone = Backbone(config.backbone, rng, dtype)
        self.egm = EdgeGuidance(chans[0], chans[1], chans[4], k, rng, dtype)
        self.scms = _Stack()
        for i in range(5):
            setattr(self.scms, f"scm{i + 1}",
                    ScaleAwareConv(chans[i], k, config.dilation_rates, rng, dtype))
        self.cfms = _Stack()
        for i in range(4):
            setattr(self.cfms, f"cfm{i + 1}",
                    CrossLevelFusion(k, config.cfm_reduction, rng, dtype))
        self.edge_attn = Conv2d(k, 1, 1, rng, dtype=dtype)
        self.heads = _Stack()
        for i in range(4):
            setattr(self.heads, f"head{i + 1}", SideHead(k, rng, dtype))
        self.annotate_scopes()

    def edge_weight(self, fcfm, fe):
        """Residual edge attention: fcfm * sigma(attn(fe)) + fcfm."""
        with engine.scoped("decoder"):
            a = sigmoid(self.edge_attn(fe))
            a = bilinear_resize(a, fcfm.shape[2], fcfm.shape[3])
            return fcfm * a + fcfm

    def __call__(self, image):
        with engine.scoped("decoder"):
            return self._forward(image)

    def _forward(self, image):
        n, c, h, w = image.shape
        pyramid = self.backbone(image)
        scaled = [getattr(self.scms, f"scm{i}")(pyramid[i]) for i in range(1, 6)]
        fe, se = self.egm(pyramid[1], pyramid[2], pyramid[5], h, w)

        # top-down cascade: D5 = T5, D_i = CFM_i(Up(D_{i+1}), T_i)
        d = scaled[4]
        decoded = [None] * 4
        for i in range(4, 0, -1):
            t = scaled[i - 1]
            up = bilinear_resize(d, t.shape[2], t.shape[3])
            d = getattr(self.cfms, f"cfm{i}")(up, t)
            decoded[i - 1] = d

        side = []
        for i in range(4):
            weighted = self.edge_weight(decoded[i], fe)
            logits = getattr(self.heads, f"head{i + 1}")(weighted)
            side.append(bilinear_resize(logits, h, w))
        return ModelOutput(side_logits=side, edge_logits=se, edge_feature=fe)


class _Stack(Module):
    pass


# -- losses ------------------------------------------------------------------


def _bce_map(logits, target):
    """Per-pixel binary cross-entropy on logits, numerically stable:
    max(s,0) - s*g + log(1 + exp(-|s|))."""
    s = logits
    g = Tensor(np.asarray(target, dtype=logits.dtype))
    abs_s = relu(s) + relu(-s)
    return relu(s) - s * g + engine.log(engine.exp(-abs_s) + 1.0)


def boundary_weights(mask, kernel=None):
    """Boundary-emphasis weight map 1 + 5*|meanpool_k(G) - G|.

    Kernel size scales with resolution: nearest odd to 31 * H / 352, min 3.
    """
    g = np.asarray(mask, dtype=np.float64)
    h = g.shape[-2]
    if kernel is None:
        kernel = int(round(31.0 * h / 352.0))
        kernel += (kernel + 1) % 2
        kernel = max(kernel, 3)
    pooled = ndimage.uniform_filter(g, size=(1,) * (g.ndim - 2) + (kernel, kernel),
                                    mode="nearest")
    return 1.0 + 5.0 * np.abs(pooled - g)


def _check_binary(arr, name):
    a = np.asarray(arr)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary (0/1)")


def seg_loss(logits, mask):
    """Weighted BCE + weighted IoU loss for one side output."""
    if logits.shape != np.asarray(mask).shape:
        raise ValueError(f"seg_loss: logits {logits.shape} vs mask "
                         f"{np.asarray(mask).shape}")
    _check_binary(mask, "mask")
    w = Tensor(boundary_weights(mask).astype(logits.dtype))
    g = Tensor(np.asarray(mask, dtype=logits.dtype))

    bce = _bce_map(logits, np.asarray(mask, dtype=np.float64))
    wsum = w.sum()
    l_bce = (w * bce).sum() / wsum

    p = sigmoid(logits)
    inter = (w * p * g).sum()
    union = (w * (p + g - p * g)).sum()
    l_iou = 1.0 - inter / union
    return l_bce + l_iou


def edge_loss(edge_logits, edge_gt):
    """Plain mean BCE between the edge logits and the Sobel edge target."""
    _check_binary(edge_gt, "edge ground truth")
    return engine.mean_all(_bce_map(edge_logits, edge_gt))


def total_loss(output: ModelOutput, mask, edge_gt, config: ModelConfig):
    """Sum of the four side-output losses plus beta * edge loss."""
    seg_terms = [seg_loss(s, mask) for s in output.side_logits]
    l_e = edge_loss(output.edge_logits, edge_gt)
    total = seg_terms[0]
    for t in seg_terms[1:]:
        total = total + t
    total = total + float(config.beta_edge) * l_e
    return LossBreakdown(seg_losses=seg_terms, edge_loss=l_e, total=total)
