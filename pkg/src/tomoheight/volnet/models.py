"""The three volumetric U-Net regressors and their z-collapse heads.

Backbones (encoder/decoder levels, block type, default width chosen to meet
the parameter budget):

    Model1  3 levels, double-convolution blocks, base width 64  (~21M params)
    Model2  2 levels, double-convolution blocks, base width 32  (~1.3M)
    Model3  2 levels, residual blocks,           base width 32  (~1.3M)

Downsampling is 2x2x2 max pooling in (x, y, z); decoding uses
nearest-neighbor resize to the skip's exact shape, a 1x1x1 channel-halving
convolution, channel concatenation with the skip, and a block.  The
backbone maps (C, W, W, Z) -> (base_width, W, W, Z); a collapse head then
reduces z to produce a (W, W) height map:

    ConvZ         single convolution spanning the full z extent (kernel
                  depth 36, no z padding, with bias), then 1x1 projection
    GapZ          mean over z, then 1x1 projection
    ProgressiveZ  stride-2 z convolutions 36 -> 18 -> 9 -> 5 -> 3 -> 1,
                  then 1x1 projection

Heights are regressed directly (no output nonlinearity).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import BadSpecError, NonFiniteError, ShapeMismatchError
from .layers import (
    BatchNorm3d,
    Conv3d,
    Dropout,
    ForwardCtx,
    MaxPool3d,
    Module,
    NearestResize3d,
    ReLU,
)

#: z extent the ConvZ / ProgressiveZ heads are built for.
HEAD_Z = 36

#: Progressive head z sizes after each stride-2 stage.
_PROGRESSIVE_Z = (36, 18, 9, 5, 3, 1)


class Backbone(Enum):
    Model1 = "model1"
    Model2 = "model2"
    Model3 = "model3"


class CollapseKind(Enum):
    ConvZ = "conv"
    GapZ = "gap"
    ProgressiveZ = "progressive"


DEFAULT_BASE_WIDTH = {Backbone.Model1: 64, Backbone.Model2: 32, Backbone.Model3: 32}
_LEVELS = {Backbone.Model1: 3, Backbone.Model2: 2, Backbone.Model3: 2}

#: Trainable-parameter budgets the default widths are sized for (+/- 15%).
PARAM_BUDGET = {Backbone.Model1: 21_000_000, Backbone.Model2: 1_300_000,
                Backbone.Model3: 1_200_000}


@dataclass(frozen=True)
class ModelSpec:
    backbone: Backbone
    collapse: CollapseKind
    in_channels: int
    base_width: int | None = None  # None -> backbone default
    dropout_rate: float = 0.0
    batch_norm: bool = True

    def __post_init__(self):
        if not (0 <= self.dropout_rate <= 0.5):
            raise BadSpecError("dropout_rate must be in [0, 0.5]")
        if self.base_width is not None and self.base_width < 4:
            raise BadSpecError("base_width must be at least 4")
        if self.in_channels < 1:
            raise BadSpecError("in_channels must be positive")

    @property
    def width(self) -> int:
        return self.base_width or DEFAULT_BASE_WIDTH[self.backbone]

    @property
    def levels(self) -> int:
        return _LEVELS[self.backbone]


class DoubleConvBlock(Module):
    """Two [conv 3x3x3 -> (batch norm) -> ReLU -> dropout] stages."""

    def __init__(self, cin, cout, bn, dropout, dtype, rng):
        super().__init__()
        self.conv1 = self._add_child("conv1", Conv3d(cin, cout, (3, 3, 3),
                                                     pad=(1, 1, 1), dtype=dtype, rng=rng))
        self.bn1 = self._add_child("bn1", BatchNorm3d(cout, dtype=dtype)) if bn else None
        self.conv2 = self._add_child("conv2", Conv3d(cout, cout, (3, 3, 3),
                                                     pad=(1, 1, 1), dtype=dtype, rng=rng))
        self.bn2 = self._add_child("bn2", BatchNorm3d(cout, dtype=dtype)) if bn else None
        self.relu1 = self._add_child("relu1", ReLU())
        self.relu2 = self._add_child("relu2", ReLU())
        self.drop1 = self._add_child("drop1", Dropout(dropout))
        self.drop2 = self._add_child("drop2", Dropout(dropout))

    def forward(self, x, ctx):
        h = self.conv1(x, ctx)
        if self.bn1 is not None:
            h = self.bn1(h, ctx)
        h = self.drop1(self.relu1(h, ctx), ctx)
        h = self.conv2(h, ctx)
        if self.bn2 is not None:
            h = self.bn2(h, ctx)
        return self.drop2(self.relu2(h, ctx), ctx)

    def backward(self, dy):
        d = self.relu2.backward(self.drop2.backward(dy))
        if self.bn2 is not None:
            d = self.bn2.backward(d)
        d = self.conv2.backward(d)
        d = self.relu1.backward(self.drop1.backward(d))
        if self.bn1 is not None:
            d = self.bn1.backward(d)
        return self.conv1.backward(d)


class ResidualBlock(Module):
    """Double convolution with an identity shortcut added before the final
    nonlinearity; a 1x1x1 convolution projects the shortcut on channel change."""

    def __init__(self, cin, cout, bn, dropout, dtype, rng):
        super().__init__()
        self.conv1 = self._add_child("conv1", Conv3d(cin, cout, (3, 3, 3),
                                                     pad=(1, 1, 1), dtype=dtype, rng=rng))
        self.bn1 = self._add_child("bn1", BatchNorm3d(cout, dtype=dtype)) if bn else None
        self.conv2 = self._add_child("conv2", Conv3d(cout, cout, (3, 3, 3),
                                                     pad=(1, 1, 1), dtype=dtype, rng=rng))
        self.bn2 = self._add_child("bn2", BatchNorm3d(cout, dtype=dtype)) if bn else None
        self.shortcut = None
        if cin != cout:
            self.shortcut = self._add_child(
                "shortcut", Conv3d(cin, cout, (1, 1, 1), dtype=dtype, rng=rng))
        self.relu1 = self._add_child("relu1", ReLU())
        self.relu_out = self._add_child("relu_out", ReLU())
        self.drop1 = self._add_child("drop1", Dropout(dropout))
        self.drop_out = self._add_child("drop_out", Dropout(dropout))

    def forward(self, x, ctx):
        h = self.conv1(x, ctx)
        if self.bn1 is not None:
            h = self.bn1(h, ctx)
        h = self.drop1(self.relu1(h, ctx), ctx)
        h = self.conv2(h, ctx)
        if self.bn2 is not None:
            h = self.bn2(h, ctx)
        s = self.shortcut(x, ctx) if self.shortcut is not None else x
        return self.drop_out(self.relu_out(h + s, ctx), ctx)

    def backward(self, dy):
        d = self.relu_out.backward(self.drop_out.backward(dy))
        ds = self.shortcut.backward(d) if self.shortcut is not None else d
        dh = d
        if self.bn2 is not None:
            dh = self.bn2.backward(dh)
        dh = self.conv2.backward(dh)
        dh = self.relu1.backward(self.drop1.backward(dh))
        if self.bn1 is not None:
            dh = self.bn1.backward(dh)
        return self.conv1.backward(dh) + ds


class ConvZHead(Module):
    def __init__(self, c, dtype, rng):
        super().__init__()
        self.z_conv = self._add_child("z_conv", Conv3d(c, c, (1, 1, HEAD_Z),
                                                       dtype=dtype, rng=rng))
        self.relu = self._add_child("relu", ReLU())
        self.proj = self._add_child("proj", Conv3d(c, 1, (1, 1, 1), dtype=dtype, rng=rng))

    def forward(self, x, ctx):
        if x.shape[4] != HEAD_Z:
            raise ShapeMismatchError(f"ConvZ head needs z={HEAD_Z}, got {x.shape[4]}")
        h = self.relu(self.z_conv(x, ctx), ctx)
        return self.proj(h, ctx)[:, 0, :, :, 0]

    def backward(self, dy):
        d = self.proj.backward(dy[:, None, :, :, None])
        return self.z_conv.backward(self.relu.backward(d))


class GapZHead(Module):
    def __init__(self, c, dtype, rng):
        super().__init__()
        self.proj = self._add_child("proj", Conv3d(c, 1, (1, 1, 1), dtype=dtype, rng=rng))
        self._z = None

    def forward(self, x, ctx):
        self._z = x.shape[4]
        # sorting fixes the addition order, so the pooled value is exactly
        # invariant to z permutations; contiguity keeps numpy's pairwise
        # summation blocking identical regardless of the input's layout
        ranked = np.ascontiguousarray(np.sort(x, axis=4))
        pooled = ranked.sum(axis=4, keepdims=True) / self._z
        return self.proj(pooled, ctx)[:, 0, :, :, 0]

    def backward(self, dy):
        d = self.proj.backward(dy[:, None, :, :, None])
        return np.repeat(d, self._z, axis=4) / self._z


class ProgressiveZHead(Module):
    """Stride-2 z reductions 36 -> 18 -> 9 -> 5 -> 3 -> 1, then projection."""

    def __init__(self, c, dtype, rng):
        super().__init__()
        self.stages = []
        for i, z_out in enumerate(_PROGRESSIVE_Z[1:]):
            pad_z = 1 if z_out > 1 else 0  # final stage collapses 3 -> 1 unpadded
            conv = Conv3d(c, c, (1, 1, 3), stride=(1, 1, 2), pad=(0, 0, pad_z),
                          dtype=dtype, rng=rng)
            self._add_child(f"stage{i}", conv)
            relu = self._add_child(f"stage{i}_relu", ReLU())
            self.stages.append((conv, relu))
        self.proj = self._add_child("proj", Conv3d(c, 1, (1, 1, 1), dtype=dtype, rng=rng))

    def forward(self, x, ctx):
        if x.shape[4] != HEAD_Z:
            raise ShapeMismatchError(
                f"progressive head needs z={HEAD_Z}, got {x.shape[4]}")
        h = x
        for conv, relu in self.stages:
            h = relu(conv(h, ctx), ctx)
        return self.proj(h, ctx)[:, 0, :, :, 0]

    def backward(self, dy):
        d = self.proj.backward(dy[:, None, :, :, None])
        for conv, relu in reversed(self.stages):
            d = conv.backward(relu.backward(d))
        return d


def _make_block(backbone, cin, cout, bn, dropout, dtype, rng) -> Module:
    if backbone is Backbone.Model3:
        return ResidualBlock(cin, cout, bn, dropout, dtype, rng)
    return DoubleConvBlock(cin, cout, bn, dropout, dtype, rng)


_HEADS = {
    CollapseKind.ConvZ: ConvZHead,
    CollapseKind.GapZ: GapZHead,
    CollapseKind.ProgressiveZ: ProgressiveZHead,
}


class UNet3dRegressor(Module):
    """U-Net backbone plus z-collapse head mapping (C, W, W, Z) -> (W, W)."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D]))
        b, levels = spec.width, spec.levels
        bn, drop = spec.batch_norm, spec.dropout_rate

        self.enc_blocks, self.pools = [], []
        cin = spec.in_channels
        for i in range(levels):
            block = _make_block(spec.backbone, cin, b * 2 ** i, bn, drop, dtype, rng)
            self.enc_blocks.append(self._add_child(f"enc{i}", block))
            self.pools.append(self._add_child(f"pool{i}", MaxPool3d()))
            cin = b * 2 ** i
        self.bottleneck = self._add_child(
            "bottleneck",
            _make_block(spec.backbone, cin, b * 2 ** levels, bn, drop, dtype, rng))

        self.up_convs, self.up_resizes, self.dec_blocks = [], [], []
        for i in range(levels):
            up = Conv3d(b * 2 ** (i + 1), b * 2 ** i, (1, 1, 1), dtype=dtype, rng=rng)
            self.up_convs.append(self._add_child(f"up{i}", up))
            self.up_resizes.append(self._add_child(f"resize{i}", NearestResize3d()))
            dec = _make_block(spec.backbone, 2 * b * 2 ** i, b * 2 ** i, bn, drop,
                              dtype, rng)
            self.dec_blocks.append(self._add_child(f"dec{i}", dec))

        self.head = self._add_child("head", _HEADS[spec.collapse](b, dtype, rng))
        self._skip_channels = None

    def _check_input(self, x):
        if x.ndim != 5:
            raise ShapeMismatchError(f"expected (N, C, W, W, Z), got {x.shape}")
        if x.shape[1] != self.spec.in_channels:
            raise ShapeMismatchError(
                f"expected {self.spec.in_channels} channels, got {x.shape[1]}")
        factor = 2 ** self.spec.levels
        for d in x.shape[2:4]:
            if d % factor != 0 or d // factor < 2:
                raise ShapeMismatchError(
                    f"spatial extent {d} incompatible with {self.spec.levels} "
                    f"pooling levels (needs a multiple of {factor}, >= {2 * factor})")

    def forward(self, x, ctx: ForwardCtx = ForwardCtx()):
        self._check_input(x)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        skips = []
        h = x
        for block, pool in zip(self.enc_blocks, self.pools):
            h = block(h, ctx)
            skips.append(h)
            h = pool(h, ctx)
        h = self.bottleneck(h, ctx)
        for i in reversed(range(self.spec.levels)):
            skip = skips[i]
            h = self.up_resizes[i].forward_to(h, skip.shape[2:], ctx)
            h = self.up_convs[i](h, ctx)
            h = np.concatenate([skip, h], axis=1)
            h = self.dec_blocks[i](h, ctx)
        y = self.head(h, ctx)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("forward pass produced non-finite outputs")
        return y

    def backward(self, d_out):
        b = self.spec.width
        d = self.head.backward(d_out)
        skip_grads = []
        for i in range(self.spec.levels):
            d = self.dec_blocks[i].backward(d)
            c_skip = b * 2 ** i
            skip_grads.append(d[:, :c_skip])
            d = self.up_convs[i].backward(d[:, c_skip:])
            d = self.up_resizes[i].backward(d)
        d = self.bottleneck.backward(d)
        for i in reversed(range(self.spec.levels)):
            d = self.pools[i].backward(d)
            d = d + skip_grads[i]
            d = self.enc_blocks[i].backward(d)
        return d


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> UNet3dRegressor:
    model = UNet3dRegressor(spec, seed=seed, dtype=dtype)
    if spec.base_width is None:
        budget = PARAM_BUDGET[spec.backbone]
        n = model.n_params()
        assert abs(n - budget) <= 0.15 * budget, (
            f"{spec.backbone.value} default width drifted off its "
            f"{budget / 1e6:.1f}M parameter budget: {n:,}")
    return model


def masked_mse(pred, targets, mask=None):
    """Masked MSE loss and its gradient with respect to the predictions.

    Nodata target pixels contribute zero loss and are excluded from the
    normalizer; an all-masked batch yields zero loss and zero gradients.
    """
    pred = np.asarray(pred)
    targets = np.asarray(targets, dtype=pred.dtype)
    if pred.shape != targets.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs targets {targets.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    n_valid = int(np.count_nonzero(mask))
    if n_valid == 0:
        return 0.0, np.zeros_like(pred)
    resid = np.where(mask, pred - targets, 0.0).astype(pred.dtype)
    loss = float(np.sum(resid ** 2) / n_valid)
    return loss, (2.0 / n_valid) * resid


def activation_signature(model: UNet3dRegressor) -> list[np.ndarray]:
    """Discrete activation pattern of the most recent forward pass.

    Returns copies of every ReLU on/off mask and every max-pool argmax grid.
    Two forwards with equal signatures lie on the same smooth piece of the
    network's piecewise-smooth loss surface, which is the validity condition
    for checking analytic gradients against a finite-difference stencil.
    """
    from .layers import MaxPool3d, ReLU

    sig = []
    for mod in model.iter_modules():
        if isinstance(mod, ReLU) and mod._mask is not None:
            sig.append(mod._mask.copy())
        elif isinstance(mod, MaxPool3d) and mod._cache is not None:
            sig.append(mod._cache[0].copy())
    return sig


def same_signature(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradients(model: UNet3dRegressor, batch, targets, mask=None,
              train: bool = True, rng=None):
    """Gradients of the masked MSE loss for one batch.

    Returns (loss, predictions, {param name: gradient}).  Gradients are
    copies; the model's accumulators are zeroed first.
    """
    model.zero_grad()
    ctx = ForwardCtx(train=train, rng=rng)
    pred = model.forward(batch, ctx)
    loss, d_pred = masked_mse(pred, targets, mask)
    model.backward(d_pred)
    return loss, pred, {name: g.copy() for name, g in model.named_grads()}
