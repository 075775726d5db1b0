"""PC-Net and its ablation-ladder variants.

The network is a 7-block U-shape (3 encoder blocks, bottleneck, 3 decoder
stages) over resolutions 48 -> 24 -> 12 -> 6 with channel widths c, 2c,
4c, 8c.  Every variant carries three 1x1-conv + sigmoid output heads at
full, 1/2 and 1/4 resolution; deep supervision only changes which heads
contribute to the loss.  PSE variants append a pyramid
squeeze-and-excitation block to each of the seven convolutional blocks;
CF variants replace the plain decoder stages with coarse-to-fine residual
stages.

FLOP convention: 2 x multiply-accumulates for convolutions, window size
per output element for pooling, 3 per axis per output element for linear
interpolation, and 1-2 per element for pointwise work; counted for one
forward pass at the reference patch size with batch 1.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, ShapeError, convolve, max_pool, adaptive_avg_pool,
    upsample_linear, batch_norm, relu, sigmoid, add, subtract, scale,
    channel_scale, concat, bce_loss,
)

VARIANTS = ("UNetNoDS", "UNet", "UNetSE", "UNetPSE", "UNetCF", "PCNet")


@dataclass
class LossConfig:
    lambda2: float = 0.67
    lambda3: float = 0.33

    def __post_init__(self):
        # 0 disables an auxiliary head (used by the no-deep-supervision
        # variant); positive weights are capped at 1
        for name in ("lambda2", "lambda3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class ComplexityReport:
    parameter_count: int
    flops: int


def _spatial_prod(sp):
    return int(math.prod(sp))


class Conv:
    """k^rank convolution, stride 1, Kaiming fan-in init, zero bias."""

    def __init__(self, rng, c_in, c_out, k, rank, pad=0, dtype=np.float32):
        fan_in = c_in * k ** rank
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, (c_out, c_in) + (k,) * rank)
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype), requires_grad=True)
        self.k = k
        self.pad = pad
        self.rank = rank

    def __call__(self, x):
        return convolve(x, self.weight, self.bias, 1, self.pad)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_spatial(self, sp):
        return tuple((l + 2 * self.pad - self.k) + 1 for l in sp)

    def flops(self, sp):
        out_sp = self.out_spatial(sp)
        c_out, c_in = self.weight.shape[:2]
        macs = _spatial_prod(out_sp) * c_out * c_in * self.k ** self.rank
        return 2 * macs + _spatial_prod(out_sp) * c_out, out_sp


class BatchNorm:
    def __init__(self, c, dtype=np.float32, momentum=0.1, epsilon=1e-5):
        self.gamma = Tensor(np.ones(c, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(c, dtype))
        self.running_var = Tensor(np.ones(c, dtype))
        self.momentum = momentum
        self.epsilon = epsilon

    def __call__(self, x, train):
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, train, self.momentum, self.epsilon)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def flops(self, sp):
        return 2 * self.gamma.shape[0] * _spatial_prod(sp), sp


class ConvBlock:
    """conv3 -> BN -> relu, twice."""

    def __init__(self, rng, c_in, c_out, rank, dtype=np.float32):
        self.conv1 = Conv(rng, c_in, c_out, 3, rank, pad=1, dtype=dtype)
        self.bn1 = BatchNorm(c_out, dtype)
        self.conv2 = Conv(rng, c_out, c_out, 3, rank, pad=1, dtype=dtype)
        self.bn2 = BatchNorm(c_out, dtype)
        self.c_out = c_out

    def __call__(self, x, train):
        x = relu(self.bn1(self.conv1(x), train))
        x = relu(self.bn2(self.conv2(x), train))
        return x

    def params(self):
        for sub in ("conv1", "bn1", "conv2", "bn2"):
            for n, t in getattr(self, sub).params():
                yield f"{sub}.{n}", t

    def buffers(self):
        for sub in ("bn1", "bn2"):
            for n, t in getattr(self, sub).buffers():
                yield f"{sub}.{n}", t

    def flops(self, sp):
        total = 0
        for layer in (self.conv1, self.bn1, self.conv2, self.bn2):
            f, sp = layer.flops(sp)
            total += f
        total += 2 * self.c_out * _spatial_prod(sp)  # two relus
        return total, sp


class SEBlock:
    """Channel attention: global pool -> 1x1 squeeze -> relu -> 1x1 expand
    -> sigmoid -> channel rescale."""

    def __init__(self, rng, c, rank, reduction=4, dtype=np.float32):
        if c % reduction:
            raise ShapeError(f"channels {c} not divisible by reduction {reduction}")
        self.reduce = Conv(rng, c, c // reduction, 1, rank, dtype=dtype)
        self.expand = Conv(rng, c // reduction, c, 1, rank, dtype=dtype)
        self.rank = rank
        self.c = c

    def __call__(self, x, train=None):
        w = adaptive_avg_pool(x, 1)
        w = sigmoid(self.expand(relu(self.reduce(w))))
        return channel_scale(x, w)

    def params(self):
        for sub in ("reduce", "expand"):
            for n, t in getattr(self, sub).params():
                yield f"{sub}.{n}", t

    def buffers(self):
        return []

    def flops(self, sp):
        n = _spatial_prod(sp)
        one = (1,) * self.rank
        total = self.c * n                          # global pool
        for conv in (self.reduce, self.expand):
            f, _ = conv.flops(one)
            total += f
        total += self.c // 4 + self.c               # relu + sigmoid
        return total + self.c * n, sp               # channel rescale


class PSEBlock:
    """Pyramid squeeze-and-excitation.

    Three branches pool the input to 1, 2 and 3 cells per axis, convolve
    with a matching kernel down to spatial 1, and sigmoid into channel
    weights; the three rescaled copies of the input are concatenated and
    fused by a 3^rank convolution plus batch norm back to C channels.
    """

    def __init__(self, rng, c, rank, dtype=np.float32):
        self.branches = [Conv(rng, c, c, b, rank, pad=0, dtype=dtype)
                         for b in (1, 2, 3)]
        self.fuse = Conv(rng, 3 * c, c, 3, rank, pad=1, dtype=dtype)
        self.bn = BatchNorm(c, dtype)
        self.rank = rank
        self.c = c

    def __call__(self, x, train, return_branches=False):
        for i, l in enumerate(x.shape[2:]):
            if l < 3:
                raise ShapeError(f"axis {i + 2}: extent {l} < 3 for pyramid pooling")
        copies = []
        for b, conv in zip((1, 2, 3), self.branches):
            pooled = adaptive_avg_pool(x, b)
            w = sigmoid(conv(pooled))
            copies.append(channel_scale(x, w))
        out = self.bn(self.fuse(concat(copies)), train)
        if return_branches:
            return out, copies
        return out

    def params(self):
        for i, conv in enumerate(self.branches):
            for n, t in conv.params():
                yield f"branch{i + 1}.{n}", t
        for n, t in self.fuse.params():
            yield f"fuse.{n}", t
        for n, t in self.bn.params():
            yield f"bn.{n}", t

    def buffers(self):
        for n, t in self.bn.buffers():
            yield f"bn.{n}", t

    def flops(self, sp):
        n = _spatial_prod(sp)
        total = 3 * self.c * n                      # pyramid pools
        for b, conv in zip((1, 2, 3), self.branches):
            f, _ = conv.flops((b,) * self.rank)
            total += f + self.c                     # conv + sigmoid
        total += 3 * self.c * n                     # channel rescales
        f, _ = self.fuse.flops(sp)
        total += f
        f, _ = self.bn.flops(sp)
        return total + f, sp


class PlainDecoder:
    """Standard U-Net decoder stage: upsample, concat skip, conv block."""

    def __init__(self, rng, c_skip, c_deep, rank, attn=None, dtype=np.float32):
        self.block = ConvBlock(rng, c_skip + c_deep, c_skip, rank, dtype=dtype)
        self.attn = attn
        self.c_skip = c_skip
        self.c_deep = c_deep
        self.rank = rank

    def __call__(self, skip, deeper, train):
        up = upsample_linear(deeper)
        out = self.block(concat([skip, up]), train)
        if self.attn is not None:
            out = self.attn(out, train)
        return out

    def params(self):
        for n, t in self.block.params():
            yield f"block.{n}", t
        if self.attn is not None:
            for n, t in self.attn.params():
                yield f"attn.{n}", t

    def buffers(self):
        for n, t in self.block.buffers():
            yield f"block.{n}", t
        if self.attn is not None:
            for n, t in self.attn.buffers():
                yield f"attn.{n}", t

    def flops(self, sp_deep):
        sp = tuple(2 * l for l in sp_deep)
        total = 3 * self.rank * self.c_deep * _spatial_prod(sp)  # interpolation
        f, sp = self.block.flops(sp)
        total += f
        if self.attn is not None:
            f, sp = self.attn.flops(sp)
            total += f
        return total, sp


class CFStage:
    """Coarse-to-fine decoder stage.

    The upsampled deep features are reduced to the skip width and
    subtracted from the encoder features; positive residual entries flag
    likely under-segmentation, negative ones over-segmentation.  The
    residual is concatenated with the conventional decoder output and
    classified again by a second conv block.
    """

    def __init__(self, rng, c_skip, c_deep, rank, attn=None, dtype=np.float32):
        self.reduce_conv = Conv(rng, c_deep, c_skip, 3, rank, pad=1, dtype=dtype)
        self.reduce_bn = BatchNorm(c_skip, dtype)
        self.conventional = ConvBlock(rng, c_skip + c_deep, c_skip, rank, dtype=dtype)
        self.refine = ConvBlock(rng, 2 * c_skip, c_skip, rank, dtype=dtype)
        self.attn = attn
        self.c_skip = c_skip
        self.c_deep = c_deep
        self.rank = rank

    def reduce(self, up, train):
        return self.reduce_bn(self.reduce_conv(up), train)

    def __call__(self, skip, deeper, train, return_residual=False):
        for i, (a, b) in enumerate(zip(skip.shape[2:], deeper.shape[2:])):
            if a != 2 * b:
                raise ShapeError(
                    f"axis {i + 2}: encoder extent {a} is not double deeper extent {b}")
        up = upsample_linear(deeper)
        residual = subtract(skip, self.reduce(up, train))
        conventional = self.conventional(concat([skip, up]), train)
        out = self.refine(concat([residual, conventional]), train)
        if self.attn is not None:
            out = self.attn(out, train)
        if return_residual:
            return out, residual
        return out

    def params(self):
        for sub in ("reduce_conv", "reduce_bn", "conventional", "refine"):
            for n, t in getattr(self, sub).params():
                yield f"{sub}.{n}", t
        if self.attn is not None:
            for n, t in self.attn.params():
                yield f"attn.{n}", t

    def buffers(self):
        for sub in ("reduce_bn", "conventional", "refine"):
            for n, t in getattr(self, sub).buffers():
                yield f"{sub}.{n}", t
        if self.attn is not None:
            for n, t in self.attn.buffers():
                yield f"attn.{n}", t

    def flops(self, sp_deep):
        sp = tuple(2 * l for l in sp_deep)
        n = _spatial_prod(sp)
        total = 3 * self.rank * self.c_deep * n
        for layer in (self.reduce_conv, self.reduce_bn):
            f, _ = layer.flops(sp)
            total += f
        total += self.c_skip * n  # subtraction
        f, _ = self.conventional.flops(sp)
        total += f
        f, _ = self.refine.flops(sp)
        total += f
        if self.attn is not None:
            f, _ = self.attn.flops(sp)
            total += f
        return total, sp


class Head:
    """1x1 convolution to one channel plus sigmoid."""

    def __init__(self, rng, c, rank, dtype=np.float32):
        self.conv = Conv(rng, c, 1, 1, rank, dtype=dtype)

    def __call__(self, x):
        return sigmoid(self.conv(x))

    def params(self):
        for n, t in self.conv.params():
            yield f"conv.{n}", t

    def buffers(self):
        return []

    def flops(self, sp):
        f, sp = self.conv.flops(sp)
        return f + _spatial_prod(sp), sp


class Model:
    """One built network variant: blocks, heads and named parameters."""

    def __init__(self, variant, spatial_rank=2, base_channels=16, seed=0,
                 levels=3, in_channels=1, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {spatial_rank}")
        if base_channels < 4 or base_channels % 4:
            raise ValueError(f"base_channels {base_channels} must be >= 4 and divisible by 4")
        if levels not in (2, 3):
            raise ValueError("levels must be 2 (reduced test build) or 3")
        self.variant = variant
        self.spatial_rank = spatial_rank
        self.base_channels = base_channels
        self.levels = levels
        self.dtype = dtype
        use_pse = variant in ("UNetPSE", "PCNet")
        use_se = variant == "UNetSE"
        use_cf = variant in ("UNetCF", "PCNet")
        self.deep_supervision = variant != "UNetNoDS"

        rng = np.random.default_rng(seed)
        c = base_channels
        rank = spatial_rank

        def attn(ch):
            if use_pse:
                return PSEBlock(rng, ch, rank, dtype=dtype)
            if use_se:
                return SEBlock(rng, ch, rank, dtype=dtype)
            return None

        widths = [c * 2 ** i for i in range(levels)]          # encoder widths
        bott_c = c * 2 ** levels
        self.encoders = []
        prev = in_channels
        for w in widths:
            self.encoders.append((ConvBlock(rng, prev, w, rank, dtype=dtype), attn(w)))
            prev = w
        self.bottleneck = (ConvBlock(rng, prev, bott_c, rank, dtype=dtype), attn(bott_c))
        stage_cls = CFStage if use_cf else PlainDecoder
        self.decoders = []
        deep = bott_c
        for w in reversed(widths):
            self.decoders.append(stage_cls(rng, w, deep, rank, attn=attn(w), dtype=dtype))
            deep = w
        # heads at full, 1/2 and 1/4 resolution; the reduced 2-level build
        # takes its 1/4-resolution head from the bottleneck
        head_widths = [widths[0], widths[1] if levels >= 2 else bott_c]
        head_widths.append(widths[2] if levels >= 3 else bott_c)
        self.heads = [Head(rng, w, rank, dtype=dtype) for w in head_widths]

    # -- forward ------------------------------------------------------

    def forward(self, x, train=False):
        """Returns (full, half, quarter) resolution probability maps."""
        skips = []
        h = x
        for block, at in self.encoders:
            h = block(h, train)
            if at is not None:
                h = at(h, train)
            skips.append(h)
            h = max_pool(h, 2, 2)
        block, at = self.bottleneck
        h = block(h, train)
        if at is not None:
            h = at(h, train)
        feats = []  # decoder outputs, deepest first
        if self.levels == 2:
            feats.append(h)  # 1/4 resolution comes from the bottleneck
        for dec, skip in zip(self.decoders, reversed(skips)):
            h = dec(skip, h, train)
            feats.append(h)
        full = self.heads[0](feats[-1])
        half = self.heads[1](feats[-2])
        quarter = self.heads[2](feats[-3])
        return full, half, quarter

    # -- parameter registry -------------------------------------------

    def _named_modules(self):
        for i, (block, at) in enumerate(self.encoders):
            yield f"enc{i + 1}", block
            if at is not None:
                yield f"enc{i + 1}_attn", at
        yield "bottleneck", self.bottleneck[0]
        if self.bottleneck[1] is not None:
            yield "bottleneck_attn", self.bottleneck[1]
        for i, dec in enumerate(self.decoders):
            yield f"dec{len(self.decoders) - i}", dec
        for i, head in enumerate(self.heads):
            yield f"head{i + 1}", head

    def parameters(self):
        """Ordered trainable parameters as {name: Tensor}."""
        out = {}
        for prefix, mod in self._named_modules():
            for n, t in mod.params():
                out[f"{prefix}.{n}"] = t
        return out

    def state_tensors(self):
        """Parameters plus batch-norm running stats, for checkpoints."""
        out = self.parameters()
        for prefix, mod in self._named_modules():
            for n, t in mod.buffers():
                out[f"{prefix}.{n}"] = t
        return out

    def load_state(self, tensors):
        own = self.state_tensors()
        missing = set(own) - set(tensors)
        extra = set(tensors) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, t in own.items():
            src = tensors[name]
            if src.shape != t.shape:
                raise ValueError(f"{name}: shape {src.shape} != {t.shape}")
            t.data[...] = src.data.astype(t.dtype, copy=False)

    # -- complexity -----------------------------------------------------

    def complexity(self, ref_spatial=None):
        if ref_spatial is None:
            ref_spatial = (48,) * self.spatial_rank
        params = sum(t.size for t in self.parameters().values())
        sp = tuple(ref_spatial)
        total = 0
        skip_sp = []
        for block, at in self.encoders:
            f, sp = block.flops(sp)
            total += f
            if at is not None:
                f, sp = at.flops(sp)
                total += f
            skip_sp.append(sp)
            total += _spatial_prod(sp) * block.c_out  # max-pool comparisons
            sp = tuple(l // 2 for l in sp)
        block, at = self.bottleneck
        f, sp = block.flops(sp)
        total += f
        if at is not None:
            f, sp = at.flops(sp)
            total += f
        head_sp = [sp] if self.levels == 2 else []
        for dec in self.decoders:
            f, sp = dec.flops(sp)
            total += f
            head_sp.append(sp)
        for head, hsp in zip(self.heads, reversed(head_sp[-3:])):
            f, _ = head.flops(hsp)
            total += f
        return ComplexityReport(parameter_count=int(params), flops=int(total))


def build_model(variant, spatial_rank=2, base_channels=16, seed=0, levels=3,
                dtype=np.float32):
    return Model(variant, spatial_rank, base_channels, seed=seed, levels=levels,
                 dtype=dtype)


# ---------------------------------------------------------------------------
# loss machinery


def multiscale_targets(y_true):
    """(y, 2x-max-pooled y, 4x-max-pooled y) for deep supervision.

    y_true must be binary with spatial extents divisible by 4; pooled
    targets stay in {0, 1}.
    """
    data = y_true.data if isinstance(y_true, Tensor) else np.asarray(y_true)
    vals = np.unique(data)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError("multiscale_targets: mask is not binary")
    for i, l in enumerate(data.shape[2:]):
        if l % 4:
            raise ShapeError(f"axis {i + 2}: extent {l} not divisible by 4")
    y = Tensor(data.astype(np.float32, copy=False))
    ms2 = max_pool(y, 2, 2)
    ms3 = max_pool(y, 4, 4)
    return y, ms2, ms3


def total_loss(outputs, targets, cfg=None):
    """bce(main) + lambda2*bce(half) + lambda3*bce(quarter).

    Returns (loss, [main, weighted aux2, weighted aux3]) where the parts
    are the logged per-scale contributions.
    """
    cfg = cfg or LossConfig()
    if len(outputs) != 3 or len(targets) != 3:
        raise ValueError("expected 3 outputs and 3 targets")
    for i, (o, t) in enumerate(zip(outputs, targets)):
        if o.shape != (t.shape if isinstance(t, Tensor) else np.shape(t)):
            raise ShapeError(f"scale {i}: output shape {o.shape} != target")
    main = bce_loss(outputs[0], targets[0])
    parts = [main]
    loss = main
    for lam, out, tgt in ((cfg.lambda2, outputs[1], targets[1]),
                          (cfg.lambda3, outputs[2], targets[2])):
        if lam == 0.0:
            parts.append(None)
            continue
        term = scale(bce_loss(out, tgt), lam)
        parts.append(term)
        loss = add(loss, term)
    return loss, parts


# ---------------------------------------------------------------------------
# whole-image inference


def _patch_grid(extent, patch, stride):
    if extent < patch:
        raise ShapeError(f"extent {extent} smaller than patch {patch}")
    corners = list(range(0, extent - patch + 1, stride))
    if corners[-1] != extent - patch:
        corners.append(extent - patch)
    return corners


def predict_full(model, image, patch=48, stride=24, batch_size=16,
                 return_weights=False):
    """Average overlapping patch predictions into a full probability map.

    image: Tensor [1, spatial...]; reflect padding brings every axis up to
    the patch size; each voxel of the result is the mean of all patch
    outputs covering it.
    """
    px = image.data if isinstance(image, Tensor) else np.asarray(image)
    if px.ndim != model.spatial_rank + 1:
        raise ShapeError(f"image rank {px.ndim} does not match model "
                         f"spatial rank {model.spatial_rank}")
    orig_sp = px.shape[1:]
    pad = [(0, 0)] + [(0, max(0, patch - l)) for l in orig_sp]
    padded = np.pad(px, pad, mode="reflect") if any(p[1] for p in pad) else px
    sp = padded.shape[1:]
    grids = [_patch_grid(l, patch, stride) for l in sp]
    corners = [c for c in np.stack(np.meshgrid(*grids, indexing="ij"), -1)
               .reshape(-1, len(sp))]
    prob = np.zeros(sp, dtype=np.float64)
    weight = np.zeros(sp, dtype=np.float64)
    for lo in range(0, len(corners), batch_size):
        chunk = corners[lo:lo + batch_size]
        patches = np.stack([
            padded[(slice(None),) + tuple(slice(c, c + patch) for c in corner)]
            for corner in chunk]).astype(model.dtype, copy=False)
        out = model.forward(Tensor(patches), train=False)[0].data
        for i, corner in enumerate(chunk):
            sl = tuple(slice(c, c + patch) for c in corner)
            prob[sl] += out[i, 0]
            weight[sl] += 1.0
    prob /= weight
    crop = tuple(slice(0, l) for l in orig_sp)
    result = Tensor(prob[crop][None].astype(np.float32))
    if return_weights:
        return result, weight[crop]
    return result
