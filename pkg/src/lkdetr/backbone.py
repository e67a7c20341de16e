"""Large-kernel backbone: interleaved ConvNeXt and LSK blocks in 4 stages.

Stage i runs at stride 2^(i+2) with base_channels * 2^i channels, so a
[3,H,W] image (H, W multiples of 32) becomes a 4-level pyramid at strides
{4, 8, 16, 32}. By default the last block of each stage is an LSK block and
the rest are ConvNeXt blocks; use_lsk=False swaps every LSK for a ConvNeXt
block (ablation toggle).

expected_param_count() is the closed-form parameter census the tests audit
against the live registry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autograd as ag
from .autograd import ConfigError, RngState
from .layers import Conv2d, LayerNorm, LayerNorm2d, Module

STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneConfig:
    base_channels: int = 32
    depths: tuple = (2, 2, 4, 2)
    use_lsk: bool = True
    drop_path: float = 0.0

    def stage_channels(self):
        return [self.base_channels * (1 << i) for i in range(4)]


def drop_path(x, rate, training, rng):
    """Stochastic depth on a residual branch; identity when not training."""
    if not training or rate <= 0.0:
        return x
    if rng.uniform() < rate:
        return ag.mul(x, 0.0)
    return ag.mul(x, 1.0 / (1.0 - rate))


class ConvNeXtBlock(Module):
    """Inverted bottleneck: x + DropPath(PW(GELU(PW(LN(DW7x7(x))))))."""

    def __init__(self, channels, rng, drop_path_rate=0.0):
        self.dwconv = Conv2d(channels, channels, 7, rng.split("dw"), padding=3,
                             groups=channels, bias=False)
        self.norm = LayerNorm(channels)
        self.pwconv1 = Conv2d(channels, 4 * channels, 1, rng.split("pw1"))
        self.pwconv2 = Conv2d(4 * channels, channels, 1, rng.split("pw2"))
        self.drop_path_rate = drop_path_rate

    def __call__(self, x, training=False, rng=None):
        h = self.dwconv(x)
        h = ag.transpose(h, (1, 2, 0))
        h = self.norm(h)
        h = ag.transpose(h, (2, 0, 1))
        h = self.pwconv1(h)
        h = ag.gelu(h)
        h = self.pwconv2(h)
        h = drop_path(h, self.drop_path_rate, training, rng)
        return ag.add(x, h)


class LSKBlock(Module):
    """Two large depthwise branches fused by a spatial-descriptor gate.

    Pipeline: U1 = DW5x5(x); U2 = DW7x7,dil3(U1); V1/V2 = 1x1 squeeze to C/2;
    the per-position channel mean and max of [V1;V2] pass through a 7x7 conv
    to two sigmoid gates; S = V1*gate1 + V2*gate2 is restored to C channels
    and modulates the input: out = x + x * A.
    """

    def __init__(self, channels, rng):
        if channels % 2 != 0:
            raise ConfigError(f"LSK block needs an even channel count, got {channels}")
        half = channels // 2
        self.branch1 = Conv2d(channels, channels, 5, rng.split("b1"), padding=2,
                              groups=channels, bias=False)
        self.branch2 = Conv2d(channels, channels, 7, rng.split("b2"), padding=9,
                              dilation=3, groups=channels, bias=False)
        self.squeeze1 = Conv2d(channels, half, 1, rng.split("s1"))
        self.squeeze2 = Conv2d(channels, half, 1, rng.split("s2"))
        self.fuse = Conv2d(2, 2, 7, rng.split("fuse"), padding=3)
        self.restore = Conv2d(half, channels, 1, rng.split("restore"))

    def __call__(self, x, training=False, rng=None):
        u1 = self.branch1(x)
        u2 = self.branch2(u1)
        v1 = self.squeeze1(u1)
        v2 = self.squeeze2(u2)
        both = ag.concat([v1, v2], axis=0)
        sa_avg = ag.mean(both, axis=0, keepdims=True)
        sa_max = ag.max_(both, axis=0, keepdims=True)
        gates = ag.sigmoid(self.fuse(ag.concat([sa_avg, sa_max], axis=0)))
        g1, g2 = ag.split(gates, [1, 1], axis=0)
        s = ag.add(ag.mul(v1, g1), ag.mul(v2, g2))
        a = self.restore(s)
        return ag.add(x, ag.mul(x, a))


class _Stem(Module):
    def __init__(self, channels, rng):
        self.conv = Conv2d(3, channels, 4, rng.split("conv"), stride=4)
        self.norm = LayerNorm2d(channels)

    def __call__(self, x):
        return self.norm(self.conv(x))


class _Downsample(Module):
    def __init__(self, in_ch, out_ch, rng):
        self.norm = LayerNorm2d(in_ch)
        self.conv = Conv2d(in_ch, out_ch, 2, rng.split("conv"), stride=2)

    def __call__(self, x):
        return self.conv(self.norm(x))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: RngState):
        if len(cfg.depths) != 4:
            raise ConfigError(f"backbone needs exactly 4 stages, got {len(cfg.depths)}")
        chans = cfg.stage_channels()
        self.stem = _Stem(chans[0], rng.split("stem"))
        self.stages = []
        self.downsamples = []
        for i, depth in enumerate(cfg.depths):
            blocks = []
            for b in range(depth):
                brng = rng.split(f"stage{i}.block{b}")
                is_lsk = cfg.use_lsk and b == depth - 1
                if is_lsk:
                    blocks.append(LSKBlock(chans[i], brng))
                else:
                    blocks.append(ConvNeXtBlock(chans[i], brng,
                                                drop_path_rate=cfg.drop_path))
            self.stages.append(blocks)
            if i < 3:
                self.downsamples.append(
                    _Downsample(chans[i], chans[i + 1], rng.split(f"down{i}")))

    def __call__(self, image, training=False, rng=None):
        """[3,H,W] -> 4 feature maps at strides 4/8/16/32."""
        h, w = image.shape[-2], image.shape[-1]
        if h % 32 != 0 or w % 32 != 0:
            raise ConfigError(
                f"input size {h}x{w} must be a multiple of 32")
        x = self.stem(image)
        levels = []
        for i, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                brng = rng.split(f"dp{i}.{b}") if rng is not None else None
                x = block(x, training=training, rng=brng)
            levels.append(x)
            if i < 3:
                x = self.downsamples[i](x)
        return levels


def convnext_block_param_count(c):
    dw = 49 * c
    norm = 2 * c
    pw1 = 4 * c * c + 4 * c
    pw2 = 4 * c * c + c
    return dw + norm + pw1 + pw2


def lsk_block_param_count(c):
    half = c // 2
    branches = 25 * c + 49 * c
    squeezes = 2 * (c * half + half)
    fuse = 2 * 2 * 49 + 2
    restore = half * c + c
    return branches + squeezes + fuse + restore


def expected_param_count(cfg: BackboneConfig):
    """Closed-form census of backbone parameters, audited by tests."""
    chans = cfg.stage_channels()
    total = 3 * chans[0] * 16 + chans[0] + 2 * chans[0]  # stem conv + LN
    for i, depth in enumerate(cfg.depths):
        c = chans[i]
        for b in range(depth):
            if cfg.use_lsk and b == depth - 1:
                total += lsk_block_param_count(c)
            else:
                total += convnext_block_param_count(c)
        if i < 3:
            total += 2 * c + (4 * c * chans[i + 1] + chans[i + 1])
    return total
