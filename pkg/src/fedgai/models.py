"""Frozen perceptual encoder, MRFM generators and the Gram-matrix discriminator.

All models expose ``named_params()`` returning ``(name, kind, tensor)``
triples in a fixed order, which is what :mod:`fedgai.params` exports and
what the federated layer exchanges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

logger = logging.getLogger(__name__)

EPS = 1e-8
LEAK = 0.2
ENCODER_WIDTHS = (8, 16, 32, 64)
# ConvBlock output widths for the four MRFM stages (deepest first)
GENERATOR_WIDTHS = (32, 16, 8, 8)
GRAM_LEVEL = 3  # zero-based index of the level the discriminator consumes


@dataclass
class ConvSpec:
    """One conv layer as seen by the closed-form MAC counter."""

    name: str
    kind: str  # "standard" | "depthwise_separable"
    cin: int
    cout: int
    k: int
    h_out: int
    w_out: int


# --- layers ------------------------------------------------------------------


class Conv:
    def __init__(self, name, cin, cout, rng, k=3, bias=False, spectral=False, init_std=None, weight=None):
        std = np.sqrt(2.0 / (cin * k * k)) if init_std is None else init_std
        self.name = name
        self.cin, self.cout, self.k = cin, cout, k
        if weight is None:
            self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        else:
            self.weight = Tensor(weight)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.u = None
        if spectral:
            u = rng.normal(size=cout)
            self.u = u / np.linalg.norm(u)

    def __call__(self, x: Tensor, update_state: bool = True) -> Tensor:
        w = self.weight
        if self.u is not None:
            w = ad.spectral_normalize(w, self.u, update=update_state)
        return ad.conv2d(x, w, self.bias, stride=1, padding=self.k // 2)

    def named_params(self):
        out = [(f"{self.name}.weight", "conv_w", self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", "conv_b", self.bias))
        if self.u is not None:
            out.append((f"{self.name}.sn_u", "other", _StateView(self, "u")))
        return out

    def spec(self, h, w) -> ConvSpec:
        return ConvSpec(self.name, "standard", self.cin, self.cout, self.k, h, w)


class SeparableConv:
    """Depthwise 3x3 followed by pointwise 1x1, both spectrally normalised."""

    def __init__(self, name, cin, cout, rng, spectral=True):
        self.name = name
        self.cin, self.cout, self.k = cin, cout, 3
        self.depth = Tensor(rng.normal(0.0, np.sqrt(2.0 / 9), (cin, 1, 3, 3)), requires_grad=True)
        self.point = Tensor(rng.normal(0.0, np.sqrt(2.0 / cin), (cout, cin, 1, 1)), requires_grad=True)
        self.u_depth = self.u_point = None
        if spectral:
            ud, up = rng.normal(size=cin), rng.normal(size=cout)
            self.u_depth = ud / np.linalg.norm(ud)
            self.u_point = up / np.linalg.norm(up)

    def __call__(self, x: Tensor, update_state: bool = True) -> Tensor:
        wd, wp = self.depth, self.point
        if self.u_depth is not None:
            wd = ad.spectral_normalize(wd, self.u_depth, update=update_state)
            wp = ad.spectral_normalize(wp, self.u_point, update=update_state)
        return ad.depthwise_separable_conv2d(x, wd, wp)

    def named_params(self):
        out = [
            (f"{self.name}.depthwise.weight", "conv_w", self.depth),
            (f"{self.name}.pointwise.weight", "conv_w", self.point),
        ]
        if self.u_depth is not None:
            out.append((f"{self.name}.depthwise.sn_u", "other", _StateView(self, "u_depth")))
            out.append((f"{self.name}.pointwise.sn_u", "other", _StateView(self, "u_point")))
        return out

    def spec(self, h, w) -> ConvSpec:
        return ConvSpec(self.name, "depthwise_separable", self.cin, self.cout, 3, h, w)


class BatchNorm:
    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor, training: bool, update_state: bool = True) -> Tensor:
        return ad.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean.data,
            self.running_var.data,
            training=training,
            momentum=self.momentum,
            eps=self.eps,
            track_running_stats=update_state,
        )

    def named_params(self):
        return [
            (f"{self.name}.gamma", "bn_gamma", self.gamma),
            (f"{self.name}.beta", "bn_beta", self.beta),
            (f"{self.name}.running_mean", "bn_running_mean", self.running_mean),
            (f"{self.name}.running_var", "bn_running_var", self.running_var),
        ]


class Dense:
    def __init__(self, name, fan_in, fan_out, rng, gain=np.sqrt(2.0)):
        self.name = name
        self.fan_in, self.fan_out = fan_in, fan_out
        self.weight = Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), (fan_out, fan_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def named_params(self):
        return [(f"{self.name}.weight", "dense_w", self.weight), (f"{self.name}.bias", "dense_b", self.bias)]


class _StateView:
    """Adapts a plain ndarray attribute (spectral-norm ``u``) to the tensor interface."""

    requires_grad = False
    grad = None

    def __init__(self, owner, attr):
        self._owner, self._attr = owner, attr

    @property
    def data(self) -> np.ndarray:
        return getattr(self._owner, self._attr)

    @data.setter
    def data(self, value) -> None:
        getattr(self._owner, self._attr)[...] = value

    @property
    def shape(self):
        return self.data.shape


# --- frozen encoder --------------------------------------------------------------


def _orthogonal_rows(rng, rows, cols, gain):
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q.T if rows <= cols else q
    return gain * w[:rows, :cols]


class PerceptualEncoder:
    """Four-stage frozen conv encoder; taps each stage before its max-pool.

    Convolutions are bias-free with orthogonal rows scaled for unit response
    variance under leaky ReLU, so an all-zero image encodes to all zeros.
    """

    role = "encoder"

    def __init__(self, seed: int = 0, in_channels: int = 3, widths: Sequence[int] = ENCODER_WIDTHS):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.in_channels = in_channels
        self.widths = tuple(widths)
        gain = np.sqrt(2.0 / (1.0 + LEAK**2))
        self.layers: list[tuple[Conv, Conv]] = []
        cin = in_channels
        for s, cout in enumerate(self.widths, start=1):
            pair = []
            for j, ci in enumerate((cin, cout), start=1):
                w = _orthogonal_rows(rng, cout, ci * 9, gain).reshape(cout, ci, 3, 3)
                pair.append(Conv(f"enc.stage{s}.conv{j}", ci, cout, rng, weight=w))
            self.layers.append(tuple(pair))
            cin = cout

    def named_params(self):
        return [p for pair in self.layers for conv in pair for p in conv.named_params()]

    def encode(self, image: Tensor) -> list[Tensor]:
        """Return the four pre-pool feature maps for an (N, C, H, W) image batch."""
        if not isinstance(image, Tensor):
            image = Tensor(image)
        if image.ndim != 4:
            raise ShapeError(f"encode: expected (N, C, H, W), got {image.shape}")
        h, w = image.shape[2:]
        if h % 8 or w % 8:
            raise ShapeError(f"encode: spatial size {h}x{w} must be divisible by 8")
        if image.shape[1] == 1 and self.in_channels != 1:
            image = ad.concat_channels([image] * self.in_channels)
        elif image.shape[1] != self.in_channels:
            raise ShapeError(f"encode: expected {self.in_channels} or 1 channels, got {image.shape[1]}")
        feats = []
        x = image
        for s, (c1, c2) in enumerate(self.layers):
            x = ad.leaky_relu(c1(x), LEAK)
            x = ad.leaky_relu(c2(x), LEAK)
            feats.append(x)
            if s < len(self.layers) - 1:
                x = ad.maxpool2x2(x)
        return feats

    def encode_array(self, images: np.ndarray, chunk: int = 64) -> list[np.ndarray]:
        """Gradient-free encoding of a large array, chunked to bound memory."""
        out: list[list[np.ndarray]] = [[] for _ in self.widths]
        with ad.no_grad():
            for start in range(0, len(images), chunk):
                for lvl, f in enumerate(self.encode(Tensor(images[start : start + chunk]))):
                    out[lvl].append(f.data)
        return [np.concatenate(parts, axis=0) for parts in out]

    def conv_specs(self, resolution: int) -> list[ConvSpec]:
        specs, size = [], resolution
        for c1, c2 in self.layers:
            specs += [c1.spec(size, size), c2.spec(size, size)]
            size //= 2
        return specs


def pooled_final(level4: Tensor) -> Tensor:
    """Global-average-pooled deepest features: the compact "final" embedding."""
    return ad.global_avg_pool(level4)


# --- style statistics and AdaIN_SD ------------------------------------------------


@dataclass
class StyleStats:
    """Per-level, per-channel mean/std of a sketch set's encoder features."""

    means: list[np.ndarray] = field(default_factory=list)
    stds: list[np.ndarray] = field(default_factory=list)


def _level_stats(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = f.mean(axis=(0, 2, 3))
    std = np.sqrt(((f - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
    return mean, std


def compute_style_stats(encoder: PerceptualEncoder | None, sketches, eps: float = EPS) -> StyleStats:
    """Per-channel mean/std over batch, height and width for every encoder level.

    ``sketches`` is an (N, 1, H, W) array in model range, or an already
    encoded list of four level arrays when ``encoder`` is None.
    """
    if encoder is None:
        levels = list(sketches)
        if not levels or len(levels[0]) == 0:
            raise ValueError("no sketches")
    else:
        if len(sketches) == 0:
            raise ValueError("no sketches")
        levels = encoder.encode_array(np.asarray(sketches, dtype=np.float64))
    stats = StyleStats()
    for f in levels:
        mean, std = _level_stats(np.asarray(f, dtype=np.float64))
        stats.means.append(mean)
        stats.stds.append(np.maximum(std, eps))
    return stats


def adain_sd(content: Sequence, stats: StyleStats, eps: float = EPS) -> list[Tensor]:
    """Re-standardise each content level to the sketch-set statistics.

    Content statistics are taken over the batch, height and width axes of
    the given batch, not per instance.
    """
    if len(content) != len(stats.means):
        raise ShapeError(f"adain_sd: {len(content)} levels vs {len(stats.means)} in stats")
    mixed = []
    for f, mu_s, sd_s in zip(content, stats.means, stats.stds):
        fd = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
        if fd.shape[1] != mu_s.shape[0]:
            raise ShapeError(f"adain_sd: {fd.shape[1]} channels vs {mu_s.shape[0]} in stats")
        mu_c, sd_c = _level_stats(fd)
        scale = (sd_s / (sd_c + eps))[None, :, None, None]
        mixed.append(Tensor((fd - mu_c[None, :, None, None]) * scale + mu_s[None, :, None, None]))
    return mixed


# --- generator ------------------------------------------------------------------


class ConvBlock:
    def __init__(self, name, cin, cout, rng, separable=False):
        self.name = name
        conv_cls = SeparableConv if separable else Conv
        self.conv = conv_cls(f"{name}.conv", cin, cout, rng, spectral=True)
        self.bn = BatchNorm(f"{name}.bn", cout)

    def __call__(self, x, training=True, update_state=True):
        h = self.conv(x, update_state=update_state)
        h = self.bn(h, training=training, update_state=update_state)
        return ad.leaky_relu(h, LEAK)

    def named_params(self):
        return self.conv.named_params() + self.bn.named_params()


class Generator:
    """Four MRFM stages from the deepest mixed level up, then a tanh head.

    ``student=True`` swaps the convolutions of the last two stages for
    depthwise separable ones; everything else is identical.
    """

    role = "generator"
    INTERMEDIATES = ("f_C4", "f_C3", "f_C2", "f_C1")

    def __init__(
        self,
        seed: int = 0,
        student: bool = False,
        level_channels: Sequence[int] = ENCODER_WIDTHS,
        widths: Sequence[int] = GENERATOR_WIDTHS,
    ):
        rng = np.random.default_rng(seed)
        self.seed, self.student = seed, student
        self.level_channels = tuple(level_channels)
        self.widths = tuple(widths)
        deep_first = self.level_channels[::-1]
        self.blocks: list[ConvBlock] = []
        cin = deep_first[0]
        for s, cout in enumerate(self.widths):
            separable = student and s >= len(self.widths) - 2
            self.blocks.append(ConvBlock(f"gen.mrfm{s + 1}", cin, cout, rng, separable=separable))
            if s + 1 < len(deep_first):
                cin = cout + deep_first[s + 1]
        self.head = Conv("gen.head", self.widths[-1], 1, rng, bias=True, init_std=0.1 / np.sqrt(self.widths[-1] * 9))

    def named_params(self):
        return [p for b in self.blocks for p in b.named_params()] + self.head.named_params()

    def forward(self, mixed: Sequence[Tensor], training: bool = True, update_state: bool = True):
        """Map mixed levels (shallowest first) to ``(sketch, intermediates)``."""
        if len(mixed) != len(self.level_channels):
            raise ShapeError(f"generate: expected {len(self.level_channels)} levels, got {len(mixed)}")
        for f, c in zip(mixed, self.level_channels):
            if f.ndim != 4 or f.shape[1] != c:
                raise ShapeError(f"generate: level shape {f.shape} does not match channel plan {c}")
        levels = list(mixed)[::-1]
        inter = {}
        h = levels[0]
        for s, block in enumerate(self.blocks):
            c = block(h, training=training, update_state=update_state)
            inter[self.INTERMEDIATES[s]] = c
            if s + 1 < len(levels):
                up = ad.upsample_nearest2x(c)
                h = ad.concat_channels([up, levels[s + 1]])
            else:
                h = c
        sketch = ad.tanh(self.head(h, update_state=update_state))
        return sketch, inter

    __call__ = forward

    def conv_specs(self, resolution: int) -> list[ConvSpec]:
        sizes = [resolution >> (len(self.blocks) - 1 - s) for s in range(len(self.blocks))]
        specs = [b.conv.spec(sz, sz) for b, sz in zip(self.blocks, sizes)]
        specs.append(self.head.spec(resolution, resolution))
        return specs


def generate(g: Generator, mixed: Sequence[Tensor], training: bool = False, update_state: bool = False):
    return g.forward(mixed, training=training, update_state=update_state)


# --- discriminator ----------------------------------------------------------------


class Discriminator:
    """MLP over the flattened Gram matrix of the deepest encoder level."""

    role = "discriminator"

    def __init__(self, seed: int = 0, channels: int = ENCODER_WIDTHS[-1], hidden: Sequence[int] = (256, 64)):
        rng = np.random.default_rng(seed)
        self.seed, self.channels = seed, channels
        dims = [channels * channels, *hidden, 1]
        self.layers = [
            Dense(f"disc.fc{i + 1}", dims[i], dims[i + 1], rng, gain=np.sqrt(2.0) if i + 2 < len(dims) else 1.0)
            for i in range(len(dims) - 1)
        ]

    def named_params(self):
        return [p for layer in self.layers for p in layer.named_params()]

    def forward(self, gram: Tensor) -> Tensor:
        if gram.ndim != 3 or gram.shape[1:] != (self.channels, self.channels):
            raise ShapeError(f"discriminate: expected (N, {self.channels}, {self.channels}) Gram, got {gram.shape}")
        h = ad.reshape(gram, (gram.shape[0], self.channels * self.channels))
        for layer in self.layers[:-1]:
            h = ad.leaky_relu(layer(h), LEAK)
        return ad.sigmoid(self.layers[-1](h))

    __call__ = forward

    def dense_specs(self) -> list[tuple[str, int, int]]:
        return [(layer.name, layer.fan_in, layer.fan_out) for layer in self.layers]


def discriminate(d: Discriminator, gram_level4: Tensor) -> Tensor:
    return d.forward(gram_level4)


def trainable(params: Iterable) -> list[Tensor]:
    return [t for _, _, t in params if getattr(t, "requires_grad", False)]
