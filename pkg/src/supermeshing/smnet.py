"""SuperMeshingNet: a residual U-Net with channel/spatial attention.

Pipeline for a low-density field ``lr`` (N x 1 x h x w)::

    x0   = bilinear(lr, scale)                      # output-size input
    s    = stem conv                                # base channels
    e1..e4 = 4 down-sampling Res+Attention blocks   # channels x2 each
    b    = residual bottleneck
    d1..d4 = bilinear x2 + [concat e_k] + conv      # mirrored decoder
    d3  += geometric map (log density, resized)     # when use_geometric
    out  = 1x1 conv (+ x0 when global_residual)

The geometric extractor and the perceptual extractor both use two
stride-2 stages.  Only the geometric extractor is part of the model; the
perceptual extractor lives in its own object because it is trained
separately and frozen.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from . import gridmath as gm
from .errors import ConfigurationError, InvariantError
from .gridmath import Parameter, Tensor

ENCODER_DEPTH = 4
VALID_SCALES = (2, 4, 8)

# (use_skip, use_attention, use_perceptual, use_geometric)
VARIANTS = {
    "baseline-res": (False, False, False, False),
    "res-u": (True, False, False, False),
    "res-u-a": (True, True, False, False),
    "smnet": (True, True, True, True),
}
VARIANT_LABELS = {
    "baseline-res": "ResNet",
    "res-u": "Res+U",
    "res-u-a": "Res+U+A",
    "smnet": "SMNet",
}


@dataclass
class ModelConfig:
    base_channels: int = 16
    encoder_depth: int = ENCODER_DEPTH
    bottleneck_blocks: int = 6
    spatial_kernel: int = 7
    channel_reduction: int = 4
    leaky_slope: float = 0.01
    use_skip: bool = True
    use_attention: bool = True
    use_perceptual: bool = True
    use_geometric: bool = True
    scale: int = 2
    seed: int = 0
    geometric_stage: int = 3
    geometric_source: str = "input"
    global_residual: bool = True
    strict_kernel: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.encoder_depth != ENCODER_DEPTH:
            raise ConfigurationError(f"encoder_depth is fixed at {ENCODER_DEPTH}")
        if self.bottleneck_blocks < 1:
            raise ConfigurationError("bottleneck_blocks must be >= 1")
        if self.scale not in VALID_SCALES:
            raise ConfigurationError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if self.spatial_kernel % 2 == 0 or self.spatial_kernel < 1:
            raise ConfigurationError("spatial_kernel must be a positive odd integer")
        if self.strict_kernel and self.spatial_kernel != 7:
            raise ConfigurationError(
                f"spatial attention kernel must be 7 in strict mode, got {self.spatial_kernel}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError("leaky_slope must lie in (0, 1)")
        if self.channel_reduction < 1 or self.base_channels % self.channel_reduction:
            raise ConfigurationError(
                f"channel count {self.base_channels} is not divisible by reduction "
                f"{self.channel_reduction}")
        if not 1 <= self.geometric_stage <= ENCODER_DEPTH:
            raise ConfigurationError("geometric_stage must be in 1..4")
        if self.geometric_source not in ("input", "stem"):
            raise ConfigurationError("geometric_source must be 'input' or 'stem'")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        skip, att, perc, geo = VARIANTS[variant]
        return cls(use_skip=skip, use_attention=att, use_perceptual=perc, use_geometric=geo,
                   **overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def variant(self) -> str | None:
        key = (self.use_skip, self.use_attention, self.use_perceptual, self.use_geometric)
        for name, switches in VARIANTS.items():
            if switches == key:
                return name
        return None

    @property
    def label(self) -> str:
        name = self.variant
        if name is not None:
            return VARIANT_LABELS[name]
        parts = ["Res"]
        parts += [tag for tag, on in zip("UAPG", (self.use_skip, self.use_attention,
                                                   self.use_perceptual, self.use_geometric)) if on]
        return "+".join(parts)


def valid_lr_sizes(scale: int, limit: int = 128) -> list[int]:
    step = 16 // math.gcd(16, scale)
    return list(range(step, limit + 1, step))


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

class ParameterSet:
    """Ordered, uniquely named parameters with seeded initialisation."""

    def __init__(self, seed: int, dtype=np.float32):
        self._rng = np.random.default_rng(seed)
        self._dtype = dtype
        self.params: dict[str, Parameter] = {}

    def add(self, name: str, shape, fan_in: int | None = None, zero: bool = False) -> Parameter:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if zero or fan_in is None:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(3.0 / fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        p = Parameter(name, data, dtype=self._dtype)
        self.params[name] = p
        return p

    def conv(self, name: str, c_in: int, c_out: int, k: int, zero: bool = False):
        fan_in = c_in * k * k
        w = self.add(f"{name}.weight", (c_out, c_in, k, k), fan_in, zero=zero)
        b = self.add(f"{name}.bias", (c_out,), fan_in, zero=True)
        return w, b


class Conv:
    def __init__(self, ps: ParameterSet, name: str, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, zero: bool = False):
        self.weight, self.bias = ps.conv(name, c_in, c_out, k, zero=zero)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return gm.conv2d(x, self.weight, self.bias, stride=self.stride)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def channel_attention(f: Tensor, w0: Conv, w1: Conv, slope: float = 0.01) -> Tensor:
    """Channel gate from shared-weight MLPs on avg- and max-pooled features."""
    avg, mx = gm.pool_channel_stats(f)
    a = w1(gm.leaky_relu(w0(avg), slope))
    m = w1(gm.leaky_relu(w0(mx), slope))
    return gm.sigmoid(a + m)


def spatial_attention(f: Tensor, conv: Conv) -> Tensor:
    """Spatial gate: conv over the [avg; max] cross-channel statistics."""
    avg, mx = gm.pool_spatial_stats(f)
    return gm.sigmoid(conv(gm.concat([avg, mx], axis=1)))


class AttentionModule:
    def __init__(self, ps: ParameterSet, name: str, channels: int, reduction: int,
                 kernel: int, slope: float):
        if channels % reduction:
            raise ConfigurationError(
                f"channel attention needs C divisible by r, got C={channels}, r={reduction}")
        hidden = channels // reduction
        self.w0 = Conv(ps, f"{name}.mlp0", channels, hidden, k=1)
        self.w1 = Conv(ps, f"{name}.mlp1", hidden, channels, k=1)
        self.spatial = Conv(ps, f"{name}.spatial", 2, 1, k=kernel)
        self.slope = slope

    def __call__(self, f: Tensor) -> Tensor:
        f1 = channel_attention(f, self.w0, self.w1, self.slope) * f
        return spatial_attention(f1, self.spatial) * f1


class ResBlock:
    """conv -> leaky -> conv residual unit, optionally gated by attention.

    With ``downsample`` the first conv has stride 2 and the identity path is
    a 1x1 stride-2 projection.
    """

    def __init__(self, ps: ParameterSet, name: str, c_in: int, c_out: int, downsample: bool,
                 attention: AttentionModule | None = None, slope: float = 0.01,
                 zero_branch: bool = False):
        stride = 2 if downsample else 1
        self.conv1 = Conv(ps, f"{name}.conv1", c_in, c_out, 3, stride)
        # zero_branch starts the block as its identity path (no normalisation layers here)
        self.conv2 = Conv(ps, f"{name}.conv2", c_out, c_out, 3, zero=zero_branch)
        self.proj = None
        if downsample or c_in != c_out:
            self.proj = Conv(ps, f"{name}.proj", c_in, c_out, 1, stride)
        self.attention = attention
        self.slope = slope

    def identity(self, x: Tensor) -> Tensor:
        return self.proj(x) if self.proj is not None else x

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(gm.leaky_relu(self.conv1(x), self.slope))
        if self.attention is not None:
            h = self.attention(h)
        skip = self.identity(x)
        if skip.shape != h.shape:
            raise ConfigurationError(f"residual branch {h.shape} does not match identity {skip.shape}")
        return skip + h


# ---------------------------------------------------------------------------
# geometric attention
# ---------------------------------------------------------------------------

def _area_average(a: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return a
    n, c, h, w = a.shape
    if h % factor or w % factor:
        raise ConfigurationError(f"cannot area-average {h}x{w} by {factor}")
    return a.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def geometric_target(hr: np.ndarray, factor: int = 4, sharpness: float = 8.0) -> np.ndarray:
    """Log-domain spatial distribution concentrated on high field gradients.

    Sobel gradient magnitude of each field (edge-replicated borders), area
    averaged by ``factor``, scaled so its per-sample peak equals
    ``sharpness``, then spatially softmaxed.  Returns log-probabilities with
    shape N x 1 x H/factor x W/factor; a constant field gives the uniform
    distribution.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim == 2:
        hr = hr[None, None]
    elif hr.ndim == 3:
        hr = hr[:, None]
    gx = ndimage.sobel(hr, axis=3, mode="nearest")
    gy = ndimage.sobel(hr, axis=2, mode="nearest")
    mag = _area_average(np.hypot(gx, gy), factor)
    peak = mag.max(axis=(2, 3), keepdims=True)
    z = np.where(peak > 0, sharpness * mag / np.where(peak > 0, peak, 1.0), 0.0)
    z = z - z.max(axis=(2, 3), keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=(2, 3), keepdims=True))
    return logp.astype(np.float32)


class GeometricExtractor:
    def __init__(self, ps: ParameterSet, c_in: int, channels: int, slope: float):
        self.down1 = Conv(ps, "geometric.down1", c_in, channels, 3, 2)
        self.down2 = Conv(ps, "geometric.down2", channels, channels, 3, 2)
        self.head = Conv(ps, "geometric.head", channels, 1, 1)
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        h = gm.leaky_relu(self.down1(x), self.slope)
        h = gm.leaky_relu(self.down2(h), self.slope)
        return gm.log_softmax_spatial(self.head(h))


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class SuperMeshingNet:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        b = config.base_channels
        slope = config.leaky_slope
        ps = ParameterSet(config.seed, dtype)
        self._ps = ps

        self.stem = Conv(ps, "stem", 1, b, 3)
        self.encoder: list[ResBlock] = []
        ch = b
        self.skip_channels = [b]
        for i in range(ENCODER_DEPTH):
            att = None
            if config.use_attention:
                att = AttentionModule(ps, f"down{i + 1}.attention", 2 * ch,
                                      config.channel_reduction, config.spatial_kernel, slope)
            self.encoder.append(ResBlock(ps, f"down{i + 1}", ch, 2 * ch, True, att, slope,
                                         zero_branch=True))
            ch *= 2
            self.skip_channels.append(ch)
        self.bottleneck = [ResBlock(ps, f"bottleneck{i + 1}", ch, ch, False, None, slope,
                                    zero_branch=True)
                           for i in range(config.bottleneck_blocks)]
        self.decoder: list[Conv] = []
        for i in range(ENCODER_DEPTH):
            skip_ch = self.skip_channels[ENCODER_DEPTH - 1 - i]
            c_in = ch + (skip_ch if config.use_skip else 0)
            self.decoder.append(Conv(ps, f"up{i + 1}", c_in, ch // 2, 3))
            ch //= 2
        self.head = Conv(ps, "head", ch, 1, 1, zero=config.global_residual)
        self.geometric = None
        if config.use_geometric:
            c_in = 1 if config.geometric_source == "input" else b
            self.geometric = GeometricExtractor(ps, c_in, b, slope)

    # -- parameters --------------------------------------------------------
    @property
    def params(self) -> dict[str, Parameter]:
        return self._ps.params

    def parameters(self) -> list[Parameter]:
        return list(self._ps.params.values())

    def main_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if not n.startswith("geometric.")]

    def geometric_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("geometric.")]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "SuperMeshingNet":
        for p in self.params.values():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigurationError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    # -- forward -----------------------------------------------------------
    def check_input(self, lr_shape) -> None:
        if len(lr_shape) != 4 or lr_shape[1] != 1:
            raise ConfigurationError(f"expected an N x 1 x h x w field, got shape {tuple(lr_shape)}")
        s = self.config.scale
        h, w = lr_shape[2], lr_shape[3]
        if (h * s) % 16 or (w * s) % 16:
            raise ConfigurationError(
                f"input {h}x{w} at scale {s} gives output {h * s}x{w * s}, which is not divisible "
                f"by 16; valid input sizes for this scale: {valid_lr_sizes(s, 64)} ...")

    def forward(self, lr, return_aux: bool = False):
        lr = lr if isinstance(lr, Tensor) else Tensor(lr, dtype=self._dtype())
        self.check_input(lr.shape)
        cfg = self.config
        slope = cfg.leaky_slope
        x0 = gm.upsample_bilinear(lr, cfg.scale)
        s = gm.leaky_relu(self.stem(x0), slope)

        skips = [s]
        h = s
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        for block in self.bottleneck:
            h = block(h)

        geo_log = None
        if self.geometric is not None:
            source = x0 if cfg.geometric_source == "input" else s
            geo_log = self.geometric(source)

        for i, conv in enumerate(self.decoder):
            h = gm.upsample_bilinear(h, 2)
            if cfg.use_skip:
                h = gm.concat([h, skips[ENCODER_DEPTH - 1 - i]], axis=1)
            h = gm.leaky_relu(conv(h), slope)
            if geo_log is not None and i + 1 == cfg.geometric_stage:
                h = h + self._geometric_bias(geo_log, h.shape[2], h.shape[3])

        out = self.head(h)
        if cfg.global_residual:
            out = out + x0
        if return_aux:
            return out, geo_log
        return out

    __call__ = forward

    @staticmethod
    def _geometric_bias(geo_log: Tensor, out_h: int, out_w: int) -> Tensor:
        # log density relative to uniform; gradients from the main loss stop here
        area = geo_log.shape[2] * geo_log.shape[3]
        centred = Tensor(geo_log.data + math.log(area), dtype=geo_log.dtype)
        return gm.resize_bilinear(centred, out_h, out_w)

    def _dtype(self):
        first = next(iter(self.params.values()))
        return first.dtype

    def predict(self, lr: np.ndarray) -> np.ndarray:
        with gm.no_grad():
            return self.forward(lr).data


# ---------------------------------------------------------------------------
# perceptual extractor
# ---------------------------------------------------------------------------

class PerceptualExtractor:
    """Two stride-2 residual stages; ``features`` returns both stage outputs.

    The decoder half exists only for autoencoder pretraining.
    """

    def __init__(self, channels: int = 8, seed: int = 0, slope: float = 0.01, dtype=np.float32):
        ps = ParameterSet(seed, dtype)
        self._ps = ps
        self.stage1 = ResBlock(ps, "perceptual.stage1", 1, channels, True, None, slope)
        self.stage2 = ResBlock(ps, "perceptual.stage2", channels, 2 * channels, True, None, slope)
        self.dec1 = Conv(ps, "perceptual.dec1", 2 * channels, channels, 3)
        self.dec2 = Conv(ps, "perceptual.dec2", channels, 1, 3)
        self.slope = slope
        self.channels = channels
        self.frozen = False

    @property
    def params(self) -> dict[str, Parameter]:
        return self._ps.params

    def encoder_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if ".stage" in n]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.freeze()
        self.frozen = True

    def features(self, x: Tensor, training: bool = False) -> list[Tensor]:
        if not training and not self.frozen:
            raise InvariantError("perceptual extractor used for a loss before being frozen")
        f1 = gm.leaky_relu(self.stage1(x), self.slope)
        f2 = gm.leaky_relu(self.stage2(f1), self.slope)
        return [f1, f2]

    def reconstruct(self, x: Tensor) -> Tensor:
        _, f2 = self.features(x, training=True)
        h = gm.leaky_relu(self.dec1(gm.upsample_bilinear(f2, 2)), self.slope)
        return self.dec2(gm.upsample_bilinear(h, 2))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}
