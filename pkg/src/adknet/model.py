"""Downscaling network: feature extractor, feature downsampling, per-channel kernel
generators, kernel normalization and adaptive resampling.

Parameters live in a flat, ordered ``{name: Tensor}`` mapping so they can be
checkpointed and optimized by name.  Generator parameters are prefixed by
their stream: ``gen.R.``, ``gen.G.``, ``gen.B.`` for the full model,
``gen.shared.trunk`` plus per-channel branches for ``shared_trunk`` and a
single ``gen.rgb.`` stream for ``single_stream``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .resample import apply_kernels
from .tensor import ConvSpec, ShapeError, Tensor

VARIANTS = ("full", "shared_trunk", "single_stream", "simple_gen")
NORM_MODES = ("minmax_sum", "sum_only", "minmax_only")
CHANNELS = ("R", "G", "B")
NORM_EPS = 1e-8
DEGENERATE_RANGE = 1e-12
SUM_GUARD = 1e-6

ModelParams = Dict[str, Tensor]


@dataclass
class ModelConfig:
    scale: int = 4
    width: int = 64
    kernel_size: int | None = None
    backbone_blocks: int = 4
    trunk_blocks: int = 3
    branch_blocks: int = 2
    variant: str = "full"
    norm_mode: str = "minmax_sum"
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kernel_size is None:
            self.kernel_size = 2 * self.scale + 1
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.scale, int) or self.scale < 2:
            raise ValueError(f"scale must be an integer >= 2, got {self.scale!r}")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.kernel_size}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"unknown norm mode {self.norm_mode!r}; choose from {NORM_MODES}")
        if self.channels != 3:
            raise ValueError("only RGB input (3 channels) is supported")
        if self.width < 1 or min(self.backbone_blocks, self.trunk_blocks, self.branch_blocks) < 0:
            raise ValueError("width must be positive and block counts non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @property
    def streams(self) -> tuple[str, ...]:
        return ("rgb",) if self.variant == "single_stream" else CHANNELS


# ---------------------------------------------------------------------------
# construction


def _conv_params(params: dict, rng: np.random.Generator, name: str, cin: int, cout: int, dtype) -> None:
    fan_in = cin * 9
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(cout, cin, 3, 3))
    params[f"{name}.weight"] = T.parameter(w, dtype=dtype)
    params[f"{name}.bias"] = T.parameter(np.zeros(cout), dtype=dtype)


def _blocks(params, rng, prefix, count, width, dtype):
    for i in range(count):
        _conv_params(params, rng, f"{prefix}.{i}.conv1", width, width, dtype)
        _conv_params(params, rng, f"{prefix}.{i}.conv2", width, width, dtype)


def build(config: ModelConfig, dtype=None) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases, deterministic in ``config.seed``."""
    config.validate()
    dtype = np.dtype(dtype or T.get_default_dtype())
    rng = np.random.default_rng(config.seed)
    c, s, k2 = config.width, config.scale, config.kernel_size**2
    p: dict[str, Tensor] = {}
    _conv_params(p, rng, "fe.head", config.channels, c, dtype)
    _blocks(p, rng, "fe.body", config.backbone_blocks, c, dtype)
    _conv_params(p, rng, "fe.tail", c, c, dtype)
    _conv_params(p, rng, "down", c * s * s, c, dtype)

    if config.variant == "shared_trunk":
        _blocks(p, rng, "gen.shared.trunk", config.trunk_blocks, c, dtype)
        _conv_params(p, rng, "gen.shared.trunk_out", c, c, dtype)
        for ch in CHANNELS:
            _blocks(p, rng, f"gen.{ch}.branch", config.branch_blocks, c, dtype)
            _conv_params(p, rng, f"gen.{ch}.branch_out", c, k2, dtype)
    else:
        for st in config.streams:
            _blocks(p, rng, f"gen.{st}.trunk", config.trunk_blocks, c, dtype)
            _conv_params(p, rng, f"gen.{st}.trunk_out", c, c, dtype)
            _blocks(p, rng, f"gen.{st}.branch", config.branch_blocks, c, dtype)
            _conv_params(p, rng, f"gen.{st}.branch_out", c, k2, dtype)
    return p


def count_parameters(params: ModelParams, prefix: str = "") -> int:
    return sum(t.size for name, t in params.items() if name.startswith(prefix))


def stream_of(name: str) -> str | None:
    """Generator stream a parameter belongs to (``None`` for shared front-end layers)."""
    if not name.startswith("gen."):
        return None
    return name.split(".")[1]


# ---------------------------------------------------------------------------
# forward stages


def _conv(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return T.conv2d(x, ConvSpec(params[f"{name}.weight"], params[f"{name}.bias"]))


def _run_blocks(x: Tensor, params: ModelParams, prefix: str, count: int, residual: bool = True) -> Tensor:
    for i in range(count):
        y = T.relu(_conv(x, params, f"{prefix}.{i}.conv1"))
        y = _conv(y, params, f"{prefix}.{i}.conv2")
        x = x + y if residual else T.relu(y)
    return x


def _image(image) -> Tensor:
    if not isinstance(image, Tensor):
        image = T.tensor(image)
    if image.ndim not in (3, 4) or image.shape[-1] != 3:
        raise ShapeError(f"expected an H x W x 3 image (optionally batched), got {image.shape}")
    return image


def _batch(image) -> Tensor:
    image = _image(image)
    return image.reshape((1,) + image.shape) if image.ndim == 3 else image


def extract_features(image, params: ModelParams, config: ModelConfig) -> Tensor:
    """HR image -> ``H x W x C`` features at full resolution."""
    x = _image(image)
    h, w = x.shape[-3:-1]
    if min(h, w) < config.kernel_size:
        raise ShapeError(f"input {h}x{w} smaller than kernel size {config.kernel_size}")
    x = _conv(x, params, "fe.head")
    x = _run_blocks(x, params, "fe.body", config.backbone_blocks)
    return _conv(x, params, "fe.tail")


def downsample_features(features: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Pixel-unshuffle to the LR grid then a 3x3 conv back to ``C`` channels."""
    return _conv(T.pixel_unshuffle(features, config.scale), params, "down")


def _stream_name(config: ModelConfig, channel) -> str:
    if isinstance(channel, int):
        if not 0 <= channel < len(CHANNELS):
            raise ValueError(f"unknown channel {channel!r}")
        channel = CHANNELS[channel]
    if channel not in CHANNELS and not (config.variant == "single_stream" and channel == "rgb"):
        raise ValueError(f"unknown channel {channel!r}")
    return "rgb" if config.variant == "single_stream" else channel


def channel_embedding(lr_features: Tensor, params: ModelParams, config: ModelConfig, channel) -> Tensor:
    st = _stream_name(config, channel)
    prefix = "gen.shared" if config.variant == "shared_trunk" else f"gen.{st}"
    residual = config.variant != "simple_gen"
    e = _run_blocks(lr_features, params, f"{prefix}.trunk", config.trunk_blocks, residual)
    return _conv(e, params, f"{prefix}.trunk_out")


def kernel_branch(embedding: Tensor, params: ModelParams, config: ModelConfig, channel) -> Tensor:
    st = _stream_name(config, channel)
    residual = config.variant != "simple_gen"
    x = _run_blocks(embedding, params, f"gen.{st}.branch", config.branch_blocks, residual)
    return _conv(x, params, f"gen.{st}.branch_out")


def generate_raw_kernels(lr_features: Tensor, params: ModelParams, config: ModelConfig, channel) -> Tensor:
    """Raw flattened kernels ``h x w x k^2`` for one colour channel."""
    emb = channel_embedding(lr_features, params, config, channel)
    return kernel_branch(emb, params, config, channel)


def normalize_kernels(raw: Tensor, mode: str = "minmax_sum") -> Tensor:
    """Normalize every slice along the last axis (the flattened ``k x k`` kernel).

    ``minmax_sum`` scales to [0, 1] then divides by the sum; ``sum_only`` and
    ``minmax_only`` keep just one of the two stages.  Slices that carry no
    preference (flat under min-max, near-zero sum under sum-only) become the
    uniform kernel.
    """
    if mode not in NORM_MODES:
        raise ValueError(f"unknown norm mode {mode!r}; choose from {NORM_MODES}")
    if not isinstance(raw, Tensor):
        raw = T.tensor(raw)
    if not np.isfinite(raw.data).all():
        raise T.NonFiniteError("raw kernels contain non-finite values")
    n = raw.shape[-1]
    uniform = 1.0 / n

    if mode == "sum_only":
        total = T.sum_over(raw, -1, keepdims=True)
        flat = np.abs(total.data) < SUM_GUARD
        denom = T.where(flat, 1.0, total + NORM_EPS)
        return T.where(np.broadcast_to(flat, raw.shape), uniform, raw / denom)

    lo = T.min_over(raw, -1, keepdims=True)
    hi = T.max_over(raw, -1, keepdims=True)
    flat = np.broadcast_to((hi.data - lo.data) < DEGENERATE_RANGE, raw.shape)
    out = (raw - lo) / (hi - lo + NORM_EPS)
    if mode == "minmax_sum":
        out = out / (T.sum_over(out, -1, keepdims=True) + NORM_EPS)
    return T.where(flat, uniform, out)


def predict_kernels(image, params: ModelParams, config: ModelConfig) -> Tensor:
    """Normalized kernel field ``N x h x w x 3 x k x k``."""
    x = _batch(image)
    n, hh, ww, _ = x.shape
    s, k = config.scale, config.kernel_size
    if hh % s or ww % s:
        raise ShapeError(f"scale {s} does not divide {hh}x{ww}")
    f_lr = downsample_features(extract_features(x, params, config), params, config)
    h, w = f_lr.shape[1:3]
    if config.variant == "single_stream":
        raw = generate_raw_kernels(f_lr, params, config, "rgb")
        raw = T.stack([raw] * 3, axis=3)
    elif config.variant == "shared_trunk":
        emb = channel_embedding(f_lr, params, config, "R")
        raw = T.stack([kernel_branch(emb, params, config, ch) for ch in CHANNELS], axis=3)
    else:
        raw = T.stack([generate_raw_kernels(f_lr, params, config, ch) for ch in CHANNELS], axis=3)
    kernels = normalize_kernels(raw, config.norm_mode)
    return kernels.reshape((n, h, w, 3, k, k))


def forward(image, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Downscale ``image`` by ``config.scale``.

    Returns the LR image and the kernel field used to produce it; batch
    dimensions are preserved (a single ``H x W x 3`` image gives ``h x w x 3``).
    """
    x = _image(image)
    single = x.ndim == 3
    x = _batch(x)
    kernels = predict_kernels(x, params, config)
    out = apply_kernels(x, kernels, config.scale)
    if single:
        out = out.reshape(out.shape[1:])
        kernels = kernels.reshape(kernels.shape[1:])
    return out, kernels


def average_kernels(kernels) -> np.ndarray:
    """Spatial mean of a kernel field: ``3 x k x k`` per-channel averages."""
    arr = kernels.data if isinstance(kernels, Tensor) else np.asarray(kernels)
    axes = tuple(range(arr.ndim - 3))
    return arr.mean(axis=axes, dtype=np.float64)


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[n].data, b[n].data) for n in a)


def clone_params(params: ModelParams) -> ModelParams:
    return {n: T.parameter(p.data.copy(), dtype=p.dtype) for n, p in params.items()}


__all__ = [
    "VARIANTS",
    "NORM_MODES",
    "CHANNELS",
    "ModelConfig",
    "ModelParams",
    "build",
    "count_parameters",
    "stream_of",
    "extract_features",
    "downsample_features",
    "channel_embedding",
    "kernel_branch",
    "generate_raw_kernels",
    "normalize_kernels",
    "predict_kernels",
    "forward",
    "average_kernels",
    "params_equal",
    "clone_params",
]
