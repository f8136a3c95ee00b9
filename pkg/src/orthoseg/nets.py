"""U-Net, SegNet and ModSegNet assembled from the tensor primitives.

All three share the same encoder: ``depth`` stages of
``conv3x3 -> batchnorm -> relu -> dropout`` followed by a 2x2 max-pool. They
differ only in how a decoder stage upsamples and what it feeds its block:

=========  ==========================  =====================
arch       upsampling                  decoder block input
=========  ==========================  =====================
segnet     unpool with encoder argmax  upsampled
unet       learned 2x2 transposed conv upsampled + skip
modsegnet  unpool with encoder argmax  upsampled + skip
=========  ==========================  =====================

The skip tensor is the encoder block output (before pooling) at the same
resolution. A final 1x1 convolution maps to ``out_channels`` logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import PoolIndices, RunningStats, Tensor
from .tiler import Tile

ARCHS = ("unet", "segnet", "modsegnet")
INIT_SCHEMES = ("normal", "he")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    arch: str = "segnet"
    in_channels: int = 1
    depth: int = 4
    base_width: int = 16
    dropout_p: float = 0.2
    out_channels: int = 1
    init: str = "normal"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.depth < 1 or self.base_width < 1:
            raise ConfigError("depth and base_width must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    def check_tile_size(self, size: int) -> None:
        factor = 2 ** self.depth
        if size % factor:
            raise ConfigError(
                f"tile size {size} is not divisible by 2**depth = {factor} (depth {self.depth})"
            )

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def uses_indices(arch: str) -> bool:
    return arch in ("segnet", "modsegnet")


def uses_skips(arch: str) -> bool:
    return arch in ("unet", "modsegnet")


def decoder_input_channels(cfg: NetworkConfig) -> list[int]:
    """Input channels of each decoder block, deepest stage first."""
    widths = cfg.widths()
    return [widths[i] * (2 if uses_skips(cfg.arch) else 1) for i in reversed(range(cfg.depth))]


def layer_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learnable tensor, a pure function of ``cfg``."""
    widths = cfg.widths()
    shapes: dict[str, tuple[int, ...]] = {}

    def block(prefix: str, cin: int, cout: int) -> None:
        shapes[f"{prefix}.conv.w"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.conv.b"] = (cout,)
        shapes[f"{prefix}.bn.gamma"] = (cout,)
        shapes[f"{prefix}.bn.beta"] = (cout,)

    cin = cfg.in_channels
    for i, w in enumerate(widths):
        block(f"enc{i}", cin, w)
        cin = w
    for i in reversed(range(cfg.depth)):
        w = widths[i]
        if cfg.arch == "unet":
            shapes[f"dec{i}.up.w"] = (w, w, 2, 2)
            shapes[f"dec{i}.up.b"] = (w,)
        block_in = w * 2 if uses_skips(cfg.arch) else w
        block_out = widths[i - 1] if i > 0 else widths[0]
        block(f"dec{i}", block_in, block_out)
    shapes["head.w"] = (cfg.out_channels, widths[0], 1, 1)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def parameter_count(cfg: NetworkConfig) -> int:
    return sum(math.prod(s) for s in layer_shapes(cfg).values())


@dataclass
class Parameters:
    """Learnable tensors plus batchnorm running statistics."""

    tensors: dict[str, Tensor]
    running: dict[str, RunningStats] = field(default_factory=dict)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, Optional[np.ndarray]]:
        return {k: t.grad for k, t in self.tensors.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Flat copy of weights and running statistics."""
        out = {k: t.data.copy() for k, t in self.tensors.items()}
        for k, rs in self.running.items():
            out[f"{k}.running_mean"] = rs.mean.copy()
            out[f"{k}.running_var"] = rs.var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigError(f"state mismatch; missing {missing[:4]}, unexpected {extra[:4]}")
        for k, t in self.tensors.items():
            if state[k].shape != t.data.shape:
                raise ConfigError(f"shape mismatch for {k}: {state[k].shape} != {t.data.shape}")
            t.data = state[k].astype(t.data.dtype, copy=True)
        for k, rs in self.running.items():
            rs.mean[...] = state[f"{k}.running_mean"]
            rs.var[...] = state[f"{k}.running_var"]

    def astype(self, dtype) -> "Parameters":
        tensors = {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self}
        running = {
            k: RunningStats(rs.mean.astype(dtype), rs.var.astype(dtype), rs.momentum)
            for k, rs in self.running.items()
        }
        return Parameters(tensors, running)

    def copy(self) -> "Parameters":
        return self.astype(next(iter(self.tensors.values())).dtype)


def build(cfg: NetworkConfig, init_seed: int, tile_size: Optional[int] = None, dtype=np.float32) -> Parameters:
    """Create freshly initialized parameters.

    ``init="normal"`` draws every convolution weight and batchnorm scale from
    N(1, 0.2); ``init="he"`` uses N(0, 2 / fan_in) for weights and unit
    batchnorm scales. Biases and batchnorm shifts start at zero.
    """
    if tile_size is not None:
        cfg.check_tile_size(tile_size)
    rng = np.random.default_rng(init_seed)
    tensors: dict[str, Tensor] = {}
    running: dict[str, RunningStats] = {}
    for name, shape in layer_shapes(cfg).items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("b", "beta"):
            arr = np.zeros(shape)
        elif kind == "gamma":
            arr = rng.normal(1.0, 0.2, shape) if cfg.init == "normal" else np.ones(shape)
        elif cfg.init == "normal":
            arr = rng.normal(1.0, 0.2, shape)
        else:
            # transposed conv weights are (in, out, k, k); each output sums over `in`
            fan_in = shape[1] * shape[2] * shape[3] if not name.endswith("up.w") else shape[0]
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        if kind == "gamma":
            prefix = name.rsplit(".", 1)[0]
            running[prefix] = RunningStats.fresh(shape[0], dtype, cfg.bn_momentum)
    return Parameters(tensors, running)


# ---------------------------------------------------------------- forward


IndexHook = Callable[[int, PoolIndices], PoolIndices]


def _block(
    params: Parameters, prefix: str, x: Tensor, cfg: NetworkConfig, mode: str,
    draw: Optional[np.random.Generator],
) -> Tensor:
    x = T.conv3x3(x, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"])
    x = T.batchnorm(
        x, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"], mode,
        params.running[f"{prefix}.bn"], cfg.bn_eps,
    )
    x = T.relu(x)
    return T.dropout(x, cfg.dropout_p, mode, draw)


def forward(
    params: Parameters,
    cfg: NetworkConfig,
    x,
    mode: str = "eval",
    draw: Optional[np.random.Generator] = None,
    index_hook: Optional[IndexHook] = None,
) -> Tensor:
    """Per-pixel logits of shape ``(batch, out_channels, h, w)``.

    ``draw`` feeds dropout in train mode. ``index_hook(stage, indices)`` can
    replace the pooling indices recorded by each encoder stage; it exists so
    tests can check which architectures depend on them.
    """
    x = T.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"expected (batch, {cfg.in_channels}, h, w) input, got {x.shape}")
    factor = 2 ** cfg.depth
    if x.shape[2] % factor or x.shape[3] % factor:
        raise T.ShapeError(f"spatial dims {x.shape[2:]} not divisible by {factor}")
    if mode == "train" and cfg.dropout_p > 0 and draw is None:
        draw = np.random.default_rng(0)

    skips: list[Tensor] = []
    indices: list[PoolIndices] = []
    h = x
    for i in range(cfg.depth):
        h = _block(params, f"enc{i}", h, cfg, mode, draw)
        skips.append(h)
        h, idx = T.maxpool2x2(h)
        if index_hook is not None:
            idx = index_hook(i, idx)
        indices.append(idx)

    for i in reversed(range(cfg.depth)):
        if cfg.arch == "unet":
            h = T.transposed_conv2x2(h, params[f"dec{i}.up.w"], params[f"dec{i}.up.b"])
        else:
            h = T.unpool2x2(h, indices[i])
        if uses_skips(cfg.arch):
            h = T.concat_channels(h, skips[i])
        h = _block(params, f"dec{i}", h, cfg, mode, draw)

    return T.conv1x1(h, params["head.w"], params["head.b"])


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logits_to_mask(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (sigmoid(logits) > threshold).astype(np.uint8)


def predict_mask(params: Parameters, cfg: NetworkConfig, tile, threshold: float = 0.5) -> np.ndarray:
    """Binary ``(S, S)`` mask for one standardized, band-selected tile."""
    data = np.asarray(tile.data if isinstance(tile, Tile) else tile)
    if data.ndim == 2:
        data = data[None]
    if data.shape[0] != cfg.in_channels:
        raise ConfigError(
            f"tile has {data.shape[0]} channels but the network expects {cfg.in_channels}"
        )
    dtype = next(iter(params.tensors.values())).dtype
    logits = forward(params, cfg, data[None].astype(dtype), mode="eval").data
    return logits_to_mask(logits[0, 0], threshold)


def predict_masks(params: Parameters, cfg: NetworkConfig, tiles, batch_size: int = 4,
                  threshold: float = 0.5) -> list[np.ndarray]:
    """Batched :func:`predict_mask` over a sequence of prepared tiles."""
    tiles = list(tiles)
    out: list[np.ndarray] = []
    dtype = next(iter(params.tensors.values())).dtype
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        for t in chunk:
            if t.data.shape[0] != cfg.in_channels:
                raise ConfigError(
                    f"tile has {t.data.shape[0]} channels but the network expects {cfg.in_channels}"
                )
        batch = np.stack([t.data for t in chunk]).astype(dtype)
        logits = forward(params, cfg, batch, mode="eval").data
        out.extend(logits_to_mask(logits[k, 0], threshold) for k in range(len(chunk)))
    return out
