"""Compact CNN backbone with a pooled embedding and an affine classifier head.

The network is a stem convolution followed by three blocks; each block is
conv → relu → conv → relu → 2x average-pool downsample.  There is no batch
normalization, so per-sample outputs never depend on batch composition and
averaging parameters across clients stays well-posed.  Split points 1..3
name the feature map after the corresponding block, which is where style
augmentation operates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError

_f32 = np.float32


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    block_channels: tuple[int, int, int] = (16, 32, 64)
    image_size: int = 32
    embedding_dim: int = 64
    num_classes: int = 5

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if len(self.block_channels) != 3:
            raise ContractError("exactly three blocks are supported")
        if self.embedding_dim != self.block_channels[-1]:
            raise ContractError("embedding_dim must equal the last block's channel count")
        if self.image_size % 8 != 0 or self.image_size <= 0:
            raise ContractError("image_size must be a positive multiple of 8")
        if min(self.block_channels) <= 0 or self.in_channels <= 0 or self.num_classes <= 0:
            raise ContractError("channel counts and class count must be positive")


def param_shapes(config: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order: stem, block1..block3 (conv1 then conv2,
    weight before bias), then head."""
    c0, c1, c2 = config.block_channels
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("stem.weight", (c0, config.in_channels, 3, 3)),
        ("stem.bias", (c0,)),
    ]
    prev = c0
    for bi, ch in enumerate((c0, c1, c2), start=1):
        shapes.append((f"block{bi}.conv1.weight", (ch, prev, 3, 3)))
        shapes.append((f"block{bi}.conv1.bias", (ch,)))
        shapes.append((f"block{bi}.conv2.weight", (ch, ch, 3, 3)))
        shapes.append((f"block{bi}.conv2.bias", (ch,)))
        prev = ch
    shapes.append(("head.weight", (config.embedding_dim, config.num_classes)))
    shapes.append(("head.bias", (config.num_classes,)))
    return shapes


def param_count(config: BackboneConfig) -> int:
    """Closed-form parameter total; must agree with the materialized model."""
    total = 0
    for _, shape in param_shapes(config):
        n = 1
        for s in shape:
            n *= s
        total += n
    return total


@dataclass
class Head:
    """Affine classifier; ``frozen`` heads take part in forward passes only."""

    weight: T.Tensor
    bias: T.Tensor

    @property
    def frozen(self) -> bool:
        return not self.weight.requires_grad

    def freeze(self) -> "Head":
        self.weight.requires_grad = False
        self.bias.requires_grad = False
        return self


def head_only_forward(head: Head, embedding: T.Tensor) -> T.Tensor:
    if embedding.ndim != 2 or embedding.shape[1] != head.weight.shape[0]:
        raise ShapeError(
            f"embedding {embedding.shape} does not match head input dim {head.weight.shape[0]}")
    return T.matmul(embedding, head.weight) + head.bias


class Model:
    """Backbone plus head, parameters held in canonical order."""

    def __init__(self, config: BackboneConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    @property
    def head(self) -> Head:
        return Head(self.params["head.weight"], self.params["head.bias"])

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        return [(name, self.params[name]) for name, _ in param_shapes(self.config)]

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # -- forward passes -------------------------------------------------
    def _conv(self, x: T.Tensor, name: str) -> T.Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params[f"{name}.bias"]
        out = T.conv2d(x, w, stride=1, padding=1)
        return out + T.reshape(b, (b.shape[0], 1, 1))

    def _block(self, x: T.Tensor, bi: int) -> T.Tensor:
        x = T.relu(self._conv(x, f"block{bi}.conv1"))
        x = T.relu(self._conv(x, f"block{bi}.conv2"))
        b, c, h, w = x.shape
        x = T.reshape(x, (b, c, h // 2, 2, w // 2, 2))
        return T.mean(x, axes=(3, 5))

    @staticmethod
    def _check_finite(x: T.Tensor, layer: str) -> T.Tensor:
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations after layer {layer!r}")
        return x

    def forward_to_split(self, x: T.Tensor, split_id: int) -> T.Tensor:
        if split_id not in (1, 2, 3):
            raise ContractError(f"split_id must be 1, 2 or 3, got {split_id}")
        cfg = self.config
        expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"input shape {x.shape} does not match (B, {expect})")
        f = self._check_finite(self._conv(x, "stem"), "stem")
        for bi in range(1, split_id + 1):
            f = self._check_finite(self._block(f, bi), f"block{bi}")
        return f

    def features_from_split(self, f: T.Tensor, split_id: int) -> T.Tensor:
        """Remaining blocks after ``split_id`` plus global average pooling."""
        if split_id not in (1, 2, 3):
            raise ContractError(f"split_id must be 1, 2 or 3, got {split_id}")
        cfg = self.config
        expect_c = cfg.block_channels[split_id - 1]
        expect_s = cfg.image_size // (2 ** split_id)
        if f.ndim != 4 or f.shape[1:] != (expect_c, expect_s, expect_s):
            raise ShapeError(
                f"split-{split_id} feature must be (B, {expect_c}, {expect_s}, {expect_s}), "
                f"got {f.shape}")
        for bi in range(split_id + 1, 4):
            f = self._check_finite(self._block(f, bi), f"block{bi}")
        return self._check_finite(T.mean(f, axes=(2, 3)), "pool")

    def forward_from_split(self, f: T.Tensor, split_id: int) -> T.Tensor:
        z = self.features_from_split(f, split_id)
        return self._check_finite(head_only_forward(self.head, z), "head")

    def embed(self, x: T.Tensor) -> T.Tensor:
        return self.features_from_split(self.forward_to_split(x, 3), 3)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return self.forward_from_split(self.forward_to_split(x, 1), 1)


def init_model(config: BackboneConfig, seed: int) -> Model:
    """Kaiming-uniform draws rescaled so each conv yields unit-variance
    activations on a synthetic probe batch.

    Without normalization layers the raw Kaiming signal decays through the
    stack (border padding and pooling shrink it), leaving embeddings so
    small that norm-sensitive losses see huge gradients.  Calibrating each
    layer against a probe keeps activation scale flat through depth.  All
    draws come from one PCG64 stream in canonical parameter order, so a
    seed pins every weight.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, T.Tensor] = {}
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=_f32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(_f32)
        params[name] = T.Tensor(data, requires_grad=True)
    model = Model(config, params)

    # forward-only probe: keep it off the ambient tape, otherwise every
    # init pins its activation buffers for the life of the process
    with T.no_grad():
        probe = T.Tensor(rng.uniform(0.0, 1.0, size=(
            64, config.in_channels, config.image_size, config.image_size)).astype(_f32))
        x = probe
        conv_names = ["stem"] + [f"block{bi}.conv{ci}" for bi in (1, 2, 3) for ci in (1, 2)]
        for name in conv_names:
            pre = model._conv(x, name)
            scale = _f32(max(float(np.std(pre.data)), 1e-3))
            params[f"{name}.weight"].data /= scale
            x = T.Tensor(pre.data / scale)
            if name != "stem":
                x = T.relu(x)
                if name.endswith("conv2"):
                    b, c, h, w = x.shape
                    x = T.mean(T.reshape(x, (b, c, h // 2, 2, w // 2, 2)), axes=(3, 5))
        z = T.mean(x, axes=(2, 3))
        logits = head_only_forward(model.head, z)
        scale = _f32(max(float(np.std(logits.data)), 1e-3) / 0.5)
        params["head.weight"].data /= scale
    return model
