"""Multi-exit convolutional networks: backbone blocks plus one exit head per block.

The exit head layer order is fixed: batch norm, ReLU, 2x2 average pooling,
dropout, and a single fully-connected layer producing class logits.  Exit i
depends only on blocks 1..i and head i, so perturbing deeper weights never
changes an earlier exit's output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class BlockSpec:
    """One backbone stage: `conv_count` 3x3 convolutions, the first carrying
    the stride and channel change.  kind is "plain" or "residual"."""
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    conv_count: int = 1

    def __post_init__(self):
        if self.kind not in ("plain", "residual"):
            raise ValueError(f"unknown block kind: {self.kind!r}")
        if min(self.in_channels, self.out_channels, self.stride, self.conv_count) < 1:
            raise ValueError(f"block spec fields must be positive: {self}")


@dataclass(frozen=True)
class ExitHeadSpec:
    dropout_p: float = 0.5
    fc_out: int = 2

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.fc_out < 1:
            raise ValueError("fc_out must be positive")


@dataclass(frozen=True)
class ArchConfig:
    """Architecture description: block chain, class count, and input geometry."""
    blocks: tuple
    class_count: int
    in_channels: int = 3
    image_hw: tuple = (16, 16)
    dropout_p: float = 0.5

    def __post_init__(self):
        if len(self.blocks) == 0:
            raise ValueError("network needs at least one block")
        chain = self.in_channels
        for i, spec in enumerate(self.blocks):
            if spec.in_channels != chain:
                raise ValueError(
                    f"block {i + 1} expects {spec.in_channels} input channels, "
                    f"but the chain provides {chain}")
            chain = spec.out_channels
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")

    def to_dict(self):
        return {
            "blocks": [
                {"kind": b.kind, "in_channels": b.in_channels,
                 "out_channels": b.out_channels, "stride": b.stride,
                 "conv_count": b.conv_count}
                for b in self.blocks
            ],
            "class_count": self.class_count,
            "in_channels": self.in_channels,
            "image_hw": list(self.image_hw),
            "dropout_p": self.dropout_p,
        }

    @staticmethod
    def from_dict(d):
        return ArchConfig(
            blocks=tuple(BlockSpec(**b) for b in d["blocks"]),
            class_count=int(d["class_count"]),
            in_channels=int(d["in_channels"]),
            image_hw=tuple(d["image_hw"]),
            dropout_p=float(d.get("dropout_p", 0.5)),
        )


# ---------------------------------------------------------------------------
# layers


def _he_weight(rng, shape, fan_in, dtype):
    return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
                  requires_grad=True, dtype=dtype)


class Conv2d:
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, *, rng, dtype):
        self.stride = stride
        self.padding = padding
        self.weight = _he_weight(rng, (out_ch, in_ch, kernel, kernel),
                                 in_ch * kernel * kernel, dtype)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class BatchNorm2d:
    def __init__(self, channels, *, dtype, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training,
                            momentum=self.momentum, eps=self.eps)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Linear:
    def __init__(self, in_features, out_features, *, rng, dtype):
        self.weight = _he_weight(rng, (out_features, in_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


# ---------------------------------------------------------------------------
# blocks and heads


class PlainBlock:
    """conv_count repetitions of conv -> BN -> ReLU."""

    def __init__(self, spec, *, rng, dtype):
        self.spec = spec
        self.convs = []
        self.bns = []
        in_ch = spec.in_channels
        stride = spec.stride
        for _ in range(spec.conv_count):
            self.convs.append(Conv2d(in_ch, spec.out_channels, stride=stride,
                                     rng=rng, dtype=dtype))
            self.bns.append(BatchNorm2d(spec.out_channels, dtype=dtype))
            in_ch = spec.out_channels
            stride = 1

    def __call__(self, x, training):
        for conv, bn in zip(self.convs, self.bns):
            x = T.relu(bn(conv(x), training))
        return x

    def named_layers(self):
        for j, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            yield f"conv{j}", conv
            yield f"bn{j}", bn


class ResidualBlock:
    """conv_count 3x3 convolutions on the main path plus an identity or
    1x1-projection skip; ReLU after the join."""

    def __init__(self, spec, *, rng, dtype):
        self.spec = spec
        self.convs = []
        self.bns = []
        in_ch = spec.in_channels
        stride = spec.stride
        for _ in range(spec.conv_count):
            self.convs.append(Conv2d(in_ch, spec.out_channels, stride=stride,
                                     rng=rng, dtype=dtype))
            self.bns.append(BatchNorm2d(spec.out_channels, dtype=dtype))
            in_ch = spec.out_channels
            stride = 1
        self.projection = None
        self.proj_bn = None
        if spec.stride != 1 or spec.in_channels != spec.out_channels:
            self.projection = Conv2d(spec.in_channels, spec.out_channels, kernel=1,
                                     stride=spec.stride, padding=0, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(spec.out_channels, dtype=dtype)

    def __call__(self, x, training):
        out = x
        last = len(self.convs) - 1
        for j, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            out = bn(conv(out), training)
            if j != last:
                out = T.relu(out)
        skip = x if self.projection is None else self.proj_bn(self.projection(x), training)
        return T.relu(out + skip)

    def named_layers(self):
        for j, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            yield f"conv{j}", conv
            yield f"bn{j}", bn
        if self.projection is not None:
            yield "proj", self.projection
            yield "proj_bn", self.proj_bn


def make_block(spec, *, rng, dtype):
    cls = PlainBlock if spec.kind == "plain" else ResidualBlock
    return cls(spec, rng=rng, dtype=dtype)


class ExitHead:
    """BN -> ReLU -> 2x2 average pool -> dropout -> fully-connected logits."""

    def __init__(self, channels, hw, class_count, dropout_p, *, rng, dtype):
        h, w = hw
        if h < 2 or w < 2:
            raise ValueError(f"exit head needs a feature map of at least 2x2, got {h}x{w}")
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.dropout_p = dropout_p
        self.fc_in = channels * (h // 2) * (w // 2)
        self.fc = Linear(self.fc_in, class_count, rng=rng, dtype=dtype)

    def __call__(self, x, training, rng=None):
        x = T.relu(self.bn(x, training))
        x = T.avg_pool2x2(x)
        x = T.dropout(x, self.dropout_p, training, rng)
        x = T.reshape(x, (x.shape[0], self.fc_in))
        return self.fc(x)

    def named_layers(self):
        yield "bn", self.bn
        yield "fc", self.fc


def _block_out_hw(hw, spec):
    h, w = hw
    # 3x3 stride-s pad-1 convolution: ceil division of each spatial dim
    h = (h + 2 - 3) // spec.stride + 1
    w = (w + 2 - 3) // spec.stride + 1
    return (h, w)


class MultiExitNetwork:
    """Backbone blocks with one exit head per block; exit n is the final output."""

    def __init__(self, config, seed, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.blocks = []
        self.heads = []
        hw = tuple(config.image_hw)
        for spec in config.blocks:
            self.blocks.append(make_block(spec, rng=rng, dtype=self.dtype))
            hw = _block_out_hw(hw, spec)
            self.heads.append(ExitHead(spec.out_channels, hw, config.class_count,
                                       config.dropout_p, rng=rng, dtype=self.dtype))
        self.block_out_hw = self._compute_hws()

    def _compute_hws(self):
        hws = []
        hw = tuple(self.config.image_hw)
        for spec in self.config.blocks:
            hw = _block_out_hw(hw, spec)
            hws.append(hw)
        return hws

    @property
    def n(self):
        return len(self.blocks)

    @property
    def class_count(self):
        return self.config.class_count

    def input_shape(self):
        return (self.config.in_channels,) + tuple(self.config.image_hw)

    def _check_batch(self, x):
        expected = self.input_shape()
        if x.data.ndim != 4 or x.data.shape[1:] != expected:
            raise T.ShapeError(
                f"network expects batches of shape (B, {expected[0]}, {expected[1]}, "
                f"{expected[2]}), got {x.data.shape}")

    def forward_all_exits(self, x, mode="eval", rng=None):
        """Run every block and head; returns the list of n logit tensors."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        self._check_batch(x)
        training = mode == "train"
        logits = []
        h = x
        for block, head in zip(self.blocks, self.heads):
            h = block(h, training)
            logits.append(head(h, training, rng))
        return logits

    def forward_step(self, h, index, training=False, rng=None):
        """Run block `index` (0-based) and its head on h; returns (h, logits)."""
        h = self.blocks[index](h, training)
        return h, self.heads[index](h, training, rng)

    def named_parameters(self):
        out = {}
        for i, block in enumerate(self.blocks, start=1):
            for lname, layer in block.named_layers():
                for pname, p in layer.params().items():
                    out[f"block{i}.{lname}.{pname}"] = p
        for i, head in enumerate(self.heads, start=1):
            for lname, layer in head.named_layers():
                for pname, p in layer.params().items():
                    out[f"head{i}.{lname}.{pname}"] = p
        return out

    def named_buffers(self):
        out = {}
        for i, block in enumerate(self.blocks, start=1):
            for lname, layer in block.named_layers():
                if isinstance(layer, BatchNorm2d):
                    for bname, b in layer.buffers().items():
                        out[f"block{i}.{lname}.{bname}"] = b
        for i, head in enumerate(self.heads, start=1):
            out[f"head{i}.bn.running_mean"] = head.bn.running_mean
            out[f"head{i}.bn.running_var"] = head.bn.running_var
        return out

    def state_arrays(self):
        """All persistent state (parameters and batch-norm running statistics)."""
        state = {name: p.data for name, p in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state(self, arrays):
        params = self.named_parameters()
        buffers = self.named_buffers()
        known = set(params) | set(buffers)
        missing = known - set(arrays)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)[:4]}")
        for name, p in params.items():
            a = np.asarray(arrays[name])
            if a.shape != p.data.shape:
                raise T.ShapeError(f"{name}: stored shape {a.shape} != {p.data.shape}")
            p.data = a.astype(self.dtype, copy=True)
        for name, b in buffers.items():
            a = np.asarray(arrays[name])
            if a.shape != b.shape:
                raise T.ShapeError(f"{name}: stored shape {a.shape} != {b.shape}")
            b[...] = a.astype(self.dtype)

    def copy_state(self):
        return {name: a.copy() for name, a in self.state_arrays().items()}


def build_network(config, seed=0, dtype=np.float32):
    """Construct a network with He-initialized weights, deterministic in seed."""
    return MultiExitNetwork(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# desk-scale presets


def _plain_chain(in_channels, widths_strides):
    blocks = []
    chain = in_channels
    for out_ch, stride in widths_strides:
        blocks.append(BlockSpec("plain", chain, out_ch, stride=stride, conv_count=1))
        chain = out_ch
    return tuple(blocks)


def preset_config(name, class_count, in_channels=3, image_hw=(16, 16)):
    """Named desk-scale architectures.

    tiny10 has 4 blocks; tiny8 is the same chain with only 3 blocks.
    tiny2 is a 2-block student counterpart.
    """
    presets = {
        "tiny10": [(8, 1), (16, 2), (32, 2), (64, 2)],
        "tiny8": [(8, 1), (16, 2), (32, 2)],
        "tiny3": [(8, 1), (16, 2), (32, 2)],
        "tiny2": [(8, 1), (16, 2)],
    }
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return ArchConfig(blocks=_plain_chain(in_channels, presets[name]),
                      class_count=class_count, in_channels=in_channels,
                      image_hw=tuple(image_hw))
