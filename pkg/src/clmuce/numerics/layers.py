"""Layer functions and the conv-stack + dense-head network used throughout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ModelParams, uniform_init
from .tensor import ConfigurationError, DimensionError, Tensor, conv1d, conv1d_output_length, dense

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    pad: int
    out_ch: int


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def dense_forward(x, W, b) -> Tensor:
    x, W, b = _t(x), _t(W), _t(b)
    if W.ndim != 2 or x.shape[-1:] != (W.shape[1],) or b.shape != (W.shape[0],):
        raise DimensionError(f"dense_forward: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    return dense(x, W, b)


def conv1d_forward(x, spec: ConvSpec, W, b) -> Tensor:
    """Single sample (in_ch, n) or batch (B, in_ch, n) convolution."""
    x, W, b = _t(x), _t(W), _t(b)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if W.shape[0] != spec.out_ch or W.shape[2] != spec.kernel:
        raise DimensionError(f"conv1d_forward: W {W.shape} does not match {spec}")
    y = conv1d(x, W, b, stride=spec.stride, pad=spec.pad)
    return y.reshape(y.shape[1:]) if single else y


def activation_forward(x, output_layer: bool = False) -> Tensor:
    x = _t(x)
    return x if output_layer else x.leaky_relu(LEAKY_SLOPE)


@dataclass(frozen=True)
class ConvNetArch:
    """1-channel 1-D input -> conv stack -> flatten -> dense layers.

    Every layer except the last dense one is followed by LeakyReLU.
    """

    in_len: int
    convs: tuple[ConvSpec, ...]
    dense: tuple[int, ...]
    prefix: str = "net"

    def conv_lengths(self) -> list[int]:
        lengths = []
        n = self.in_len
        for spec in self.convs:
            n = conv1d_output_length(n, spec.kernel, spec.stride, spec.pad)
            if n < 1:
                raise ConfigurationError(f"{self.prefix}: conv {spec} on length {lengths[-1] if lengths else self.in_len} gives {n}")
            lengths.append(n)
        return lengths

    @property
    def flat_len(self) -> int:
        lengths = self.conv_lengths()
        if not self.convs:
            return self.in_len
        return lengths[-1] * self.convs[-1].out_ch

    @property
    def out_len(self) -> int:
        return self.dense[-1]

    def to_meta(self) -> dict:
        return {
            "in_len": self.in_len,
            "convs": [[c.kernel, c.stride, c.pad, c.out_ch] for c in self.convs],
            "dense": list(self.dense),
            "prefix": self.prefix,
        }

    @classmethod
    def from_meta(cls, doc: dict) -> "ConvNetArch":
        return cls(
            in_len=int(doc["in_len"]),
            convs=tuple(ConvSpec(*map(int, c)) for c in doc["convs"]),
            dense=tuple(int(d) for d in doc["dense"]),
            prefix=str(doc["prefix"]),
        )


def conv_specs(kernels, strides, pads, channels) -> tuple[ConvSpec, ...]:
    if not (len(kernels) == len(strides) == len(pads) == len(channels)):
        raise ConfigurationError("kernel/stride/pad/channel lists differ in length")
    return tuple(ConvSpec(int(k), int(s), int(p), int(c)) for k, s, p, c in zip(kernels, strides, pads, channels))


def init_params(arch: ConvNetArch, rng: np.random.Generator) -> ModelParams:
    arch.conv_lengths()
    params = ModelParams()
    in_ch = 1
    for i, spec in enumerate(arch.convs):
        fan_in = in_ch * spec.kernel
        params.add(f"{arch.prefix}.conv{i}.W", uniform_init(rng, (spec.out_ch, in_ch, spec.kernel), fan_in))
        params.add(f"{arch.prefix}.conv{i}.b", uniform_init(rng, (spec.out_ch,), fan_in))
        in_ch = spec.out_ch
    width = arch.flat_len
    for i, out in enumerate(arch.dense):
        params.add(f"{arch.prefix}.fc{i}.W", uniform_init(rng, (out, width), width))
        params.add(f"{arch.prefix}.fc{i}.b", uniform_init(rng, (out,), width))
        width = out
    return params


def forward(arch: ConvNetArch, params: ModelParams, x) -> Tensor:
    """Apply the network to a batch ``x`` of shape (B, in_len); returns (B, out_len)."""
    x = _t(x)
    if x.ndim == 1:
        return forward(arch, params, x.reshape(1, -1)).reshape(-1)
    if x.shape[1] != arch.in_len:
        raise DimensionError(f"{arch.prefix}: input length {x.shape[1]} != expected {arch.in_len}")
    batch = x.shape[0]
    h = x.reshape(batch, 1, arch.in_len)
    for i, spec in enumerate(arch.convs):
        W = params[f"{arch.prefix}.conv{i}.W"]
        b = params[f"{arch.prefix}.conv{i}.b"]
        h = conv1d(h, W, b, stride=spec.stride, pad=spec.pad).leaky_relu(LEAKY_SLOPE)
    h = h.reshape(batch, -1)
    last = len(arch.dense) - 1
    for i in range(len(arch.dense)):
        h = dense(h, params[f"{arch.prefix}.fc{i}.W"], params[f"{arch.prefix}.fc{i}.b"])
        if i != last:
            h = h.leaky_relu(LEAKY_SLOPE)
    return h
