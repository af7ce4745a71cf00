"""Convolutional building blocks: conv units, stacked conv blocks, and the
anisotropic strided resamplers that move between stages of the U-shape.

A conv unit is conv(3x3x3, stride 1, pad 1) -> GELU -> instance norm, so it
preserves spatial extents. Down-sampling is a strided conv whose kernel
equals its stride followed by instance norm (channels double); up-sampling
is the mirrored strided deconvolution (channels halve).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ShapeError, Tensor


@dataclass
class ConvUnit:
    w: Tensor  # (Cout, Cin, 3, 3, 3)
    b: Tensor
    gamma: Tensor
    beta: Tensor


@dataclass
class ConvBlockParams:
    units: list[ConvUnit]


@dataclass
class ResampleParams:
    """Strided conv (down) or deconv (up) plus instance-norm affine params.

    Kernel extents equal the stride, so resampling is an exact partition of
    the volume: no overlap, no padding.
    """

    w: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor
    stride: tuple[int, int, int]
    down: bool


def build_conv_unit(cin: int, cout: int, rng: np.random.Generator, dtype=np.float32) -> ConvUnit:
    fan_in = cin * 27
    return ConvUnit(
        w=Tensor(engine.he_normal(rng, (cout, cin, 3, 3, 3), fan_in, dtype), requires_grad=True),
        b=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
        gamma=Tensor(np.ones(cout, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )


def build_conv_block(
    cin: int, cout: int, units: int, rng: np.random.Generator, dtype=np.float32
) -> ConvBlockParams:
    """``units`` sequential conv units; the first maps cin -> cout."""
    if units < 1:
        raise ShapeError("conv block needs at least one unit")
    built = [build_conv_unit(cin, cout, rng, dtype)]
    built += [build_conv_unit(cout, cout, rng, dtype) for _ in range(units - 1)]
    return ConvBlockParams(units=built)


def conv_unit_forward(x: Tensor, u: ConvUnit) -> Tensor:
    h = engine.conv3d(x, u.w, u.b, (1, 1, 1), (1, 1, 1))
    h = engine.gelu(h)
    return engine.instance_norm(h, u.gamma, u.beta)


def conv_block_forward(x: Tensor, block: ConvBlockParams) -> Tensor:
    for u in block.units:
        x = conv_unit_forward(x, u)
    return x


def _check_stride(stride) -> tuple[int, int, int]:
    stride = tuple(int(s) for s in stride)
    if len(stride) != 3 or any(s not in (1, 2) for s in stride):
        raise ShapeError(f"resample stride must be a 3-vector over {{1, 2}}, got {stride}")
    return stride


def build_downsample(
    cin: int, cout: int, stride, rng: np.random.Generator, dtype=np.float32
) -> ResampleParams:
    stride = _check_stride(stride)
    fan_in = cin * int(np.prod(stride))
    return ResampleParams(
        w=Tensor(engine.he_normal(rng, (cout, cin) + stride, fan_in, dtype), requires_grad=True),
        b=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
        gamma=Tensor(np.ones(cout, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
        stride=stride,
        down=True,
    )


def build_upsample(
    cin: int, cout: int, stride, rng: np.random.Generator, dtype=np.float32
) -> ResampleParams:
    stride = _check_stride(stride)
    fan_in = cin * int(np.prod(stride))
    return ResampleParams(
        w=Tensor(engine.he_normal(rng, (cin, cout) + stride, fan_in, dtype), requires_grad=True),
        b=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
        gamma=Tensor(np.ones(cout, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
        stride=stride,
        down=False,
    )


def downsample_forward(x: Tensor, p: ResampleParams) -> Tensor:
    if not p.down:
        raise ShapeError("downsample_forward called with upsample params")
    for ax, (ext, s) in enumerate(zip(x.shape[2:], p.stride)):
        if ext % s != 0:
            raise ShapeError(
                f"extent {ext} not divisible by stride {s} on axis {ax + 1}"
            )
    h = engine.conv3d(x, p.w, p.b, p.stride, (0, 0, 0))
    return engine.instance_norm(h, p.gamma, p.beta)


def upsample_forward(x: Tensor, p: ResampleParams) -> Tensor:
    if p.down:
        raise ShapeError("upsample_forward called with downsample params")
    h = engine.conv_transpose3d(x, p.w, p.b, p.stride)
    return engine.instance_norm(h, p.gamma, p.beta)
