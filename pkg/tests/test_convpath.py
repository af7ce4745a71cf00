import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phtrans import convpath, engine
from phtrans.convpath import (
    build_conv_block,
    build_downsample,
    build_upsample,
    conv_block_forward,
    downsample_forward,
    upsample_forward,
)
from phtrans.engine import ShapeError, Tensor
from phtrans.gradcheck import gradcheck


def _x(rng, shape, dtype=np.float32):
    return Tensor(rng.normal(size=shape).astype(dtype))


@pytest.mark.parametrize("units", [1, 2, 3])
def test_conv_block_preserves_shape(units):
    rng = np.random.default_rng(0)
    blk = build_conv_block(3, 5, units, rng)
    assert len(blk.units) == units
    x = _x(rng, (2, 3, 4, 6, 5))
    out = conv_block_forward(x, blk)
    assert out.shape == (2, 5, 4, 6, 5)


def test_conv_block_channel_chaining():
    rng = np.random.default_rng(1)
    blk = build_conv_block(4, 8, 2, rng)
    assert blk.units[0].w.shape == (8, 4, 3, 3, 3)
    assert blk.units[1].w.shape == (8, 8, 3, 3, 3)


def test_downsample_full_scale_arithmetic():
    # stride (2,2,2) on 24 channels at 48x192x192 halves every extent and
    # doubles the channels.
    rng = np.random.default_rng(2)
    p = build_downsample(24, 48, (2, 2, 2), rng)
    x = _x(rng, (1, 24, 48, 192, 192))
    out = downsample_forward(x, p)
    assert out.shape == (1, 48, 24, 96, 96)


def test_downsample_anisotropic_stride():
    rng = np.random.default_rng(3)
    p = build_downsample(8, 16, (1, 2, 2), rng)
    x = _x(rng, (1, 8, 6, 8, 8))
    out = downsample_forward(x, p)
    assert out.shape == (1, 16, 6, 4, 4)  # depth untouched, in-plane halved


def test_downsample_divisibility_error():
    rng = np.random.default_rng(4)
    p = build_downsample(2, 4, (2, 2, 2), rng)
    x = _x(rng, (1, 2, 5, 4, 4))
    with pytest.raises(ShapeError, match="axis 1"):
        downsample_forward(x, p)


def test_upsample_deepest_stage_arithmetic():
    # 768 channels at 3x6x6 -> 384 at 6x12x12 under stride (2,2,2)
    rng = np.random.default_rng(5)
    p = build_upsample(768, 384, (2, 2, 2), rng)
    x = _x(rng, (1, 768, 3, 6, 6))
    out = upsample_forward(x, p)
    assert out.shape == (1, 384, 6, 12, 12)


@given(st.sampled_from([1, 2]), st.sampled_from([1, 2]), st.sampled_from([1, 2]))
def test_up_inverts_down_spatially(sd, sh, sw):
    rng = np.random.default_rng(sd * 4 + sh * 2 + sw)
    stride = (sd, sh, sw)
    down = build_downsample(2, 4, stride, rng)
    up = build_upsample(4, 2, stride, rng)
    x = _x(rng, (1, 2, 4, 4, 4))
    restored = upsample_forward(downsample_forward(x, down), up)
    assert restored.shape == x.shape


def test_resample_stride_validation():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError):
        build_downsample(2, 4, (3, 2, 2), rng)
    with pytest.raises(ShapeError):
        build_upsample(4, 2, (0, 1, 1), rng)


def test_resample_direction_guards():
    rng = np.random.default_rng(7)
    down = build_downsample(2, 4, (2, 2, 2), rng)
    up = build_upsample(4, 2, (2, 2, 2), rng)
    x = _x(rng, (1, 2, 4, 4, 4))
    with pytest.raises(ShapeError):
        upsample_forward(x, down)
    with pytest.raises(ShapeError):
        downsample_forward(x, up)


def test_conv_block_gradients():
    rng = np.random.default_rng(8)
    blk = build_conv_block(2, 3, 2, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 2, 3, 4, 4)), requires_grad=True)
    cot = rng.normal(size=(1, 3, 3, 4, 4))
    params = [x]
    for u in blk.units:
        params += [u.w, u.b, u.gamma, u.beta]
    err = gradcheck(
        lambda: engine.reduce_sum(engine.mul(conv_block_forward(x, blk), cot)), params
    )
    assert err < 1e-4


@pytest.mark.parametrize("direction", ["down", "up"])
def test_resampler_gradients(direction):
    rng = np.random.default_rng(9)
    if direction == "down":
        p = build_downsample(2, 4, (1, 2, 2), rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 2, 2, 4, 4)), requires_grad=True)
        fwd = lambda: downsample_forward(x, p)
        out_shape = (1, 4, 2, 2, 2)
    else:
        p = build_upsample(4, 2, (1, 2, 2), rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(1, 4, 2, 2, 2)), requires_grad=True)
        fwd = lambda: upsample_forward(x, p)
        out_shape = (1, 2, 2, 4, 4)
    cot = rng.normal(size=out_shape)
    err = gradcheck(
        lambda: engine.reduce_sum(engine.mul(fwd(), cot)), [x, p.w, p.b, p.gamma, p.beta]
    )
    assert err < 1e-4
