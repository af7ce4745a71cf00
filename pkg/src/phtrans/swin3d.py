"""3D shifted-window attention machinery.

A feature volume (N, C, D, H, W) is losslessly reshaped into per-window
token sequences (volume_to_sequence / sequence_to_volume), attended with a
relative-position bias per head, and reassembled. Shifted windows are
realized by a cyclic roll plus an additive mask that removes attention
across the wrap-around seam. Token order within a window is row-major
(depth-major), which the relative-position index relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine
from .engine import ShapeError, Tensor

MASK_FILL = -1e4  # large enough to underflow float32 softmax, finite


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry: extents and per-axis cyclic shift, both in voxels."""

    window: tuple[int, int, int]
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if len(self.window) != 3 or len(self.shift) != 3:
            raise ShapeError("window and shift must be 3-vectors")
        if any(w < 1 for w in self.window):
            raise ShapeError(f"window extents must be positive, got {self.window}")
        for ax, (s, w) in enumerate(zip(self.shift, self.window)):
            if not 0 <= s < w:
                raise ShapeError(
                    f"shift {s} out of range [0, {w}) on axis {ax + 1}"
                )

    @property
    def tokens(self) -> int:
        wd, wh, ww = self.window
        return wd * wh * ww


def half_window_shift(window) -> tuple[int, int, int]:
    return tuple(w // 2 for w in window)


def window_grid(dims, window) -> tuple[int, int, int]:
    """Number of windows per axis; extents must divide evenly."""
    counts = []
    for ax, (dim, w) in enumerate(zip(dims, window)):
        if dim % w != 0:
            raise ShapeError(
                f"volume extent {dim} not divisible by window {w} on axis {ax + 1}"
            )
        counts.append(dim // w)
    return tuple(counts)


def volume_to_sequence(x: Tensor, window) -> Tensor:
    """(N, C, D, H, W) -> (N * nW, L, C) with row-major tokens per window."""
    n, c, d, h, w = x.shape
    wd, wh, ww = window
    nd, nh, nw = window_grid((d, h, w), window)
    t = engine.transpose(x, (0, 2, 3, 4, 1))  # (N, D, H, W, C)
    t = engine.reshape(t, (n, nd, wd, nh, wh, nw, ww, c))
    t = engine.transpose(t, (0, 1, 3, 5, 2, 4, 6, 7))  # (N, nd, nh, nw, wd, wh, ww, C)
    return engine.reshape(t, (n * nd * nh * nw, wd * wh * ww, c))


def sequence_to_volume(tokens: Tensor, window, dims) -> Tensor:
    """Exact inverse of volume_to_sequence; ``dims`` is (N, C, D, H, W)."""
    n, c, d, h, w = dims
    wd, wh, ww = window
    nd, nh, nw = window_grid((d, h, w), window)
    b, l, ct = tokens.shape
    if b != n * nd * nh * nw or l != wd * wh * ww or ct != c:
        raise ShapeError(
            f"token block {tokens.shape} inconsistent with dims {dims} and window {tuple(window)}"
        )
    t = engine.reshape(tokens, (n, nd, nh, nw, wd, wh, ww, c))
    t = engine.transpose(t, (0, 1, 4, 2, 5, 3, 6, 7))  # (N, nd, wd, nh, wh, nw, ww, C)
    t = engine.reshape(t, (n, d, h, w, c))
    return engine.transpose(t, (0, 4, 1, 2, 3))


def cyclic_shift(x: Tensor, offsets) -> Tensor:
    """Move the voxel at (d, h, w) to ((d - o_d) mod D, ...)."""
    return engine.roll(x, tuple(-int(o) for o in offsets), (2, 3, 4))


def cyclic_unshift(x: Tensor, offsets) -> Tensor:
    return engine.roll(x, tuple(int(o) for o in offsets), (2, 3, 4))


def build_rel_pos_index(window) -> np.ndarray:
    """L x L map into the compact (2w-1)^3 bias table.

    Entry (i, j) flattens the per-axis coordinate difference of tokens i and
    j, offset by window - 1, in row-major order over the table extents.
    """
    wd, wh, ww = window
    coords = np.stack(
        np.meshgrid(np.arange(wd), np.arange(wh), np.arange(ww), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    delta = coords[:, None, :] - coords[None, :, :]
    delta += np.array([wd - 1, wh - 1, ww - 1])
    sizes = (2 * wd - 1, 2 * wh - 1, 2 * ww - 1)
    return (delta[..., 0] * sizes[1] + delta[..., 1]) * sizes[2] + delta[..., 2]


def rel_pos_table_size(window) -> int:
    wd, wh, ww = window
    return (2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1)


def _axis_region_labels(dim: int, window: int, shift: int) -> np.ndarray:
    lab = np.zeros(dim, dtype=np.int64)
    if shift == 0:
        return lab
    lab[dim - window : dim - shift] = 1
    lab[dim - shift :] = 2
    return lab


def build_attention_mask(dims, window, shift, dtype=np.float32) -> np.ndarray:
    """Per-window additive mask (nW, L, L) for a cyclically shifted volume.

    Token pairs originating from the same pre-shift region get 0, all other
    pairs get MASK_FILL. With zero shift the mask is identically zero.
    """
    d, h, w = dims
    wd, wh, ww = window
    spec = WindowSpec(tuple(window), tuple(shift))  # validates shift < window
    nd, nh, nw = window_grid(dims, window)
    labels = (
        _axis_region_labels(d, wd, spec.shift[0])[:, None, None] * 9
        + _axis_region_labels(h, wh, spec.shift[1])[None, :, None] * 3
        + _axis_region_labels(w, ww, spec.shift[2])[None, None, :]
    )
    win_ids = (
        labels.reshape(nd, wd, nh, wh, nw, ww)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(nd * nh * nw, wd * wh * ww)
    )
    same = win_ids[:, :, None] == win_ids[:, None, :]
    return np.where(same, 0.0, MASK_FILL).astype(dtype)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class RelPosBias:
    table: Tensor  # (heads, rel_pos_table_size(window))
    index: np.ndarray  # (L, L), pure function of the window geometry


@dataclass
class AttentionParams:
    qkv_w: Tensor  # (3C, C)
    qkv_b: Tensor
    proj_w: Tensor  # (C, C)
    proj_b: Tensor
    bias: RelPosBias
    heads: int


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MlpParams:
    w1: Tensor  # (hidden, C)
    b1: Tensor
    w2: Tensor  # (C, hidden)
    b2: Tensor


@dataclass
class STBlockParams:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpParams
    window: tuple[int, int, int]
    shifted: bool


def build_layer_norm(c: int, dtype=np.float32) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
    )


def build_st_block(
    c: int,
    heads: int,
    window,
    shifted: bool,
    rng: np.random.Generator,
    mlp_ratio: float = 4.0,
    dtype=np.float32,
) -> STBlockParams:
    if c % heads != 0:
        raise ShapeError(f"channels {c} not divisible by heads {heads}")
    window = tuple(int(w) for w in window)
    hidden = int(round(c * mlp_ratio))
    attn = AttentionParams(
        qkv_w=Tensor(engine.trunc_normal(rng, (3 * c, c), dtype=dtype), requires_grad=True),
        qkv_b=Tensor(np.zeros(3 * c, dtype=dtype), requires_grad=True),
        proj_w=Tensor(engine.trunc_normal(rng, (c, c), dtype=dtype), requires_grad=True),
        proj_b=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        bias=RelPosBias(
            table=Tensor(
                np.zeros((heads, rel_pos_table_size(window)), dtype=dtype), requires_grad=True
            ),
            index=build_rel_pos_index(window),
        ),
        heads=heads,
    )
    mlp = MlpParams(
        w1=Tensor(engine.trunc_normal(rng, (hidden, c), dtype=dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=Tensor(engine.trunc_normal(rng, (c, hidden), dtype=dtype), requires_grad=True),
        b2=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
    )
    return STBlockParams(
        ln1=build_layer_norm(c, dtype),
        attn=attn,
        ln2=build_layer_norm(c, dtype),
        mlp=mlp,
        window=window,
        shifted=shifted,
    )


def build_st_stack(
    c: int,
    heads: int,
    window,
    depth: int,
    rng: np.random.Generator,
    mlp_ratio: float = 4.0,
    dtype=np.float32,
) -> list[STBlockParams]:
    """``depth`` blocks alternating regular / shifted windows, regular first."""
    return [
        build_st_block(c, heads, window, shifted=(i % 2 == 1), rng=rng,
                       mlp_ratio=mlp_ratio, dtype=dtype)
        for i in range(depth)
    ]


# ---------------------------------------------------------------------------
# forward


def attention_weights(tokens: Tensor, params: AttentionParams, mask: Optional[np.ndarray]):
    """Per-head attention matrix and value tensor for ``tokens`` (B, L, C).

    Returns (weights (B, h, L, L), values (B, h, L, d)). Split out from
    window_attention so invariants on the softmax rows can be tested on the
    exact tensors the forward pass uses.
    """
    b, l, c = tokens.shape
    h = params.heads
    if c % h != 0:
        raise ShapeError(f"channels {c} not divisible by heads {h}")
    d = c // h
    qkv = engine.linear(tokens, params.qkv_w, params.qkv_b)  # (B, L, 3C)
    parts = []
    for i in range(3):
        part = engine.narrow(qkv, 2, i * c, c)
        part = engine.reshape(part, (b, l, h, d))
        parts.append(engine.transpose(part, (0, 2, 1, 3)))  # (B, h, L, d)
    q, k, v = parts
    kt = engine.transpose(k, (0, 1, 3, 2))
    scores = engine.mul(engine.matmul(q, kt), 1.0 / np.sqrt(d))
    bias = engine.index_rows(params.bias.table, params.bias.index)  # (h, L, L)
    scores = engine.add(scores, engine.reshape(bias, (1, h, l, l)))
    if mask is not None:
        nw = mask.shape[0]
        if b % nw != 0:
            raise ShapeError(f"batch {b} not a multiple of mask windows {nw}")
        n = b // nw
        scores = engine.reshape(scores, (n, nw, h, l, l))
        scores = engine.add(scores, mask.reshape(1, nw, 1, l, l).astype(tokens.data.dtype))
        scores = engine.reshape(scores, (b, h, l, l))
    return engine.softmax(scores, axis=-1), v


def window_attention(tokens: Tensor, params: AttentionParams, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d) + bias + mask) V per head, heads concatenated,
    then output-projected. ``tokens`` is (B, L, C) with B = N * nW."""
    b, l, c = tokens.shape
    h = params.heads
    weights, v = attention_weights(tokens, params, mask)
    out = engine.matmul(weights, v)  # (B, h, L, d)
    out = engine.transpose(out, (0, 2, 1, 3))
    out = engine.reshape(out, (b, l, c))
    return engine.linear(out, params.proj_w, params.proj_b)


def st_block_forward(x: Tensor, params: STBlockParams) -> Tensor:
    """Pre-norm transformer block on a feature volume.

    x' = x + S2V(attention(LN(V2S(shift(x))))) unshifted back, then
    x'' = x' + MLP(LN(x')), with shift = floor(window / 2) when shifted.
    """
    n, c, d, h, w = x.shape
    window = params.window
    offsets = half_window_shift(window) if params.shifted else (0, 0, 0)
    y = cyclic_shift(x, offsets) if params.shifted else x
    tokens = volume_to_sequence(y, window)
    tokens = engine.layer_norm(tokens, params.ln1.gamma, params.ln1.beta)
    mask = (
        build_attention_mask((d, h, w), window, offsets, dtype=x.data.dtype)
        if params.shifted
        else None
    )
    attended = window_attention(tokens, params.attn, mask)
    vol = sequence_to_volume(attended, window, (n, c, d, h, w))
    if params.shifted:
        vol = cyclic_unshift(vol, offsets)
    x = engine.add(x, vol)

    t = engine.transpose(x, (0, 2, 3, 4, 1))  # channels-last for the MLP
    t = engine.layer_norm(t, params.ln2.gamma, params.ln2.beta)
    t = engine.linear(t, params.mlp.w1, params.mlp.b1)
    t = engine.gelu(t)
    t = engine.linear(t, params.mlp.w2, params.mlp.b2)
    t = engine.transpose(t, (0, 4, 1, 2, 3))
    return engine.add(x, t)


def st_stack_forward(x: Tensor, blocks: list[STBlockParams]) -> Tensor:
    for blk in blocks:
        x = st_block_forward(x, blk)
    return x
