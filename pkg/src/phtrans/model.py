"""U-shaped parallel hybrid network assembly.

The encoder runs N1 pure-conv stages followed by N2 hybrid stages; every
stage applies its blocks at the current resolution and then down-samples
(doubling channels), so the carrier below the deepest stage holds
2^(N1+N2) * C channels. The decoder mirrors this: up-sample (halving
channels), fuse with the skip from the same stage, and emit one
deep-supervision head per stage. Outputs are returned deepest first.

Hybrid stage fusion: the transformer path consumes the sum of carrier and
skip, the conv path their channel concatenation, and the two results are
added. Ablation switches drop either path or the shallow conv blocks.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import convpath, engine, swin3d
from .convpath import (
    ConvBlockParams,
    ResampleParams,
    build_conv_block,
    build_downsample,
    build_upsample,
    conv_block_forward,
    downsample_forward,
    upsample_forward,
)
from .engine import ShapeError, Tensor
from .swin3d import STBlockParams, build_st_stack, rel_pos_table_size, st_stack_forward


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n1: int
    n2: int
    m1: int
    m2: int
    base_channels: int
    heads: tuple[int, ...]
    window: tuple[int, int, int]
    strides: tuple[tuple[int, int, int], ...]
    in_channels: int
    num_classes: int
    patch_size: tuple[int, int, int]
    use_st_path: bool = True
    use_conv_path: bool = True
    use_pcm: bool = True
    mlp_ratio: float = 4.0

    @property
    def n_stages(self) -> int:
        return self.n1 + self.n2

    def stage_channels(self, stage: int) -> int:
        """Feature channels at which stage ``stage`` (1-based) operates."""
        return self.base_channels * (2 ** (stage - 1))

    def stage_extents(self, stage: int) -> tuple[int, int, int]:
        """Spatial extents at which stage ``stage`` (1-based) operates."""
        e = list(self.patch_size)
        for s in self.strides[: stage - 1]:
            e = [a // b for a, b in zip(e, s)]
        return tuple(e)

    def bottom_extents(self) -> tuple[int, int, int]:
        e = list(self.patch_size)
        for s in self.strides:
            e = [a // b for a, b in zip(e, s)]
        return tuple(e)

    def bottom_channels(self) -> int:
        return self.base_channels * (2 ** self.n_stages)

    def cumulative_stride(self, stage: int) -> tuple[int, int, int]:
        c = [1, 1, 1]
        for s in self.strides[: stage - 1]:
            c = [a * b for a, b in zip(c, s)]
        return tuple(c)


def bcv_config(num_classes: int = 14, in_channels: int = 1) -> ModelConfig:
    """Abdominal-CT scale configuration: 48x192x192 patches, 3x6x6 windows."""
    return ModelConfig(
        n1=2, n2=4, m1=2, m2=2,
        base_channels=24,
        heads=(3, 6, 12, 24),
        window=(3, 6, 6),
        strides=((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2)),
        in_channels=in_channels,
        num_classes=num_classes,
        patch_size=(48, 192, 192),
    )


def acdc_config(num_classes: int = 4, in_channels: int = 1) -> ModelConfig:
    """Cardiac-MR scale configuration: 16x256x224 patches, 2x8x7 windows."""
    return ModelConfig(
        n1=2, n2=4, m1=2, m2=2,
        base_channels=24,
        heads=(3, 6, 12, 24),
        window=(2, 8, 7),
        strides=((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 2, 1)),
        in_channels=in_channels,
        num_classes=num_classes,
        patch_size=(16, 256, 224),
    )


def tiny_config(
    base_channels: int = 8,
    num_classes: int = 2,
    patch_size: tuple[int, int, int] = (16, 32, 32),
    **overrides,
) -> ModelConfig:
    """Desk-scale configuration for overfit experiments and fast tests."""
    kwargs = dict(
        n1=2, n2=2, m1=2, m2=2,
        base_channels=base_channels,
        heads=(2, 4),
        window=(2, 2, 2),
        strides=((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2)),
        in_channels=1,
        num_classes=num_classes,
        patch_size=patch_size,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def gradcheck_config() -> ModelConfig:
    """Smallest end-to-end configuration used for finite-difference checks."""
    return ModelConfig(
        n1=1, n2=1, m1=2, m2=2,
        base_channels=4,
        heads=(2,),
        window=(1, 2, 2),
        strides=((1, 2, 2), (2, 2, 2)),
        in_channels=1,
        num_classes=2,
        patch_size=(8, 16, 16),
    )


def validate_config(cfg: ModelConfig) -> list[str]:
    """Check every structural invariant; returns one message per violation."""
    v: list[str] = []
    for field, minimum in (("n1", 1), ("n2", 1), ("m1", 1), ("m2", 1),
                           ("base_channels", 1), ("in_channels", 1)):
        if getattr(cfg, field) < minimum:
            v.append(f"{field} must be >= {minimum}, got {getattr(cfg, field)}")
    if cfg.num_classes < 2:
        v.append(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.mlp_ratio <= 0:
        v.append(f"mlp_ratio must be positive, got {cfg.mlp_ratio}")
    if not (cfg.use_st_path or cfg.use_conv_path):
        v.append("at least one of use_st_path/use_conv_path must be enabled")
    if len(cfg.window) != 3 or any(w < 1 for w in cfg.window):
        v.append(f"window must be a positive 3-vector, got {cfg.window}")
    if len(cfg.patch_size) != 3 or any(p < 1 for p in cfg.patch_size):
        v.append(f"patch_size must be a positive 3-vector, got {cfg.patch_size}")
    n = cfg.n1 + cfg.n2
    if len(cfg.strides) != n:
        v.append(f"need n1+n2 = {n} stride vectors, got {len(cfg.strides)}")
    else:
        for i, s in enumerate(cfg.strides):
            if len(s) != 3 or any(c not in (1, 2) for c in s):
                v.append(f"stride {i + 1} must be a 3-vector over {{1, 2}}, got {tuple(s)}")
    if len(cfg.heads) != cfg.n2:
        v.append(f"need n2 = {cfg.n2} head counts, got {len(cfg.heads)}")
    if v:
        return v  # shape of the config is wrong; later checks would misfire

    extents = list(cfg.patch_size)
    for stage in range(1, n + 1):
        if stage > cfg.n1:
            for ax in range(3):
                if extents[ax] % cfg.window[ax] != 0:
                    v.append(
                        f"stage {stage}: extent {extents[ax]} not divisible by "
                        f"window {cfg.window[ax]} on axis {ax + 1}"
                    )
        for ax in range(3):
            if extents[ax] % cfg.strides[stage - 1][ax] != 0:
                v.append(
                    f"stage {stage}: extent {extents[ax]} not divisible by "
                    f"stride {cfg.strides[stage - 1][ax]} on axis {ax + 1}"
                )
        extents = [e // s for e, s in zip(extents, cfg.strides[stage - 1])]

    for j in range(1, cfg.n2 + 1):
        c = cfg.stage_channels(cfg.n1 + j)
        if c % cfg.heads[j - 1] != 0:
            v.append(
                f"hybrid stage {j}: channels {c} not divisible by heads {cfg.heads[j - 1]}"
            )
    return v


# ---------------------------------------------------------------------------
# parameters


@dataclass
class StageBlocks:
    conv: Optional[ConvBlockParams]
    st: Optional[list[STBlockParams]]


@dataclass
class SegHead:
    w: Tensor  # (num_classes, C, 1, 1, 1)
    b: Tensor


@dataclass
class PHTransParams:
    enc_blocks: list[StageBlocks]
    enc_down: list[ResampleParams]
    dec_up: list[ResampleParams]
    dec_blocks: list[StageBlocks]
    seg_heads: list[SegHead]


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Deterministic walk over every trainable tensor in a params structure."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")


def _enc_stage_blocks(cfg, stage, rng, dtype) -> StageBlocks:
    c = cfg.stage_channels(stage)
    if stage <= cfg.n1:
        if not cfg.use_pcm:
            return StageBlocks(conv=None, st=None)
        cin = cfg.in_channels if stage == 1 else c
        return StageBlocks(conv=build_conv_block(cin, c, cfg.m2, rng, dtype), st=None)
    j = stage - cfg.n1
    conv = build_conv_block(c, c, cfg.m2, rng, dtype) if cfg.use_conv_path else None
    st = (
        build_st_stack(c, cfg.heads[j - 1], cfg.window, cfg.m1, rng, cfg.mlp_ratio, dtype)
        if cfg.use_st_path
        else None
    )
    return StageBlocks(conv=conv, st=st)


def _dec_stage_blocks(cfg, stage, rng, dtype) -> StageBlocks:
    c = cfg.stage_channels(stage)
    if stage <= cfg.n1:
        if not cfg.use_pcm:
            return StageBlocks(conv=None, st=None)
        return StageBlocks(conv=build_conv_block(2 * c, c, cfg.m2, rng, dtype), st=None)
    j = stage - cfg.n1
    conv = build_conv_block(2 * c, c, cfg.m2, rng, dtype) if cfg.use_conv_path else None
    st = (
        build_st_stack(c, cfg.heads[j - 1], cfg.window, cfg.m1, rng, cfg.mlp_ratio, dtype)
        if cfg.use_st_path
        else None
    )
    return StageBlocks(conv=conv, st=st)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> PHTransParams:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    rng = np.random.default_rng(seed)
    n = cfg.n_stages
    enc_blocks, enc_down, dec_up, dec_blocks, seg_heads = [], [], [], [], []
    for stage in range(1, n + 1):
        c = cfg.stage_channels(stage)
        enc_blocks.append(_enc_stage_blocks(cfg, stage, rng, dtype))
        down_cin = cfg.in_channels if (stage == 1 and not cfg.use_pcm) else c
        enc_down.append(build_downsample(down_cin, 2 * c, cfg.strides[stage - 1], rng, dtype))
    for stage in range(n, 0, -1):
        c = cfg.stage_channels(stage)
        dec_up.append(build_upsample(2 * c, c, cfg.strides[stage - 1], rng, dtype))
        dec_blocks.append(_dec_stage_blocks(cfg, stage, rng, dtype))
        seg_heads.append(
            SegHead(
                w=Tensor(engine.he_normal(rng, (cfg.num_classes, c, 1, 1, 1), c, dtype),
                         requires_grad=True),
                b=Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True),
            )
        )
    dec_up.reverse()
    dec_blocks.reverse()
    seg_heads.reverse()
    return PHTransParams(
        enc_blocks=enc_blocks,
        enc_down=enc_down,
        dec_up=dec_up,
        dec_blocks=dec_blocks,
        seg_heads=seg_heads,
    )


# ---------------------------------------------------------------------------
# forward


def _check_batch(x: Tensor, cfg: ModelConfig):
    if x.data.ndim != 5:
        raise ShapeError(f"expected (N, C, D, H, W) input, got {tuple(x.shape)}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, config expects {cfg.in_channels}")
    if tuple(x.shape[2:]) != tuple(cfg.patch_size):
        raise ShapeError(
            f"input extents {tuple(x.shape[2:])} must equal patch_size {tuple(cfg.patch_size)}"
        )


def encoder_hybrid_stage(x: Tensor, blocks: StageBlocks) -> Tensor:
    """Sum of the transformer path and the conv path on the same input."""
    st_out = st_stack_forward(x, blocks.st) if blocks.st is not None else None
    conv_out = conv_block_forward(x, blocks.conv) if blocks.conv is not None else None
    if st_out is not None and conv_out is not None:
        if st_out.shape != conv_out.shape:
            raise ShapeError("path outputs diverged in shape")  # impossible when valid
        return engine.add(st_out, conv_out)
    return st_out if st_out is not None else conv_out


def decoder_hybrid_stage(u: Tensor, skip: Tensor, blocks: StageBlocks) -> Tensor:
    """Transformer path on u + skip, conv path on [u, skip], summed."""
    if u.shape != skip.shape:
        raise ShapeError(f"carrier {tuple(u.shape)} and skip {tuple(skip.shape)} disagree")
    st_out = (
        st_stack_forward(engine.add(u, skip), blocks.st) if blocks.st is not None else None
    )
    conv_out = (
        conv_block_forward(engine.concat(u, skip, 1), blocks.conv)
        if blocks.conv is not None
        else None
    )
    if st_out is not None and conv_out is not None:
        return engine.add(st_out, conv_out)
    return st_out if st_out is not None else conv_out


def _head_forward(z: Tensor, head: SegHead) -> Tensor:
    return engine.conv3d(z, head.w, head.b, (1, 1, 1), (0, 0, 0))


def forward(x: Tensor, params: PHTransParams, cfg: ModelConfig) -> list[Tensor]:
    """Full forward pass; returns n1+n2 logit volumes, deepest first."""
    _check_batch(x, cfg)
    n = cfg.n_stages
    skips: list[Tensor] = []
    h = x
    for stage in range(1, n + 1):
        blocks = params.enc_blocks[stage - 1]
        if stage <= cfg.n1:
            y = conv_block_forward(h, blocks.conv) if blocks.conv is not None else h
        else:
            y = encoder_hybrid_stage(h, blocks)
        skips.append(y)
        h = downsample_forward(y, params.enc_down[stage - 1])
    outputs: list[Tensor] = []
    for stage in range(n, 0, -1):
        u = upsample_forward(h, params.dec_up[stage - 1])
        blocks = params.dec_blocks[stage - 1]
        if stage <= cfg.n1:
            if blocks.conv is not None:
                z = conv_block_forward(engine.concat(u, skips[stage - 1], 1), blocks.conv)
            else:
                z = u
        else:
            z = decoder_hybrid_stage(u, skips[stage - 1], blocks)
        outputs.append(_head_forward(z, params.seg_heads[stage - 1]))
        h = z
    return outputs


def cnn_unet_forward(x: Tensor, params: PHTransParams, cfg: ModelConfig) -> list[Tensor]:
    """Pure-CNN U-shape over the conv components only, written straight-line
    as an independent route for the transformer-free ablation."""
    _check_batch(x, cfg)
    n = cfg.n_stages
    skips, h = [], x
    for stage in range(1, n + 1):
        blk = params.enc_blocks[stage - 1].conv
        y = conv_block_forward(h, blk) if blk is not None else h
        skips.append(y)
        h = downsample_forward(y, params.enc_down[stage - 1])
    outputs = []
    for stage in range(n, 0, -1):
        u = upsample_forward(h, params.dec_up[stage - 1])
        blk = params.dec_blocks[stage - 1].conv
        z = conv_block_forward(engine.concat(u, skips[stage - 1], 1), blk) if blk is not None else u
        outputs.append(_head_forward(z, params.seg_heads[stage - 1]))
        h = z
    return outputs


# ---------------------------------------------------------------------------
# analyzer: parameter and MAC/FLOP algebra, independent of the builders


def _conv_block_counts(cin, cout, units):
    params = cout * cin * 27 + cout + 2 * cout
    params += (units - 1) * (cout * cout * 27 + cout + 2 * cout)
    return params


def _conv_block_macs(voxels, cin, cout, units):
    macs = voxels * cout * cin * 27
    macs += (units - 1) * voxels * cout * cout * 27
    return macs


def _st_blocks_counts(cfg, c, heads):
    hidden = int(round(c * cfg.mlp_ratio))
    per_block = (
        4 * c  # two layer norms
        + 3 * c * c + 3 * c  # qkv
        + c * c + c  # projection
        + hidden * c + hidden + c * hidden + c  # mlp
        + heads * rel_pos_table_size(cfg.window)
    )
    return cfg.m1 * per_block


def _st_blocks_macs(cfg, voxels, c):
    hidden = int(round(c * cfg.mlp_ratio))
    l = int(np.prod(cfg.window))
    per_block = (
        voxels * c * 3 * c  # qkv projection
        + 2 * voxels * l * c  # QK^T and AV across all windows and heads
        + voxels * c * c  # output projection
        + 2 * voxels * c * hidden  # mlp
    )
    return cfg.m1 * per_block


def _resample_counts(cin, cout, stride):
    k = int(np.prod(stride))
    return cout * cin * k + cout + 2 * cout


def stage_breakdown(cfg: ModelConfig) -> list[dict]:
    """Per-stage parameter and MAC totals (encoder + decoder + resamplers +
    head), mirroring the builder structure by pure config algebra."""
    rows = []
    n = cfg.n_stages
    for stage in range(1, n + 1):
        c = cfg.stage_channels(stage)
        extents = cfg.stage_extents(stage)
        voxels = int(np.prod(extents))
        below = voxels // int(np.prod(cfg.strides[stage - 1]))
        params = 0
        macs = 0
        if stage <= cfg.n1:
            kind = "conv"
            if cfg.use_pcm:
                cin = cfg.in_channels if stage == 1 else c
                params += _conv_block_counts(cin, c, cfg.m2)
                macs += _conv_block_macs(voxels, cin, c, cfg.m2)
                params += _conv_block_counts(2 * c, c, cfg.m2)
                macs += _conv_block_macs(voxels, 2 * c, c, cfg.m2)
        else:
            kind = "hybrid"
            if cfg.use_conv_path:
                params += _conv_block_counts(c, c, cfg.m2)
                macs += _conv_block_macs(voxels, c, c, cfg.m2)
                params += _conv_block_counts(2 * c, c, cfg.m2)
                macs += _conv_block_macs(voxels, 2 * c, c, cfg.m2)
            if cfg.use_st_path:
                j = stage - cfg.n1
                params += 2 * _st_blocks_counts(cfg, c, cfg.heads[j - 1])
                macs += 2 * _st_blocks_macs(cfg, voxels, c)
        down_cin = cfg.in_channels if (stage == 1 and not cfg.use_pcm) else c
        params += _resample_counts(down_cin, 2 * c, cfg.strides[stage - 1])
        macs += below * 2 * c * down_cin * int(np.prod(cfg.strides[stage - 1]))
        params += _resample_counts(2 * c, c, cfg.strides[stage - 1])
        macs += voxels * c * 2 * c  # upsample: in_vox * k cancels to stage voxels
        params += cfg.num_classes * c + cfg.num_classes
        macs += voxels * cfg.num_classes * c
        rows.append(
            {
                "stage": stage,
                "kind": kind,
                "extent": list(extents),
                "channels": c,
                "params": int(params),
                "macs": int(macs),
            }
        )
    return rows


def count_params(cfg: ModelConfig) -> int:
    return sum(row["params"] for row in stage_breakdown(cfg))


def count_macs(cfg: ModelConfig) -> int:
    return sum(row["macs"] for row in stage_breakdown(cfg))


def count_flops(cfg: ModelConfig) -> int:
    """2 FLOPs per multiply-accumulate; conv/linear/matmul kernels only."""
    return 2 * count_macs(cfg)


FLOP_CONVENTION = (
    "2 flops per multiply-accumulate at the configured patch size; "
    "conv/linear/matmul kernels only, bias/norm/activation excluded"
)


def analyze(cfg: ModelConfig) -> dict:
    """Machine-readable structure report; see format_report for plain text."""
    violations = validate_config(cfg)
    report = {
        "valid": not violations,
        "violations": violations,
        "patch_size": list(cfg.patch_size),
        "flop_convention": FLOP_CONVENTION,
    }
    if violations:
        return report
    rows = stage_breakdown(cfg)
    macs = sum(r["macs"] for r in rows)
    report.update(
        {
            "stages": rows,
            "bottom_extent": list(cfg.bottom_extents()),
            "bottom_channels": cfg.bottom_channels(),
            "total_params": sum(r["params"] for r in rows),
            "total_macs": macs,
            "total_flops": 2 * macs,
        }
    )
    return report


def format_report(report: dict) -> str:
    lines = []
    if not report["valid"]:
        lines.append("configuration invalid:")
        lines.extend(f"  - {v}" for v in report["violations"])
        return "\n".join(lines)
    lines.append(f"patch size: {'x'.join(map(str, report['patch_size']))}")
    lines.append(f"{'stage':>5}  {'kind':<7}{'extent':<16}{'channels':>8}  {'params':>12}  {'macs':>16}")
    for r in report["stages"]:
        ext = "x".join(map(str, r["extent"]))
        lines.append(
            f"{r['stage']:>5}  {r['kind']:<7}{ext:<16}{r['channels']:>8}  "
            f"{r['params']:>12,}  {r['macs']:>16,}"
        )
    bot = "x".join(map(str, report["bottom_extent"]))
    lines.append(f"bottom carrier: {bot} at {report['bottom_channels']} channels")
    lines.append(f"total params: {report['total_params']:,} ({report['total_params'] / 1e6:.1f} M)")
    lines.append(f"total macs:   {report['total_macs']:,} ({report['total_macs'] / 1e9:.1f} GMAC)")
    lines.append(f"total flops:  {report['total_flops']:,} ({report['total_flops'] / 1e9:.1f} GFLOP)")
    lines.append(f"flop convention: {report['flop_convention']}")
    return "\n".join(lines)
