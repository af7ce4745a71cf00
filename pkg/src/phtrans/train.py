"""Deterministic training loop: SGD with momentum, polynomial learning-rate
decay, deep-supervision loss, and interval checkpointing. One logical
thread; every source of randomness derives from the configured seed."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as datamod
from .checkpoint import save_checkpoint
from .engine import EngineError, Tape, Tensor
from .losses import LossConfig, deep_supervision_loss
from .metrics import evaluate_case
from .model import ConfigError, ModelConfig, PHTransParams, build_model, forward, named_parameters

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataSpec:
    kind: str = "synthetic"  # or "directory"
    cases: int = 2
    noise: float = 0.05
    path: Optional[str] = None


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 200
    batch_size: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.99
    nesterov: bool = False
    lr_power: float = 0.9
    checkpoint_interval: int = 0  # 0: final checkpoint only
    patch_size: Optional[tuple[int, int, int]] = None  # defaults to the model patch
    data: DataSpec = field(default_factory=DataSpec)
    loss: LossConfig = field(default_factory=LossConfig)


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(base: float, iteration: int, total: int, power: float) -> float:
    if total <= 0:
        return base
    return base * (1.0 - iteration / total) ** power


class SGD:
    """Momentum SGD over a named parameter list."""

    def __init__(self, params, momentum: float = 0.99, nesterov: bool = False):
        self._params = list(params)
        self.momentum = momentum
        self.nesterov = nesterov
        self._velocity = [np.zeros_like(t.data) for _, t in self._params]

    def step(self, lr: float):
        for (name, t), vel in zip(self._params, self._velocity):
            if t.grad is None:
                raise TrainingDiverged(f"parameter {name} has no gradient")
            g = t.grad
            vel *= self.momentum
            vel += g
            if self.nesterov:
                t.data -= (lr * (g + self.momentum * vel)).astype(t.data.dtype, copy=False)
            else:
                t.data -= (lr * vel).astype(t.data.dtype, copy=False)

    def clear_grads(self):
        for _, t in self._params:
            t.grad = None


@dataclass
class TrainResult:
    params: PHTransParams
    losses: list[float]
    checkpoint_path: Optional[Path]
    train_dsc: float
    metric_rows: list[dict]


def resolve_dataset(model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[datamod.Case]:
    patch = tuple(train_cfg.patch_size) if train_cfg.patch_size else tuple(model_cfg.patch_size)
    if patch != tuple(model_cfg.patch_size):
        raise ConfigError(
            f"train patch size {patch} must equal the model patch size "
            f"{tuple(model_cfg.patch_size)} (single-patch pipeline)"
        )
    spec = train_cfg.data
    if spec.kind == "synthetic":
        gen = datamod.SyntheticSpec(
            cases=spec.cases,
            patch_size=patch,
            num_classes=model_cfg.num_classes,
            noise=spec.noise,
        )
        return datamod.generate_synthetic(train_cfg.seed + 1, gen)
    if spec.kind == "directory":
        if not spec.path:
            raise ConfigError("data.kind 'directory' needs data.path")
        cases = datamod.load_dataset(spec.path)
        for case in cases:
            if tuple(case.labels.shape) != patch:
                raise ConfigError(
                    f"{case.case_id}: volume extents {case.labels.shape} != patch {patch}"
                )
        return cases
    raise ConfigError(f"unknown data.kind {spec.kind!r}")


def _batch(cases, idx) -> tuple[Tensor, np.ndarray]:
    images = np.stack([cases[i].image for i in idx])
    labels = np.stack([cases[i].labels for i in idx])
    return Tensor(images), labels


def evaluate_model(params: PHTransParams, cfg: ModelConfig, cases) -> tuple[list[dict], float]:
    """Single-patch inference per case; per-class DSC/HD rows and mean DSC."""
    rows = []
    for case in cases:
        out = forward(Tensor(case.image[None]), params, cfg)[-1]  # full resolution
        pred = out.data.argmax(axis=1)[0]
        rows.extend(
            evaluate_case(pred, case.labels, cfg.num_classes, case.spacing, case.case_id)
        )
    mean_dsc = float(np.mean([r["dsc"] for r in rows])) if rows else float("nan")
    return rows, mean_dsc


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    cases = resolve_dataset(model_cfg, train_cfg)
    params = build_model(model_cfg, seed=train_cfg.seed)
    opt = SGD(named_parameters(params), train_cfg.momentum, train_cfg.nesterov)
    rng = np.random.default_rng(train_cfg.seed + 2)
    scale_factors = [
        model_cfg.cumulative_stride(stage)
        for stage in range(model_cfg.n_stages, 0, -1)
    ]
    out_dir = Path(out_dir) if out_dir is not None else None
    losses: list[float] = []
    for it in range(train_cfg.iterations):
        if train_cfg.batch_size <= len(cases):
            idx = rng.permutation(len(cases))[: train_cfg.batch_size]
        else:
            idx = rng.integers(0, len(cases), size=train_cfg.batch_size)
        images, labels = _batch(cases, idx)
        try:
            with Tape() as tape:
                outputs = forward(images, params, model_cfg)
                loss = deep_supervision_loss(outputs, labels, scale_factors, train_cfg.loss)
            tape.backward(loss)
        except EngineError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from exc
        value = float(loss.data)
        losses.append(value)
        lr = poly_lr(train_cfg.learning_rate, it, train_cfg.iterations, train_cfg.lr_power)
        opt.step(lr)
        opt.clear_grads()
        if out_dir and train_cfg.checkpoint_interval and (it + 1) % train_cfg.checkpoint_interval == 0:
            save_checkpoint(
                out_dir / f"checkpoint_{it + 1:06d}.ckpt", params, model_cfg,
                iteration=it + 1, loss_history=losses,
            )
        log.debug("iteration %d: loss %.6f lr %.2e", it, value, lr)
    ckpt_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint_final.ckpt"
        save_checkpoint(
            ckpt_path, params, model_cfg,
            iteration=train_cfg.iterations, loss_history=losses,
            extra={"train_config": _train_config_dict(train_cfg)},
        )
        (out_dir / "loss_log.txt").write_text(
            "\n".join(f"{i}\t{v!r}" for i, v in enumerate(losses)) + ("\n" if losses else "")
        )
    rows, mean_dsc = evaluate_model(params, model_cfg, cases)
    return TrainResult(
        params=params,
        losses=losses,
        checkpoint_path=ckpt_path,
        train_dsc=mean_dsc,
        metric_rows=rows,
    )


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if d.get("patch_size") is not None:
        d["patch_size"] = list(d["patch_size"])
    return d


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
