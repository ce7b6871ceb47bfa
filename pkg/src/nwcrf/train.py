"""Scale-invariant log loss and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .autodiff import Tape, Variable, as_variable, backward
from .checkpoint import Checkpoint
from .config import ExperimentConfig, LossConfig
from .data import DepthSample, downsample_target, make_dataset, split_seeds
from .errors import ContractError, DomainError, NumericError
from .metrics import MetricsReport, evaluate
from .model import PATCH_SCALES, DepthNet
from .optim import OptimizerState, adam_step, lr_at

log = logging.getLogger(__name__)


def silog_loss(pred, depth: np.ndarray, mask: np.ndarray, cfg: LossConfig = LossConfig()) -> Variable:
    """alpha * sqrt(mean(d^2) - lambda * mean(d)^2) with d = log pred - log gt over valid pixels.

    Batched inputs ([B, h, w]) give the mean of the per-image losses.
    """
    pred = as_variable(pred)
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != depth.shape or depth.shape != mask.shape:
        raise ContractError(f"pred {pred.shape}, depth {depth.shape}, mask {mask.shape} disagree")
    axes = (-2, -1)
    count = mask.sum(axis=axes)
    if np.any(count == 0):
        raise ContractError("silog_loss needs at least one valid pixel per image")
    if np.any(pred.value[mask] <= 0):
        raise DomainError("prediction must be positive on valid pixels")
    if np.any(depth[mask] <= 0):
        raise DomainError("ground truth must be positive on valid pixels")
    m = mask.astype(np.float64)
    safe_gt = np.where(mask, depth, 1.0)
    # Invalid pixels are pushed to 1 so their log is finite; the mask zeroes them.
    safe_pred = ops.add(ops.mul(pred, m), 1.0 - m)
    d = ops.mul(ops.sub(ops.log(safe_pred), np.log(safe_gt)), m)
    k = count.astype(np.float64)
    mean_sq = ops.div(ops.sum(ops.mul(d, d), axis=axes), k)
    mean_d = ops.div(ops.sum(d, axis=axes), k)
    var = ops.clip(ops.sub(mean_sq, ops.mul(ops.mul(mean_d, mean_d), cfg.lam)), 0.0, None)
    per_image = ops.mul(ops.sqrt(var), cfg.alpha)
    return ops.mean(per_image) if per_image.ndim else per_image


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[tuple[int, float, float]] = field(default_factory=list)  # step, lr, loss
    metrics: list[tuple[int, MetricsReport]] = field(default_factory=list)


def predict_batch(net: DepthNet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    outs = [net.predict(images[i:i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def evaluate_dataset(net: DepthNet, samples: list[DepthSample], cap: float,
                     min_depth: float = 1e-3) -> MetricsReport:
    if not samples:
        raise ContractError("empty dataset")
    preds = predict_batch(net, np.stack([s.image for s in samples]))
    return MetricsReport.mean(evaluate(p, s, cap, min_depth) for p, s in zip(preds, samples))


def build_splits(cfg: ExperimentConfig) -> tuple[list[DepthSample], list[DepthSample]]:
    tr, va = split_seeds(cfg.seed, cfg.data.train_size, cfg.data.val_size)
    h, w = cfg.data.height, cfg.data.width
    return make_dataset(tr, h, w), make_dataset(va, h, w)


def make_checkpoint(cfg: ExperimentConfig, net: DepthNet, step: int,
                    state: OptimizerState | None) -> Checkpoint:
    opt = None
    if state is not None:
        opt = OptimizerState({k: v.copy() for k, v in state.m.items()},
                             {k: v.copy() for k, v in state.v.items()},
                             state.step, state.beta1, state.beta2, state.eps)
    return Checkpoint(config=cfg, tensors=net.state_dict(), step=step, optimizer=opt)


def train(cfg: ExperimentConfig, steps: int | None = None,
          on_step: Callable[[int, float, float], None] | None = None,
          on_eval: Callable[[int, MetricsReport], None] | None = None,
          data: tuple[list[DepthSample], list[DepthSample]] | None = None) -> TrainResult:
    """Train from the seeded initialization; deterministic given ``cfg``.

    ``steps`` overrides ``cfg.train.steps``.  Validation metrics are computed
    every ``eval_every`` steps and after the last step.
    """
    steps = cfg.train.steps if steps is None else steps
    net = DepthNet.init(cfg.model)
    train_set, val_set = data if data is not None else build_splits(cfg)
    if not train_set:
        raise ContractError("training split is empty")
    images = np.stack([s.image for s in train_set])
    factor = PATCH_SCALES[0]
    depth_ds, mask_ds = downsample_target(np.stack([s.depth for s in train_set]),
                                          np.stack([s.mask for s in train_set]), factor)

    state = OptimizerState(beta1=cfg.adam.beta1, beta2=cfg.adam.beta2, eps=cfg.adam.eps)
    rng = np.random.default_rng(cfg.seed)
    order = np.empty(0, dtype=np.int64)
    bs = min(cfg.train.batch_size, len(train_set))
    result = TrainResult(checkpoint=make_checkpoint(cfg, net, 0, None))
    params = net.named_parameters()
    endpoints = (cfg.train.lr_start, cfg.train.lr_end)

    for step in range(steps):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(len(train_set))])
        idx, order = order[:bs], order[bs:]
        # Keep at least one valid target per image.
        batch_mask = mask_ds[idx].copy()
        for b in np.flatnonzero(~batch_mask.any(axis=(-2, -1))):
            batch_mask[b] = depth_ds[idx[b]] > 0

        lr = lr_at(step, steps, endpoints)
        net.zero_grad()
        try:
            with Tape() as tape:
                pred = net.forward(images[idx])
                loss = silog_loss(pred, depth_ds[idx], batch_mask, cfg.loss)
            if not np.isfinite(loss.value):
                raise NumericError("loss")
            backward(tape, loss)
            grads = {k: v.grad for k, v in params.items()}
            for k, g in grads.items():
                if not np.isfinite(g).all():
                    raise NumericError(f"gradient of {k}")
        except NumericError as exc:
            raise NumericError(exc.stage, step) from None
        adam_step({k: v.value for k, v in params.items()}, grads, state, lr)

        value = float(loss.value)
        result.losses.append((step, lr, value))
        if on_step is not None:
            on_step(step, lr, value)
        last = step == steps - 1
        if val_set and (last or (cfg.train.eval_every > 0 and (step + 1) % cfg.train.eval_every == 0)):
            report = evaluate_dataset(net, val_set, cfg.eval.cap, cfg.eval.min_depth)
            result.metrics.append((step + 1, report))
            if on_eval is not None:
                on_eval(step + 1, report)
            log.info("step %d: val abs_rel %.4f", step + 1, report.abs_rel)

    result.checkpoint = make_checkpoint(cfg, net, steps, state if steps > 0 else None)
    return result


def net_from_checkpoint(ckpt: Checkpoint) -> DepthNet:
    net = DepthNet.init(ckpt.config.model)
    net.load_state_dict(ckpt.tensors)
    return net
