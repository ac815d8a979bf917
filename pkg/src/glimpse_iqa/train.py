"""Loss assembly, Adam, schedules, the location-head reset and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndnum as nd
from .data import ArraySplit
from .evaluation import evaluate
from .net import (LOCATION_HEAD, ModelConfig, ModelParams, forward_episode,
                  init_params, predict_class, reset_location_head)
from .ndnum import Tensor
from .policy import GaussianPolicy, RewardSpec, reinforce_grad_injection, reward, schedules

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "sigma", "epsilon", "mean_loss", "mean_reward",
                  "train_acc", "val_srocc", "val_lcc")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_reg: float = 1.0
    alpha_rein: float = 0.01
    epochs: int = 1000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    reward_threshold: float = 0.7
    sigma_start: float = 0.16
    sigma_end: float = 0.10
    eps_start: float = 0.10
    eps_end: float = 0.0
    anneal_epochs: int = 100
    reset_saturation: float = 0.999
    reset_fraction: float = 0.9
    baseline: float | None = None
    grad_clip: float | None = None
    freeze_location: bool = False
    val_every: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "val_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_start", "lr_end", "sigma_start", "sigma_end", "reward_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_reg < 0 or self.alpha_rein < 0:
            raise ValueError("loss weights must be nonnegative")


# --------------------------------------------------------------------------
# schedules and optimiser


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear from ``lr_start`` at epoch 0 to ``lr_end`` at the final epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    if config.epochs == 1:
        return config.lr_start
    frac = epoch / (config.epochs - 1)
    return config.lr_start + frac * (config.lr_end - config.lr_start)


def policy_schedule(epoch: int, config: TrainConfig) -> tuple[float, float]:
    return schedules(epoch, config.anneal_epochs, config.sigma_start, config.sigma_end,
                     config.eps_start, config.eps_end)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, frozen: tuple[str, ...] = ()) -> ModelParams:
    """One bias-corrected Adam update; returns new parameter tensors."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None or name in frozen:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - update, requires_grad=True, name=name)
    return out


# --------------------------------------------------------------------------
# loss


def total_loss(trace, true_class, true_score, config: TrainConfig) -> Tensor:
    """Differentiable supervised part ``L_cla + lambda * L_reg``.

    The reinforcement term has no forward value; it enters through
    :func:`~glimpse_iqa.policy.reinforce_grad_injection`.
    """
    labels = np.asarray(true_class).reshape(-1)
    cla = nd.nll_loss(trace.logits if trace.logits.ndim == 2 else nd.reshape(trace.logits, (1, -1)),
                      labels)
    target = np.asarray(true_score, dtype=np.float64).reshape(trace.score.shape)
    reg = nd.mae_loss(trace.score, target)
    if config.lambda_reg == 0:
        return cla
    return nd.add(cla, nd.mul(reg, Tensor(config.lambda_reg)))


def stability_reset(params: ModelParams, mus: list, config: TrainConfig, rng: np.random.Generator,
                    init_scale: float, adam: AdamState | None = None) -> bool:
    """Redraw the location head if too many policy means sit at the HardTanh rails.

    Returns whether a reset happened; Adam moments for the head are cleared.
    """
    vals = np.concatenate([np.abs(m.data).reshape(-1) for m in mus]) if mus else np.zeros(0)
    if vals.size == 0:
        return False
    frac = float((vals > config.reset_saturation).mean())
    if frac <= config.reset_fraction:
        return False
    reset_location_head(params, rng, init_scale)
    if adam is not None:
        for name in LOCATION_HEAD:
            adam.m.pop(name, None)
            adam.v.pop(name, None)
    log.info("location head reset: %.3f of policy means saturated", frac)
    return True


def batch_gradients(params: ModelParams, images, labels, mos, l0, policy: GaussianPolicy | None,
                    model_config: ModelConfig, config: TrainConfig, locations=None):
    """Forward one batch on a tape and return (grads by name, trace, loss, rewards)."""
    with nd.Tape() as tape:
        trace = forward_episode(params, images, l0, policy, config=model_config,
                                locations=locations, tape=tape)
        loss = total_loss(trace, labels, mos, config)
    pred = predict_class(trace.logits)
    R = reward(pred, labels, trace.score.data, mos, RewardSpec(config.reward_threshold))
    R = np.atleast_1d(R)
    seeds = []
    if config.alpha_rein > 0 and trace.mus and policy is not None:
        seeds = reinforce_grad_injection(trace, R, policy.sigma, config.alpha_rein,
                                         config.baseline or 0.0)
    names = list(params)
    grads = nd.backward(tape, loss, seeds=seeds, wrt=[params[n] for n in names])
    return dict(zip(names, grads)), trace, loss.item(), R


def train_epoch(params: ModelParams, adam: AdamState, split: ArraySplit, epoch: int,
                model_config: ModelConfig, config: TrainConfig) -> tuple[ModelParams, dict]:
    """One pass over ``split`` in shuffled minibatches."""
    n = len(split)
    if n == 0:
        raise TrainingError("training split is empty")
    lr = lr_schedule(epoch, config)
    sigma, eps = policy_schedule(epoch, config)
    order = np.random.default_rng([config.seed, epoch]).permutation(n)
    frozen = LOCATION_HEAD if config.freeze_location else ()
    tot_loss = tot_reward = tot_correct = 0.0
    for bi, start in enumerate(range(0, n, config.batch_size)):
        idx = order[start:start + config.batch_size]
        rng = np.random.default_rng([config.seed, epoch, bi])
        policy = GaussianPolicy(sigma, eps, rng)
        l0 = rng.uniform(-1.0, 1.0, size=(idx.size, 2))
        grads, trace, loss, R = batch_gradients(
            params, split.images[idx], split.labels[idx], split.mos[idx], l0, policy,
            model_config, config)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, batch {bi}")
        if config.grad_clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > config.grad_clip:
                grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
        params = adam_step(params, grads, adam, lr, frozen)
        if not config.freeze_location:
            stability_reset(params, trace.mus, config, rng, model_config.loc_init_scale, adam)
        tot_loss += loss * idx.size
        tot_reward += float(R.sum())
        tot_correct += float((predict_class(trace.logits) == split.labels[idx]).sum())
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise TrainingError(f"parameter {name} became non-finite at epoch {epoch}")
    return params, {"epoch": epoch, "lr": lr, "sigma": sigma, "epsilon": eps,
                    "mean_loss": tot_loss / n, "mean_reward": tot_reward / n,
                    "train_acc": tot_correct / n}


@dataclass
class FitResult:
    best_params: ModelParams
    last_params: ModelParams
    history: list[dict]
    best_epoch: int
    best_val_srocc: float | None


def fit(train: ArraySplit, val: ArraySplit | None, model_config: ModelConfig, config: TrainConfig,
        params: ModelParams | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``config.epochs`` epochs keeping the best-validation-SROCC parameters."""
    if len(train) == 0:
        raise TrainingError("training split is empty")
    if params is None:
        params = init_params(model_config, np.random.default_rng([config.seed, 0xC0FFEE]))
    adam = AdamState()
    best, best_epoch, best_srocc = params, -1, None
    history = []
    for epoch in range(config.epochs):
        params, row = train_epoch(params, adam, train, epoch, model_config, config)
        row["val_srocc"] = row["val_lcc"] = None
        if val is not None and len(val) and (epoch % config.val_every == 0 or epoch == config.epochs - 1):
            rep = evaluate(params, model_config, val)
            row["val_srocc"], row["val_lcc"] = rep.srocc, rep.lcc
            if rep.srocc is not None and (best_srocc is None or rep.srocc > best_srocc):
                best, best_epoch, best_srocc = params, epoch, rep.srocc
        elif val is None:
            best, best_epoch = params, epoch
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d %s", epoch, row)
    if best_epoch < 0:
        best, best_epoch = params, config.epochs - 1
    return FitResult(best, params, history, best_epoch, best_srocc)


def format_metrics_row(row: dict) -> list[str]:
    out = []
    for col in METRIC_COLUMNS:
        v = row.get(col)
        if v is None:
            out.append("undefined")
        elif col == "epoch":
            out.append(str(int(v)))
        else:
            out.append(repr(float(v)))
    return out
