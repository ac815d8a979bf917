"""Finite-difference audit of every parameter gradient on a reduced model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndnum as nd
from .imgproc import local_contrast_normalize
from .net import ModelConfig, forward_episode, init_params
from .ndnum import Tensor
from .train import TrainConfig, batch_gradients, total_loss

REDUCED = ModelConfig(patch=8, scales=(8, 16, 32), conv_channels=(8, 8, 8, 16), hidden=16,
                      rnn_hidden=32, n_classes=4, T=3)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradcheckRow:
    name: str
    size: int
    max_rel_error: float
    max_abs_grad: float


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow]
    tolerance: float

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.rows if not r.max_rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def table(self) -> str:
        lines = [f"{'parameter':<28s} {'size':>6s} {'max rel err':>12s} {'max |grad|':>12s}"]
        for r in self.rows:
            flag = "" if r.max_rel_error < self.tolerance else "  FAIL"
            lines.append(f"{r.name:<28s} {r.size:>6d} {r.max_rel_error:>12.3e} {r.max_abs_grad:>12.3e}{flag}")
        lines.append(("PASS" if self.passed else "FAIL") + f" (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def gradcheck_problem(config: ModelConfig = REDUCED, batch: int = 2, seed: int = 0):
    """Random contrast-normalised images, labels, scores and fixed fixations."""
    rng = np.random.default_rng(seed)
    side = config.scales[-1] + 8
    images = np.stack([local_contrast_normalize(rng.random((side, side))) for _ in range(batch)])
    labels = rng.integers(0, config.n_classes, size=batch)
    mos = rng.uniform(0.5, 3.0, size=batch)
    locations = rng.uniform(-0.8, 0.8, size=(config.T, batch, 2))
    params = init_params(config, rng)
    # score output bias well above the ReLU kink keeps the check away from it
    params["score.fc2.bias"] = Tensor([1.5], requires_grad=True, name="score.fc2.bias")
    return params, images, labels, mos, locations


def gradcheck(model_config: ModelConfig = REDUCED, train_config: TrainConfig | None = None,
              tolerance: float = 1e-4, step: float = 1e-5, seed: int = 0,
              perturb: dict[str, float] | None = None) -> GradcheckReport:
    """Compare tape gradients of ``L_cla + lambda * L_reg`` with central
    differences for every entry of every parameter.

    ``perturb`` is a test hook: it scales the analytic gradient of the named
    parameters, emulating a broken backward rule.
    """
    tc = train_config or TrainConfig(alpha_rein=0.0)
    params, images, labels, mos, locations = gradcheck_problem(model_config, seed=seed)
    grads, *_ = batch_gradients(params, images, labels, mos, locations[0], None,
                                model_config, tc, locations=locations)
    for name, factor in (perturb or {}).items():
        grads[name] = grads[name] * factor

    def loss_with(name, arr):
        local = dict(params)
        local[name] = Tensor(arr)
        trace = forward_episode(local, images, locations[0], None, config=model_config,
                                locations=locations)
        return total_loss(trace, labels, mos, tc).item()

    rows = []
    for name, p in params.items():
        numeric = nd.finite_diff_grad(lambda arr: loss_with(name, arr), p.data, step)
        err = relative_error(grads[name], numeric)
        rows.append(GradcheckRow(name, p.size, float(err.max()), float(np.abs(numeric).max())))
    return GradcheckReport(rows, tolerance)
