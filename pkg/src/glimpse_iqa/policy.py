"""Gaussian location policy, multi-task reward and the REINFORCE term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndnum import Tensor


@dataclass
class GaussianPolicy:
    """Isotropic Gaussian around the predicted mean, with epsilon-greedy
    uniform exploration. :meth:`sample` returns the raw draw; callers clamp
    it into [-1, 1]^2 before extracting a glimpse.
    """

    sigma: float
    epsilon: float = 0.0
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.rng is None:
            self.rng = np.random.default_rng()

    def sample(self, mu) -> np.ndarray:
        """Unclamped draw for each row of ``mu`` (shape ``(2,)`` or ``(B, 2)``)."""
        mu = np.asarray(mu, dtype=np.float64)
        rows = mu.reshape(-1, 2)
        explore = self.rng.random(rows.shape[0]) < self.epsilon
        gauss = rows + self.sigma * self.rng.standard_normal(rows.shape)
        uniform = self.rng.uniform(-1.0, 1.0, size=rows.shape)
        return np.where(explore[:, None], uniform, gauss).reshape(mu.shape)


def sample_location(policy: GaussianPolicy, mu) -> np.ndarray:
    """Sample a fixation and clamp it into the image."""
    return np.clip(policy.sample(mu), -1.0, 1.0)


def log_prob(mu, a, sigma: float) -> float:
    """Gaussian log density of ``a`` summed over both axes."""
    mu = np.asarray(mu, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    z = (a - mu) / sigma
    return float(np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * np.log(2 * np.pi)))


def log_prob_grad_mu(mu, a, sigma: float) -> np.ndarray:
    """d log p(a | mu, sigma) / d mu = (a - mu) / sigma^2."""
    return (np.asarray(a, dtype=np.float64) - np.asarray(mu, dtype=np.float64)) / sigma**2


@dataclass(frozen=True)
class RewardSpec:
    score_threshold: float = 0.7

    def __post_init__(self):
        if not self.score_threshold > 0:
            raise ValueError("score_threshold must be positive")


def reward(pred_class, true_class, pred_score, true_score, spec: RewardSpec = RewardSpec()):
    """1 if the class is right or the score is within the threshold, else 0.

    Works elementwise on arrays.
    """
    hit = (np.asarray(pred_class) == np.asarray(true_class)) | (
        np.abs(np.asarray(pred_score, dtype=np.float64) - np.asarray(true_score, dtype=np.float64))
        < spec.score_threshold
    )
    return hit.astype(np.int64) if hit.ndim else int(hit)


def reinforce_grad_injection(trace, R, sigma: float, alpha_rein: float,
                             baseline: float = 0.0) -> list[tuple[Tensor, np.ndarray]]:
    """Output-side gradients of ``-alpha * J_rein`` at every policy mean.

    For each step the seed is ``-alpha * (R_j - b) * (a_j - mu_j) / sigma^2 / M``
    so that, after backpropagation through the tape, the descent direction of
    the total loss ascends the batch-averaged REINFORCE objective.
    """
    R = np.asarray(R, dtype=np.float64).reshape(-1)
    m = trace.batch
    if R.shape[0] != m:
        raise ValueError(f"{R.shape[0]} rewards for a batch of {m}")
    gain = -alpha_rein * (R - baseline) / m
    seeds = []
    for mu, a in zip(trace.mus, trace.actions):
        grad = gain[:, None] * log_prob_grad_mu(mu.data, a, sigma).reshape(m, 2)
        seeds.append((mu, grad.reshape(mu.shape)))
    return seeds


def schedules(epoch: int, anneal_epochs: int = 100, sigma_start: float = 0.16,
              sigma_end: float = 0.10, eps_start: float = 0.10, eps_end: float = 0.0) -> tuple[float, float]:
    """Policy std and exploration rate, linear over ``anneal_epochs`` then held."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    frac = min(epoch / anneal_epochs, 1.0) if anneal_epochs > 0 else 1.0
    return (sigma_start + frac * (sigma_end - sigma_start),
            eps_start + frac * (eps_end - eps_start))
