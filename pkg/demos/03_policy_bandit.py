"""
REINFORCE on a one-step bandit
==============================

The location policy is Gaussian around the predicted mean. With reward
1{|a| < c} the true gradient of the expected reward has a closed form, so
the batch estimator used during training can be checked against it.
"""
import numpy as np
from scipy.stats import norm

from glimpse_iqa import ndnum as nd
from glimpse_iqa.ndnum import Tape, Tensor, backward
from glimpse_iqa.policy import GaussianPolicy, reinforce_grad_injection


class OneStep:
    """The fields of an episode trace that the estimator reads."""

    def __init__(self, mu, actions):
        self.mus, self.actions, self.batch = [mu], actions[None], actions.shape[0]


c, sigma, alpha, n = 0.3, 0.16, 0.01, 100_000
rng = np.random.default_rng(0)
for theta in (-0.5, 0.0, 0.4):
    th = Tensor([theta], requires_grad=True)
    with Tape() as tape:
        mu = nd.mul(th, Tensor(np.tile([1.0, 0.0], (n, 1))))
    a = GaussianPolicy(sigma, 0.0, rng).sample(mu.numpy())
    R = (np.abs(a[:, 0]) < c).astype(float)
    # the estimator arrives as a seed gradient on each policy mean
    seeds = reinforce_grad_injection(OneStep(mu, a), R, sigma, alpha)
    g, = backward(tape, None, seeds=seeds, wrt=[th])
    estimate = -g[0] / alpha
    exact = (norm.pdf((-c - theta) / sigma) - norm.pdf((c - theta) / sigma)) / sigma
    print(f"theta {theta:+.1f}: estimate {estimate:+.4f}  closed form {exact:+.4f}")
