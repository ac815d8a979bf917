"""
Reverse-mode differentiation on a tape
======================================

Every model gradient in the package comes from a small tape recorder over
numpy arrays. This script records a two-layer computation, runs the
backward sweep and compares against central finite differences.
"""
import numpy as np

from glimpse_iqa import ndnum as nd
from glimpse_iqa.ndnum import Tape, Tensor, backward, finite_diff_grad

rng = np.random.default_rng(0)
W = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="W")
x = Tensor(rng.standard_normal((5, 4)))  # batch of five inputs

# Operations run eagerly; the tape only remembers how to undo them.
with Tape() as tape:
    h = nd.relu(nd.linear(x, W))
    loss = nd.sum_all(nd.mul(h, h))
grad_W, = backward(tape, loss, wrt=[W])


def loss_of(w):
    out = np.maximum(x.numpy() @ w.T, 0)
    return (out ** 2).sum()


numeric = finite_diff_grad(loss_of, W.numpy())
print("analytic gradient\n", grad_W.round(6))
print("max abs difference to finite differences:", np.abs(grad_W - numeric).max())

# Softmax weighting of per-step scores is a small closed-form case:
# scores 1, 2, 3 with raw weights 0, ln 2, ln 4 average to 17/7.
from glimpse_iqa.net import aggregate_score

score, weights = aggregate_score([Tensor([1.0]), Tensor([2.0]), Tensor([3.0])],
                                 [Tensor([0.0]), Tensor([np.log(2)]), Tensor([np.log(4)])])
print("aggregated score", score.item(), "expected", 17 / 7)
