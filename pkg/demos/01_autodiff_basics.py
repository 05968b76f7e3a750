"""Tape-based reverse-mode differentiation from first principles.

Builds a few expressions on the tape, checks every gradient against
central finite differences, then fits a tiny least-squares model using
nothing but the exported ops and plain gradient descent.
"""

import numpy as np

import vitbench.autodiff as ad
from vitbench.autodiff import Tape, Tensor, backward, grad_check

rng = np.random.default_rng(0)

# --- a scalar expression and its exact gradient ---------------------------

x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
with Tape() as tape:
    y = ad.tsum(ad.mul(ad.gelu(x), x))
backward(y, tape)
print("d/dx sum(gelu(x) * x):")
print(x.grad)

# --- finite-difference audit of a composite -------------------------------

w = Tensor(rng.normal(size=(4, 2)))


def f(t):
    h = ad.matmul(ad.layer_norm(t,
                                Tensor(np.ones(4)),
                                Tensor(np.zeros(4))), w)
    return ad.tsum(ad.log_softmax_lastdim(h))


worst = grad_check(f, Tensor(rng.normal(size=(5, 4)), requires_grad=True))
print(f"\nworst relative error vs central differences: {worst:.3e}")

# --- least squares by hand -------------------------------------------------

n = 64
inputs = Tensor(rng.normal(size=(n, 3)))
true_w = np.array([[1.5], [-2.0], [0.5]])
targets = Tensor(inputs.data @ true_w + 0.01 * rng.normal(size=(n, 1)))

weights = Tensor(np.zeros((3, 1)), requires_grad=True)
for step in range(200):
    weights.zero_grad()
    with Tape() as tape:
        residual = ad.add(ad.matmul(inputs, weights), ad.neg(targets))
        loss = ad.tmean(ad.mul(residual, residual))
    backward(loss, tape)
    weights.data -= 0.3 * weights.grad
    if step % 50 == 0:
        print(f"step {step:3d}  mse {loss.item():.6f}")

print("\nrecovered weights:", weights.data.ravel())
print("true weights:     ", true_w.ravel())
