"""
Derivatives of a tanh network, three ways
=========================================

The certificate condition contains dV/dx, and training needs the weight
gradient of a loss built from it. This walk-through checks both against
central finite differences on a small random network.
"""
import numpy as np

from neural_npv import diff_engine as de

rng = np.random.default_rng(0)
net = de.init_network([3, 16, 16, 2], rng)

# %% Input Jacobian by forward-mode tangents
x = rng.normal(size=3)
print("Jacobian at x:\n", de.input_jacobian(net, x))
print("relative error against finite differences:", de.finite_diff_check(net, x, 1e-5))

# %% A loss that contains the Jacobian itself
# Push two tangent directions through the network, square the directional
# derivatives and add a plain output term. The tape records the tangent
# propagation, so reverse mode gives the weight gradient of the whole thing.
xs = rng.normal(size=(4, 3))
tangents = rng.normal(size=(2, 4, 3))


def loss_value(params):
    out = de.forward_dual(params, de.DualBatch(xs, tangents))
    return float(np.sum(out.tangents**2) + np.sum(np.sin(out.primal)))


tape = de.GradTape()
pp = net.on_tape(tape)
out = de.forward_dual(net, de.DualBatch(xs, tangents), pp)
loss = de.reduce_sum(out.tangents * out.tangents) + de.reduce_sum(de.sin(out.primal))
analytic = de.weight_gradient(tape, loss, pp).flat()
numeric = de.numeric_gradient(lambda w: loss_value(net.from_flat(w)), net.flat(), 1e-5)

print("loss:", float(loss.value), "parameters:", net.n_params)
print("max |analytic - numeric| / max |numeric|:",
      np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)))
