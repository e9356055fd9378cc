"""
A conditional flow on a problem with a known answer
===================================================

Train the flow on draws from a small linear-Gaussian model and compare its
posterior samples with the closed-form posterior for a fresh observation.
"""

import numpy as np

from beacon import flow as fl
from beacon.audit import random_spd
from beacon.nn import AdamState, adam_update
from beacon.oracle import LinGaussModel, lin_gauss_posterior

rng = np.random.default_rng(0)
d = 4
model = LinGaussModel(rng.standard_normal((d, d)) / 2, np.ones(d), random_spd(rng, d), 0.25)
x, y = model.sample(20000, 1)

# the conditioning vector is [observation, mask, seismic]; here every entry is observed
def cond(yy):
    yy = np.atleast_2d(yy)
    return np.hstack([yy, np.ones_like(yy), np.zeros_like(yy)])

params = fl.flow_init(0, (d,), n_couplings=4, hidden=32, embed_dim=8, cond_hidden=32)
theta = fl.flatten_flow(params)
view = fl.unflatten_flow(params, theta, copy=False)
adam = AdamState.zeros(theta.size)
for epoch in range(15):
    for idx in np.array_split(np.random.default_rng(epoch).permutation(len(x)), 200):
        loss, g, _, _ = fl.batch_loss_and_grads(view, x[idx], cond(y[idx]))
        adam_update(adam, theta, fl.flatten_flow(g), 3e-3)
    print(f"epoch {epoch:2d}  loss {loss:.3f}")

# one new observation, many posterior draws
x_true, y_obs = model.sample(1, 2)
samples = fl.inverse_batch(view, rng.standard_normal((5000, d)), np.repeat(cond(y_obs[0]), 5000, axis=0))
mean, cov = lin_gauss_posterior(model, y_obs[0])
print("true x          ", np.round(x_true[0], 3))
print("posterior mean  ", np.round(mean, 3))
print("flow mean       ", np.round(samples.mean(axis=0), 3))
print("posterior std   ", np.round(np.sqrt(np.diag(cov)), 3))
print("flow std        ", np.round(samples.std(axis=0), 3))
