"""
One monitoring iteration of the digital twin
============================================

Forecast a plume ensemble, train the flow and the well density together,
drill the most promising column and look at the posterior.
"""

import numpy as np

from beacon import twin

cfg = twin.TwinConfig(seed=3)
state = twin.initial_state(cfg)

# the prior: 64 plumes, each pushed through its own permeability field
mean0 = np.mean(state.prior.members, axis=0)
print("prior plume extent (cells with mean saturation > 0.05):", int((mean0 > 0.05).sum()))

state = twin.run_iteration(state, cfg, "beacon")
m = state.history[-1]
print(f"drilled column {m.drilled_column}, rmse {m.rmse:.4f}, mean posterior std {m.mean_posterior_std:.4f}")

# the learned density, one character per column (darker = more weight)
shades = " .:-=+*#%@"
w = state.design_density
print("density |" + "".join(shades[int(9 * v / w.max())] for v in w) + "|")

# truth and posterior mean, thresholded for a terminal view
post = np.mean(state.prior.members, axis=0)
for row in range(8, 24, 2):
    t = "".join("#" if v > 0.1 else "." for v in state.truth[row])
    p = "".join("#" if v > 0.1 else "." for v in post[row])
    print(f"{t}   {p}")
