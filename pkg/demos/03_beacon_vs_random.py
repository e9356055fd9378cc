"""
Designed wells against random wells
===================================

Paired runs: the same ground truth, the same noise, two ways of picking wells.
Three seeds take about two minutes on one core.
"""

import numpy as np

from beacon import twin

for seed in range(3):
    cfg = twin.TwinConfig(seed=seed)
    b = twin.run_experiment(cfg, "beacon")
    r = twin.run_baseline(cfg)
    print(f"seed {seed}")
    print("  beacon rmse", np.round(b.rmse_curve(), 4), "wells", b.drilled)
    print("  random rmse", np.round(r.rmse_curve(), 4), "wells", r.drilled)
    print("  beacon std ", np.round(b.std_curve(), 4))
