"""Sequential Bayesian design of monitoring wells with conditional normalizing flows."""
