"""Coarse-to-fine early-exit networks with Bayesian-optimized exit thresholds."""
