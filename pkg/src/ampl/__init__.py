"""Offline model-based reinforcement learning with marginal importance weighting.

The package has two halves that check each other:

* exact finite-MDP machinery (`ampl.tabular`, `ampl.verify`) that computes
  stationary distributions, importance ratios and performance-gap bounds in
  closed form, and
* the learned stack (`ampl.nets`, `ampl.ensemble`, `ampl.miw`, `ampl.agent`,
  `ampl.orchestrator`) that trains a Gaussian dynamics ensemble by weighted
  maximum likelihood, estimates marginal importance weights with a fixed-point
  loss, and optimizes a GAN-regularized actor-critic on mixed real/synthetic
  batches.

`ampl.pointmass` provides a small continuous-control task used for end-to-end
runs, and `ampl.cli` exposes everything as a command line tool.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
