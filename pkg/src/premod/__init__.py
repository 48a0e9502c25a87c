"""Pancreatic-cancer risk modelling toolkit at desk scale.

Encoding of clinical event histories, a small attention network trained with
its own autodiff engine, calibration metrics, prevalence-aware recalibration,
Shapley attributions, risk trajectories and screening-cascade arithmetic.
"""

__version__ = "0.1.0"
