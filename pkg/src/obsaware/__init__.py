"""Observability-aware control for range-only cooperative localization.

A numpy/scipy library implementing Lie-derivative jets, short-term local
observability Gramians (STLOG), the observability predictive controller (OPC),
a band-limited observation-noise model, and an EKF Monte Carlo harness for a
leader-follower quadrotor pair with range-plus-attitude sensing.
"""

from . import estimator, liealg, model, noise, obsv, opc

__all__ = ["liealg", "model", "obsv", "noise", "estimator", "opc", "sim", "cli"]

__version__ = "0.1.0"
