"""Concurrent adversarial learning (ConAdv) for large-batch data-parallel training.

A numpy-based, desk-scale toolkit: a small reverse-mode autodiff engine,
split-BatchNorm classifiers, 1-step PGD, SGD/LARS, a K-worker simulator for
the sequential (DisAdv) and stale-buffer (ConAdv) protocols, and a numerical
probe for the convergence bounds on a synthetic min-max problem.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
