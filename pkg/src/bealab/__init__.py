"""Backward error analysis lab: modified flows and regularizers for SGD and two-player games.

The package compares discrete optimizer updates against the continuous flows
that backward error analysis predicts for them, fits the local-error order of
each flow, and evaluates the implicit regularizers those flows encode.
"""

from __future__ import annotations

from . import calculus, flows, harness, integrators, optimizers, problems, regularizers

__version__ = "0.1.0"

__all__ = ["calculus", "flows", "harness", "integrators", "optimizers", "problems", "regularizers", "__version__"]
