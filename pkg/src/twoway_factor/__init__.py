# SPDX-License-Identifier: MIT
"""
Maximum likelihood estimation and simulation of the two-way factor model

    X = F Lᵀ + Λ Eᵀ + ε
"""

import importlib.metadata

try:
    __version__ = importlib.metadata.version("twoway-factor")
except importlib.metadata.PackageNotFoundError:
    __version__ = "unknown"
