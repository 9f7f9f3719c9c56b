"""Optimal velocity control of a Brinkman / sixth-order Cahn-Hilliard system."""

from bchopt.grid import (
    BCMode,
    Grid,
    ScalarField,
    TimeGrid,
    VectorField,
    bilaplacian,
    divergence,
    gradient,
    inner,
    laplacian,
    norm_h1,
    norm_h2,
    norm_l2,
    sym_gradient,
    trilaplacian,
)

__version__ = "0.1.0"
