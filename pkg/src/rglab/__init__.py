"""Desk-scale laboratory for multiscale renormalization-group machinery of
lattice scalar QED in three dimensions."""

__version__ = "0.1.0"
