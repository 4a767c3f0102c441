"""Numerical laboratory for the radial exterior Stefan problem."""
