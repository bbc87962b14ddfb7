"""Coarse-grained nonlinear system identification."""
