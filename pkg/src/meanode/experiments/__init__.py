"""Sweeps, metrics, rate fits, studies and figure reproductions."""
