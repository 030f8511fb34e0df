"""Synthetic data, metrics, experiments, persistence and self-checks."""
