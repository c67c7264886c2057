"""Deterministic synthetic patches and orchard-row scenes with ground truth."""
