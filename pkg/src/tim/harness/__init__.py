"""Simulated network, target sites, attack scenarios and the ``tim`` CLI."""
