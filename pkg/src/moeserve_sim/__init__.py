"""Deterministic discrete-event simulator of a disaggregated MoE serving stack."""

__version__ = "0.1.0"
