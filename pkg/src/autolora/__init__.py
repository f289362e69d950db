"""Robust fine-tuning lab: vanilla RFT, TWINS and AutoLoRa on a small autodiff engine."""

__version__ = "0.1.0"
