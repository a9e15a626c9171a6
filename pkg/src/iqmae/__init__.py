"""Masked-autoencoder pretraining and fine-tuning for complex baseband IQ signals."""

__version__ = "0.1.0"
