"""Multilingual masked-LM pretraining with additive language and script embeddings."""

__version__ = "0.1.0"
