"""Adapter that turns pretrained contextual encoders into portable embedding stores.

Reads token-level corpora, runs a backend encoder (a deterministic debug
backend ships for testing; transformer checkpoints load via the optional
``hf`` extra), pools subword vectors back to word level, and writes all
encoder layers per sequence in the PTE binary format consumed downstream.
"""

__version__ = "0.1.0"
