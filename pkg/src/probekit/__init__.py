"""Probing toolkit for fixed contextual embeddings.

Trains two deliberately capacity-limited heads over frozen per-layer token
embeddings (no sequence modeling above the embeddings): an end-to-end NER
probe (per-token feed-forward net + linear-chain CRF) and an NLI probe
(bilinear relation representations + element-wise max pooling), plus the
nearest-neighbor analysis of relation representations used to compare
embedding schemes.
"""

__version__ = "0.1.0"
