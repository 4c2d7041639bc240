"""Composed image+text retrieval.

A candidate image and a short multi-sentence caption describing the wanted
change are composed into one query vector (TIRG gating plus residual, with a
category embedding) and matched against gallery images by cosine similarity.
All math runs on a small float64 autodiff engine in :mod:`.numerics`.
"""

__version__ = "0.1.0"
