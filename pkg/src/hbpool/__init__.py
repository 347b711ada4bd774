"""Factorized (FBP), cross-layer (CBP) and hierarchical (HBP) bilinear pooling.

Everything runs on numpy: ``tensor`` holds the shape-checked kernels,
``autodiff`` records them on a tape for reverse-mode gradients, ``pooling``
builds the heads, ``backbone`` the small conv feature extractor, and
``trainer`` the two-stage SGD loop.
"""

__version__ = "0.1.0"
