"""snowseg: CPU semantic segmentation for snowy street scenes.

A self-contained FCN-8 implementation (forward and backward passes built on
numpy), a 20-class dataset toolchain, per-class IoU evaluation with explicit
NaN semantics, training with overfitting diagnosis, and a batch CLI.
"""

__version__ = "0.1.0"
