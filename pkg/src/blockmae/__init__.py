"""Self-supervised vision pre-training with block-masked reconstruction.

A small NumPy implementation of masked-autoencoder pre-training with
block-granular masking, multiple class tokens, a deep pixel decoder,
loss-based corpus curation, and feature distillation, plus the frozen-feature
probes used to evaluate the learned representations.
"""

__version__ = "0.1.0"
