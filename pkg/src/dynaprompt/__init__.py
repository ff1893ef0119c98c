"""Desk-scale vision-language pre-training with dynamic key-value prompt pools.

Subpackages/modules:
  ndtensor   float64 tensors + reverse-mode tape + finite-difference checks
  pools      trainable key-value prompt pools, top-N cosine selection
  encoder    modality embedding, prompt unification, shared transformer
  objectives masked-token / matching / contrastive losses, training step
  adaptation task heads, retrieval ranking, causal caption decoder
  corpus     deterministic latent-concept synthetic corpus
  checkpoint bit-specified named-tensor checkpoint files
  harness    training/eval loops, metrics CSV, pool inspection
  cli        command-line entry points
"""

from .config import ModelConfig, ConfigError

__version__ = "0.1.0"
__all__ = ["ModelConfig", "ConfigError", "__version__"]
