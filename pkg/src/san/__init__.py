"""Stacked adversarial networks for zero-shot sketch-based image retrieval.

The pipeline maps sketch feature vectors to synthetic image features with a
conditional GAN, refines them with a second GAN regularized by a
multi-kernel MMD, projects generated and real image features into a shared
2-d space with a Siamese network, and ranks gallery images by Euclidean
distance in that space.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
