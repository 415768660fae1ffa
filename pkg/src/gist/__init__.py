"""Image-specific caption generation, label-preserving matching,
contrastive fine-tuning, and any-shot evaluation for fine-grained
image classification."""

__version__ = "0.1.0"

from .errors import GistError

__all__ = ["GistError", "__version__"]
