"""Embedding sidecar: an HTTP text/image embedding service plus a batch
command that precomputes gallery embeddings into EMBV1 files the
retrieval engine loads directly.
"""

from .app import create_app
from .embv1 import write_embv1
from .encoders import ClipEncoder, Encoder, EncoderError, ToyEncoder, get_encoder
from .precompute import batch_precompute

__version__ = "0.1.0"

__all__ = [
    "ClipEncoder",
    "Encoder",
    "EncoderError",
    "ToyEncoder",
    "batch_precompute",
    "create_app",
    "get_encoder",
    "write_embv1",
]
