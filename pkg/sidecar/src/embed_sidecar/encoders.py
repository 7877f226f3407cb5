"""Dual text/image encoders behind one interface.

``clip-*`` tags load a pretrained dual encoder (needs the optional
``clip`` extra and downloadable weights). ``toy-<dim>`` tags provide a
deterministic dependency-free encoder for tests and offline contract
checks: token hashing for text, a grayscale thumbnail signature for
images. All encoders return unit-norm float32 rows.
"""

from __future__ import annotations

import base64
import hashlib
import io
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np


class EncoderError(RuntimeError):
    pass


class ItemDecodeError(EncoderError):
    """An individual image item could not be loaded or decoded."""


class Encoder(Protocol):
    model_tag: str
    dim: int

    def encode_text(self, items: Sequence[str]) -> np.ndarray: ...

    def encode_image(self, items: Sequence[str]) -> np.ndarray: ...


def _normalize(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    for i in np.flatnonzero(norms[:, 0] < 1e-12):
        rows[i, 0] = 1.0
        norms[i, 0] = 1.0
    return (rows / norms).astype(np.float32)


def _load_image_bytes(item: str) -> bytes:
    path = Path(item)
    try:
        if path.exists():
            return path.read_bytes()
    except OSError:
        pass
    payload = item.split(",", 1)[1] if item.startswith("data:") else item
    try:
        return base64.b64decode(payload, validate=True)
    except Exception as exc:
        raise ItemDecodeError(f"item is neither a readable file nor base64: {item[:48]!r}") from exc


class ToyEncoder:
    """Deterministic stand-in encoder; no model weights involved."""

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise EncoderError("toy encoder dim must be >= 1")
        self.dim = dim
        self.model_tag = f"toy-{dim}"

    def encode_text(self, items: Sequence[str]) -> np.ndarray:
        rows = np.zeros((len(items), self.dim), dtype=np.float64)
        for row, text in enumerate(items):
            for token in text.lower().split():
                digest = hashlib.sha256(f"txt:{token}".encode("utf-8")).digest()
                index = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] % 2 == 0 else -1.0
                rows[row, index] += sign
        return _normalize(rows)

    def encode_image(self, items: Sequence[str]) -> np.ndarray:
        from PIL import Image, UnidentifiedImageError

        rows = np.zeros((len(items), self.dim), dtype=np.float64)
        for row, item in enumerate(items):
            data = _load_image_bytes(item)
            try:
                with Image.open(io.BytesIO(data)) as img:
                    thumb = img.convert("L").resize((8, 8))
            except (UnidentifiedImageError, OSError) as exc:
                raise ItemDecodeError(f"cannot decode image item {item[:48]!r}") from exc
            signature = np.asarray(thumb, dtype=np.float64).reshape(-1)
            signature -= signature.mean()
            for index, value in enumerate(signature):
                rows[row, index % self.dim] += value
            if not rows[row].any():
                rows[row, 0] = 1.0
        return _normalize(rows)


_CLIP_MODELS = {
    "clip-vit-b32": "openai/clip-vit-base-patch32",
    "clip-vit-l14": "openai/clip-vit-large-patch14",
}


class ClipEncoder:
    """Pretrained dual encoder via transformers; weights load lazily."""

    def __init__(self, model_tag: str):
        if model_tag not in _CLIP_MODELS:
            raise EncoderError(f"unknown clip tag {model_tag!r}; known: {sorted(_CLIP_MODELS)}")
        self.model_tag = model_tag
        self._checkpoint = _CLIP_MODELS[model_tag]
        self._model = None
        self._processor = None
        self.dim = 512 if model_tag == "clip-vit-b32" else 768

    def _ensure_loaded(self):
        if self._model is not None:
            return
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderError(
                "clip encoders need the [clip] extra (torch + transformers)"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(self._checkpoint)
            self._processor = CLIPProcessor.from_pretrained(self._checkpoint)
        except Exception as exc:
            raise EncoderError(f"could not load weights for {self._checkpoint}: {exc}") from exc
        self._model.eval()
        self.dim = self._model.config.projection_dim

    def encode_text(self, items: Sequence[str]) -> np.ndarray:
        import torch

        self._ensure_loaded()
        inputs = self._processor(
            text=list(items), return_tensors="pt", padding=True, truncation=True
        )
        with torch.no_grad():
            features = self._model.get_text_features(**inputs)
        return _normalize(features.cpu().numpy())

    def encode_image(self, items: Sequence[str]) -> np.ndarray:
        import torch
        from PIL import Image

        self._ensure_loaded()
        images = []
        for item in items:
            data = _load_image_bytes(item)
            try:
                images.append(Image.open(io.BytesIO(data)).convert("RGB"))
            except Exception as exc:
                raise ItemDecodeError(f"cannot decode image item {item[:48]!r}") from exc
        inputs = self._processor(images=images, return_tensors="pt")
        with torch.no_grad():
            features = self._model.get_image_features(**inputs)
        return _normalize(features.cpu().numpy())


def get_encoder(model_tag: str) -> Encoder:
    if model_tag.startswith("toy-"):
        try:
            dim = int(model_tag.split("-", 1)[1])
        except ValueError:
            raise EncoderError(f"bad toy tag {model_tag!r}; expected toy-<dim>") from None
        return ToyEncoder(dim)
    if model_tag in _CLIP_MODELS:
        return ClipEncoder(model_tag)
    raise EncoderError(
        f"unknown model tag {model_tag!r}; use toy-<dim> or one of {sorted(_CLIP_MODELS)}"
    )
