"""HTTP surface: GET /health and POST /embed.

The service wraps exactly one encoder; requests naming a different
model_tag are rejected so callers cannot silently mix vector spaces.
"""

from __future__ import annotations

from typing import Literal

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .encoders import Encoder, EncoderError, ItemDecodeError

MAX_BATCH = 256


class EmbedRequest(BaseModel):
    kind: Literal["text", "image"]
    items: list[str] = Field(min_length=1)
    model_tag: str = ""


class EmbedReply(BaseModel):
    dim: int
    model_tag: str
    vectors: list[list[float]]


def create_app(encoder: Encoder) -> FastAPI:
    app = FastAPI(title="embed-sidecar")
    app.state.encoder = encoder

    @app.get("/health")
    def health():
        return {"status": "ok", "model_tag": encoder.model_tag, "dim": encoder.dim}

    @app.post("/embed", response_model=EmbedReply)
    def embed(request: EmbedRequest):
        if len(request.items) > MAX_BATCH:
            raise HTTPException(
                status_code=413,
                detail=f"batch of {len(request.items)} exceeds the {MAX_BATCH}-item limit",
            )
        if request.model_tag and request.model_tag != encoder.model_tag:
            raise HTTPException(
                status_code=400,
                detail=f"this service runs {encoder.model_tag!r}, not {request.model_tag!r}",
            )
        if any(not item for item in request.items):
            raise HTTPException(status_code=400, detail="items must be non-empty strings")
        try:
            if request.kind == "text":
                vectors = encoder.encode_text(request.items)
            else:
                vectors = encoder.encode_image(request.items)
        except ItemDecodeError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except EncoderError as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return EmbedReply(
            dim=int(vectors.shape[1]),
            model_tag=encoder.model_tag,
            vectors=[[float(v) for v in row] for row in vectors],
        )

    return app
