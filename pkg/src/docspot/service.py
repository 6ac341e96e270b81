"""FastAPI service wrapping a loaded search index.

The service owns the online half of the engine: it loads a persisted index
once and answers ranked queries from any number of clients. Offline work
(corpus synthesis, index builds, evaluation, benchmarks) stays in the CLI.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from . import __version__
from .encoder import Embedding, EncoderSpec, encode, unit_or_e1
from .errors import DataError, DocspotError
from .index import SearchIndex, load_index, search


class HitModel(BaseModel):
    rank: int
    page_id: str
    bbox: list[int] = Field(description="[x, y, w, h] in page pixels")
    similarity: float
    score: float
    label: str


class SearchResponse(BaseModel):
    hits: list[HitModel]
    n_regions: int
    comparisons: int
    encoder_id: str


class VectorQuery(BaseModel):
    vector: list[float]
    top_k: int = 10
    result_nms_iou: float | None = None


class ManifestResponse(BaseModel):
    format_version: int
    engine_version: str
    encoder_id: str
    corpus_id: str
    built_at: str
    dim: int
    region_count: int


class HealthResponse(BaseModel):
    status: str
    version: str


def _to_response(index: SearchIndex, hits) -> SearchResponse:
    return SearchResponse(
        hits=[
            HitModel(
                rank=h.rank,
                page_id=h.region.page_id,
                bbox=h.region.bbox.to_list(),
                similarity=h.similarity,
                score=h.region.score,
                label=h.region.label,
            )
            for h in hits
        ],
        n_regions=index.vectors.shape[0],
        comparisons=index.vectors.shape[0],
        encoder_id=index.manifest.encoder_id,
    )


def create_app(index_dir: Path | str | None = None, index: SearchIndex | None = None) -> FastAPI:
    """Build the service around one loaded index (dir path or object)."""
    if index is None:
        if index_dir is None:
            raise DataError("service needs an index directory or a loaded index")
        index = load_index(index_dir)

    spec = EncoderSpec.from_dict(index.manifest.encoder)
    app = FastAPI(title="docspot", version=__version__)
    app.state.index = index

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.get("/manifest", response_model=ManifestResponse)
    def manifest() -> ManifestResponse:
        m = index.manifest
        return ManifestResponse(
            format_version=m.format_version,
            engine_version=m.engine_version,
            encoder_id=m.encoder_id,
            corpus_id=m.corpus_id,
            built_at=m.built_at,
            dim=m.dim,
            region_count=m.region_count,
        )

    @app.post("/search", response_model=SearchResponse)
    async def search_image(
        file: UploadFile = File(...),
        top_k: int = Query(default=10, ge=1),
        result_nms_iou: float | None = Query(default=None, ge=0.0, le=1.0),
    ) -> SearchResponse:
        if spec.kind == "external":
            raise HTTPException(
                status_code=409,
                detail="index uses an external encoder; POST /search/vector instead",
            )
        raw = await file.read()
        try:
            with Image.open(io.BytesIO(raw)) as img:
                patch = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            raise HTTPException(status_code=400, detail=f"undecodable image: {exc}")
        try:
            emb = encode(patch, spec)
            hits = search(index, emb, top_k, result_nms_iou)
        except DocspotError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return _to_response(index, hits)

    @app.post("/search/vector", response_model=SearchResponse)
    def search_vector(q: VectorQuery) -> SearchResponse:
        vec = np.asarray(q.vector, dtype=np.float32)
        if vec.ndim != 1 or vec.shape[0] != index.manifest.dim:
            raise HTTPException(
                status_code=422,
                detail=f"vector must have dim {index.manifest.dim}, got {vec.shape}",
            )
        if not np.all(np.isfinite(vec)):
            raise HTTPException(status_code=422, detail="vector has non-finite values")
        emb = Embedding(unit_or_e1(vec), index.manifest.encoder_id)
        try:
            hits = search(index, emb, q.top_k, q.result_nms_iou)
        except DocspotError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return _to_response(index, hits)

    return app
