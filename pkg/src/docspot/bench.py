"""Synthetic cost benchmark: sparse flat-scan vs dense correlation.

Vectors are random unit float32 (matching cost does not depend on their
content), so the harness can reproduce corpus-scale matching arithmetic and
wall-clock without any image work. Dense page grids reuse a small pool of
distinct maps to keep memory bounded; map construction is an offline phase
in both paradigms and is excluded from search timing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .densebaseline import (
    DenseBatchRecord,
    FeatureMap,
    dense_search,
    grid_dims,
    valid_placements,
)
from .encoder import Embedding
from .errors import DataError
from .geometry import BBox
from .index import BatchTiming, IndexManifest, SearchIndex, search
from .proposer import Region

BENCH_CSV_HEADER = "mode,pages,queries,comparisons,wall_ms,per_query_ms"


@dataclass
class BenchProfile:
    pages: int = 1447
    regions_per_page: int = 112
    queries: int = 1447
    dim: int = 768
    page_size: tuple[int, int] = (602, 920)
    stride: int = 5
    query_cells: tuple[int, int] = (1, 1)  # (w, h) in grid cells
    dense_queries: int = 5
    top_k: int = 10
    seed: int = 0

    @property
    def corpus_id(self) -> str:
        w, h = self.page_size
        return f"bench:pages={self.pages}:page={w}x{h}:seed={self.seed}"

    def to_dict(self) -> dict:
        return {
            "pages": self.pages,
            "regions_per_page": self.regions_per_page,
            "queries": self.queries,
            "dim": self.dim,
            "page_size": list(self.page_size),
            "stride": self.stride,
            "query_cells": list(self.query_cells),
            "dense_queries": self.dense_queries,
            "top_k": self.top_k,
            "seed": self.seed,
        }


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    # float32 generation keeps the 162k x 768 profile under ~500 MB;
    # norms accumulate in float64 for accuracy
    m = rng.standard_normal((n, dim), dtype=np.float32)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m, dtype=np.float64))
    m /= norms[:, None].astype(np.float32)
    return m


def make_synthetic_index(profile: BenchProfile) -> SearchIndex:
    """Flat index of random unit vectors with plausible region geometry."""
    rng = np.random.default_rng(profile.seed)
    n = profile.pages * profile.regions_per_page
    vectors = _unit_rows(rng, n, profile.dim)
    page_w, page_h = profile.page_size
    regions = []
    for p in range(profile.pages):
        page_id = f"bpage{p:05d}"
        for r in range(profile.regions_per_page):
            x = (r * 37) % max(1, page_w - 64)
            y = (r * 53) % max(1, page_h - 64)
            regions.append(Region(page_id, BBox(x, y, 64, 64), 1.0, "bench"))
    manifest = IndexManifest(
        encoder={"kind": "external", "external_id": f"bench:random:d{profile.dim}"},
        encoder_id=f"bench:random:d{profile.dim}",
        proposer={"kind": "synthetic-bench", "regions_per_page": profile.regions_per_page},
        corpus_id=profile.corpus_id,
        built_at="1970-01-01T00:00:00Z",
        dim=profile.dim,
        region_count=n,
    )
    return SearchIndex(manifest, regions, vectors)


def make_random_queries(profile: BenchProfile) -> list[Embedding]:
    rng = np.random.default_rng(profile.seed + 1)
    rows = _unit_rows(rng, profile.queries, profile.dim)
    eid = f"bench:random:d{profile.dim}"
    return [Embedding(rows[i], eid) for i in range(profile.queries)]


def make_feature_map_pool(profile: BenchProfile, distinct: int = 4) -> list[FeatureMap]:
    """Page feature maps for the dense arm, cycling `distinct` real arrays."""
    rng = np.random.default_rng(profile.seed + 2)
    page_w, page_h = profile.page_size
    gw, gh = grid_dims(page_w, page_h, profile.stride)
    if gw < 1 or gh < 1:
        raise DataError(f"stride {profile.stride} larger than page {page_w}x{page_h}")
    pool = [
        _unit_rows(rng, gh * gw, profile.dim).reshape(gh, gw, profile.dim)
        for _ in range(min(distinct, profile.pages))
    ]
    return [
        FeatureMap(
            f"bpage{p:05d}", page_w, page_h, gw, gh, profile.stride, pool[p % len(pool)]
        )
        for p in range(profile.pages)
    ]


def run_sparse(profile: BenchProfile, index: SearchIndex | None = None) -> BatchTiming:
    """Time the full flat scan for every query; per-query gemv, no batching."""
    if index is None:
        index = make_synthetic_index(profile)
    queries = make_random_queries(profile)
    start = time.perf_counter()
    for q in queries:
        search(index, q, profile.top_k)
    wall_ms = (time.perf_counter() - start) * 1000.0
    n = index.vectors.shape[0]
    return BatchTiming(
        corpus_id=profile.corpus_id,
        n_queries=len(queries),
        n_regions=n,
        comparisons=len(queries) * n,
        wall_ms=wall_ms,
        per_query_mean_ms=wall_ms / len(queries) if queries else 0.0,
    )


def run_dense(profile: BenchProfile) -> DenseBatchRecord:
    """Correlate a query sample over every page map and aggregate costs."""
    maps = make_feature_map_pool(profile)
    qw, qh = profile.query_cells
    rng = np.random.default_rng(profile.seed + 3)
    n_queries = min(profile.dense_queries, profile.queries)
    if n_queries < 1:
        raise DataError("dense benchmark needs at least one query")
    placements = 0
    comparisons = 0
    wall_ms = 0.0
    for _ in range(n_queries):
        qfm = _unit_rows(rng, qh * qw, profile.dim).reshape(qh, qw, profile.dim)
        px = (qw * profile.stride, qh * profile.stride)
        _, rec = dense_search(qfm, px, maps, profile.top_k)
        placements += rec.placements
        comparisons += rec.vector_comparisons
        wall_ms += rec.wall_ms
    return DenseBatchRecord(
        corpus_id=profile.corpus_id,
        n_pages=profile.pages,
        n_queries=n_queries,
        placements=placements,
        vector_comparisons=comparisons,
        wall_ms=wall_ms,
        per_query_mean_ms=wall_ms / n_queries,
    )


def count_only_sparse(profile: BenchProfile) -> BatchTiming:
    n = profile.pages * profile.regions_per_page
    return BatchTiming(
        corpus_id=profile.corpus_id,
        n_queries=profile.queries,
        n_regions=n,
        comparisons=profile.queries * n,
        wall_ms=0.0,
        per_query_mean_ms=0.0,
    )


def count_only_dense(profile: BenchProfile) -> DenseBatchRecord:
    page_w, page_h = profile.page_size
    grid = grid_dims(page_w, page_h, profile.stride)
    qw, qh = profile.query_cells
    per_page = valid_placements(grid, (qw, qh))
    placements = per_page * profile.pages * profile.queries
    return DenseBatchRecord(
        corpus_id=profile.corpus_id,
        n_pages=profile.pages,
        n_queries=profile.queries,
        placements=placements,
        vector_comparisons=placements * qw * qh,
        wall_ms=0.0,
        per_query_mean_ms=0.0,
    )


def placements_per_page(profile: BenchProfile) -> int:
    page_w, page_h = profile.page_size
    return valid_placements(grid_dims(page_w, page_h, profile.stride), profile.query_cells)


def csv_row(mode: str, pages: int, queries: int, comparisons: int, wall_ms: float,
            per_query_ms: float) -> str:
    return f"{mode},{pages},{queries},{comparisons},{wall_ms!r},{per_query_ms!r}"
