"""Dense feature-map correlation baseline.

Exists to ground the sparse-vs-dense cost comparison: every page becomes a
grid of stride-tile embeddings, and a query feature map is correlated at
every valid placement. Accuracy parity with production dense matchers is a
non-goal; the comparison counts and wall-clock ratios are the product.

Each grid cell embeds its stride x stride pixel tile (the encoder resizes
the tile to its canonical input). The method inherits dense matching's
fixed-size assumption: hits are placements re-expanded to the query's pixel
size.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Page
from .encoder import EncoderSpec, encode
from .errors import DataError
from .geometry import BBox
from .index import RankedHit
from .proposer import Region


@dataclass
class FeatureMap:
    page_id: str
    page_w: int
    page_h: int
    grid_w: int
    grid_h: int
    stride: int
    vectors: np.ndarray  # (grid_h, grid_w, dim) float32 unit vectors


@dataclass
class DenseRecord:
    """Cost of one dense query: placements and vector-level comparisons.

    The two counts differ by the query-grid size; both are exposed because
    "one comparison" is ambiguous between whole-map placements and
    vector-vector cosines.
    """

    placements: int
    vector_comparisons: int
    wall_ms: float


@dataclass
class DenseBatchRecord:
    corpus_id: str
    n_pages: int
    n_queries: int
    placements: int
    vector_comparisons: int
    wall_ms: float
    per_query_mean_ms: float

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "n_pages": self.n_pages,
            "n_queries": self.n_queries,
            "placements": self.placements,
            "vector_comparisons": self.vector_comparisons,
            "wall_ms": self.wall_ms,
            "per_query_mean_ms": self.per_query_mean_ms,
        }


def grid_dims(page_w: int, page_h: int, stride: int) -> tuple[int, int]:
    return page_w // stride, page_h // stride


def valid_placements(
    page_grid: tuple[int, int], query_grid: tuple[int, int]
) -> int:
    """Number of positions where the query grid fits inside the page grid."""
    pw, ph = page_grid
    qw, qh = query_grid
    if qw > pw or qh > ph:
        return 0
    return (pw - qw + 1) * (ph - qh + 1)


def build_feature_map(page: Page, stride: int, encoder_spec: EncoderSpec) -> FeatureMap:
    """Embed every stride-tile of the page into a grid of unit vectors."""
    if stride < 1 or stride > min(page.width, page.height):
        raise DataError(
            f"stride {stride} invalid for page '{page.page_id}' "
            f"({page.width}x{page.height})"
        )
    gw, gh = grid_dims(page.width, page.height, stride)
    dim = encoder_spec.dim
    vectors = np.empty((gh, gw, dim), dtype=np.float32)
    for i in range(gh):
        for j in range(gw):
            tile = page.image[i * stride : (i + 1) * stride, j * stride : (j + 1) * stride]
            vectors[i, j] = encode(tile, encoder_spec).vector
    return FeatureMap(page.page_id, page.width, page.height, gw, gh, stride, vectors)


def build_query_feature_map(
    image: np.ndarray, stride: int, encoder_spec: EncoderSpec
) -> np.ndarray:
    """Reduce a query raster to its stride-tile grid of unit vectors."""
    h, w = image.shape[:2]
    gw, gh = grid_dims(w, h, stride)
    if gw < 1 or gh < 1:
        raise DataError(f"query {w}x{h} smaller than stride {stride}")
    dim = encoder_spec.dim
    out = np.empty((gh, gw, dim), dtype=np.float32)
    for i in range(gh):
        for j in range(gw):
            tile = image[i * stride : (i + 1) * stride, j * stride : (j + 1) * stride]
            out[i, j] = encode(tile, encoder_spec).vector
    return out


def _page_scores(fm: FeatureMap, query_fm: np.ndarray) -> np.ndarray | None:
    """Mean cosine of the aligned sub-grid at every valid placement."""
    qh, qw, dim = query_fm.shape
    if qh > fm.grid_h or qw > fm.grid_w:
        return None
    if qh == 1 and qw == 1:
        flat = fm.vectors.reshape(-1, dim) @ query_fm[0, 0]
        return flat.reshape(fm.grid_h, fm.grid_w)
    windows = np.lib.stride_tricks.sliding_window_view(fm.vectors, (qh, qw), axis=(0, 1))
    # windows: (grid_h-qh+1, grid_w-qw+1, dim, qh, qw)
    scores = np.einsum("uvdij,ijd->uv", windows, query_fm, optimize=True)
    return (scores / (qh * qw)).astype(np.float32)


def dense_search(
    query_fm: np.ndarray,
    query_px_size: tuple[int, int],
    feature_maps: Sequence[FeatureMap],
    top_k: int,
) -> tuple[list[RankedHit], DenseRecord]:
    """Correlate the query grid over every page grid and rank placements.

    Pages whose grid is smaller than the query grid contribute zero
    placements (skipped, not an error). Ranking is by descending score with
    (page order, row-major placement) tie-break; hit boxes take the query's
    pixel size, clipped to the page.
    """
    if top_k < 1:
        raise DataError(f"top_k must be >= 1, got {top_k}")
    qh, qw, _ = query_fm.shape
    qpx_w, qpx_h = query_px_size

    placements = 0
    comparisons = 0
    candidates: list[tuple[float, int, int]] = []  # (-score proxy via sort key)
    start = time.perf_counter()
    for page_order, fm in enumerate(feature_maps):
        scores = _page_scores(fm, query_fm)
        if scores is None:
            continue
        n = scores.size
        placements += n
        comparisons += n * qh * qw
        flat = scores.ravel()
        order = np.argsort(-flat, kind="stable")[:top_k]
        candidates.extend(
            (float(flat[i]), page_order, int(i)) for i in order
        )
    wall_ms = (time.perf_counter() - start) * 1000.0

    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    hits: list[RankedHit] = []
    for score, page_order, flat_idx in candidates[:top_k]:
        fm = feature_maps[page_order]
        pw = fm.grid_w - qw + 1
        u, v = divmod(flat_idx, pw)
        x, y = v * fm.stride, u * fm.stride
        bbox = BBox(x, y, qpx_w, qpx_h).clip(fm.page_w, fm.page_h)
        sim = max(-1.0, min(1.0, score))
        region = Region(fm.page_id, bbox, max(0.0, sim), "dense")
        hits.append(RankedHit(region, sim, len(hits) + 1))
    return hits, DenseRecord(placements, comparisons, wall_ms)


# --- cost comparison ----------------------------------------------------------

@dataclass
class CostReport:
    corpus_id: str
    sparse_queries: int
    dense_queries: int
    sparse_comparisons: int
    dense_placements: int
    dense_comparisons: int
    sparse_per_query_comparisons: float
    dense_per_query_comparisons: float
    comparison_ratio: float
    sparse_per_query_ms: float
    dense_per_query_ms: float
    wall_ratio: float | None

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "sparse_queries": self.sparse_queries,
            "dense_queries": self.dense_queries,
            "sparse_comparisons": self.sparse_comparisons,
            "dense_placements": self.dense_placements,
            "dense_comparisons": self.dense_comparisons,
            "sparse_per_query_comparisons": self.sparse_per_query_comparisons,
            "dense_per_query_comparisons": self.dense_per_query_comparisons,
            "comparison_ratio": self.comparison_ratio,
            "sparse_per_query_ms": self.sparse_per_query_ms,
            "dense_per_query_ms": self.dense_per_query_ms,
            "wall_ratio": self.wall_ratio,
        }


def compare_costs(sparse_record, dense_record: DenseBatchRecord) -> CostReport:
    """Put the sparse batch timing and the dense batch record side by side.

    Counts are normalized per query before the ratio so the two arms may
    run different query subsets of the same corpus.
    """
    if sparse_record.corpus_id != dense_record.corpus_id:
        raise DataError(
            f"cost records come from different corpora: "
            f"'{sparse_record.corpus_id}' vs '{dense_record.corpus_id}'"
        )
    if sparse_record.n_queries < 1 or dense_record.n_queries < 1:
        raise DataError("cost comparison needs at least one query on each side")

    sparse_pq = sparse_record.comparisons / sparse_record.n_queries
    dense_pq = dense_record.vector_comparisons / dense_record.n_queries
    wall_ratio = None
    if sparse_record.per_query_mean_ms > 0 and dense_record.per_query_mean_ms > 0:
        wall_ratio = dense_record.per_query_mean_ms / sparse_record.per_query_mean_ms
    return CostReport(
        corpus_id=sparse_record.corpus_id,
        sparse_queries=sparse_record.n_queries,
        dense_queries=dense_record.n_queries,
        sparse_comparisons=sparse_record.comparisons,
        dense_placements=dense_record.placements,
        dense_comparisons=dense_record.vector_comparisons,
        sparse_per_query_comparisons=sparse_pq,
        dense_per_query_comparisons=dense_pq,
        comparison_ratio=dense_pq / sparse_pq if sparse_pq > 0 else float("inf"),
        sparse_per_query_ms=sparse_record.per_query_mean_ms,
        dense_per_query_ms=dense_record.per_query_mean_ms,
        wall_ratio=wall_ratio,
    )
