"""Build, persist, and query the offline search index.

A SearchIndex is an immutable set of proposed regions plus an aligned
matrix of unit embedding vectors. Search is an exact flat scan: cosine of
the query against every stored vector, ranked descending, with optional
per-page NMS on the ranked results before truncation.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .corpus import Page
from .encoder import (
    Embedding,
    EncoderSpec,
    encode,
    load_embeddings,
    read_embedding_header,
    write_embeddings,
)
from .errors import DataError, EncoderMismatchError, IndexFormatError
from .geometry import BBox, iou
from .proposer import ProposerConfig, Region, propose

INDEX_FORMAT_VERSION = 1

MANIFEST_FILE = "manifest.json"
REGIONS_FILE = "regions.jsonl"
VECTORS_FILE = "vectors.bin"
CHECKSUM_FILE = "checksum"


def region_id(page_id: str, region_index: int) -> str:
    return f"{page_id}#{region_index}"


def default_built_at() -> str:
    """Reproducible build stamp: SOURCE_DATE_EPOCH when set, else the epoch.

    Wall clock must not leak into artifacts (persisted indexes are required
    to be byte-identical across reruns).
    """
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class IndexManifest:
    encoder: dict
    encoder_id: str
    proposer: dict
    corpus_id: str
    built_at: str
    dim: int
    region_count: int
    format_version: int = INDEX_FORMAT_VERSION
    engine_version: str = __version__

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "engine_version": self.engine_version,
            "encoder": self.encoder,
            "encoder_id": self.encoder_id,
            "proposer": self.proposer,
            "corpus_id": self.corpus_id,
            "built_at": self.built_at,
            "dim": self.dim,
            "region_count": self.region_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexManifest":
        if d.get("format_version") != INDEX_FORMAT_VERSION:
            raise IndexFormatError(
                f"unsupported index format_version {d.get('format_version')!r}, "
                f"expected {INDEX_FORMAT_VERSION}"
            )
        return cls(
            encoder=d["encoder"],
            encoder_id=d["encoder_id"],
            proposer=d["proposer"],
            corpus_id=d["corpus_id"],
            built_at=d["built_at"],
            dim=int(d["dim"]),
            region_count=int(d["region_count"]),
            engine_version=d.get("engine_version", "unknown"),
        )


@dataclass
class SearchIndex:
    manifest: IndexManifest
    regions: list[Region]
    vectors: np.ndarray  # (N, dim) float32, unit rows, aligned with regions


@dataclass(frozen=True)
class RankedHit:
    region: Region
    similarity: float
    rank: int


@dataclass
class BatchTiming:
    corpus_id: str
    n_queries: int
    n_regions: int
    comparisons: int
    wall_ms: float
    per_query_mean_ms: float

    def to_dict(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "n_queries": self.n_queries,
            "n_regions": self.n_regions,
            "comparisons": self.comparisons,
            "wall_ms": self.wall_ms,
            "per_query_mean_ms": self.per_query_mean_ms,
        }


def index_equal(a: SearchIndex, b: SearchIndex) -> bool:
    return (
        a.manifest.to_dict() == b.manifest.to_dict()
        and a.regions == b.regions
        and a.vectors.shape == b.vectors.shape
        and bool(np.array_equal(a.vectors, b.vectors))
    )


# --- build -------------------------------------------------------------------

def build_index(
    pages: Sequence[Page],
    proposer_cfg: ProposerConfig,
    encoder_spec: EncoderSpec,
    external_embeddings: Mapping[str, Embedding] | None = None,
    corpus_id: str = "",
    detections_file: Path | str | None = None,
    threads: int = 1,
    built_at: str | None = None,
) -> SearchIndex:
    """Propose regions per page, encode them, and assemble the index.

    Region order is deterministic: page_id ascending, then each page's NMS
    output order; ids follow "<page_id>#<region_index>".
    """
    if not pages:
        raise DataError("cannot build an index over an empty corpus")

    if encoder_spec.kind == "external":
        if external_embeddings is None:
            if not encoder_spec.external_path:
                raise DataError("external encoder requires an embeddings file")
            with open(encoder_spec.external_path, "rb") as fh:  # resolve dim / id
                eid, dim, _ = read_embedding_header(fh)
            encoder_spec.external_id = eid
            encoder_spec.external_dim = dim
            external_embeddings = load_embeddings(encoder_spec.external_path)
        elif encoder_spec.external_id is None or encoder_spec.external_dim is None:
            if not external_embeddings:
                raise DataError("external embeddings map is empty")
            any_emb = next(iter(external_embeddings.values()))
            encoder_spec.external_id = any_emb.encoder_id
            encoder_spec.external_dim = any_emb.dim

    regions = propose(pages, proposer_cfg, detections_file=detections_file, threads=threads)

    by_page: dict[str, Page] = {p.page_id: p for p in pages}
    grouped: list[tuple[str, list[Region]]] = []
    for region in regions:
        if not grouped or grouped[-1][0] != region.page_id:
            grouped.append((region.page_id, []))
        grouped[-1][1].append(region)

    def encode_page(item: tuple[str, list[Region]]) -> list[np.ndarray]:
        page_id, page_regions = item
        page = by_page[page_id]
        vecs = []
        for idx, region in enumerate(page_regions):
            if encoder_spec.kind == "external":
                rid = region_id(page_id, idx)
                emb = external_embeddings.get(rid)
                if emb is None:
                    raise DataError(f"missing external embedding for region id '{rid}'")
                if emb.dim != encoder_spec.dim:
                    raise DataError(
                        f"embedding '{rid}' dim {emb.dim} != file dim {encoder_spec.dim}"
                    )
                vecs.append(emb.vector)
            else:
                vecs.append(encode(page.crop(region.bbox), encoder_spec).vector)
        return vecs

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_page_vecs = list(pool.map(encode_page, grouped))
    else:
        per_page_vecs = [encode_page(g) for g in grouped]

    flat = [v for vecs in per_page_vecs for v in vecs]
    dim = encoder_spec.dim
    vectors = (
        np.stack(flat).astype(np.float32) if flat else np.zeros((0, dim), dtype=np.float32)
    )

    manifest = IndexManifest(
        encoder=encoder_spec.to_dict(),
        encoder_id=encoder_spec.encoder_id,
        proposer=proposer_cfg.to_dict(),
        corpus_id=corpus_id,
        built_at=built_at if built_at is not None else default_built_at(),
        dim=dim,
        region_count=len(regions),
    )
    return SearchIndex(manifest, list(regions), vectors)


# --- search ------------------------------------------------------------------

def search(
    index: SearchIndex,
    query_embedding: Embedding,
    top_k: int,
    result_nms_iou: float | None = None,
    allow_encoder_mismatch: bool = False,
) -> list[RankedHit]:
    """Exact flat scan, descending similarity, index-order tie-break.

    With result_nms_iou set, ranked hits sharing a page are greedily
    deduplicated (similarity is the suppression score) before truncation
    to top_k.
    """
    if top_k < 1:
        raise DataError(f"top_k must be >= 1, got {top_k}")
    if query_embedding.dim != index.manifest.dim:
        raise DataError(
            f"query dim {query_embedding.dim} != index dim {index.manifest.dim}"
        )
    if query_embedding.encoder_id != index.manifest.encoder_id:
        msg = (
            f"query encoder '{query_embedding.encoder_id}' != index encoder "
            f"'{index.manifest.encoder_id}'"
        )
        if not allow_encoder_mismatch:
            raise EncoderMismatchError(msg)
        warnings.warn(msg, stacklevel=2)

    n = index.vectors.shape[0]
    if n == 0:
        return []
    sims = index.vectors @ query_embedding.vector
    order = np.argsort(-sims, kind="stable")

    hits: list[RankedHit] = []
    kept_boxes: dict[str, list[BBox]] = {}
    for idx in order:
        region = index.regions[int(idx)]
        if result_nms_iou is not None:
            page_kept = kept_boxes.setdefault(region.page_id, [])
            if any(iou(region.bbox, kb) > result_nms_iou for kb in page_kept):
                continue
            page_kept.append(region.bbox)
        sim = max(-1.0, min(1.0, float(sims[idx])))
        hits.append(RankedHit(region, sim, len(hits) + 1))
        if len(hits) >= top_k:
            break
    return hits


def search_batch(
    index: SearchIndex,
    queries: Sequence[Embedding],
    top_k: int,
    result_nms_iou: float | None = None,
    allow_encoder_mismatch: bool = False,
    threads: int = 1,
) -> tuple[list[list[RankedHit]], BatchTiming]:
    """Per-query search over the whole batch plus an exact cost record.

    Results match single-query search exactly and keep input order; the
    comparison count is N_queries x N_regions by construction.
    """

    def one(q: Embedding) -> list[RankedHit]:
        return search(index, q, top_k, result_nms_iou, allow_encoder_mismatch)

    start = time.perf_counter()
    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    wall_ms = (time.perf_counter() - start) * 1000.0

    n_regions = index.vectors.shape[0]
    timing = BatchTiming(
        corpus_id=index.manifest.corpus_id,
        n_queries=len(queries),
        n_regions=n_regions,
        comparisons=len(queries) * n_regions,
        wall_ms=wall_ms,
        per_query_mean_ms=wall_ms / len(queries) if queries else 0.0,
    )
    return results, timing


# --- persistence -------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def persist(index: SearchIndex, out_dir: Path | str) -> Path:
    """Write manifest.json, regions.jsonl, vectors.bin, and a checksum file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    (out_dir / MANIFEST_FILE).write_text(
        json.dumps(index.manifest.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )

    lines = []
    per_page_counter: dict[str, int] = {}
    ids: list[str] = []
    for region in index.regions:
        idx = per_page_counter.get(region.page_id, 0)
        per_page_counter[region.page_id] = idx + 1
        ids.append(region_id(region.page_id, idx))
        lines.append(
            json.dumps(
                {
                    "page_id": region.page_id,
                    "x": region.bbox.x,
                    "y": region.bbox.y,
                    "w": region.bbox.w,
                    "h": region.bbox.h,
                    "score": region.score,
                    "label": region.label,
                    "region_index": idx,
                }
            )
        )
    (out_dir / REGIONS_FILE).write_text(
        "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
    )

    write_embeddings(
        out_dir / VECTORS_FILE,
        index.manifest.encoder_id,
        index.manifest.dim,
        zip(ids, index.vectors),
    )

    checks = "".join(
        f"{_sha256(out_dir / name)}  {name}\n"
        for name in (MANIFEST_FILE, REGIONS_FILE, VECTORS_FILE)
    )
    (out_dir / CHECKSUM_FILE).write_text(checks, encoding="utf-8")
    return out_dir


def load_index(in_dir: Path | str) -> SearchIndex:
    """Load a persisted index, verifying checksums and cross-file consistency."""
    in_dir = Path(in_dir)
    for name in (MANIFEST_FILE, REGIONS_FILE, VECTORS_FILE, CHECKSUM_FILE):
        if not (in_dir / name).is_file():
            raise IndexFormatError(f"index dir '{in_dir}' is missing '{name}'")

    for line in (in_dir / CHECKSUM_FILE).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            expected, name = line.split(None, 1)
            name = name.strip()
        except ValueError as exc:
            raise IndexFormatError(f"malformed checksum line: {line!r}") from exc
        actual = _sha256(in_dir / name)
        if actual != expected:
            raise IndexFormatError(
                f"checksum mismatch for '{name}': file is corrupt "
                f"(expected {expected[:12]}..., got {actual[:12]}...)"
            )

    try:
        manifest = IndexManifest.from_dict(
            json.loads((in_dir / MANIFEST_FILE).read_text(encoding="utf-8"))
        )
    except (json.JSONDecodeError, KeyError) as exc:
        raise IndexFormatError(f"invalid manifest: {exc}") from exc

    regions: list[Region] = []
    ids: list[str] = []
    for lineno, line in enumerate(
        (in_dir / REGIONS_FILE).read_text(encoding="utf-8").splitlines(), 1
    ):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            regions.append(
                Region(
                    row["page_id"],
                    BBox(row["x"], row["y"], row["w"], row["h"]),
                    float(row["score"]),
                    str(row["label"]),
                )
            )
            ids.append(region_id(row["page_id"], int(row["region_index"])))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise IndexFormatError(f"{REGIONS_FILE}:{lineno}: {exc}") from exc

    if len(regions) != manifest.region_count:
        raise IndexFormatError(
            f"manifest says {manifest.region_count} regions, "
            f"{REGIONS_FILE} has {len(regions)}"
        )

    embeddings = load_embeddings(
        in_dir / VECTORS_FILE,
        expect_dim=manifest.dim,
        expect_encoder_id=manifest.encoder_id,
    )
    if list(embeddings.keys()) != ids:
        raise IndexFormatError(
            f"{VECTORS_FILE} ids do not match {REGIONS_FILE} region ids"
        )
    vectors = (
        np.stack([embeddings[i].vector for i in ids])
        if ids
        else np.zeros((0, manifest.dim), dtype=np.float32)
    )
    return SearchIndex(manifest, regions, vectors)
