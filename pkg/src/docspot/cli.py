"""Operator surface: corpus synthesis/conversion, index build, search,
evaluation, benchmarking, taxonomy calibration, and the query service.

Flag resolution precedence: explicit flag > DOCSPOT_* environment variable >
--config JSON overlay > built-in default. Every command echoes its fully
resolved configuration as one JSON object on stdout and writes a run.json
next to its artifacts; errors go to stderr as a single JSON line.

Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bench import (
    BENCH_CSV_HEADER,
    BenchProfile,
    count_only_dense,
    count_only_sparse,
    csv_row,
    make_synthetic_index,
    placements_per_page,
    run_dense,
    run_sparse,
)
from .corpus import (
    calibrate_taxonomy,
    convert_tree,
    generate_synthetic,
    load_corpus,
    load_groundtruth,
    load_pages,
    save_groundtruth,
    save_pages,
)
from .densebaseline import compare_costs
from .encoder import EncoderSpec, encode
from .errors import DataError, DocspotError
from .evaluation import EvalConfig, evaluate, oracle_evaluate
from .geometry import BBox
from .index import (
    RankedHit,
    build_index,
    load_index,
    persist,
    region_id,
    search,
    search_batch,
)
from .proposer import ProposerConfig, Region

INDEX_FORMAT = 1
EMBEDDING_FORMAT = "IDOCEMB1"


class _Settings:
    """Flag > env > config-file > default resolution, with an echo trail."""

    def __init__(self, config_path: str | None):
        self.overlay: dict = {}
        if config_path:
            p = Path(config_path)
            if not p.is_file():
                raise DataError(f"config file not found: '{p}'")
            try:
                self.overlay = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise DataError(f"config file '{p}' is not valid JSON: {exc}") from exc
            if not isinstance(self.overlay, dict):
                raise DataError(f"config file '{p}' must hold a JSON object")
        self.resolved: dict = {}

    def get(self, key: str, flag_value, default):
        # click already applied flag > DOCSPOT_* env; None means neither.
        value = flag_value
        if value is None:
            value = self.overlay.get(key, default)
        self.resolved[key] = value
        return value


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, sort_keys=True))


def _write_run_manifest(out_dir: Path, command: str, settings: _Settings, extras: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    # threads is execution-only; artifacts must stay byte-identical across
    # any --threads value
    config = {k: v for k, v in settings.resolved.items() if k != "threads"}
    payload = {"command": command, "config": config, **extras}
    (out_dir / "run.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _corpus_id(pages_dir: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(pages_dir.iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(bytes.fromhex(_hash_file(f)))
    return "sha256:" + h.hexdigest()[:16]


def _parse_page_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise DataError(f"page size must look like 602x920, got '{text}'") from exc


def _parse_cells(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v != "")
    except ValueError as exc:
        raise DataError(f"cell list must be comma-separated ints, got '{text}'") from exc


_config_option = click.option(
    "--config", "config_path", envvar="DOCSPOT_CONFIG", default=None,
    help="JSON file overlaying flag defaults.",
)
_threads_option = click.option(
    "--threads", envvar="DOCSPOT_THREADS", type=int, default=None,
    help="Internal parallelism cap (default: available cores); results are "
    "identical for any value.",
)


def _threads(settings: _Settings, flag) -> int:
    import os

    return int(settings.get("threads", flag, os.cpu_count() or 1))


@click.group()
@click.version_option(
    __version__,
    message=f"docspot {__version__} (index-format {INDEX_FORMAT}, "
    f"embedding-format {EMBEDDING_FORMAT})",
)
def cli() -> None:
    """Pattern spotting and document retrieval engine."""


# --- synth -------------------------------------------------------------------

@cli.command()
@click.option("--pages", type=int, default=None, envvar="DOCSPOT_PAGES")
@click.option("--categories", type=int, default=None, envvar="DOCSPOT_CATEGORIES")
@click.option("--occ", type=int, default=None, envvar="DOCSPOT_OCC",
              help="Occurrences per category.")
@click.option("--page-size", default=None, envvar="DOCSPOT_PAGE_SIZE")
@click.option("--seed", type=int, default=None, envvar="DOCSPOT_SEED")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_config_option
def synth(pages, categories, occ, page_size, seed, out_dir, config_path) -> None:
    """Generate a synthetic planted-pattern corpus (pages/ + gt.json)."""
    settings = _Settings(config_path)
    n_pages = settings.get("pages", pages, 10)
    n_categories = settings.get("categories", categories, 5)
    n_occ = settings.get("occ", occ, 4)
    size = _parse_page_size(settings.get("page_size", page_size, "640x480"))
    seed = settings.get("seed", seed, 0)

    page_list, gt = generate_synthetic(n_pages, n_categories, n_occ, size, seed)
    out = Path(out_dir)
    save_pages(page_list, out / "pages")
    save_groundtruth(gt, out / "gt.json")
    _write_run_manifest(out, "synth", settings, {"outputs": ["pages/", "gt.json"]})
    _emit(
        {
            "command": "synth",
            "config": settings.resolved,
            "pages": len(page_list),
            "queries": len(gt.queries),
            "occurrences": len(gt.occurrences),
            "out": str(out),
        }
    )


# --- convert -----------------------------------------------------------------

@cli.command()
@click.option("--source", "source_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_gt", required=True, type=click.Path())
@_config_option
def convert(source_dir, out_gt, config_path) -> None:
    """Convert a category-folder annotation tree into the gt.json schema."""
    settings = _Settings(config_path)
    settings.get("source", source_dir, None)
    gt = convert_tree(source_dir, out_gt)
    _emit(
        {
            "command": "convert",
            "config": settings.resolved,
            "queries": len(gt.queries),
            "occurrences": len(gt.occurrences),
            "categories": len(gt.categories),
            "out": str(out_gt),
        }
    )


# --- build-index -------------------------------------------------------------

def _encoder_spec_from(settings: _Settings, encoder, color_bins, orientation_bins,
                       spatial_cells, embeddings) -> EncoderSpec:
    kind = settings.get("encoder", encoder, "color-hist")
    return EncoderSpec(
        kind=kind,
        color_bins=settings.get("color_bins", color_bins, 4),
        orientation_bins=settings.get("orientation_bins", orientation_bins, 9),
        spatial_cells=settings.get("spatial_cells", spatial_cells, 2),
        external_path=settings.get("embeddings", embeddings, None),
    )


def _proposer_cfg_from(settings: _Settings, proposer, min_score, nms_iou, grid_cells,
                       grid_stride_frac, gradient_threshold, min_component_area) -> ProposerConfig:
    return ProposerConfig(
        kind=settings.get("proposer", proposer, "saliency"),
        min_score=settings.get("min_score", min_score, 0.01),
        nms_iou=settings.get("nms_iou", nms_iou, 0.5),
        grid_cells=_parse_cells(settings.get("grid_cells", grid_cells, "64,128")),
        grid_stride_fraction=settings.get("grid_stride_frac", grid_stride_frac, 0.5),
        gradient_threshold=settings.get("gradient_threshold", gradient_threshold, 140.0),
        min_component_area=settings.get("min_component_area", min_component_area, 64),
    )


@cli.command("build-index")
@click.option("--pages-dir", required=True, type=click.Path(exists=True))
@click.option("--proposer", default=None, envvar="DOCSPOT_PROPOSER",
              type=click.Choice(["detections", "grid", "saliency"]))
@click.option("--detections", default=None, envvar="DOCSPOT_DETECTIONS",
              type=click.Path(), help="Detections JSONL for --proposer detections.")
@click.option("--min-score", type=float, default=None, envvar="DOCSPOT_MIN_SCORE")
@click.option("--nms-iou", type=float, default=None, envvar="DOCSPOT_NMS_IOU")
@click.option("--grid-cells", default=None, envvar="DOCSPOT_GRID_CELLS")
@click.option("--grid-stride-frac", type=float, default=None)
@click.option("--gradient-threshold", type=float, default=None)
@click.option("--min-component-area", type=int, default=None)
@click.option("--encoder", default=None, envvar="DOCSPOT_ENCODER",
              type=click.Choice(["color-hist", "grad-hist", "external"]))
@click.option("--color-bins", type=int, default=None)
@click.option("--orientation-bins", type=int, default=None)
@click.option("--spatial-cells", type=int, default=None)
@click.option("--embeddings", default=None, type=click.Path(),
              help="Binary embedding file for --encoder external.")
@click.option("--export-manifest", "export_manifest", default=None, type=click.Path(),
              help="Write the exporter manifest (region ids + crops) for the "
              "external-embedding workflow.")
@click.option("--out", "out_dir", default=None, type=click.Path())
@_threads_option
@_config_option
def cmd_build_index(pages_dir, proposer, detections, min_score, nms_iou, grid_cells,
                    grid_stride_frac, gradient_threshold, min_component_area, encoder,
                    color_bins, orientation_bins, spatial_cells, embeddings,
                    export_manifest, out_dir, threads, config_path) -> None:
    """Propose, encode, and persist the search index."""
    settings = _Settings(config_path)
    proposer_kind = settings.get("proposer", proposer, "saliency")
    cfg = _proposer_cfg_from(
        settings,
        "detections-file" if proposer_kind == "detections" else proposer_kind,
        min_score, nms_iou, grid_cells, grid_stride_frac, gradient_threshold,
        min_component_area,
    )
    spec = _encoder_spec_from(settings, encoder, color_bins, orientation_bins,
                              spatial_cells, embeddings)
    n_threads = _threads(settings, threads)
    detections_path = settings.get("detections", detections, None)

    pages = load_pages(pages_dir)

    if export_manifest:
        from .proposer import propose

        regions = propose(pages, cfg, detections_file=detections_path, threads=n_threads)
        page_files = {f.stem: f for f in sorted(Path(pages_dir).iterdir())
                      if f.is_file() and not f.name.startswith(".")}
        items = []
        counter: dict[str, int] = {}
        for r in regions:
            idx = counter.get(r.page_id, 0)
            counter[r.page_id] = idx + 1
            items.append(
                {
                    "id": region_id(r.page_id, idx),
                    "image_path": str(page_files[r.page_id].resolve()),
                    "bbox": r.bbox.to_list(),
                }
            )
        manifest_doc = {
            "model_ref": None,
            "aggregation": None,
            "output_path": None,
            "items": items,
        }
        Path(export_manifest).write_text(
            json.dumps(manifest_doc, indent=2) + "\n", encoding="utf-8"
        )
        if spec.kind != "external" or not spec.external_path:
            _emit(
                {
                    "command": "build-index",
                    "config": settings.resolved,
                    "export_manifest": str(export_manifest),
                    "regions": len(items),
                    "built": False,
                }
            )
            return

    if not out_dir:
        raise click.UsageError("--out is required to build an index")

    idx = build_index(
        pages,
        cfg,
        spec,
        corpus_id=_corpus_id(Path(pages_dir)),
        detections_file=detections_path,
        threads=n_threads,
    )
    persist(idx, out_dir)
    _write_run_manifest(
        Path(out_dir), "build-index", settings,
        {"outputs": ["manifest.json", "regions.jsonl", "vectors.bin", "checksum"]},
    )
    _emit(
        {
            "command": "build-index",
            "config": settings.resolved,
            "regions": len(idx.regions),
            "dim": idx.manifest.dim,
            "encoder_id": idx.manifest.encoder_id,
            "corpus_id": idx.manifest.corpus_id,
            "out": str(out_dir),
        }
    )


# --- search ------------------------------------------------------------------

def _hit_row(query_id: str, h: RankedHit) -> str:
    return json.dumps(
        {
            "query_id": query_id,
            "rank": h.rank,
            "page_id": h.region.page_id,
            "bbox": h.region.bbox.to_list(),
            "similarity": h.similarity,
        }
    )


def _search_via_server(server: str, query_items, top_k, result_nms_iou, out_path) -> dict:
    import httpx

    rows = []
    with httpx.Client(base_url=server, timeout=60.0) as client:
        for query_id, png_bytes in query_items:
            params = {"top_k": top_k}
            if result_nms_iou is not None:
                params["result_nms_iou"] = result_nms_iou
            resp = client.post(
                "/search", params=params,
                files={"file": (f"{query_id}.png", png_bytes, "image/png")},
            )
            if resp.status_code != 200:
                raise DataError(f"server rejected query '{query_id}': {resp.text}")
            for hit in resp.json()["hits"]:
                rows.append(
                    json.dumps(
                        {
                            "query_id": query_id,
                            "rank": hit["rank"],
                            "page_id": hit["page_id"],
                            "bbox": hit["bbox"],
                            "similarity": hit["similarity"],
                        }
                    )
                )
    Path(out_path).write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    return {"queries": len(query_items), "hits": len(rows)}


@cli.command("search")
@click.option("--index", "index_dir", default=None, type=click.Path())
@click.option("--server", default=None, envvar="DOCSPOT_SERVER",
              help="Query a running service instead of loading the index locally.")
@click.option("--query", "query_image", default=None, type=click.Path(exists=True),
              help="Single query image file (query_id = file stem).")
@click.option("--gt", "gt_file", default=None, type=click.Path(exists=True),
              help="Search every ground-truth query (needs --pages-dir).")
@click.option("--pages-dir", default=None, type=click.Path(exists=True))
@click.option("--top-k", type=int, default=None, envvar="DOCSPOT_TOP_K")
@click.option("--result-nms", "result_nms_iou", type=float, default=None,
              envvar="DOCSPOT_RESULT_NMS")
@click.option("--allow-encoder-mismatch", is_flag=True, default=False)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--timing-out", default=None, type=click.Path(),
              help="Optional wall-clock record (not byte-reproducible).")
@_threads_option
@_config_option
def cmd_search(index_dir, server, query_image, gt_file, pages_dir, top_k,
               result_nms_iou, allow_encoder_mismatch, out_path, timing_out,
               threads, config_path) -> None:
    """Rank index regions against one query image or a whole query set."""
    settings = _Settings(config_path)
    k = settings.get("top_k", top_k, 10)
    nms_iou = settings.get("result_nms", result_nms_iou, None)
    n_threads = _threads(settings, threads)

    if (query_image is None) == (gt_file is None):
        raise click.UsageError("provide exactly one of --query or --gt")

    if gt_file is not None:
        if pages_dir is None:
            raise click.UsageError("--gt needs --pages-dir to crop query images")
        _, gt = load_corpus(pages_dir, gt_file)
        queries = [(q.query_id, q.image) for q in gt.queries]
    else:
        from PIL import Image

        with Image.open(query_image) as img:
            patch = np.asarray(img.convert("RGB"), dtype=np.uint8)
        queries = [(Path(query_image).stem, patch)]

    if server:
        import io

        from PIL import Image

        items = []
        for qid, patch in queries:
            buf = io.BytesIO()
            Image.fromarray(patch).save(buf, format="PNG")
            items.append((qid, buf.getvalue()))
        stats = _search_via_server(server, items, k, nms_iou, out_path)
        _emit({"command": "search", "config": settings.resolved, "server": server, **stats})
        return

    if index_dir is None:
        raise click.UsageError("--index is required without --server")
    idx = load_index(index_dir)
    spec = EncoderSpec.from_dict(idx.manifest.encoder)
    if spec.kind == "external":
        raise DataError(
            "index was built from external embeddings; embed queries with the "
            "same exporter and search via the library or service vector API"
        )
    embeddings = [encode(patch, spec) for _, patch in queries]
    results, timing = search_batch(
        idx, embeddings, k, nms_iou, allow_encoder_mismatch, threads=n_threads
    )
    rows = [
        _hit_row(qid, h)
        for (qid, _), hits in zip(queries, results)
        for h in hits
    ]
    Path(out_path).write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    if timing_out:
        Path(timing_out).write_text(
            json.dumps(timing.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    _emit(
        {
            "command": "search",
            "config": settings.resolved,
            "queries": len(queries),
            "hits": len(rows),
            "timing": timing.to_dict(),
            "out": str(out_path),
        }
    )


# --- eval --------------------------------------------------------------------

def _load_results(path: Path) -> dict[str, list[RankedHit]]:
    grouped: dict[str, list[tuple[int, RankedHit]]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            qid = row["query_id"]
            bbox = BBox.from_list(row["bbox"])
            sim = float(row["similarity"])
            rank = int(row["rank"])
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed result row: {exc}") from exc
        region = Region(row["page_id"], bbox, max(0.0, min(1.0, sim)), "hit")
        grouped.setdefault(qid, []).append((rank, RankedHit(region, sim, rank)))
    out: dict[str, list[RankedHit]] = {}
    for qid, pairs in grouped.items():
        pairs.sort(key=lambda p: p[0])
        out[qid] = [h for _, h in pairs]
    return out


@cli.command("eval")
@click.option("--results", "results_path", required=True, type=click.Path(exists=True))
@click.option("--gt", "gt_file", required=True, type=click.Path(exists=True))
@click.option("--task", default=None, envvar="DOCSPOT_TASK",
              type=click.Choice(["spotting", "retrieval"]))
@click.option("--iou", "iou_threshold", type=float, default=None, envvar="DOCSPOT_IOU")
@click.option("--top-k", type=int, default=None)
@click.option("--area-threshold", type=float, default=None)
@click.option("--aspect-threshold", type=float, default=None)
@click.option("--exclude-self", is_flag=True, default=False,
              help="Drop each query's own source occurrence from its ground truth.")
@click.option("--by-category", is_flag=True, default=False,
              help="Echo the 4-cell taxonomy table on stdout.")
@click.option("--oracle-check", is_flag=True, default=False,
              help="Also run the brute-force twin and verify agreement.")
@click.option("--timing", "timing_path", default=None, type=click.Path(exists=True),
              help="Attach a timing record (from search --timing-out) to the report.")
@click.option("--out-json", default=None, type=click.Path())
@click.option("--out-csv", default=None, type=click.Path())
@_config_option
def cmd_eval(results_path, gt_file, task, iou_threshold, top_k, area_threshold,
             aspect_threshold, exclude_self, by_category, oracle_check, timing_path,
             out_json, out_csv, config_path) -> None:
    """Score a results file against ground truth (spotting or retrieval mAP)."""
    settings = _Settings(config_path)
    cfg = EvalConfig(
        task=settings.get("task", task, "spotting"),
        iou_threshold=settings.get("iou", iou_threshold, 0.5),
        top_k=settings.get("top_k", top_k, 1000),
        area_threshold=settings.get("area_threshold", area_threshold, 10_000.0),
        aspect_threshold=settings.get("aspect_threshold", aspect_threshold, 1.5),
        exclude_self=exclude_self,
    )
    gt = load_groundtruth(gt_file)
    results = _load_results(Path(results_path))
    timing = None
    if timing_path:
        timing = json.loads(Path(timing_path).read_text(encoding="utf-8"))

    report = evaluate(results, gt, cfg, timing)
    if oracle_check:
        twin = oracle_evaluate(results, gt, cfg, timing)
        if twin.to_dict() != report.to_dict():
            raise DocspotError("oracle disagreement: fast path != brute force")

    if out_json:
        Path(out_json).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    if out_csv:
        Path(out_csv).write_text(report.to_csv(), encoding="utf-8")

    payload = {
        "command": "eval",
        "config": settings.resolved,
        "task": report.task,
        "overall_map": report.overall_map,
        "queries": len(report.per_query),
    }
    if by_category:
        payload["cells"] = report.cells
    if oracle_check:
        payload["oracle_agrees"] = True
    _emit(payload)


# --- bench -------------------------------------------------------------------

@cli.command("bench")
@click.option("--mode", default=None, envvar="DOCSPOT_MODE",
              type=click.Choice(["sparse", "dense", "both"]))
@click.option("--pages", type=int, default=None)
@click.option("--regions-per-page", type=int, default=None)
@click.option("--queries", type=int, default=None)
@click.option("--dim", type=int, default=None)
@click.option("--page-size", default=None)
@click.option("--stride", type=int, default=None)
@click.option("--query-cells", default=None, help="Query grid as WxH cells (default 1x1).")
@click.option("--dense-queries", type=int, default=None,
              help="Dense-arm query sample size (dense correlation is ~200x slower).")
@click.option("--top-k", type=int, default=None)
@click.option("--seed", type=int, default=None, envvar="DOCSPOT_SEED")
@click.option("--count-only", is_flag=True, default=False,
              help="Closed-form comparison counts only; no timing, reproducible output.")
@click.option("--out", "out_csv", default=None, type=click.Path())
@_config_option
def cmd_bench(mode, pages, regions_per_page, queries, dim, page_size, stride,
              query_cells, dense_queries, top_k, seed, count_only, out_csv,
              config_path) -> None:
    """Cost benchmark: sparse flat scan vs dense feature-map correlation."""
    settings = _Settings(config_path)
    mode = settings.get("mode", mode, "both")
    qc = settings.get("query_cells", query_cells, "1x1")
    qc_w, qc_h = _parse_page_size(qc)
    profile = BenchProfile(
        pages=settings.get("pages", pages, 1447),
        regions_per_page=settings.get("regions_per_page", regions_per_page, 112),
        queries=settings.get("queries", queries, 1447),
        dim=settings.get("dim", dim, 768),
        page_size=_parse_page_size(settings.get("page_size", page_size, "602x920")),
        stride=settings.get("stride", stride, 5),
        query_cells=(qc_w, qc_h),
        dense_queries=settings.get("dense_queries", dense_queries, 5),
        top_k=settings.get("top_k", top_k, 10),
        seed=settings.get("seed", seed, 0),
    )

    sparse_rec = dense_rec = None
    if mode in ("sparse", "both"):
        sparse_rec = count_only_sparse(profile) if count_only else run_sparse(profile)
    if mode in ("dense", "both"):
        dense_rec = count_only_dense(profile) if count_only else run_dense(profile)

    rows = [BENCH_CSV_HEADER]
    if sparse_rec:
        rows.append(csv_row("sparse", profile.pages, sparse_rec.n_queries,
                            sparse_rec.comparisons, sparse_rec.wall_ms,
                            sparse_rec.per_query_mean_ms))
    if dense_rec:
        rows.append(csv_row("dense", profile.pages, dense_rec.n_queries,
                            dense_rec.vector_comparisons, dense_rec.wall_ms,
                            dense_rec.per_query_mean_ms))

    payload: dict = {
        "command": "bench",
        "config": settings.resolved,
        "profile": profile.to_dict(),
        "count_only": count_only,
    }
    if sparse_rec:
        payload["sparse"] = sparse_rec.to_dict()
        payload["sparse"]["comparisons_per_page_per_query"] = profile.regions_per_page
    if dense_rec:
        payload["dense"] = dense_rec.to_dict()
        payload["dense"]["placements_per_page"] = placements_per_page(profile)
    if sparse_rec and dense_rec:
        payload["cost_report"] = compare_costs(sparse_rec, dense_rec).to_dict()

    if out_csv:
        out_path = Path(out_csv)
        out_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        side = out_path.with_suffix(".json")
        side.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        payload["out"] = str(out_path)
    _emit(payload)


# --- calibrate -----------------------------------------------------------------

@cli.command("calibrate")
@click.option("--gt", "gt_file", required=True, type=click.Path(exists=True))
@click.option("--target", type=float, default=None,
              help="Target share of queries in the small/non-square cell.")
@click.option("--out", "out_json", default=None, type=click.Path())
@_config_option
def cmd_calibrate(gt_file, target, out_json, config_path) -> None:
    """Sweep taxonomy thresholds toward a target small/non-square share."""
    settings = _Settings(config_path)
    target = settings.get("target", target, 0.83)
    gt = load_groundtruth(gt_file)
    result = calibrate_taxonomy(gt, target)
    if out_json:
        Path(out_json).write_text(
            json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    _emit({"command": "calibrate", "config": settings.resolved, **result})


# --- serve -------------------------------------------------------------------

@cli.command("serve")
@click.option("--index", "index_dir", required=True, type=click.Path(exists=True))
@click.option("--host", default=None, envvar="DOCSPOT_HOST")
@click.option("--port", type=int, default=None, envvar="DOCSPOT_PORT")
@_config_option
def cmd_serve(index_dir, host, port, config_path) -> None:
    """Serve the query API (FastAPI/uvicorn) over a persisted index."""
    import uvicorn

    from .service import create_app

    settings = _Settings(config_path)
    host = settings.get("host", host, "127.0.0.1")
    port = settings.get("port", port, 8000)
    app = create_app(index_dir)
    uvicorn.run(app, host=host, port=port)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo(json.dumps({"kind": "usage", "error": "aborted"}), err=True)
        return 1
    except click.ClickException as exc:
        click.echo(json.dumps({"kind": "usage", "error": exc.format_message()}), err=True)
        return 1
    except DataError as exc:
        click.echo(json.dumps({"kind": "data", "error": str(exc)}), err=True)
        return 2
    except Exception as exc:  # noqa: BLE001 - single catch-all at the CLI edge
        click.echo(json.dumps({"kind": "internal", "error": f"{type(exc).__name__}: {exc}"}),
                   err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
