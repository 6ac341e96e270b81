"""Corpus loading, ground-truth validation, and synthetic corpus generation.

A corpus is a directory of page images plus a ground-truth JSON file:

    {"categories": [...],
     "queries":     [{"query_id": str, "category": str, "page_id": str, "bbox": [x,y,w,h]}],
     "occurrences": [{"category": str, "page_id": str, "bbox": [x,y,w,h]}]}

The synthetic generator stamps procedurally-drawn glyphs (one distinctive
color/shape per category) onto textured-noise pages, so the whole pipeline
can be verified at desk scale against known ground truth.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorpusError
from .geometry import BBox, intersection_area

PAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class Page:
    page_id: str
    width: int
    height: int
    image: np.ndarray  # (height, width, 3) uint8 RGB

    def crop(self, bbox: BBox) -> np.ndarray:
        if bbox.x < 0 or bbox.y < 0 or bbox.x2 > self.width or bbox.y2 > self.height:
            raise CorpusError(
                f"bbox {bbox.to_list()} exceeds page '{self.page_id}' "
                f"({self.width}x{self.height})"
            )
        return self.image[bbox.y : bbox.y2, bbox.x : bbox.x2].copy()


@dataclass(frozen=True)
class Query:
    query_id: str
    category: str
    page_id: str  # source page the crop was taken from
    bbox: BBox
    image: np.ndarray | None  # crop pixels; None when loaded without pages


@dataclass(frozen=True)
class Occurrence:
    category: str
    page_id: str
    bbox: BBox


@dataclass
class GroundTruth:
    queries: list[Query]
    occurrences: list[Occurrence]
    categories: set[str] = field(default_factory=set)

    def occurrences_of(self, category: str) -> list[Occurrence]:
        return [o for o in self.occurrences if o.category == category]

    def pages_with(self, category: str) -> set[str]:
        return {o.page_id for o in self.occurrences if o.category == category}


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise CorpusError(f"cannot decode page image '{path}': {exc}") from exc


def load_pages(pages_dir: Path | str) -> list[Page]:
    """Load every PNG/JPEG in the directory; page_id is the filename stem."""
    pages_dir = Path(pages_dir)
    if not pages_dir.is_dir():
        raise CorpusError(f"pages directory not found: '{pages_dir}'")
    files = sorted(
        (p for p in pages_dir.iterdir() if p.suffix.lower() in PAGE_SUFFIXES),
        key=lambda p: p.stem,
    )
    if not files:
        raise CorpusError(f"no page images (png/jpg) in '{pages_dir}'")
    pages: list[Page] = []
    seen: set[str] = set()
    for f in files:
        if f.stem in seen:
            raise CorpusError(f"duplicate page_id '{f.stem}' in '{pages_dir}'")
        if "#" in f.stem:
            raise CorpusError(f"page_id '{f.stem}' contains '#' (reserved for region ids)")
        seen.add(f.stem)
        img = _load_image(f)
        pages.append(Page(f.stem, img.shape[1], img.shape[0], img))
    return pages


def _parse_bbox(raw, owner: str) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise CorpusError(f"{owner}: bbox must be [x, y, w, h], got {raw!r}")
    try:
        return BBox.from_list(raw)
    except (ValueError, TypeError) as exc:
        raise CorpusError(f"{owner}: {exc}") from exc


def load_groundtruth(gt_file: Path | str, pages: Sequence[Page] | None = None) -> GroundTruth:
    """Parse and validate the ground-truth JSON.

    With pages given, page references are validated and query crops are
    extracted; without them (metadata-only consumers like eval) reference
    checks are skipped and Query.image stays None.
    """
    gt_file = Path(gt_file)
    if not gt_file.is_file():
        raise CorpusError(f"ground-truth file not found: '{gt_file}'")
    try:
        doc = json.loads(gt_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"invalid JSON in '{gt_file}': {exc}") from exc

    for key in ("categories", "queries", "occurrences"):
        if key not in doc or not isinstance(doc[key], list):
            raise CorpusError(f"'{gt_file}': missing or non-list key '{key}'")

    categories: set[str] = set()
    for cat in doc["categories"]:
        if not isinstance(cat, str):
            raise CorpusError(f"category {cat!r} is not a string")
        if cat in categories:
            raise CorpusError(f"duplicate category '{cat}'")
        categories.add(cat)

    by_id = {p.page_id: p for p in pages} if pages is not None else None

    occurrences: list[Occurrence] = []
    for i, row in enumerate(doc["occurrences"]):
        owner = f"occurrence[{i}]"
        cat = row.get("category")
        page_id = row.get("page_id")
        if cat not in categories:
            raise CorpusError(f"{owner}: unknown category {cat!r}")
        if by_id is not None and page_id not in by_id:
            raise CorpusError(f"{owner}: dangling page reference '{page_id}'")
        occurrences.append(Occurrence(cat, page_id, _parse_bbox(row.get("bbox"), owner)))

    occ_categories = {o.category for o in occurrences}

    queries: list[Query] = []
    seen_qids: set[str] = set()
    for i, row in enumerate(doc["queries"]):
        owner = f"query[{i}]"
        qid = row.get("query_id")
        cat = row.get("category")
        page_id = row.get("page_id")
        if not isinstance(qid, str) or not qid:
            raise CorpusError(f"{owner}: missing query_id")
        if qid in seen_qids:
            raise CorpusError(f"duplicate query_id '{qid}'")
        seen_qids.add(qid)
        if cat not in categories:
            raise CorpusError(f"query '{qid}': unknown category {cat!r}")
        if by_id is not None and page_id not in by_id:
            raise CorpusError(f"query '{qid}': dangling page reference '{page_id}'")
        if cat not in occ_categories:
            raise CorpusError(f"query '{qid}': category '{cat}' has no occurrence")
        bbox = _parse_bbox(row.get("bbox"), f"query '{qid}'")
        crop = None
        if by_id is not None:
            try:
                crop = by_id[page_id].crop(bbox)
            except CorpusError as exc:
                raise CorpusError(f"query '{qid}': {exc}") from exc
        queries.append(Query(qid, cat, page_id, bbox, crop))

    return GroundTruth(queries, occurrences, categories)


def load_corpus(pages_dir: Path | str, gt_file: Path | str) -> tuple[list[Page], GroundTruth]:
    pages = load_pages(pages_dir)
    return pages, load_groundtruth(gt_file, pages)


def groundtruth_to_dict(gt: GroundTruth) -> dict:
    return {
        "categories": sorted(gt.categories),
        "queries": [
            {
                "query_id": q.query_id,
                "category": q.category,
                "page_id": q.page_id,
                "bbox": q.bbox.to_list(),
            }
            for q in gt.queries
        ],
        "occurrences": [
            {"category": o.category, "page_id": o.page_id, "bbox": o.bbox.to_list()}
            for o in gt.occurrences
        ],
    }


def save_groundtruth(gt: GroundTruth, path: Path | str) -> None:
    Path(path).write_text(
        json.dumps(groundtruth_to_dict(gt), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def save_pages(pages: Iterable[Page], pages_dir: Path | str) -> None:
    pages_dir = Path(pages_dir)
    pages_dir.mkdir(parents=True, exist_ok=True)
    for page in pages:
        Image.fromarray(page.image).save(pages_dir / f"{page.page_id}.png")


# --- query taxonomy ---------------------------------------------------------

DEFAULT_AREA_THRESHOLD = 10_000.0  # px^2
DEFAULT_ASPECT_THRESHOLD = 1.5

SIZE_BIG = "big"
SIZE_SMALL = "small"
SHAPE_SQUARE = "square"
SHAPE_NON_SQUARE = "non-square"


def categorize_bbox(
    bbox: BBox,
    area_threshold: float = DEFAULT_AREA_THRESHOLD,
    aspect_threshold: float = DEFAULT_ASPECT_THRESHOLD,
) -> tuple[str, str]:
    if area_threshold <= 0 or aspect_threshold < 1.0:
        raise ValueError("area_threshold must be > 0 and aspect_threshold >= 1")
    size = SIZE_BIG if bbox.area >= area_threshold else SIZE_SMALL
    aspect = max(bbox.w, bbox.h) / min(bbox.w, bbox.h)
    shape = SHAPE_SQUARE if aspect <= aspect_threshold else SHAPE_NON_SQUARE
    return size, shape


def categorize_query(
    q: Query,
    area_threshold: float = DEFAULT_AREA_THRESHOLD,
    aspect_threshold: float = DEFAULT_ASPECT_THRESHOLD,
) -> tuple[str, str]:
    """Split a query into the {big, small} x {square, non-square} taxonomy."""
    return categorize_bbox(q.bbox, area_threshold, aspect_threshold)


def calibrate_taxonomy(
    gt: GroundTruth,
    target_small_nonsquare: float = 0.83,
    aspect_grid: Sequence[float] | None = None,
) -> dict:
    """Sweep thresholds so the small/non-square cell covers ~the target share.

    Area-threshold candidates are the distinct query areas (each a decision
    boundary); aspect candidates default to 1.0..3.0 in steps of 0.05.
    Returns the best thresholds, the achieved fraction, and cell counts.
    """
    if not gt.queries:
        raise CorpusError("cannot calibrate on an empty query set")
    areas = sorted({float(q.bbox.area) for q in gt.queries})
    area_candidates = areas + [areas[-1] + 1.0]
    if aspect_grid is None:
        aspect_grid = [round(1.0 + 0.05 * i, 2) for i in range(41)]

    n = len(gt.queries)
    best: tuple[float, float, float] | None = None  # (gap, area_thr, aspect_thr)
    for area_thr in area_candidates:
        for aspect_thr in aspect_grid:
            hits = sum(
                1
                for q in gt.queries
                if categorize_bbox(q.bbox, area_thr, aspect_thr)
                == (SIZE_SMALL, SHAPE_NON_SQUARE)
            )
            gap = abs(hits / n - target_small_nonsquare)
            if best is None or gap < best[0] - 1e-12:
                best = (gap, area_thr, aspect_thr)

    assert best is not None
    _, area_thr, aspect_thr = best
    cells: dict[str, int] = {}
    for q in gt.queries:
        size, shape = categorize_bbox(q.bbox, area_thr, aspect_thr)
        cells[f"{size}/{shape}"] = cells.get(f"{size}/{shape}", 0) + 1
    achieved = cells.get(f"{SIZE_SMALL}/{SHAPE_NON_SQUARE}", 0) / n
    return {
        "area_threshold": area_thr,
        "aspect_threshold": aspect_thr,
        "target": target_small_nonsquare,
        "achieved": achieved,
        "cells": cells,
        "n_queries": n,
    }


# --- synthetic corpus -------------------------------------------------------

# 12 colors whose (r//64, g//64, b//64) triples are pairwise distinct, so a
# 4-bin color histogram separates categories cleanly; all are dark enough to
# contrast with the ~215-gray background.
_PALETTE = [
    (180, 30, 30),
    (30, 150, 30),
    (40, 60, 190),
    (190, 150, 20),
    (160, 40, 170),
    (30, 170, 170),
    (230, 110, 30),
    (110, 70, 30),
    (90, 30, 110),
    (30, 90, 50),
    (200, 60, 120),
    (60, 120, 200),
]

_SHAPES = ("disk", "rect", "triangle", "diamond", "cross", "octagon")
_ASPECTS = (1.0, 1.75, 0.5)
_BASE_SIZES = (48, 112)

_BG_LOW, _BG_HIGH = 205, 226  # uint8 noise range; keeps Sobel magnitude < 140
_EDGE_MARGIN = 4
_PLACEMENT_GAP = 8
_MAX_ATTEMPTS = 500


def _category_color(i: int, n: int) -> tuple[int, int, int]:
    if n <= len(_PALETTE):
        return _PALETTE[i]
    r, g, b = colorsys.hsv_to_rgb(i / n, 0.8, 0.45 + 0.15 * (i % 2))
    return int(r * 255), int(g * 255), int(b * 255)


def _shape_mask(shape: str, bh: int, bw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:bh, 0:bw].astype(np.float64)
    cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
    ry, rx = bh / 2.0, bw / 2.0
    u = np.abs(xx - cx) / rx
    v = np.abs(yy - cy) / ry
    if shape == "disk":
        return u**2 + v**2 <= 1.0
    if shape == "rect":
        return np.ones((bh, bw), dtype=bool)
    if shape == "triangle":
        return u <= (yy + 1) / bh
    if shape == "diamond":
        return u + v <= 1.0
    if shape == "cross":
        return (u <= 0.36) | (v <= 0.36)
    if shape == "octagon":
        return (u + v <= 1.4) & (u <= 0.95) & (v <= 0.95)
    raise ValueError(f"unknown glyph shape '{shape}'")


def _glyph_box_dims(cat_index: int, scale: float) -> tuple[int, int]:
    base = _BASE_SIZES[cat_index % len(_BASE_SIZES)]
    aspect = _ASPECTS[cat_index % len(_ASPECTS)]
    side = base * scale
    w = max(12, int(round(side * aspect**0.5)))
    h = max(12, int(round(side / aspect**0.5)))
    return w, h


def generate_synthetic(
    n_pages: int,
    n_categories: int,
    occurrences_per_category: int,
    page_size: tuple[int, int] = (640, 480),
    seed: int = 0,
) -> tuple[list[Page], GroundTruth]:
    """Build a deterministic corpus of glyphs stamped on noise pages.

    Each category has a distinctive solid glyph (color + shape + aspect)
    stamped at random non-overlapping positions with scale in [0.5, 2.0];
    the first stamp of each category doubles as its query crop.
    """
    if n_pages < 1 or n_categories < 1 or occurrences_per_category < 1:
        raise ValueError("all synthetic corpus counts must be >= 1")
    page_w, page_h = int(page_size[0]), int(page_size[1])
    if page_w < 64 or page_h < 64:
        raise ValueError(f"page size {page_w}x{page_h} too small (min 64x64)")

    rng = np.random.default_rng(seed)
    rasters = [
        rng.integers(_BG_LOW, _BG_HIGH, size=(page_h, page_w, 3), dtype=np.uint8)
        for _ in range(n_pages)
    ]
    placed: list[list[BBox]] = [[] for _ in range(n_pages)]
    occurrences: list[Occurrence] = []
    query_source: list[tuple[int, BBox]] = []  # (page index, bbox) per category

    pad = _PLACEMENT_GAP // 2
    for ci in range(n_categories):
        category = f"cat{ci:02d}"
        color = np.array(_category_color(ci, n_categories), dtype=np.uint8)
        shape = _SHAPES[ci % len(_SHAPES)]
        for oi in range(occurrences_per_category):
            box: BBox | None = None
            page_idx = -1
            for _ in range(_MAX_ATTEMPTS):
                page_idx = int(rng.integers(0, n_pages))
                scale = float(rng.uniform(0.5, 2.0))
                bw, bh = _glyph_box_dims(ci, scale)
                if bw + 2 * _EDGE_MARGIN > page_w or bh + 2 * _EDGE_MARGIN > page_h:
                    continue
                x = int(rng.integers(_EDGE_MARGIN, page_w - bw - _EDGE_MARGIN + 1))
                y = int(rng.integers(_EDGE_MARGIN, page_h - bh - _EDGE_MARGIN + 1))
                candidate = BBox(x, y, bw, bh)
                grown = BBox(x - pad, y - pad, bw + 2 * pad, bh + 2 * pad)
                if all(
                    intersection_area(grown, BBox(b.x - pad, b.y - pad, b.w + 2 * pad, b.h + 2 * pad)) == 0
                    for b in placed[page_idx]
                ):
                    box = candidate
                    break
            if box is None:
                raise CorpusError(
                    f"cannot place occurrence {oi} of '{category}' without overlap "
                    f"after {_MAX_ATTEMPTS} attempts; use larger pages or fewer stamps"
                )
            mask = _shape_mask(shape, box.h, box.w)
            region = rasters[page_idx][box.y : box.y2, box.x : box.x2]
            region[mask] = color
            placed[page_idx].append(box)
            occurrences.append(Occurrence(category, f"page{page_idx:04d}", box))
            if oi == 0:
                query_source.append((page_idx, box))

    pages = [
        Page(f"page{i:04d}", page_w, page_h, raster) for i, raster in enumerate(rasters)
    ]
    queries = []
    for ci, (page_idx, box) in enumerate(query_source):
        category = f"cat{ci:02d}"
        queries.append(
            Query(
                query_id=f"q-{category}",
                category=category,
                page_id=pages[page_idx].page_id,
                bbox=box,
                image=pages[page_idx].crop(box),
            )
        )
    gt = GroundTruth(queries, occurrences, {f"cat{i:02d}" for i in range(n_categories)})
    return pages, gt


# --- DocExplore-style layout converter ---------------------------------------

def convert_tree(source_dir: Path | str, out_gt: Path | str) -> GroundTruth:
    """Convert a category-folder annotation tree into the ground-truth schema.

    Expected layout (documented in the README, not dataset-official):

        source/
          pages/                page images (stem = page_id)
          queries/<category>/   crop files; stem = query_id (enumeration only)
          locations.txt         lines: category page_id x y w h [query_id]

    Every line is one occurrence; lines carrying a trailing query_id also
    define that query's source box. Every query file must be bound exactly
    once.
    """
    source_dir = Path(source_dir)
    pages = load_pages(source_dir / "pages")
    page_ids = {p.page_id for p in pages}

    queries_dir = source_dir / "queries"
    if not queries_dir.is_dir():
        raise CorpusError(f"missing queries directory '{queries_dir}'")
    declared: dict[str, str] = {}  # query_id -> category
    for cat_dir in sorted(queries_dir.iterdir()):
        if not cat_dir.is_dir():
            continue
        for f in sorted(cat_dir.iterdir()):
            if f.suffix.lower() in PAGE_SUFFIXES:
                if f.stem in declared:
                    raise CorpusError(f"duplicate query_id '{f.stem}' in queries tree")
                declared[f.stem] = cat_dir.name

    loc_file = source_dir / "locations.txt"
    if not loc_file.is_file():
        raise CorpusError(f"missing locations file '{loc_file}'")

    occurrences = []
    bound: dict[str, tuple[str, BBox]] = {}
    for lineno, line in enumerate(loc_file.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (6, 7):
            raise CorpusError(f"locations.txt:{lineno}: expected 6 or 7 fields")
        category, page_id = parts[0], parts[1]
        try:
            x, y, w, h = (int(v) for v in parts[2:6])
            bbox = BBox(x, y, w, h)
        except ValueError as exc:
            raise CorpusError(f"locations.txt:{lineno}: {exc}") from exc
        if page_id not in page_ids:
            raise CorpusError(f"locations.txt:{lineno}: dangling page reference '{page_id}'")
        occurrences.append({"category": category, "page_id": page_id, "bbox": bbox.to_list()})
        if len(parts) == 7:
            qid = parts[6]
            if qid not in declared:
                raise CorpusError(f"locations.txt:{lineno}: unknown query_id '{qid}'")
            if declared[qid] != category:
                raise CorpusError(
                    f"locations.txt:{lineno}: query '{qid}' is declared under "
                    f"'{declared[qid]}', not '{category}'"
                )
            if qid in bound:
                raise CorpusError(f"locations.txt:{lineno}: query '{qid}' bound twice")
            bound[qid] = (page_id, bbox)

    unbound = sorted(set(declared) - set(bound))
    if unbound:
        raise CorpusError(f"queries without a location row: {', '.join(unbound)}")

    doc = {
        "categories": sorted({o["category"] for o in occurrences} | set(declared.values())),
        "queries": [
            {
                "query_id": qid,
                "category": declared[qid],
                "page_id": bound[qid][0],
                "bbox": bound[qid][1].to_list(),
            }
            for qid in sorted(bound)
        ],
        "occurrences": occurrences,
    }
    Path(out_gt).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return load_groundtruth(Path(out_gt), pages)
