"""Candidate-region production: detection-file ingestion plus classical proposers.

All proposers share the same postprocess: clip to the page, drop regions
under the confidence floor, then per-page NMS. Output order is deterministic:
page_id ascending, then descending score with a geometric tie-break.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np

from .corpus import Page
from .errors import DataError, DetectionFileError
from .geometry import BBox, ScoredBox, nms

PROPOSER_KINDS = ("detections-file", "grid", "saliency")


@dataclass(frozen=True)
class Region:
    page_id: str
    bbox: BBox
    score: float
    label: str


@dataclass
class ProposerConfig:
    kind: str = "saliency"
    min_score: float = 0.01
    nms_iou: float = 0.5
    # grid proposer
    grid_cells: tuple[int, ...] = (64, 128)
    grid_stride_fraction: float = 0.5
    # saliency proposer
    gradient_threshold: float = 140.0
    min_component_area: int = 64

    def __post_init__(self) -> None:
        if self.kind not in PROPOSER_KINDS:
            raise DataError(f"unknown proposer kind '{self.kind}'")
        if not 0.0 <= self.min_score <= 1.0:
            raise DataError(f"min_score must be in [0, 1], got {self.min_score}")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise DataError(f"nms_iou must be in [0, 1], got {self.nms_iou}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "min_score": self.min_score,
            "nms_iou": self.nms_iou,
            "grid_cells": list(self.grid_cells),
            "grid_stride_fraction": self.grid_stride_fraction,
            "gradient_threshold": self.gradient_threshold,
            "min_component_area": self.min_component_area,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProposerConfig":
        return cls(
            kind=d["kind"],
            min_score=d["min_score"],
            nms_iou=d["nms_iou"],
            grid_cells=tuple(d.get("grid_cells", (64, 128))),
            grid_stride_fraction=d.get("grid_stride_fraction", 0.5),
            gradient_threshold=d.get("gradient_threshold", 140.0),
            min_component_area=d.get("min_component_area", 64),
        )


def _postprocess(
    page: Page, raw: Sequence[tuple[BBox, float, str]], cfg: ProposerConfig
) -> list[Region]:
    """Clip, confidence-filter, then NMS; the shared tail of every proposer."""
    filtered: list[tuple[ScoredBox, str]] = []
    for bbox, score, label in raw:
        clipped = bbox.clip(page.width, page.height)
        if clipped is None or score < cfg.min_score:
            continue
        filtered.append((ScoredBox(clipped, score), label))
    # nms returns the same ScoredBox instances, so identity maps back to labels
    label_of = {id(sb): label for sb, label in filtered}
    kept = nms([sb for sb, _ in filtered], cfg.nms_iou)
    return [Region(page.page_id, sb.bbox, sb.score, label_of[id(sb)]) for sb in kept]


def ingest_detections(
    file: Path | str, pages: Sequence[Page], cfg: ProposerConfig
) -> list[Region]:
    """Consume an external detector's JSONL output.

    One object per line: {"page_id", "x", "y", "w", "h", "score", "label"}.
    Boxes are clipped to their page (detectors commonly overshoot margins);
    boxes entirely outside the page are dropped.
    """
    file = Path(file)
    if not file.is_file():
        raise DetectionFileError(f"detections file not found: '{file}'")
    by_id = {p.page_id: p for p in pages}
    per_page: dict[str, list[tuple[BBox, float, str]]] = {p.page_id: [] for p in pages}

    for lineno, line in enumerate(file.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DetectionFileError(f"{file}:{lineno}: invalid JSON: {exc}") from exc
        try:
            page_id = row["page_id"]
            bbox = BBox(int(row["x"]), int(row["y"]), int(row["w"]), int(row["h"]))
            score = float(row["score"])
            label = str(row["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectionFileError(f"{file}:{lineno}: malformed record: {exc}") from exc
        if page_id not in by_id:
            raise DetectionFileError(f"{file}:{lineno}: unknown page_id '{page_id}'")
        if not math.isfinite(score):
            raise DetectionFileError(f"{file}:{lineno}: non-finite score")
        if not 0.0 <= score <= 1.0:
            raise DetectionFileError(f"{file}:{lineno}: score {score} outside [0, 1]")
        per_page[page_id].append((bbox, score, label))

    out: list[Region] = []
    for page in sorted(pages, key=lambda p: p.page_id):
        out.extend(_postprocess(page, per_page[page.page_id], cfg))
    return out


def grid_propose(page: Page, cfg: ProposerConfig) -> list[Region]:
    """Exhaustive sliding windows at each configured cell size.

    Stride is cell * grid_stride_fraction; every window scores 1.0.
    """
    raw: list[tuple[BBox, float, str]] = []
    for cell in cfg.grid_cells:
        if cell > page.width or cell > page.height:
            raise DataError(
                f"grid cell {cell} exceeds page '{page.page_id}' "
                f"({page.width}x{page.height})"
            )
        stride = max(1, int(round(cell * cfg.grid_stride_fraction)))
        for y in range(0, page.height - cell + 1, stride):
            for x in range(0, page.width - cell + 1, stride):
                raw.append((BBox(x, y, cell, cell), 1.0, "grid"))
    return _postprocess(page, raw, cfg)


_CLOSE_KERNEL = np.ones((5, 5), dtype=np.uint8)


def saliency_propose(page: Page, cfg: ProposerConfig) -> list[Region]:
    """Gradient-magnitude blobs: binarize Sobel magnitude, merge with a
    morphological close, and box the connected components.

    Score is the mean gradient magnitude inside the box, normalized by the
    page's maximum magnitude (so it lands in [0, 1]).
    """
    gray = cv2.cvtColor(page.image, cv2.COLOR_RGB2GRAY).astype(np.float32)
    dx = cv2.Sobel(gray, cv2.CV_32F, 1, 0, ksize=3)
    dy = cv2.Sobel(gray, cv2.CV_32F, 0, 1, ksize=3)
    # np.hypot, not cv2.magnitude: the cv2 kernel is not bit-deterministic
    # under concurrent calls, which breaks the any-thread-count contract
    mag = np.hypot(dx, dy)
    peak = float(mag.max())
    if peak <= 0.0:
        return []
    binary = (mag >= cfg.gradient_threshold).astype(np.uint8)
    closed = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, _CLOSE_KERNEL)
    n_labels, _, stats, _ = cv2.connectedComponentsWithStats(closed, connectivity=8)

    raw: list[tuple[BBox, float, str]] = []
    for i in range(1, n_labels):
        x, y, w, h, area = (int(v) for v in stats[i])
        if area < cfg.min_component_area or w <= 0 or h <= 0:
            continue
        box_mean = float(mag[y : y + h, x : x + w].mean())
        score = min(1.0, box_mean / peak)
        raw.append((BBox(x, y, w, h), score, "saliency"))
    return _postprocess(page, raw, cfg)


def _proposer_fn(cfg: ProposerConfig) -> Callable[[Page], list[Region]]:
    if cfg.kind == "grid":
        return lambda page: grid_propose(page, cfg)
    if cfg.kind == "saliency":
        return lambda page: saliency_propose(page, cfg)
    raise DataError(f"proposer kind '{cfg.kind}' needs a detections file")


def propose(
    pages: Sequence[Page],
    cfg: ProposerConfig,
    detections_file: Path | str | None = None,
    threads: int = 1,
) -> list[Region]:
    """Run the configured proposer over the corpus.

    Per-page work may fan out across threads; the merged order is always
    page_id ascending with each page's NMS output order preserved.
    """
    if cfg.kind == "detections-file":
        if detections_file is None:
            raise DataError("proposer 'detections-file' requires a detections path")
        return ingest_detections(detections_file, pages, cfg)

    fn = _proposer_fn(cfg)
    ordered = sorted(pages, key=lambda p: p.page_id)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_page = list(pool.map(fn, ordered))
    else:
        per_page = [fn(p) for p in ordered]
    return [region for regions in per_page for region in regions]
