"""Pattern-spotting and document-retrieval evaluation: per-query average
precision, per-taxonomy-cell mAP, and the query-based overall mAP.

Spotting relevance gates each hit on IoU against a not-yet-matched ground
truth occurrence of the query's category (greedy one-to-one by rank);
retrieval collapses hits to pages and asks only whether a page contains the
category. `oracle_evaluate` is a deliberately naive, independent twin used
to verify the fast path; it shares no evaluation logic with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus import GroundTruth, Occurrence, Query, categorize_bbox
from .errors import DataError
from .geometry import iou
from .index import RankedHit

TASKS = ("spotting", "retrieval")

CELLS = ("big/square", "small/square", "big/non-square", "small/non-square")


@dataclass
class EvalConfig:
    task: str = "spotting"
    iou_threshold: float = 0.5
    top_k: int = 1000
    area_threshold: float = 10_000.0
    aspect_threshold: float = 1.5
    exclude_self: bool = False

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"unknown eval task '{self.task}'")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise DataError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.top_k < 1:
            raise DataError(f"top_k must be >= 1, got {self.top_k}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "iou_threshold": self.iou_threshold,
            "top_k": self.top_k,
            "area_threshold": self.area_threshold,
            "aspect_threshold": self.aspect_threshold,
            "exclude_self": self.exclude_self,
        }


@dataclass(frozen=True)
class QueryAP:
    query_id: str
    category: str
    size_class: str
    shape_class: str
    ap: float


@dataclass
class EvalReport:
    task: str
    per_query: list[QueryAP]
    cells: dict[str, dict]  # cell -> {"map": float | None, "count": int}
    overall_map: float
    config: dict
    timing: dict | None = field(default=None)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "overall_map": self.overall_map,
            "cells": self.cells,
            "per_query": [
                {
                    "query_id": r.query_id,
                    "category": r.category,
                    "size_class": r.size_class,
                    "shape_class": r.shape_class,
                    "ap": r.ap,
                }
                for r in self.per_query
            ],
            "config": self.config,
            "timing": self.timing,
        }

    def to_csv(self) -> str:
        lines = ["query_id,category,size_class,shape_class,ap"]
        lines += [
            f"{r.query_id},{r.category},{r.size_class},{r.shape_class},{r.ap!r}"
            for r in self.per_query
        ]
        return "\n".join(lines) + "\n"


def average_precision(ranked_relevances: Sequence[int], n_relevant_total: int) -> float:
    """AP = (sum of precision@k over relevant positions k) / n_relevant_total."""
    if n_relevant_total < 1:
        raise DataError("average_precision needs n_relevant_total >= 1")
    if sum(ranked_relevances) > n_relevant_total:
        raise DataError(
            f"{sum(ranked_relevances)} relevant retrieved but only "
            f"{n_relevant_total} exist"
        )
    found = 0
    total = 0.0
    for k, rel in enumerate(ranked_relevances, start=1):
        if rel:
            found += 1
            total += found / k
    return total / n_relevant_total


def relevance_spotting(
    hit: RankedHit,
    occurrences: Sequence[Occurrence],
    iou_threshold: float,
    matched: set[int],
) -> int:
    """1 iff an unmatched same-page occurrence overlaps at >= the threshold.

    The best-IoU such occurrence is consumed (greedy one-to-one matching by
    rank); `matched` holds consumed occurrence indices.
    """
    best_idx = -1
    best_iou = 0.0
    for i, occ in enumerate(occurrences):
        if i in matched or occ.page_id != hit.region.page_id:
            continue
        v = iou(hit.region.bbox, occ.bbox)
        if v >= iou_threshold and v > best_iou:
            best_idx, best_iou = i, v
    if best_idx >= 0:
        matched.add(best_idx)
        return 1
    return 0


def _query_occurrences(q: Query, gt: GroundTruth, cfg: EvalConfig) -> list[Occurrence]:
    occs = [o for o in gt.occurrences if o.category == q.category]
    if cfg.exclude_self:
        for i, o in enumerate(occs):
            if o.page_id == q.page_id and o.bbox == q.bbox:
                del occs[i]
                break
    if not occs:
        raise DataError(
            f"query '{q.query_id}' has zero ground-truth occurrences to match"
        )
    return occs


def _aggregate(
    task: str, rows: list[QueryAP], cfg: EvalConfig, timing: dict | None
) -> EvalReport:
    if not rows:
        raise DataError("nothing to evaluate: ground truth has no queries")
    cells: dict[str, dict] = {}
    for cell in CELLS:
        aps = [r.ap for r in rows if f"{r.size_class}/{r.shape_class}" == cell]
        cells[cell] = {
            "map": sum(aps) / len(aps) if aps else None,
            "count": len(aps),
        }
    overall = sum(r.ap for r in rows) / len(rows)
    return EvalReport(task, rows, cells, overall, cfg.to_dict(), timing)


def evaluate_spotting(
    results: Mapping[str, Sequence[RankedHit]],
    gt: GroundTruth,
    cfg: EvalConfig,
    timing: dict | None = None,
) -> EvalReport:
    """IoU-gated localization AP per query, aggregated query-based."""
    known = {q.query_id for q in gt.queries}
    unknown = set(results) - known
    if unknown:
        raise DataError(f"results contain unknown query ids: {sorted(unknown)[:5]}")
    rows = []
    for q in gt.queries:
        occs = _query_occurrences(q, gt, cfg)
        hits = list(results.get(q.query_id, ()))[: cfg.top_k]
        matched: set[int] = set()
        rels = [relevance_spotting(h, occs, cfg.iou_threshold, matched) for h in hits]
        ap = average_precision(rels, len(occs))
        size, shape = categorize_bbox(q.bbox, cfg.area_threshold, cfg.aspect_threshold)
        rows.append(QueryAP(q.query_id, q.category, size, shape, ap))
    return _aggregate("spotting", rows, cfg, timing)


def evaluate_retrieval(
    results: Mapping[str, Sequence[RankedHit]],
    gt: GroundTruth,
    cfg: EvalConfig,
    timing: dict | None = None,
) -> EvalReport:
    """Page-level AP: a page is relevant iff it holds any category occurrence."""
    known = {q.query_id for q in gt.queries}
    unknown = set(results) - known
    if unknown:
        raise DataError(f"results contain unknown query ids: {sorted(unknown)[:5]}")
    rows = []
    for q in gt.queries:
        occs = _query_occurrences(q, gt, cfg)
        relevant_pages = {o.page_id for o in occs}
        seen: set[str] = set()
        page_seq: list[str] = []
        for h in results.get(q.query_id, ()):
            if h.region.page_id not in seen:
                seen.add(h.region.page_id)
                page_seq.append(h.region.page_id)
        page_seq = page_seq[: cfg.top_k]
        rels = [1 if p in relevant_pages else 0 for p in page_seq]
        ap = average_precision(rels, len(relevant_pages))
        size, shape = categorize_bbox(q.bbox, cfg.area_threshold, cfg.aspect_threshold)
        rows.append(QueryAP(q.query_id, q.category, size, shape, ap))
    return _aggregate("retrieval", rows, cfg, timing)


def evaluate(
    results: Mapping[str, Sequence[RankedHit]],
    gt: GroundTruth,
    cfg: EvalConfig,
    timing: dict | None = None,
) -> EvalReport:
    if cfg.task == "spotting":
        return evaluate_spotting(results, gt, cfg, timing)
    return evaluate_retrieval(results, gt, cfg, timing)


# --- brute-force oracle twin --------------------------------------------------
#
# Everything below re-derives the protocol from scratch: inline IoU, inline
# precision sums, quadratic scans. Do not refactor to share code with the
# fast path above; agreement between the two is a test oracle.


def _oracle_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a.x, a.y, a.x + a.w, a.y + a.h
    bx1, by1, bx2, by2 = b.x, b.y, b.x + b.w, b.y + b.h
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def _oracle_ap(rels: list[int], n_rel: int) -> float:
    if n_rel < 1:
        raise DataError("oracle: n_relevant_total must be >= 1")
    acc = 0.0
    n_found = 0
    for pos in range(len(rels)):
        if rels[pos]:
            n_found += 1
            acc += n_found / (pos + 1)
    return acc / n_rel


def _oracle_cell(bbox, area_thr: float, aspect_thr: float) -> tuple[str, str]:
    size = "big" if bbox.w * bbox.h >= area_thr else "small"
    longer = bbox.w if bbox.w >= bbox.h else bbox.h
    shorter = bbox.h if bbox.w >= bbox.h else bbox.w
    shape = "square" if longer / shorter <= aspect_thr else "non-square"
    return size, shape


def oracle_evaluate(
    results: Mapping[str, Sequence[RankedHit]],
    gt: GroundTruth,
    cfg: EvalConfig,
    timing: dict | None = None,
) -> EvalReport:
    """Naive re-implementation of both evaluation tasks, for verification."""
    rows = []
    for q in gt.queries:
        occs = []
        skipped_self = False
        for o in gt.occurrences:
            if o.category != q.category:
                continue
            if (
                cfg.exclude_self
                and not skipped_self
                and o.page_id == q.page_id
                and o.bbox == q.bbox
            ):
                skipped_self = True
                continue
            occs.append(o)
        if len(occs) == 0:
            raise DataError(f"oracle: query '{q.query_id}' has zero occurrences")

        all_hits = list(results.get(q.query_id, ()))
        if cfg.task == "spotting":
            hits = all_hits[: cfg.top_k]
            used = [False] * len(occs)
            rels = []
            for h in hits:
                best = -1
                best_v = -1.0
                for i in range(len(occs)):
                    if used[i]:
                        continue
                    if occs[i].page_id != h.region.page_id:
                        continue
                    v = _oracle_iou(h.region.bbox, occs[i].bbox)
                    if v >= cfg.iou_threshold and v > best_v:
                        best = i
                        best_v = v
                if best >= 0:
                    used[best] = True
                    rels.append(1)
                else:
                    rels.append(0)
            ap = _oracle_ap(rels, len(occs))
        else:
            pages = []
            for h in all_hits:
                if h.region.page_id not in pages:
                    pages.append(h.region.page_id)
            pages = pages[: cfg.top_k]
            good_pages = []
            for o in occs:
                if o.page_id not in good_pages:
                    good_pages.append(o.page_id)
            rels = [1 if p in good_pages else 0 for p in pages]
            ap = _oracle_ap(rels, len(good_pages))

        size, shape = _oracle_cell(q.bbox, cfg.area_threshold, cfg.aspect_threshold)
        rows.append(QueryAP(q.query_id, q.category, size, shape, ap))

    if not rows:
        raise DataError("oracle: nothing to evaluate")
    cells: dict[str, dict] = {}
    for cell in CELLS:
        cell_aps = []
        for r in rows:
            if f"{r.size_class}/{r.shape_class}" == cell:
                cell_aps.append(r.ap)
        total = 0.0
        for v in cell_aps:
            total += v
        cells[cell] = {
            "map": total / len(cell_aps) if cell_aps else None,
            "count": len(cell_aps),
        }
    grand = 0.0
    for r in rows:
        grand += r.ap
    return EvalReport(cfg.task, rows, cells, grand / len(rows), cfg.to_dict(), timing)
