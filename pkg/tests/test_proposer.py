import json

import numpy as np
import pytest

from docspot.corpus import Page, generate_synthetic
from docspot.errors import DataError, DetectionFileError
from docspot.geometry import BBox, iou
from docspot.proposer import (
    ProposerConfig,
    grid_propose,
    ingest_detections,
    propose,
    saliency_propose,
)


def flat_page(page_id="p0", w=100, h=100, value=128):
    img = np.full((h, w, 3), value, dtype=np.uint8)
    return Page(page_id, w, h, img)


def write_jsonl(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")


def det(page_id, x, y, w, h, score, label="figure"):
    return {"page_id": page_id, "x": x, "y": y, "w": w, "h": h,
            "score": score, "label": label}


class TestIngestDetections:
    def test_below_threshold_dropped(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [det("p0", 0, 0, 10, 10, 0.005)])
        cfg = ProposerConfig(kind="detections-file", min_score=0.01)
        assert ingest_detections(f, [flat_page()], cfg) == []

    def test_at_threshold_kept(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [det("p0", 0, 0, 10, 10, 0.01)])
        cfg = ProposerConfig(kind="detections-file", min_score=0.01)
        assert len(ingest_detections(f, [flat_page()], cfg)) == 1

    def test_duplicate_suppressed(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [det("p0", 0, 0, 10, 10, 0.9), det("p0", 0, 0, 10, 10, 0.8)])
        cfg = ProposerConfig(kind="detections-file")
        regions = ingest_detections(f, [flat_page()], cfg)
        assert len(regions) == 1 and regions[0].score == 0.9

    def test_overshoot_clipped_to_page(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [det("p0", 95, 10, 15, 10, 0.5)])
        cfg = ProposerConfig(kind="detections-file")
        regions = ingest_detections(f, [flat_page(w=100, h=100)], cfg)
        assert regions[0].bbox == BBox(95, 10, 5, 10)

    def test_fully_outside_dropped(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [det("p0", 200, 200, 10, 10, 0.5)])
        cfg = ProposerConfig(kind="detections-file")
        assert ingest_detections(f, [flat_page()], cfg) == []

    def test_malformed_line_reports_number(self, tmp_path):
        f = tmp_path / "d.jsonl"
        f.write_text('{"page_id": "p0"}\nnot json\n', encoding="utf-8")
        with pytest.raises(DetectionFileError, match=":1"):
            ingest_detections(f, [flat_page()], ProposerConfig(kind="detections-file"))

    def test_unknown_page(self, tmp_path):
        f = tmp_path / "d.jsonl"
        write_jsonl(f, [det("ghost", 0, 0, 10, 10, 0.5)])
        with pytest.raises(DetectionFileError, match="ghost"):
            ingest_detections(f, [flat_page()], ProposerConfig(kind="detections-file"))

    def test_non_finite_score(self, tmp_path):
        f = tmp_path / "d.jsonl"
        f.write_text(
            '{"page_id": "p0", "x": 0, "y": 0, "w": 5, "h": 5, "score": NaN, "label": "x"}\n',
            encoding="utf-8",
        )
        with pytest.raises(DetectionFileError, match="non-finite"):
            ingest_detections(f, [flat_page()], ProposerConfig(kind="detections-file"))

    def test_deterministic_order(self, tmp_path):
        f = tmp_path / "d.jsonl"
        rows = [det("b", 0, 0, 10, 10, 0.3), det("a", 20, 0, 10, 10, 0.9),
                det("a", 0, 0, 10, 10, 0.9), det("a", 40, 0, 10, 10, 0.1)]
        write_jsonl(f, rows)
        pages = [flat_page("a"), flat_page("b")]
        cfg = ProposerConfig(kind="detections-file")
        regions = ingest_detections(f, pages, cfg)
        assert [r.page_id for r in regions] == ["a", "a", "a", "b"]
        # equal scores tie-break on x
        assert [r.bbox.x for r in regions[:2]] == [0, 20]


class TestGridPropose:
    def test_four_windows(self):
        cfg = ProposerConfig(kind="grid", grid_cells=(50,), grid_stride_fraction=1.0)
        regions = grid_propose(flat_page(w=100, h=100), cfg)
        corners = {(r.bbox.x, r.bbox.y) for r in regions}
        assert corners == {(0, 0), (50, 0), (0, 50), (50, 50)}
        assert all(r.score == 1.0 and r.label == "grid" for r in regions)

    def test_single_full_page_window(self):
        cfg = ProposerConfig(kind="grid", grid_cells=(100,), grid_stride_fraction=1.0)
        regions = grid_propose(flat_page(w=100, h=100), cfg)
        assert len(regions) == 1
        assert regions[0].bbox == BBox(0, 0, 100, 100)

    def test_window_count_closed_form(self):
        # floor((602-64)/32+1) * floor((920-64)/32+1) = 17 * 27 = 459
        cfg = ProposerConfig(kind="grid", grid_cells=(64,), grid_stride_fraction=0.5)
        regions = grid_propose(flat_page(w=602, h=920), cfg)
        assert len(regions) == 459

    def test_cell_larger_than_page_rejected(self):
        cfg = ProposerConfig(kind="grid", grid_cells=(200,))
        with pytest.raises(DataError, match="exceeds page"):
            grid_propose(flat_page(w=100, h=100), cfg)


class TestSaliencyPropose:
    def test_uniform_page_no_regions(self):
        assert saliency_propose(flat_page(), ProposerConfig(kind="saliency")) == []

    def test_single_glyph_found(self):
        pages, gt = generate_synthetic(1, 1, 1, page_size=(320, 240), seed=21)
        regions = saliency_propose(pages[0], ProposerConfig(kind="saliency"))
        assert len(regions) >= 1
        target = gt.occurrences[0].bbox
        assert max(iou(r.bbox, target) for r in regions) >= 0.5

    def test_two_separated_glyphs(self):
        pages, gt = generate_synthetic(1, 2, 1, page_size=(480, 360), seed=22)
        regions = saliency_propose(pages[0], ProposerConfig(kind="saliency"))
        assert len(regions) >= 2
        for occ in gt.occurrences:
            assert max(iou(r.bbox, occ.bbox) for r in regions) >= 0.5

    def test_recall_on_synthetic_corpus(self, small_corpus):
        pages, gt = small_corpus
        cfg = ProposerConfig(kind="saliency")
        regions = propose(pages, cfg)
        by_page = {}
        for r in regions:
            by_page.setdefault(r.page_id, []).append(r)
        found = 0
        for occ in gt.occurrences:
            cands = by_page.get(occ.page_id, [])
            if cands and max(iou(r.bbox, occ.bbox) for r in cands) >= 0.5:
                found += 1
        assert found / len(gt.occurrences) >= 0.95


class TestProposerInvariants:
    @pytest.mark.parametrize("kind", ["grid", "saliency"])
    def test_inside_page_and_above_floor(self, small_corpus, kind):
        pages, _ = small_corpus
        cfg = ProposerConfig(kind=kind)
        for r in propose(pages, cfg):
            page = next(p for p in pages if p.page_id == r.page_id)
            assert r.bbox.x >= 0 and r.bbox.y >= 0
            assert r.bbox.x2 <= page.width and r.bbox.y2 <= page.height
            assert r.score >= cfg.min_score

    @pytest.mark.parametrize("kind", ["grid", "saliency"])
    def test_per_page_nms_bound(self, small_corpus, kind):
        pages, _ = small_corpus
        cfg = ProposerConfig(kind=kind)
        by_page = {}
        for r in propose(pages, cfg):
            by_page.setdefault(r.page_id, []).append(r)
        for regions in by_page.values():
            for i in range(len(regions)):
                for j in range(i + 1, len(regions)):
                    assert iou(regions[i].bbox, regions[j].bbox) <= cfg.nms_iou

    def test_threaded_matches_sequential(self, small_corpus):
        pages, _ = small_corpus
        cfg = ProposerConfig(kind="saliency")
        assert propose(pages, cfg, threads=1) == propose(pages, cfg, threads=4)

    def test_saliency_deterministic(self, small_corpus):
        pages, _ = small_corpus
        cfg = ProposerConfig(kind="saliency")
        assert saliency_propose(pages[0], cfg) == saliency_propose(pages[0], cfg)

    def test_bad_config_rejected(self):
        with pytest.raises(DataError):
            ProposerConfig(kind="nope")
        with pytest.raises(DataError):
            ProposerConfig(min_score=1.5)
