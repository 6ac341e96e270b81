import numpy as np
import pytest

from docspot.bench import BenchProfile, count_only_dense, count_only_sparse
from docspot.corpus import Page
from docspot.densebaseline import (
    FeatureMap,
    build_feature_map,
    build_query_feature_map,
    compare_costs,
    dense_search,
    grid_dims,
    valid_placements,
)
from docspot.encoder import EncoderSpec
from docspot.errors import DataError
from docspot.geometry import BBox, iou


def noise_page(page_id="p0", w=96, h=96, seed=0):
    rng = np.random.default_rng(seed)
    return Page(page_id, w, h, rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def random_fm(page_id, gw, gh, stride, dim, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((gh * gw, dim))
    m = (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)
    return FeatureMap(page_id, gw * stride, gh * stride, gw, gh, stride,
                      m.reshape(gh, gw, dim))


class TestGridDims:
    def test_paper_profile_page(self):
        assert grid_dims(602, 920, 5) == (120, 184)
        assert 120 * 184 == 22_080

    def test_single_cell(self):
        assert grid_dims(10, 10, 10) == (1, 1)

    def test_floor_division(self):
        assert grid_dims(100, 100, 25) == (4, 4)

    def test_feature_map_dims_match(self):
        page = noise_page(w=100, h=75)
        fm = build_feature_map(page, 25, EncoderSpec(kind="color-hist"))
        assert (fm.grid_w, fm.grid_h) == (4, 3)
        assert fm.vectors.shape == (3, 4, 64)

    def test_stride_larger_than_page(self):
        with pytest.raises(DataError, match="stride"):
            build_feature_map(noise_page(w=10, h=10), 11, EncoderSpec())


class TestPlacements:
    def test_one_by_one_query_over_paper_grid(self):
        assert valid_placements((120, 184), (1, 1)) == 22_080

    def test_query_equals_page_grid(self):
        assert valid_placements((12, 9), (12, 9)) == 1

    def test_query_larger_than_page(self):
        assert valid_placements((4, 4), (5, 2)) == 0

    def test_dense_search_counts_match_closed_form(self):
        maps = [random_fm("a", 6, 5, 8, 4, 1), random_fm("b", 3, 3, 8, 4, 2)]
        qfm = random_fm("q", 2, 2, 8, 4, 3).vectors
        hits, rec = dense_search(qfm, (16, 16), maps, top_k=4)
        expected = valid_placements((6, 5), (2, 2)) + valid_placements((3, 3), (2, 2))
        assert rec.placements == expected
        assert rec.vector_comparisons == expected * 4

    def test_small_pages_skipped_not_error(self):
        maps = [random_fm("tiny", 1, 1, 8, 4, 1)]
        qfm = random_fm("q", 2, 2, 8, 4, 3).vectors
        hits, rec = dense_search(qfm, (16, 16), maps, top_k=4)
        assert hits == [] and rec.placements == 0


def naive_dense_twin(query_fm, maps):
    """Brute-force correlation with an explicit inner-loop counter."""
    qh, qw, _ = query_fm.shape
    scored = []
    count = 0
    for p_i, fm in enumerate(maps):
        if qh > fm.grid_h or qw > fm.grid_w:
            continue
        for u in range(fm.grid_h - qh + 1):
            for v in range(fm.grid_w - qw + 1):
                s = 0.0
                for i in range(qh):
                    for j in range(qw):
                        s += float(np.dot(query_fm[i, j], fm.vectors[u + i, v + j]))
                        count += 1
                scored.append((s / (qh * qw), p_i, u, v))
    scored.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    return scored, count


class TestDenseSearch:
    def test_matches_naive_twin(self):
        maps = [random_fm("a", 5, 4, 8, 6, 10), random_fm("b", 4, 4, 8, 6, 11)]
        qfm = random_fm("q", 2, 3, 8, 6, 12).vectors  # 3 rows x 2 cols
        hits, rec = dense_search(qfm, (16, 24), maps, top_k=50)
        naive, naive_count = naive_dense_twin(qfm, maps)
        assert rec.vector_comparisons == naive_count
        assert len(hits) == len(naive)
        for h, (score, p_i, u, v) in zip(hits, naive):
            assert h.region.page_id == maps[p_i].page_id
            assert h.similarity == pytest.approx(score, abs=1e-5)
            assert h.region.bbox.x == v * 8 and h.region.bbox.y == u * 8

    def test_one_by_one_degenerates_to_flat_scan(self):
        fm = random_fm("a", 6, 4, 8, 5, 20)
        q = random_fm("q", 1, 1, 8, 5, 21).vectors
        hits, _ = dense_search(q, (8, 8), [fm], top_k=24)
        flat = fm.vectors.reshape(-1, 5)
        sims = flat @ q[0, 0]
        order = np.argsort(-sims, kind="stable")
        assert [h.similarity for h in hits] == pytest.approx(
            [float(sims[i]) for i in order], abs=1e-6
        )
        # placements enumerate row-major
        expect_xy = [((int(i) % 6) * 8, (int(i) // 6) * 8) for i in order]
        assert [(h.region.bbox.x, h.region.bbox.y) for h in hits] == expect_xy

    def test_self_retrieval_exact_grid_alignment(self):
        page = noise_page(w=96, h=80, seed=30)
        spec = EncoderSpec(kind="color-hist")
        stride = 8
        fm = build_feature_map(page, stride, spec)
        x, y, w, h = 16, 24, 24, 16  # multiples of the stride
        crop = page.image[y : y + h, x : x + w]
        qfm = build_query_feature_map(crop, stride, spec)
        hits, _ = dense_search(qfm, (w, h), [fm], top_k=3)
        assert hits[0].similarity == pytest.approx(1.0, abs=1e-6)
        assert (hits[0].region.bbox.x, hits[0].region.bbox.y) == (x, y)
        assert iou(hits[0].region.bbox, BBox(x, y, w, h)) == 1.0

    def test_query_smaller_than_stride_rejected(self):
        crop = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(DataError, match="smaller than stride"):
            build_query_feature_map(crop, 8, EncoderSpec(kind="color-hist"))


class TestCompareCosts:
    def test_paper_ratio(self):
        profile = BenchProfile(pages=10, regions_per_page=112, queries=4,
                               page_size=(602, 920), stride=5, query_cells=(1, 1))
        sparse = count_only_sparse(profile)
        dense = count_only_dense(profile)
        report = compare_costs(sparse, dense)
        assert report.comparison_ratio == 22080 / 112
        assert report.comparison_ratio >= 100.0
        assert report.dense_placements == 22080 * 10 * 4

    def test_identical_records_ratio_one(self):
        profile = BenchProfile(pages=3, regions_per_page=50, queries=2,
                               page_size=(100, 100), stride=10, query_cells=(1, 1))
        sparse = count_only_sparse(profile)

        class FakeDense:
            corpus_id = profile.corpus_id
            n_pages = 3
            n_queries = 2
            placements = sparse.comparisons
            vector_comparisons = sparse.comparisons
            wall_ms = 0.0
            per_query_mean_ms = 0.0

        report = compare_costs(sparse, FakeDense())
        assert report.comparison_ratio == 1.0

    def test_corpus_mismatch_rejected(self):
        p1 = BenchProfile(pages=2, seed=0)
        p2 = BenchProfile(pages=2, seed=1)
        with pytest.raises(DataError, match="different corpora"):
            compare_costs(count_only_sparse(p1), count_only_dense(p2))
