"""Slide-pipeline unit and property tests."""

import math

import numpy as np
import pytest

from survcase.manifest import load_manifest
from survcase.types import Confidence, PatchRecord, Report, ReportSource, ValidationError
from survcase.wsi import (
    BadThreshold,
    DimensionMismatch,
    ParseFailure,
    Region,
    SelectionPolicy,
    SimilarityMatrix,
    WsiError,
    analyze_slide,
    assess_confidence,
    attention_order,
    conf_mine,
    cos_mine,
    describe_patch,
    extract_attributes,
    filter_by_regions,
    lm_screen,
    load_checklist,
    propose_regions,
    pairwise_cosine,
    summarize_wsi,
    threshold_select,
)

from helpers import QueueBackend, SlideBuilder, fixture_backend, unit_vector
from oracles import density_clusters_brute, greedy_keep_brute, literal_keep_brute


def sim(n, entries):
    vals = np.eye(n)
    for i, j, v in entries:
        vals[i, j] = vals[j, i] = v
    return SimilarityMatrix(n, vals)


def grid_patch(i, x, y, attention=1.0):
    return PatchRecord(patch_id=f"g{i}", level=1, x=x, y=y, w=1, h=1, attention=attention)


class TestSimilarityMatrix:
    def test_symmetry_enforced(self):
        vals = np.eye(3)
        vals[0, 1] = 0.5  # leave [1,0] at 0
        with pytest.raises(ValidationError):
            SimilarityMatrix(3, vals)

    def test_diagonal_reset_to_one(self):
        vals = np.full((2, 2), 0.3)
        s = SimilarityMatrix(2, vals)
        assert s.values[0, 0] == 1.0 and s.values[1, 1] == 1.0

    def test_shape_checked(self):
        with pytest.raises(ValidationError):
            SimilarityMatrix(3, np.eye(2))


class TestPairwiseCosine:
    def test_orthonormal_off_diagonal_zero(self):
        s = pairwise_cosine([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        assert s.values[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_identical_vectors_similarity_one(self):
        v = unit_vector(8, 3)
        s = pairwise_cosine([v, v])
        assert s.values[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_hand_dot_product(self):
        r = math.sqrt(2) / 2
        s = pairwise_cosine([np.array([1.0, 0.0]), np.array([r, r])])
        assert s.values[0, 1] == pytest.approx(0.7071, abs=1e-4)
        assert abs(s.values[0, 1] - r) <= 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            pairwise_cosine([np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0])])

    def test_non_unit_rejected(self):
        with pytest.raises(ValidationError):
            pairwise_cosine([np.array([2.0, 0.0]), np.array([0.0, 1.0])])


class TestThresholdSelect:
    def test_literal_drops_both_members_of_pair(self):
        s = sim(3, [(0, 1, 0.95), (0, 2, 0.5), (1, 2, 0.5)])
        assert threshold_select(s, 0.93, SelectionPolicy.LITERAL) == {2}

    def test_greedy_keeps_first_of_pair(self):
        s = sim(3, [(0, 1, 0.95), (0, 2, 0.5), (1, 2, 0.5)])
        kept = threshold_select(s, 0.93, SelectionPolicy.GREEDY, order=[0, 1, 2])
        assert kept == {0, 2}

    def test_single_patch_always_kept(self):
        s = SimilarityMatrix(1, np.eye(1))
        assert threshold_select(s, 0.93, SelectionPolicy.LITERAL) == {0}
        assert threshold_select(s, 0.93, SelectionPolicy.GREEDY) == {0}

    def test_bad_threshold(self):
        s = SimilarityMatrix(2, np.eye(2))
        for tau in (0.0, -0.1, 1.5):
            with pytest.raises(BadThreshold):
                threshold_select(s, tau)

    def test_bad_order_rejected(self):
        s = SimilarityMatrix(2, np.eye(2))
        with pytest.raises(WsiError):
            threshold_select(s, 0.9, SelectionPolicy.GREEDY, order=[0, 0])

    def test_empty_matrix(self):
        assert threshold_select(SimilarityMatrix(0, np.zeros((0, 0))), 0.9) == set()


def random_similarity(rng, n):
    """Gram matrix of unit vectors, with deliberate near-duplicates."""
    dim = 6
    vecs = []
    for i in range(n):
        if vecs and rng.random() < 0.35:
            v = vecs[rng.integers(0, len(vecs))] + rng.standard_normal(dim) * 0.05
        else:
            v = rng.standard_normal(dim)
        vecs.append(v / np.linalg.norm(v))
    mat = np.clip(np.array(vecs) @ np.array(vecs).T, -1.0, 1.0)
    return SimilarityMatrix(n, mat)


class TestSelectionProperties:
    def test_literal_matches_set_builder_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            n = int(rng.integers(1, 21))
            s = random_similarity(rng, n)
            tau = float(rng.choice([0.7, 0.9, 0.93, 0.95, 0.999]))
            assert threshold_select(s, tau) == literal_keep_brute(s.values.tolist(), tau)

    def test_greedy_matches_scan_oracle_and_no_dup_pair(self):
        rng = np.random.default_rng(12)
        for _ in range(300):
            n = int(rng.integers(1, 21))
            s = random_similarity(rng, n)
            tau = float(rng.choice([0.7, 0.9, 0.93, 0.95]))
            order = list(rng.permutation(n))
            kept = threshold_select(s, tau, SelectionPolicy.GREEDY, order)
            assert kept == greedy_keep_brute(s.values.tolist(), tau, order)
            for i in kept:
                for j in kept:
                    if i != j:
                        assert s.values[i, j] < tau

    def test_literal_monotone_in_tau(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            n = int(rng.integers(1, 21))
            s = random_similarity(rng, n)
            t1, t2 = sorted(rng.uniform(0.5, 1.0, size=2))
            low = threshold_select(s, float(t1))
            high = threshold_select(s, float(t2))
            assert low <= high


class TestAttentionOrder:
    def test_descending_attention_ties_by_index(self):
        patches = [
            grid_patch(0, 0, 0, attention=0.5),
            grid_patch(1, 1, 0, attention=0.9),
            grid_patch(2, 2, 0, attention=0.5),
        ]
        assert attention_order(patches) == [1, 0, 2]

    def test_missing_attention_sorts_last(self):
        patches = [
            PatchRecord(patch_id="a", level=2, x=0, y=0, w=1, h=1),
            grid_patch(1, 1, 0, attention=0.1),
        ]
        assert attention_order(patches) == [1, 0]


class TestProposeRegions:
    def test_contiguous_block_is_one_region(self):
        patches = [grid_patch(i, x, y) for i, (x, y) in enumerate(
            (x, y) for x in range(3) for y in range(4)
        )]
        regions = propose_regions(patches)
        assert len(regions) == 1
        assert len(regions[0].patch_ids) == 12

    def test_below_min_size_no_region(self):
        patches = [grid_patch(i, i, 0) for i in range(5)]
        assert propose_regions(patches) == []

    def test_two_separated_blocks(self):
        patches = []
        i = 0
        for x0 in (0, 20):
            for x in range(5):
                for y in range(2):
                    patches.append(grid_patch(i, x0 + x, y))
                    i += 1
        regions = propose_regions(patches)
        assert len(regions) == 2
        assert sorted(len(r.patch_ids) for r in regions) == [10, 10]

    def test_attention_percentile_cut(self):
        patches = [grid_patch(i, x, y, attention=5.0) for i, (x, y) in enumerate(
            (x, y) for x in range(3) for y in range(4)
        )]
        # 88 cold far-away patches that the 90th-percentile cut must drop
        patches += [grid_patch(100 + j, 500 + 10 * j, 500, attention=1.0) for j in range(88)]
        regions = propose_regions(patches)
        assert len(regions) == 1
        assert set(r_id for r_id in regions[0].patch_ids) == {f"g{i}" for i in range(12)}

    def test_bbox_in_level2_units(self):
        # level-1 patches: level-2 coordinates are half
        patches = [
            PatchRecord(patch_id=f"p{i}", level=1, x=(i % 4) * 64, y=(i // 4) * 64,
                        w=64, h=64, attention=1.0)
            for i in range(12)
        ]
        regions = propose_regions(patches, eps=4, min_pts=10)
        assert len(regions) == 1
        x0, y0, x1, y1 = regions[0].bbox_level2
        assert (x0, y0) == (0.0, 0.0)
        assert (x1, y1) == (4 * 64 * 0.5, 3 * 64 * 0.5)

    def test_matches_density_reachability_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(60):
            n = int(rng.integers(5, 51))
            span = int(rng.choice([6, 10, 30]))
            pts = [(int(rng.integers(0, span)), int(rng.integers(0, span))) for _ in range(n)]
            patches = [grid_patch(i, x, y) for i, (x, y) in enumerate(pts)]
            got = {
                frozenset(int(pid[1:]) for pid in r.patch_ids)
                for r in propose_regions(patches)
            }
            want = {frozenset(c) for c in density_clusters_brute(pts, eps=4, min_pts=10)}
            assert got == want


class TestFilterByRegions:
    def test_no_regions_passes_all_with_flag(self):
        tiles = [PatchRecord(patch_id="t", level=2, x=0, y=0, w=64, h=64)]
        kept, fallback = filter_by_regions(tiles, [])
        assert kept == tiles and fallback

    def test_intersection_keeps_overlapping_tile(self):
        tiles = [
            PatchRecord(patch_id="in", level=2, x=0, y=0, w=64, h=64),
            PatchRecord(patch_id="out", level=2, x=640, y=640, w=64, h=64),
        ]
        region = Region(region_id="r", patch_ids=("x",), bbox_level2=(32.0, 32.0, 96.0, 96.0))
        kept, fallback = filter_by_regions(tiles, [region])
        assert [t.patch_id for t in kept] == ["in"] and not fallback

    def test_disjoint_regions_fall_back(self):
        tiles = [PatchRecord(patch_id="t", level=2, x=0, y=0, w=64, h=64)]
        region = Region(region_id="r", patch_ids=("x",), bbox_level2=(1000.0, 1000.0, 1100.0, 1100.0))
        kept, fallback = filter_by_regions(tiles, [region])
        assert kept == tiles and fallback


def build_three_tile_slide(tmp_path, *, with_level3=True, dup_pair=True):
    """Level-2 row of three tiles; tiles 0 and 1 are visual near-duplicates."""
    b = SlideBuilder(tmp_path, "s1")
    if with_level3:
        b.add_tile(3, "overview", 0, 0, 48, 16)
    base = unit_vector(16, 1)
    bump = base + 0.01 * unit_vector(16, 2)
    vecs = [
        base,
        bump / np.linalg.norm(bump) if dup_pair else unit_vector(16, 5),
        unit_vector(16, 9),
    ]
    for i, v in enumerate(vecs):
        b.add_tile(2, f"t{i}", i * 64, 0, 64, 64, embedding=v, attention=1.0)
    return load_manifest(b.build())


WORDS_A = "papillary fronds with fibrovascular cores and orderly nuclei"
WORDS_B = "solid nests infiltrating stroma with marked pleomorphism"
WORDS_C = "inflamed stroma containing scattered lymphocytes only"


class TestLmScreen:
    def test_returns_global_report(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path)
        backend = QueueBackend(describe=["Overview: low power view."])
        report, flags = lm_screen(manifest, backend)
        assert report.source is ReportSource.GLOBAL
        assert report.text == "Overview: low power view."
        assert report.subject_id == "s1"
        assert flags == []

    def test_synthesized_overview_flagged(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path, with_level3=False)
        backend = QueueBackend(describe=["Synth overview."])
        report, flags = lm_screen(manifest, backend, workdir=tmp_path / "work")
        assert flags == ["synthetic_overview"]
        assert (tmp_path / "work" / "s1_level3_synthetic.png").is_file()


class TestDescribePatch:
    def test_magnification_in_variables(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path)
        backend = QueueBackend(describe=["text"])
        report = describe_patch(manifest.tiles(2)[0], backend)
        assert report.source is ReportSource.MAG10
        req = backend.describe_requests[0]
        assert req.variables["magnification"] == "10"

    def test_patch_without_image_rejected(self):
        patch = PatchRecord(patch_id="x", level=2, x=0, y=0, w=1, h=1)
        with pytest.raises(WsiError):
            describe_patch(patch, QueueBackend())


class TestCosMine:
    def test_intersection_of_modalities(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path)
        patches = list(manifest.tiles(2))
        # Distinct texts: the text criterion keeps everyone, so the
        # visual near-duplicate pair (t0, t1) decides the outcome.
        reports = [
            Report(source=ReportSource.MAG10, text=t, subject_id=p.patch_id)
            for t, p in zip((WORDS_A, WORDS_B, WORDS_C), patches)
        ]
        kept, kept_reports = cos_mine(patches, reports, fixture_backend())
        assert [p.patch_id for p in kept] == ["t2"]
        assert [r.text for r in kept_reports] == [WORDS_C]

    def test_identical_texts_drop_both_under_literal(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path, dup_pair=False)
        patches = list(manifest.tiles(2))
        reports = [
            Report(source=ReportSource.MAG10, text=t, subject_id=p.patch_id)
            for t, p in zip((WORDS_A, WORDS_A, WORDS_C), patches)
        ]
        kept, _ = cos_mine(patches, reports, fixture_backend())
        assert [p.patch_id for p in kept] == ["t2"]

    def test_all_dissimilar_all_kept(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path, dup_pair=False)
        patches = list(manifest.tiles(2))
        reports = [
            Report(source=ReportSource.MAG10, text=t, subject_id=p.patch_id)
            for t, p in zip((WORDS_A, WORDS_B, WORDS_C), patches)
        ]
        kept, _ = cos_mine(patches, reports, fixture_backend())
        assert [p.patch_id for p in kept] == ["t0", "t1", "t2"]

    def test_report_count_mismatch(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path)
        with pytest.raises(WsiError):
            cos_mine(list(manifest.tiles(2)), [], fixture_backend())

    def test_missing_embedding_rejected(self):
        patch = PatchRecord(patch_id="x", level=2, x=0, y=0, w=1, h=1)
        report = Report(source=ReportSource.MAG10, text="t", subject_id="x")
        with pytest.raises(ValidationError):
            cos_mine([patch], [report], fixture_backend())

    def test_matches_brute_force_intersection(self, tmp_path):
        rng = np.random.default_rng(31)
        backend = fixture_backend()
        vocab = WORDS_A.split() + WORDS_B.split() + WORDS_C.split()
        for trial in range(25):
            n = int(rng.integers(1, 7))
            b = SlideBuilder(tmp_path / f"trial{trial}", "s")
            vecs = []
            for i in range(n):
                if vecs and rng.random() < 0.4:
                    v = vecs[-1] + rng.standard_normal(12) * 0.03
                else:
                    v = rng.standard_normal(12)
                v = v / np.linalg.norm(v)
                vecs.append(v)
                b.add_tile(2, f"t{i}", i * 64, 0, 64, 64, embedding=v)
            manifest = load_manifest(b.build())
            patches = list(manifest.tiles(2))
            texts = []
            for i in range(n):
                if texts and rng.random() < 0.4:
                    texts.append(texts[-1])
                else:
                    texts.append(" ".join(rng.choice(vocab, size=5)))
            reports = [
                Report(source=ReportSource.MAG10, text=t, subject_id=p.patch_id)
                for t, p in zip(texts, patches)
            ]
            kept, _ = cos_mine(patches, reports, backend)
            sv = np.clip(np.array([p.embedding for p in patches]) @
                         np.array([p.embedding for p in patches]).T, -1, 1)
            emb = [backend.embed_text(t) for t in texts]
            st = np.clip(np.array(emb) @ np.array(emb).T, -1, 1)
            want = literal_keep_brute(sv.tolist(), 0.93) & literal_keep_brute(st.tolist(), 0.93)
            assert {p.patch_id for p in kept} == {f"t{i}" for i in want}


class TestAssessConfidence:
    def report(self, text="some findings"):
        return Report(source=ReportSource.MAG10, text=text, subject_id="t0")

    def test_parses_labelled_answer(self):
        conf, warned = assess_confidence(self.report(), QueueBackend(chat=["Confidence: low"]))
        assert conf is Confidence.LOW and not warned

    def test_case_and_punctuation_insensitive(self):
        conf, warned = assess_confidence(self.report(), QueueBackend(chat=["HIGH."]))
        assert conf is Confidence.HIGH and not warned

    def test_reprompt_then_fallback_medium(self):
        backend = QueueBackend(chat=["no idea", "still nothing"])
        conf, warned = assess_confidence(self.report(), backend)
        assert conf is Confidence.MEDIUM and warned
        assert len(backend.chat_requests) == 2

    def test_reprompt_recovers(self):
        backend = QueueBackend(chat=["???", "I would say medium overall"])
        conf, warned = assess_confidence(self.report(), backend)
        assert conf is Confidence.MEDIUM and not warned

    def test_wrong_source_rejected(self):
        bad = Report(source=ReportSource.GLOBAL, text="x")
        with pytest.raises(WsiError):
            assess_confidence(bad, QueueBackend())


def build_parent_child_slide(tmp_path, n_children=4, second_parent=False):
    b = SlideBuilder(tmp_path, "s2")
    b.add_tile(3, "overview", 0, 0, 32, 32)
    b.add_tile(2, "parent0", 0, 0, 64, 64, embedding=unit_vector(16, 40), attention=1.0)
    if second_parent:
        b.add_tile(2, "parent1", 1000, 1000, 64, 64, embedding=unit_vector(16, 41))
    # level-1 footprint of parent0 is (0,0)-(128,128)
    pos = [(0, 0), (64, 0), (0, 64), (64, 64)][:n_children]
    for i, (x, y) in enumerate(pos):
        b.add_tile(1, f"sub{i}", x, y, 64, 64, embedding=unit_vector(16, 50 + i))
    b.add_tile(1, "far", 4000, 4000, 64, 64, embedding=unit_vector(16, 60))
    return load_manifest(b.build())


class TestConfMine:
    def test_no_low_confidence_patches(self, tmp_path):
        manifest = build_parent_child_slide(tmp_path)
        patches, reports, flags = conf_mine([], manifest, QueueBackend())
        assert patches == [] and reports == [] and flags == []

    def test_dissimilar_subtiles_all_retained(self, tmp_path):
        manifest = build_parent_child_slide(tmp_path)
        parent = manifest.tiles(2)[0]
        texts = [WORDS_A, WORDS_B, WORDS_C, "necrotic debris with ghost outlines"]
        backend = QueueBackend(describe=texts)
        patches, reports, flags = conf_mine([parent], manifest, backend)
        assert {p.patch_id for p in patches} == {"sub0", "sub1", "sub2", "sub3"}
        assert len(reports) == 4
        assert all(r.source is ReportSource.MAG20 for r in reports)
        assert flags == []

    def test_parent_without_subtiles_skipped_with_flag(self, tmp_path):
        manifest = build_parent_child_slide(tmp_path, second_parent=True)
        parents = {p.patch_id: p for p in manifest.tiles(2)}
        texts = [WORDS_A, WORDS_B, WORDS_C, "necrotic debris with ghost outlines"]
        backend = QueueBackend(describe=texts)
        patches, reports, flags = conf_mine(
            [parents["parent0"], parents["parent1"]], manifest, backend
        )
        assert len(patches) == 4
        assert flags == ["missing_subtiles:parent1"]


class TestLoadChecklist:
    def test_bundled_checklist_has_16_attributes(self):
        names = load_checklist()
        assert len(names) == 16
        assert "Necrosis Percentage" in names
        assert "Tumor Grade" in names

    def test_override_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"attributes": [{"name": "A", "definition": "d"}]}')
        assert load_checklist(path) == ["A"]


class TestExtractAttributes:
    def setup_method(self):
        self.checklist = ["Tumor Grade", "Necrosis Percentage", "Margin Status"]
        self.global_report = Report(source=ReportSource.GLOBAL, text="overview text")
        self.mag10 = [Report(source=ReportSource.MAG10, text=WORDS_A)]

    def test_full_answer_parsed(self):
        answer = "Tumor Grade: high grade\nNecrosis Percentage: approximately 20%\nMargin Status: clear"
        struct, warnings = extract_attributes(
            self.global_report, self.mag10, [], self.checklist, QueueBackend(chat=[answer])
        )
        assert struct.attributes == {
            "Tumor Grade": "high grade",
            "Necrosis Percentage": "approximately 20%",
            "Margin Status": "clear",
        }
        assert warnings == []

    def test_missing_key_filled_not_assessed(self):
        answer = "Tumor Grade: high grade\nMargin Status: clear"
        struct, warnings = extract_attributes(
            self.global_report, self.mag10, [], self.checklist, QueueBackend(chat=[answer])
        )
        assert struct.attributes["Necrosis Percentage"] == "not assessed"
        assert "missing_attribute:Necrosis Percentage" in warnings

    def test_unknown_key_dropped_with_warning(self):
        answer = "Tumor Grade: low grade\nBanana: yellow\nNecrosis Percentage: 5%\nMargin Status: clear"
        struct, warnings = extract_attributes(
            self.global_report, self.mag10, [], self.checklist, QueueBackend(chat=[answer])
        )
        assert "Banana" not in struct.attributes
        assert "unknown_attribute:Banana" in warnings

    def test_case_insensitive_matching(self):
        answer = "tumor grade: low\nNECROSIS PERCENTAGE: 1%\nmargin status: clear"
        struct, _ = extract_attributes(
            self.global_report, self.mag10, [], self.checklist, QueueBackend(chat=[answer])
        )
        assert struct.attributes["Tumor Grade"] == "low"

    def test_reprompt_then_parse_failure(self):
        backend = QueueBackend(chat=["no colon lines here", "again nothing"])
        with pytest.raises(ParseFailure):
            extract_attributes(self.global_report, self.mag10, [], self.checklist, backend)
        assert len(backend.chat_requests) == 2

    def test_reprompt_recovers(self):
        backend = QueueBackend(chat=["garbage", "Tumor Grade: high\nNecrosis Percentage: 3%\nMargin Status: clear"])
        struct, _ = extract_attributes(
            self.global_report, self.mag10, [], self.checklist, backend
        )
        assert struct.attributes["Tumor Grade"] == "high"


class TestSummarizeWsi:
    def test_round_trip(self):
        from survcase.types import StructuredWsiReport

        struct = StructuredWsiReport(attributes={"Tumor Grade": "high"}, summary="")
        report, flags = summarize_wsi(struct, QueueBackend(chat=["A short summary."]))
        assert report.text == "A short summary."
        assert report.source is ReportSource.WSI_SUMMARY
        assert flags == []

    def test_all_not_assessed_flagged_low_information(self):
        from survcase.types import StructuredWsiReport

        struct = StructuredWsiReport(
            attributes={"Tumor Grade": "not assessed", "Margin Status": "Not Assessed"},
            summary="",
        )
        _, flags = summarize_wsi(struct, QueueBackend(chat=["Nothing to report."]))
        assert flags == ["low_information_summary"]


class TestAnalyzeSlide:
    def test_full_flow_with_scripted_answers(self, tmp_path):
        manifest = build_three_tile_slide(tmp_path)
        checklist = ["Tumor Grade", "Necrosis Percentage"]
        backend = QueueBackend(
            describe=["Global overview text.", WORDS_A, WORDS_B, WORDS_C],
            chat=[
                "high",  # confidence for the surviving tile t2
                "Tumor Grade: high grade\nNecrosis Percentage: 10%",
                "Condensed slide summary.",
            ],
        )
        analysis = analyze_slide("case1", manifest, backend, checklist=checklist)
        assert analysis.global_report.text == "Global overview text."
        # visual near-duplicates t0/t1 dropped by the literal policy
        assert [r.subject_id for r in analysis.selected_mag10] == ["t2"]
        assert analysis.selected_mag10[0].confidence is Confidence.HIGH
        assert analysis.mag20_reports == ()
        assert analysis.structured.attributes["Tumor Grade"] == "high grade"
        assert analysis.summary.text == "Condensed slide summary."
        assert analysis.summary.subject_id == "case1"
        assert "region_fallback_full_slide" in analysis.flags

    def test_low_confidence_triggers_subtile_pass(self, tmp_path):
        b = SlideBuilder(tmp_path, "s3")
        b.add_tile(3, "overview", 0, 0, 32, 32)
        b.add_tile(2, "p0", 0, 0, 64, 64, embedding=unit_vector(16, 70))
        b.add_tile(1, "s0", 0, 0, 64, 64, embedding=unit_vector(16, 71))
        b.add_tile(1, "s1", 64, 64, 64, 64, embedding=unit_vector(16, 72))
        manifest = load_manifest(b.build())
        backend = QueueBackend(
            describe=["Global.", WORDS_A, WORDS_B, WORDS_C],
            chat=[
                "low",  # confidence for p0
                "Tumor Grade: g\nNecrosis Percentage: 1%",
                "Summary.",
            ],
        )
        analysis = analyze_slide(
            "case2", manifest, backend, checklist=["Tumor Grade", "Necrosis Percentage"]
        )
        assert {r.subject_id for r in analysis.mag20_reports} == {"s0", "s1"}
