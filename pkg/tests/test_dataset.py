"""Correction tuples, quality filter, sequence assembly masks, JSONL io,
and dataset reproducibility."""
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genshield_micro import dataset as ds
from genshield_micro.errors import ConfigError, DataFormatError
from genshield_micro.toyworld import GridConfig, REASON_TOK, STOP_TOK, region_rmse

GRID = GridConfig()


class TestCorrectionTuple:
    def test_alpha_half_is_elementwise_mean(self):
        tup = ds.build_correction_tuple(11, GRID, alphas=(0.5,))
        expected = 0.5 * (tup.artifact_image + tup.correct_image)
        assert np.allclose(tup.mid_images[0], expected, atol=1e-15)

    def test_mid_rmse_monotone_in_alpha(self):
        tup = ds.build_correction_tuple(12, GRID)
        r1 = region_rmse(tup.mid_images[0], tup.correct_image, tup.mask)
        r2 = region_rmse(tup.mid_images[1], tup.correct_image, tup.mask)
        r_art = region_rmse(tup.artifact_image, tup.correct_image, tup.mask)
        assert r_art > r1 > r2 > 0

    def test_mids_equal_clean_outside_mask(self):
        tup = ds.build_correction_tuple(13, GRID)
        for mid in tup.mid_images:
            assert np.array_equal(mid[:, ~tup.mask], tup.correct_image[:, ~tup.mask])

    def test_correct_image_is_clean_source(self):
        tup = ds.build_correction_tuple(14, GRID)
        from genshield_micro.toyworld import inject_artifact
        back, _ = inject_artifact(tup.correct_image, tup.spec, GRID)
        # re-injecting the spec reproduces the artifact image
        assert np.array_equal(back, tup.artifact_image)

    def test_texts(self):
        tup = ds.build_correction_tuple(15, GRID)
        assert tup.diag_ids[0] == REASON_TOK and len(tup.diag_ids) == 7
        assert tup.stop_ids[0] == STOP_TOK


class TestQualityFilter:
    @pytest.fixture(scope="class")
    def calib(self):
        return ds.calibrate_thresholds(0, GRID)

    def test_clean_candidate_accepted(self, calib):
        tup = ds.build_correction_tuple(20, GRID)
        ok, reason = ds.quality_filter(tup.correct_image, tup.correct_image,
                                       tup.mask, calib["tau_keep"])
        assert ok and reason is None

    def test_untouched_artifact_rejected_incomplete(self, calib):
        # calibration guarantees raw corruptions sit above tau_keep
        for i in range(12):
            rng = ds._record_rng(0, ds._SPLIT_CALIBRATION, i)
            img_seed = int(rng.integers(1 << 62))
            from genshield_micro.toyworld import (
                ArtifactSpec, CATEGORIES, MAGNITUDES, REGIONS, gen_clean, inject_artifact)
            clean = gen_clean(img_seed, GRID)
            spec = ArtifactSpec(CATEGORIES[i % 3], REGIONS[(i // 3) % 4],
                                MAGNITUDES[(i // 12) % 2], int(rng.integers(1 << 62)))
            corrupted, mask = inject_artifact(clean, spec, GRID)
            ok, reason = ds.quality_filter(corrupted, clean, mask, calib["tau_keep"])
            assert not ok and reason == "incomplete"

    def test_outside_noise_rejected_drift(self, calib):
        tup = ds.build_correction_tuple(21, GRID)
        tau = calib["tau_keep"]
        cand = tup.correct_image.copy()
        rng = np.random.default_rng(0)
        cand[:, ~tup.mask] += rng.uniform(3 * tau, 4 * tau, cand[:, ~tup.mask].shape)
        ok, reason = ds.quality_filter(cand, tup.correct_image, tup.mask, tau)
        assert not ok and reason == "drift"

    def test_shape_mismatch(self, calib):
        with pytest.raises(DataFormatError):
            ds.quality_filter(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)),
                              np.zeros((2, 3), bool), 0.1)

    def test_thresholds_positive_and_persisted_fields(self, calib):
        assert calib["tau_keep"] > 0
        assert set(calib["category_thresholds"]) == {"structure", "physics", "distortion"}
        assert all(v > 0 for v in calib["category_thresholds"].values())


class TestAssembly:
    @pytest.fixture(scope="class")
    def tup(self):
        return ds.build_correction_tuple(30, GRID)

    @pytest.fixture(scope="class")
    def det(self):
        return ds.build_detection_sample(0, 0, 1, GRID)

    def test_detect_layout(self, det):
        s = ds.assemble(det, "detect", GRID)
        kinds = [seg.kind for seg in s.seq.segments]
        assert kinds == ["img_cond", "prompt", "answer"]
        assert not s.seq.fm_loss_mask.any()
        assert s.seq.ar_loss_mask.sum() == len(det.answer_ids)
        assert s.seq.cond_len == 68
        assert s.fm_target is None

    def test_s1_layout(self, tup):
        s = ds.assemble(tup, "s1_correct", GRID)
        kinds = [seg.kind for seg in s.seq.segments]
        assert kinds == ["img_cond", "answer", "img_gen"]
        assert not s.seq.ar_loss_mask.any()
        assert s.seq.fm_loss_mask.sum() == 64
        assert np.array_equal(s.fm_target, tup.correct_image)

    def test_vcot_initial_layout_matches_counting_rule(self, tup):
        s = ds.assemble(tup, "vcot_initial", GRID)
        kinds = [seg.kind for seg in s.seq.segments]
        assert kinds == ["prompt", "img_cond", "answer", "img_gen"]
        # 4-token Q + 64 image tokens -> supervision starts at 68, 7 AR targets
        assert s.seq.cond_len == 68
        assert s.seq.ar_loss_mask.sum() == 7
        assert set(np.flatnonzero(s.seq.ar_loss_mask)) == set(range(68, 75))

    def test_vcot_intermediate_no_ar(self, tup):
        for mid_index in range(len(tup.mid_images)):
            s = ds.assemble(tup, "vcot_intermediate", GRID, mid_index=mid_index)
            assert not s.seq.ar_loss_mask.any()        # loss is FM only
            assert s.seq.fm_loss_mask.sum() == 64
            assert np.array_equal(s.cond_images[0], tup.mid_images[mid_index])
            assert np.array_equal(s.fm_target, tup.correct_image)

    def test_vcot_terminate_identity_supervision(self, tup):
        s = ds.assemble(tup, "vcot_terminate", GRID)
        assert np.array_equal(s.cond_images[0], tup.correct_image)
        assert np.array_equal(s.fm_target, tup.correct_image)
        assert s.seq.ar_loss_mask.sum() == len(tup.stop_ids)

    def test_unknown_state(self, tup):
        with pytest.raises(ConfigError):
            ds.assemble(tup, "nonsense", GRID)

    @pytest.mark.parametrize("state", ["detect", "s1_correct", "vcot_initial",
                                       "vcot_intermediate", "vcot_terminate"])
    def test_mask_invariants(self, state, tup, det):
        item = det if state == "detect" else tup
        s = ds.assemble(item, state, GRID)
        seq = s.seq
        for seg in seq.segments:
            sl = slice(seg.start, seg.start + seg.length)
            if seg.kind in ("prompt", "img_cond"):
                assert not seq.ar_loss_mask[sl].any()
            is_gen = seg.kind == "img_gen"
            assert seq.fm_loss_mask[sl].all() == is_gen or not is_gen
            assert seq.fm_loss_mask[sl].any() == is_gen
        supervised = np.flatnonzero(seq.ar_loss_mask | seq.fm_loss_mask)
        assert seq.cond_len == supervised[0]


class TestSerialization:
    def test_correction_round_trip(self):
        tup = ds.build_correction_tuple(40, GRID, index=7)
        again = ds.parse_correction(ds.serialize_correction(tup))
        assert again == tup

    def test_detection_round_trip(self):
        for i in (0, 1):
            s = ds.build_detection_sample(3, 0, i, GRID)
            assert ds.parse_detection(ds.serialize_detection(s)) == s

    def test_missing_spec_category_names_path(self):
        tup = ds.build_correction_tuple(41, GRID)
        rec = json.loads(ds.serialize_correction(tup))
        del rec["spec"]["category"]
        with pytest.raises(DataFormatError, match=r"spec\.category"):
            ds.parse_correction(json.dumps(rec), line_no=3)

    def test_malformed_json_reports_line(self):
        with pytest.raises(DataFormatError, match="line 12"):
            ds.parse_detection("{not json", line_no=12)

    def test_empty_file_is_empty_dataset(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert ds.load_detection(p) == []
        assert ds.load_correction(p) == []

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_round_trip_property(self, seed):
        tup = ds.build_correction_tuple(seed, GRID)
        assert ds.parse_correction(ds.serialize_correction(tup)) == tup


class TestGeneration:
    def test_record_reproducibility(self):
        a = ds.build_detection_sample(9, 0, 4, GRID)
        b = ds.build_detection_sample(9, 0, 4, GRID)
        assert a == b

    def test_generate_datasets_byte_identical(self, tmp_path):
        cfg = ds.DatasetConfig(n_train=12, n_test=6, n_train_correct=4,
                               n_test_correct=3, seed=2)
        ds.generate_datasets(tmp_path / "a", cfg)
        ds.generate_datasets(tmp_path / "b", cfg)
        for name in ("train_detect.jsonl", "train_correct.jsonl",
                     "test_detect.jsonl", "test_correct.jsonl",
                     "manifest.json", "vocab.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_balanced_labels(self, tmp_path):
        cfg = ds.DatasetConfig(n_train=20, n_test=10, n_train_correct=2,
                               n_test_correct=2, seed=0)
        ds.generate_datasets(tmp_path / "d", cfg)
        train = ds.load_detection(tmp_path / "d" / "train_detect.jsonl")
        assert sum(1 for s in train if s.label == "real") == 10
        for s in train:
            assert (s.label == "real") == (s.spec is None)

    def test_manifest_contents(self, tmp_path):
        cfg = ds.DatasetConfig(n_train=8, n_test=4, n_train_correct=2,
                               n_test_correct=2, seed=1)
        m = ds.generate_datasets(tmp_path / "d", cfg)
        loaded = ds.load_manifest(tmp_path / "d")
        assert loaded == m
        assert loaded["schema_version"] == 1
        assert loaded["tau_keep"] > 0
        assert ds.grid_from_manifest(loaded) == GRID

    def test_manifest_schema_version_checked(self, tmp_path):
        cfg = ds.DatasetConfig(n_train=4, n_test=2, n_train_correct=2,
                               n_test_correct=2, seed=1)
        ds.generate_datasets(tmp_path / "d", cfg)
        p = tmp_path / "d" / "manifest.json"
        m = json.loads(p.read_text())
        m["schema_version"] = 99
        p.write_text(json.dumps(m))
        with pytest.raises(DataFormatError):
            ds.load_manifest(tmp_path / "d")
