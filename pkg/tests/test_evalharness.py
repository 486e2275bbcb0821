"""Metrics against brute-force oracles, perturbation identities, oracle
artifact scoring, and report emission."""
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genshield_micro import dataset as ds
from genshield_micro import evalharness as ev
from genshield_micro.errors import ConfigError
from genshield_micro.toyworld import GridConfig, gen_clean, region_rmse

GRID = GridConfig()


def brute_force_ap(scores, labels):
    """All-thresholds PR enumeration, ties grouped, step-wise area."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    ap = 0.0
    prev_r = 0.0
    for t in sorted(set(scores), reverse=True):
        sel = scores >= t
        tp = int(((labels == 1) & sel).sum())
        fp = int(((labels == 0) & sel).sum())
        p = tp / (tp + fp)
        r = tp / n_pos
        ap += (r - prev_r) * p
        prev_r = r
    return ap


class TestAccuracy:
    def test_fraction_correct(self):
        assert ev.accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75

    def test_empty_error(self):
        with pytest.raises(ConfigError):
            ev.accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            ev.accuracy([1], [1, 0])


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert ev.average_precision([0.9, 0.8], [1, 0]) == 1.0

    def test_inverted_pair(self):
        # thresholds 0.8 then 0.2: P=[0, 0.5], R=[0, 1]
        assert ev.average_precision([0.8, 0.2], [0, 1]) == 0.5

    def test_three_point_example(self):
        val = ev.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
        assert val == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-12)
        assert val == pytest.approx(0.8333, abs=1e-4)

    def test_tied_scores_grouped(self):
        val = ev.average_precision([0.5, 0.5, 0.1], [1, 0, 1])
        assert val == brute_force_ap([0.5, 0.5, 0.1], [1, 0, 1])

    @given(n=st.integers(2, 200), seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, n, seed):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.random(n), 2)  # induces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert ev.average_precision(scores, labels) == pytest.approx(
            brute_force_ap(scores, labels), abs=1e-12)

    def test_single_class_error(self):
        with pytest.raises(ConfigError):
            ev.average_precision([0.1, 0.2], [1, 1])

    def test_empty_error(self):
        with pytest.raises(ConfigError):
            ev.average_precision([], [])


class TestOracleScore:
    @pytest.fixture(scope="class")
    def setup(self):
        calib = ds.calibrate_thresholds(0, GRID)
        tup = ds.build_correction_tuple(50, GRID)
        return calib["category_thresholds"], tup

    def test_clean_scores_zero(self, setup):
        th, tup = setup
        sc = ev.oracle_artifact_score(tup.correct_image, tup.correct_image,
                                      tup.mask, tup.spec, th)
        assert sc["mean"] == 0.0

    def test_untouched_corruption_scores_one(self):
        # calibration-set corruptions sit above their category threshold
        calib = ds.calibrate_thresholds(0, GRID)
        th = calib["category_thresholds"]
        from genshield_micro.toyworld import (
            ArtifactSpec, CATEGORIES, MAGNITUDES, REGIONS, inject_artifact)
        for i in range(9):
            rng = ds._record_rng(0, ds._SPLIT_CALIBRATION, i)
            clean = gen_clean(int(rng.integers(1 << 62)), GRID)
            spec = ArtifactSpec(CATEGORIES[i % 3], REGIONS[(i // 3) % 4],
                                MAGNITUDES[(i // 12) % 2], int(rng.integers(1 << 62)))
            corrupted, mask = inject_artifact(clean, spec, GRID)
            sc = ev.oracle_artifact_score(corrupted, clean, mask, spec, th)
            assert sc[spec.category] == 1

    def test_outside_noise_flags_other_category(self, setup):
        th, tup = setup
        cand = tup.correct_image.copy()
        rng = np.random.default_rng(1)
        outside = ~tup.mask
        cand[:, outside] += rng.uniform(0.5, 0.8, cand[:, outside].shape)
        sc = ev.oracle_artifact_score(np.clip(cand, -1, 1), tup.correct_image,
                                      tup.mask, tup.spec, th)
        others = [c for c in ("structure", "physics", "distortion") if c != tup.spec.category]
        assert all(sc[c] == 1 for c in others)

    def test_invariant_to_outside_change_for_spec_clause(self, setup):
        th, tup = setup
        a = ev.oracle_artifact_score(tup.artifact_image, tup.correct_image,
                                     tup.mask, tup.spec, th)[tup.spec.category]
        messed = tup.artifact_image.copy()
        messed[:, ~tup.mask] = 0.0
        b = ev.oracle_artifact_score(messed, tup.correct_image,
                                     tup.mask, tup.spec, th)[tup.spec.category]
        assert a == b


class TestPerturbations:
    def test_quantize_q3_example(self):
        img = np.full((1, 2, 2), 0.4)
        out = ev.quantize(img, 3)  # levels {-1, 0, 1}
        assert np.array_equal(out, np.zeros_like(img))

    @given(q=st.sampled_from([2, 3, 8, 16]), seed=st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_quantize_idempotent(self, q, seed):
        img = gen_clean(seed, GRID)
        once = ev.quantize(img, q)
        assert np.array_equal(ev.quantize(once, q), once)

    def test_blur_constant_invariant(self):
        img = np.full(GRID.shape, 0.3)
        for sigma in (1.0, 2.0):
            out = ev.gaussian_blur(img, sigma)
            assert np.max(np.abs(out - img)) < 1e-12

    def test_blur_smooths(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(-1, 1, GRID.shape)
        out = ev.gaussian_blur(img, 1.0)
        assert out.std() < img.std()

    def test_pool_example(self):
        img = np.zeros((1, 2, 2))
        img[0] = [[1, 1], [3, 3]]
        out = ev.resize_half(img)
        assert np.array_equal(out, np.full((1, 2, 2), 2.0))

    def test_resize_odd_rejected(self):
        with pytest.raises(ConfigError):
            ev.resize_half(np.zeros((1, 3, 4)))

    def test_perturb_dispatch_and_none(self):
        img = gen_clean(1, GRID)
        assert ev.perturb(img, ev.PerturbationSpec("none")) is img
        assert ev.perturb(img, ev.PerturbationSpec("quantize", 8)).shape == img.shape
        with pytest.raises(ConfigError):
            ev.perturb(img, ev.PerturbationSpec("jpeg", 75))

    def test_perturbed_stays_in_range(self):
        img = gen_clean(2, GRID)
        for name, p in ev.ROBUSTNESS_ROWS:
            if p is None:
                continue
            out = ev.perturb(img, ev.PerturbationSpec(p[0], p[1]))
            assert np.max(np.abs(out)) <= 1.0 + 1e-12


class TestReports:
    @pytest.fixture()
    def report(self):
        return {
            "schema_version": 1,
            "detection": {"accuracy": 0.97, "average_precision": 0.99, "n": 100},
            "robustness": {"none": 0.97, "quantQ16": 0.95, "quantQ8": 0.92,
                           "blur_sigma1.0": 0.94, "blur_sigma2.0": 0.9,
                           "resize_half": 0.91},
            "correction": {
                "n": 50, "region_rmse_before": 0.4, "region_rmse_after_single": 0.1,
                "region_rmse_after_multi": 0.08, "rmse_reduction_single": 0.75,
                "oracle_single": {"structure": 0.2, "physics": 0.1, "distortion": 0.3,
                                  "mean": 0.2},
                "oracle_multi": {"structure": 0.1, "physics": 0.1, "distortion": 0.2,
                                 "mean": 0.1333},
            },
            "termination": {"n": 50, "stop_round1_rate": 0.95},
            # the shape reported for the original system: most inputs stop in
            # round two; format illustration for the histogram emitter
            "step_histogram": {"2": 0.798, "3": 0.115, "4": 0.066,
                               "5": 0.018, "6": 0.003},
        }

    def test_csv_format(self, report, tmp_path):
        path = tmp_path / "report.csv"
        ev.write_report(report, path, "csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "metric,subset,value"
        assert lines[1].startswith("accuracy,clean,")
        rows = {tuple(l.split(",")[:2]) for l in lines[1:]}
        assert ("accuracy", "quantQ16") in rows
        assert ("accuracy", "resize_half") in rows
        assert ("step_histogram", "2") in rows

    def test_json_round_trip(self, report, tmp_path):
        path = tmp_path / "report.json"
        ev.write_report(report, path, "json")
        assert json.loads(path.read_text()) == report

    def test_histogram_figure(self, report, tmp_path):
        from genshield_micro import figures
        written = figures.render_report_figures(report, tmp_path)
        names = {p.name for p in written}
        assert {"step_histogram.png", "robustness.png", "oracle_scores.png"} <= names
        for p in written:
            assert p.stat().st_size > 0

    def test_unknown_format(self, report, tmp_path):
        with pytest.raises(ConfigError):
            ev.write_report(report, tmp_path / "r.xml", "xml")


class TestEvaluate:
    def test_end_to_end_structure(self, tmp_path):
        from genshield_micro import model as m
        from genshield_micro import trainer as tr
        cfg = ds.DatasetConfig(n_train=8, n_test=6, n_train_correct=2,
                               n_test_correct=3, seed=5)
        ds.generate_datasets(tmp_path / "d", cfg)
        tcfg = tr.TrainingConfig(d_model=16, n_layers=1, n_heads=2)
        mcfg = tcfg.model_config(GRID)
        params = m.init_params(mcfg, seed=0)
        opts = ev.EvalOptions(robustness=True, max_rounds=2, flow_steps=2)
        report = ev.evaluate(params, mcfg, tmp_path / "d", opts)
        # the "none" robustness row is the clean accuracy, bit-exactly
        assert report["robustness"]["none"] == report["detection"]["accuracy"]
        for name, _ in ev.ROBUSTNESS_ROWS:
            assert name in report["robustness"]
        assert abs(sum(report["step_histogram"].values()) - 1.0) < 1e-9
        assert report["correction"]["n"] == 3
        assert report["schema_version"] == 1

    def test_grid_mismatch_rejected(self, tmp_path):
        from genshield_micro import model as m
        from genshield_micro import trainer as tr
        from genshield_micro.errors import DataFormatError
        cfg = ds.DatasetConfig(n_train=4, n_test=2, n_train_correct=2,
                               n_test_correct=2, seed=5)
        ds.generate_datasets(tmp_path / "d", cfg)
        tcfg = tr.TrainingConfig(d_model=16, n_layers=1, n_heads=2)
        mcfg = tcfg.model_config(GridConfig(channels=2, height=4, width=8))
        params = m.init_params(mcfg, seed=0)
        with pytest.raises(DataFormatError):
            ev.evaluate(params, mcfg, tmp_path / "d", ev.EvalOptions())
