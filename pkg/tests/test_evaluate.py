"""Metric oracles, bootstrap statistics and the ablation report."""
import dataclasses
import json

import numpy as np
import pytest

from ctpredict.evaluate import (
    AblationRow,
    CaseMetrics,
    ablation_csv,
    ablation_markdown,
    ablation_table,
    aif_sensitivity,
    bland_altman_pairs,
    containment_fraction,
    dice_score,
    evaluate_case,
    evaluate_cohort,
    paired_bootstrap_p,
    pearson_r,
    pr_auc,
    predict_with_metadata,
    predicted_volume_ml,
    scenario_bounds,
    significance_stars,
    summarize,
    volume_ml,
    write_ablation_report,
)
from ctpredict.network import VARIANTS, build_model
from ctpredict.phantom import PhantomConfig, TreatmentMetadata, generate_case, write_case
from ctpredict.preprocess import PreprocConfig, preprocess_case
from ctpredict.training import make_training_case

MINI_WIDTHS = {"path1": 3, "path2": 4, "aif": 3, "head": 5}


@pytest.fixture(scope="module")
def tcase(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_cases")
    write_case(generate_case(PhantomConfig(), seed=5), root / "c5")
    pre = preprocess_case(root / "c5", PreprocConfig(motion_correct=False), root / "p5")
    return make_training_case(pre, VARIANTS["proposed"])


@pytest.fixture(scope="module")
def tcase2(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_cases2")
    write_case(generate_case(PhantomConfig(), seed=6), root / "c6")
    pre = preprocess_case(root / "c6", PreprocConfig(motion_correct=False), root / "p6")
    return make_training_case(pre, VARIANTS["proposed"])


class TestBasicMetrics:
    def test_dice_hand_values(self):
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([1, 0, 1, 0], dtype=bool)
        assert dice_score(a, b) == pytest.approx(0.5)
        assert dice_score(a, a) == 1.0
        assert dice_score(a, ~a) == 0.0
        assert dice_score(np.zeros(3, bool), np.zeros(3, bool)) == 1.0

    def test_volume_in_milliliters(self):
        field = np.zeros((10, 10, 2))
        field[:5, :5, 0] = 1.0
        # 25 voxels of 1.5*1.5*4 mm^3 = 9 microliters each
        assert volume_ml(field, (1.5, 1.5, 4.0)) == pytest.approx(0.225)

    def test_probabilistic_volume(self):
        spacing = (1.5, 1.5, 4.0)
        prob = np.zeros((20, 10, 10))
        assert predicted_volume_ml(prob, spacing) == 0.0
        prob[:10] = 1.0  # 1000 voxels of 9 microliters
        assert predicted_volume_ml(prob, spacing) == pytest.approx(9.0)
        assert predicted_volume_ml(0.5 * prob, spacing) == pytest.approx(4.5)

    def test_probabilistic_volume_respects_mask(self):
        prob = np.full((4, 4, 1), 0.5)
        mask = np.zeros((4, 4, 1), bool)
        mask[0, 0, 0] = True
        assert predicted_volume_ml(prob, (10.0, 10.0, 10.0), mask) == pytest.approx(0.5)

    def test_pr_auc_hand_case(self):
        p = np.array([0.9, 0.8, 0.7, 0.6])
        y = np.array([1.0, 0.0, 1.0, 0.0])
        m = np.ones(4, bool)
        # precision at the two hits: 1/1 and 2/3
        assert pr_auc(p, y, m) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_pr_auc_perfect_and_inverted(self):
        y = np.concatenate([np.ones(10), np.zeros(90)])
        p = np.linspace(1, 0, 100)
        m = np.ones(100, bool)
        assert pr_auc(p, y, m) == pytest.approx(1.0)
        assert pr_auc(1 - p, y, m) < 0.3

    def test_pr_auc_random_scores_approach_prevalence(self):
        rng = np.random.default_rng(0)
        y = (rng.random(4000) < 0.2).astype(float)
        p = rng.random(4000)
        auc = pr_auc(p, y, np.ones(4000, bool))
        assert abs(auc - 0.2) < 0.05

    def test_pr_auc_without_positives_is_nan(self):
        assert np.isnan(pr_auc(np.array([0.5]), np.array([0.0]), np.array([True])))


class TestPairedBootstrap:
    def test_identical_scores_give_p_one(self):
        a = np.linspace(0.5, 0.9, 12)
        assert paired_bootstrap_p(a, a.copy(), 2000, seed=1) == 1.0

    def test_clear_difference_is_significant(self):
        rng = np.random.default_rng(2)
        b = 0.6 + 0.02 * rng.standard_normal(20)
        a = b + 0.15
        p = paired_bootstrap_p(a, b, 4000, seed=2)
        assert p < 0.005

    def test_smoothing_floors_the_p_value(self):
        rng = np.random.default_rng(3)
        b = 0.5 + 0.001 * rng.standard_normal(10)
        a = b + 1.0
        p = paired_bootstrap_p(a, b, 999, seed=3)
        assert p >= 1.0 / 1000.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        a = rng.random(15)
        b = a + 0.05 * rng.standard_normal(15)
        assert paired_bootstrap_p(a, b, 500, seed=7) == paired_bootstrap_p(
            a, b, 500, seed=7
        )

    def test_rejects_mismatched_vectors(self):
        with pytest.raises(ValueError):
            paired_bootstrap_p(np.ones(3), np.ones(4))

    def test_star_thresholds(self):
        assert significance_stars(0.051) == ""
        assert significance_stars(0.049) == "*"
        assert significance_stars(0.0049) == "**"


class TestPearson:
    def test_hand_value(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert pearson_r(x, 2 * x + 1) == pytest.approx(1.0)
        assert pearson_r(x, -x) == pytest.approx(-1.0)
        y = np.array([1.0, 3.0, 2.0, 4.0])
        assert pearson_r(x, y) == pytest.approx(0.8)

    def test_identical_vectors_are_one(self):
        v = np.array([5.0, 5.0, 5.0])
        assert pearson_r(v, v.copy()) == 1.0

    def test_constant_vector_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            pearson_r(np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0, 3.0]))


class TestScenarios:
    def test_metadata_changes_the_prediction(self, tcase):
        model = build_model("proposed", 30, seed=1, widths=MINI_WIDTHS)
        meta = TreatmentMetadata(120.0, 90.0, "2b", False)
        flipped = dataclasses.replace(meta, mtici="0", occluded_at_24h=True)
        pa = predict_with_metadata(model, tcase, meta)
        pb = predict_with_metadata(model, tcase, flipped)
        assert pa.shape == tcase.shape
        assert np.any(pa != pb)
        # the stored case is untouched
        assert tcase.meta.shape == (4,)

    def test_bounds_are_binary_and_masked(self, tcase):
        model = build_model("proposed", 30, seed=2, widths=MINI_WIDTHS)
        meta = TreatmentMetadata(180.0, 120.0, "2a", True)
        core, lesion, actual = scenario_bounds(model, tcase, meta)
        for field in (core, lesion, actual):
            assert field.dtype == bool and field.shape == tcase.shape
        outside = ~(tcase.mask[12:-12, 12:-12, 8:-8] > 0.5)
        assert not np.any(core[outside]) and not np.any(lesion[outside])

    def test_containment_fraction_hand_values(self):
        core = np.array([True, True, False])
        lesion = np.array([True, True, True])
        assert containment_fraction(core, lesion) == 1.0
        assert containment_fraction(np.array([True, False]), np.array([False, True])) == 0.0
        assert containment_fraction(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


class TestCohortEvaluation:
    def test_case_metrics_fields(self, tcase):
        model = build_model("proposed", 30, seed=3, widths=MINI_WIDTHS)
        m = evaluate_case(model, tcase, spacing=(1.5, 1.5, 4.0))
        assert m.case_id == tcase.case_id
        assert 0.0 <= m.dice <= 1.0
        assert 0.0 <= m.soft_dice <= 1.0
        assert m.true_ml > 0
        assert m.predicted_ml >= 0
        assert m.thresholded_ml >= 0
        assert m.volume_error_ml == pytest.approx(m.predicted_ml - m.true_ml)
        assert m.abs_volume_error_ml == abs(m.volume_error_ml)

    def test_summary_keys(self, tcase):
        model = build_model("proposed", 30, seed=3, widths=MINI_WIDTHS)
        s = summarize(evaluate_cohort(model, [tcase], (1.5, 1.5, 4.0)))
        assert s["n_cases"] == 1
        for key in ("mean_dice", "mean_soft_dice", "volume_mae_ml", "mean_true_ml"):
            assert np.isfinite(s[key])

    def test_bland_altman_pairs(self, tcase):
        model = build_model("proposed", 30, seed=3, widths=MINI_WIDTHS)
        metrics = evaluate_cohort(model, [tcase], (1.5, 1.5, 4.0))
        pairs = bland_altman_pairs(metrics)
        assert len(pairs) == 1
        mean, diff = pairs[0]
        m = metrics[0]
        assert mean == pytest.approx(0.5 * (m.predicted_ml + m.true_ml))
        assert diff == pytest.approx(m.volume_error_ml)


class TestAifSensitivity:
    def test_identical_annotation_is_neutral(self, tcase, tcase2):
        model = build_model("proposed", 30, seed=4, widths=MINI_WIDTHS)
        cases = [tcase, tcase2]
        report = aif_sensitivity(model, cases, [c.aif.copy() for c in cases], (1.5, 1.5, 4.0))
        assert len(report.rows) == 2
        assert report.mean_abs_diff_ml == 0.0
        assert report.correlation == 1.0

    def test_perturbed_annotation_moves_the_volume(self, tcase, tcase2):
        model = build_model("proposed", 30, seed=4, widths=MINI_WIDTHS)
        cases = [tcase, tcase2]
        report = aif_sensitivity(model, cases, [1.3 * c.aif for c in cases], (1.5, 1.5, 4.0))
        assert report.mean_abs_diff_ml > 0.0
        assert -1.0 <= report.correlation <= 1.0

    def test_requires_one_curve_per_case(self, tcase):
        model = build_model("proposed", 30, seed=4, widths=MINI_WIDTHS)
        with pytest.raises(ValueError, match="per case"):
            aif_sensitivity(model, [tcase], [], (1.5, 1.5, 4.0))


def _cohort_metrics(dice_scores, errs):
    """Synthetic per-case metrics with the given Dice and |volume error|."""
    return [
        CaseMetrics(f"c{i:02d}", float(d), float(d), 0.5, float(e), float(e), 0.0)
        for i, (d, e) in enumerate(zip(dice_scores, errs))
    ]


class TestAblationReport:
    def _rows(self):
        rng = np.random.default_rng(5)
        base = 0.75 + 0.02 * rng.standard_normal(18)
        jitter = rng.standard_normal(18)
        jitter -= jitter.mean()  # exact null: offset far below the noise
        dice = {
            "proposed": base,
            "one_voxel": base - 0.20,  # clearly worse
            "no_lores": base - 0.005 + 0.05 * jitter,
        }
        err = {
            "proposed": np.full(18, 2.0),
            "one_voxel": np.full(18, 5.0),
            "no_lores": np.full(18, 2.5),
        }
        metrics = {k: _cohort_metrics(dice[k], err[k]) for k in dice}
        return ablation_table(metrics, n_resamples=3000, seed=5)

    def test_baseline_first_and_unstarred(self):
        rows = self._rows()
        assert rows[0].name == "proposed"
        assert rows[0].p_vs_baseline is None and rows[0].stars == ""
        assert rows[0].mae_increase_pct == 0.0

    def test_detects_the_clear_regression(self):
        rows = {r.name: r for r in self._rows()}
        assert rows["one_voxel"].p_vs_baseline < 0.005
        assert rows["one_voxel"].stars == "**"
        assert rows["no_lores"].p_vs_baseline > 0.05

    def test_mae_increase_relative_to_baseline(self):
        rows = {r.name: r for r in self._rows()}
        assert rows["one_voxel"].mae_increase_pct == pytest.approx(150.0)
        assert rows["no_lores"].mae_increase_pct == pytest.approx(25.0)

    def test_rejects_misaligned_rows(self):
        with pytest.raises(ValueError, match="aligned"):
            ablation_table(
                {
                    "proposed": _cohort_metrics(np.ones(5), np.ones(5)),
                    "one_voxel": _cohort_metrics(np.ones(6), np.ones(6)),
                }
            )

    def test_report_files(self, tmp_path):
        rows = self._rows()
        write_ablation_report(rows, tmp_path)
        md = (tmp_path / "ablation.md").read_text()
        assert "| proposed |" in md and "| one_voxel |" in md
        csv_text = (tmp_path / "ablation.csv").read_text()
        assert csv_text.splitlines()[0].startswith("configuration,")
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert {r["name"] for r in doc} == {"proposed", "one_voxel", "no_lores"}

    def test_markdown_and_csv_render_all_rows(self):
        rows = [
            AblationRow("proposed", 0.7, 0.8, 0.6, 2.0, 0.0, None),
            AblationRow("one_voxel", 0.5, 0.6, 0.4, 5.0, 150.0, 0.001),
        ]
        md = ablation_markdown(rows)
        assert md.count("\n") == 4
        assert "0.0010**" in md
        assert "+150%" in md
        assert "one_voxel,0.500000,0.600000" in ablation_csv(rows)
