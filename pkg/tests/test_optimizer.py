"""Objective terms, gradients, descent behavior, and the estimator surface."""

import numpy as np
import pytest
from sklearn.base import clone

from openlens import (
    ConfigurationError,
    GradientUnsupported,
    Image,
    MaskExplainer,
    OptimizationConfig,
    ScorableSample,
    ShapeMismatch,
    ToyModel,
    btv_norm,
    joint_probability_score,
    make_baseline,
    objective_separate,
    objective_separate_grad,
    objective_single,
    objective_single_grad,
    optimize_separate_masks,
    optimize_single_mask,
    prediction_score,
)

from conftest import CountingAdapter, flat_cost_model, make_image, planted_case


def small_case(seed=0, image_hw=16, mask_hw=8):
    model, sample, inside, selected = planted_case(seed, image_hw=image_hw, region_hw=6)
    baseline = make_baseline(sample.image, "blank")
    config = OptimizationConfig(mask_resolution=(mask_hw, mask_hw))
    return model, sample, baseline, selected, config


class TestBtvNorm:
    def test_constant_mask_is_zero(self, rng):
        image = rng.uniform(0, 1, (6, 6))
        assert btv_norm(np.full((6, 6), 0.3), image, 0.1) == 0.0

    def test_single_pair_hand_value(self):
        # constant image -> weight exp(0) = 1; mask [[0, 1]] has one
        # horizontal pair with squared difference 1
        assert btv_norm(np.array([[0.0, 1.0]]), np.zeros((1, 2)), 1.0) == pytest.approx(1.0)

    def test_quadratic_homogeneity(self, rng):
        image = np.full((4, 4), 0.5)
        base = rng.integers(0, 2, (4, 4)).astype(float)
        v1 = btv_norm(base, image, 1.0)
        v2 = btv_norm(2.0 * base, image, 1.0)
        assert v2 == pytest.approx(4.0 * v1, rel=1e-12)

    def test_image_weighting_reduces_penalty_across_edges(self):
        mask = np.zeros((2, 2))
        mask[:, 1] = 1.0
        flat = np.full((2, 2), 0.5)
        edged = np.array([[0.1, 0.9], [0.1, 0.9]])
        assert btv_norm(mask, edged, 0.1) < btv_norm(mask, flat, 0.1)

    def test_image_downsampled_to_mask_grid(self, rng):
        mask = rng.uniform(0, 1, (4, 4))
        image = Image(rng.uniform(0, 1, (16, 16, 3)))
        value = btv_norm(mask, image, 0.1)
        assert np.isfinite(value) and value >= 0

    def test_bad_mask_shape(self):
        with pytest.raises(ShapeMismatch):
            btv_norm(np.zeros((2, 2, 2)), np.zeros((2, 2)), 0.1)


class TestObjectiveSingle:
    def test_all_ones_identities(self):
        model, sample, baseline, selected, config = small_case()
        out = objective_single(model, sample, baseline, np.ones((8, 8)), selected, config, 0)
        f_image = prediction_score(model, sample.image, sample.question,
                                   sample.answer_tokens, selected)
        f_base = prediction_score(model, Image(baseline.pixels), sample.question,
                                  sample.answer_tokens, selected)
        assert out.deletion_term == f_image
        assert out.insertion_term == f_base
        assert out.l1 == 0.0 and out.l2_decayed == 0.0 and out.btv == 0.0

    def test_all_zeros_identities(self):
        model, sample, baseline, selected, config = small_case()
        out = objective_single(model, sample, baseline, np.zeros((8, 8)), selected, config, 0)
        f_image = prediction_score(model, sample.image, sample.question,
                                   sample.answer_tokens, selected)
        f_base = prediction_score(model, Image(baseline.pixels), sample.question,
                                  sample.answer_tokens, selected)
        assert out.deletion_term == f_base
        assert out.insertion_term == f_image
        assert out.l1 == pytest.approx(1.0, abs=1e-15)  # mean-normalized
        assert out.l2_decayed == pytest.approx(1.0, abs=1e-15)
        assert out.btv == 0.0

    def test_decay_factor_definitional(self, rng):
        model, sample, baseline, selected, config = small_case()
        mask = rng.uniform(0, 1, (8, 8))
        at0 = objective_single(model, sample, baseline, mask, selected, config, 0)
        at10 = objective_single(model, sample, baseline, mask, selected, config, 10)
        assert abs(at10.l2_decayed - np.exp(-2.0) * at0.l2_decayed) < 1e-12

    def test_total_identity(self, rng):
        model, sample, baseline, selected, config = small_case()
        mask = rng.uniform(0, 1, (8, 8))
        out = objective_single(model, sample, baseline, mask, selected, config, 4)
        recomposed = (
            out.deletion_term
            - out.insertion_term
            + config.lambda1 * out.l1
            + config.lambda2 * out.l2_decayed
            + config.lambda3 * out.btv
        )
        assert abs(out.total - recomposed) < 1e-9
        assert out.l1 >= 0 and out.l2_decayed >= 0 and out.btv >= 0


class TestGradients:
    def test_single_mode_matches_finite_differences(self, rng):
        model, sample, baseline, selected, config = small_case()
        mask = rng.uniform(0.3, 0.7, (8, 8))
        grad = objective_single_grad(model, sample, baseline, mask, selected, config, 3)
        h = 1e-4
        for _ in range(10):
            i, j = rng.integers(0, 8, 2)
            up, dn = mask.copy(), mask.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd = (
                objective_single(model, sample, baseline, up, selected, config, 3).total
                - objective_single(model, sample, baseline, dn, selected, config, 3).total
            ) / (2 * h)
            assert abs(fd - grad[i, j]) <= 1e-3 * max(1e-8, abs(fd))

    def test_separate_mode_matches_finite_differences(self, rng):
        model, sample, baseline, selected, _ = small_case()
        config = OptimizationConfig(mask_resolution=(8, 8), mode="separate_masks")
        kx = rng.uniform(0.3, 0.7, (8, 8))
        ky = rng.uniform(0.3, 0.7, (8, 8))
        gx, gy = objective_separate_grad(model, sample, baseline, kx, ky, selected, config, 0)
        h = 1e-4
        for _ in range(5):
            i, j = rng.integers(0, 8, 2)
            upx, dnx = kx.copy(), kx.copy()
            upx[i, j] += h
            dnx[i, j] -= h
            fd = (
                objective_separate(model, sample, baseline, upx, ky, selected, config, 0).total
                - objective_separate(model, sample, baseline, dnx, ky, selected, config, 0).total
            ) / (2 * h)
            assert abs(fd - gx[i, j]) <= 1e-3 * max(1e-8, abs(fd))
            upy, dny = ky.copy(), ky.copy()
            upy[i, j] += h
            dny[i, j] -= h
            fd = (
                objective_separate(model, sample, baseline, kx, upy, selected, config, 0).total
                - objective_separate(model, sample, baseline, kx, dny, selected, config, 0).total
            ) / (2 * h)
            assert abs(fd - gy[i, j]) <= 1e-3 * max(1e-8, abs(fd))


class TestOptimizeSingleMask:
    def test_recovers_planted_region(self):
        model, sample, inside, selected = planted_case(0)
        baseline = make_baseline(sample.image, "blank")
        trace = optimize_single_mask(model, sample, baseline, selected, OptimizationConfig())
        heatmap = trace.final_mask.values
        assert heatmap[inside].mean() >= heatmap[~inside].mean() + 0.3

    def test_huge_l1_pins_keep_mask_at_ones(self):
        # zero visual signal: the L1 term dominates and the keep-mask never
        # deviates from all-ones, so the heatmap claims no saliency
        model = flat_cost_model(image_hw=16, vocab=8, n_regions=2)
        image = make_image(0, (16, 16, 3))
        sample = ScorableSample(image=image, question="q", answer_tokens=[0, 1, 2])
        baseline = make_baseline(image, "blank")
        config = OptimizationConfig(lambda1=1e6, steps=10, mask_resolution=(8, 8))
        trace = optimize_single_mask(model, sample, baseline, (1, 2), config)
        assert trace.keep_masks[-1].mean() >= 0.99
        assert trace.final_mask_lowres.values.mean() <= 0.01

    def test_backtracking_keeps_totals_non_increasing_without_decay(self):
        model, sample, inside, selected = planted_case(1)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig(lambda2=0.0)
        trace = optimize_single_mask(model, sample, baseline, selected, config)
        totals = trace.totals()
        assert np.all(np.diff(totals) <= 1e-12)

    def test_gnc_schedule_stored_exactly(self):
        model, sample, inside, selected = planted_case(2)
        baseline = make_baseline(sample.image, "blank")
        trace = optimize_single_mask(model, sample, baseline, selected, OptimizationConfig())
        for entry, keep in zip(trace.entries, trace.keep_masks):
            rms = np.sqrt(((1.0 - keep) ** 2).mean())
            assert abs(entry.l2_decayed - np.exp(-0.2 * entry.step) * rms) < 1e-12

    def test_objective_audit(self):
        model, sample, inside, selected = planted_case(3)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig()
        trace = optimize_single_mask(model, sample, baseline, selected, config)
        last = trace.entries[-1]
        recomputed = objective_single(
            model, sample, baseline, trace.keep_masks[-1], selected, config, last.step
        )
        assert abs(recomputed.total - last.total) < 1e-9

    def test_masks_stay_feasible(self):
        model, sample, inside, selected = planted_case(4)
        baseline = make_baseline(sample.image, "blank")
        trace = optimize_single_mask(model, sample, baseline, selected, OptimizationConfig())
        for keep in trace.keep_masks:
            assert keep.min() >= 0.0 and keep.max() <= 1.0
        assert trace.final_mask.values.min() >= 0.0
        assert trace.final_mask.values.max() <= 1.0

    def test_seeded_determinism_bitwise(self):
        model, sample, inside, selected = planted_case(5)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig()
        a = optimize_single_mask(model, sample, baseline, selected, config)
        b = optimize_single_mask(model, sample, baseline, selected, config)
        assert np.array_equal(a.final_mask.values, b.final_mask.values)
        assert a.totals().tolist() == b.totals().tolist()

    def test_trace_length_bounded_and_step_indices(self):
        model, sample, inside, selected = planted_case(6)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig(steps=12)
        trace = optimize_single_mask(model, sample, baseline, selected, config)
        assert len(trace.entries) <= 12
        assert [e.step for e in trace.entries] == list(range(len(trace.entries)))

    def test_wrong_mode_rejected(self):
        model, sample, inside, selected = planted_case(7)
        baseline = make_baseline(sample.image, "blank")
        with pytest.raises(ConfigurationError):
            optimize_single_mask(
                model, sample, baseline, selected,
                OptimizationConfig(mode="separate_masks"),
            )

    def test_gradientless_adapter_rejected(self):
        model, sample, inside, selected = planted_case(8)
        model.supports_gradients = False
        baseline = make_baseline(sample.image, "blank")
        with pytest.raises(GradientUnsupported):
            optimize_single_mask(model, sample, baseline, selected, OptimizationConfig())


class TestOptimizeSeparateMasks:
    def test_initial_combination_is_all_ones(self):
        model, sample, inside, selected = planted_case(9)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig(mode="separate_masks", steps=1, step_size=1e-12)
        trace = optimize_separate_masks(model, sample, baseline, selected, config)
        kx, ky = trace.variable_pairs[0]
        np.testing.assert_allclose(kx * ky, 1.0, atol=1e-9)

    def test_recovers_planted_region(self):
        model, sample, inside, selected = planted_case(10)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig(mode="separate_masks")
        trace = optimize_separate_masks(model, sample, baseline, selected, config)
        heatmap = trace.final_mask.values
        assert heatmap[inside].mean() > heatmap[~inside].mean()

    def test_final_mask_is_complement_of_combined_keep_mask(self):
        model, sample, inside, selected = planted_case(11)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig(mode="separate_masks", steps=5)
        trace = optimize_separate_masks(model, sample, baseline, selected, config)
        kx, ky = trace.variable_pairs[-1]
        np.testing.assert_allclose(
            trace.final_mask_lowres.values, 1.0 - kx * ky, atol=1e-12
        )

    def test_objective_audit_with_pair(self):
        model, sample, inside, selected = planted_case(12)
        baseline = make_baseline(sample.image, "blank")
        config = OptimizationConfig(mode="separate_masks", steps=8)
        trace = optimize_separate_masks(model, sample, baseline, selected, config)
        kx, ky = trace.variable_pairs[-1]
        last = trace.entries[-1]
        recomputed = objective_separate(
            model, sample, baseline, kx, ky, selected, config, last.step
        )
        assert abs(recomputed.total - last.total) < 1e-9

    def test_separate_total_uses_lambda2_for_btv(self, rng):
        model, sample, baseline, selected, _ = small_case()
        config = OptimizationConfig(mask_resolution=(8, 8), mode="separate_masks")
        kx = rng.uniform(0, 1, (8, 8))
        ky = rng.uniform(0, 1, (8, 8))
        out = objective_separate(model, sample, baseline, kx, ky, selected, config, 0)
        recomposed = (
            out.deletion_term
            - out.insertion_term
            + config.lambda1 * out.l1
            + config.lambda2 * out.btv
        )
        assert abs(out.total - recomposed) < 1e-9
        assert out.l2_decayed == 0.0


class TestCallCounts:
    def test_objective_call_counts_are_two_and_four(self):
        model, sample, baseline, selected, config = small_case()
        counting = CountingAdapter(model)
        objective_single(counting, sample, baseline, np.ones((8, 8)), selected, config, 0)
        assert counting.logprob_calls == 2
        counting2 = CountingAdapter(model)
        config2 = OptimizationConfig(mask_resolution=(8, 8), mode="separate_masks")
        objective_separate(
            counting2, sample, baseline, np.ones((8, 8)), np.ones((8, 8)),
            selected, config2, 0,
        )
        assert counting2.logprob_calls == 4

    def test_gradient_call_counts_are_two_and_four(self):
        model, sample, baseline, selected, config = small_case()
        counting = CountingAdapter(model)
        objective_single_grad(counting, sample, baseline, np.ones((8, 8)), selected, config, 0)
        assert counting.gradient_calls == 2
        counting2 = CountingAdapter(model)
        config2 = OptimizationConfig(mask_resolution=(8, 8), mode="separate_masks")
        objective_separate_grad(
            counting2, sample, baseline, np.ones((8, 8)), np.ones((8, 8)),
            selected, config2, 0,
        )
        assert counting2.gradient_calls == 4


class TestMaskExplainer:
    def test_fit_sets_artifacts(self):
        model, sample, inside, selected = planted_case(13)
        explainer = MaskExplainer(adapter=model, baseline="blank", steps=10)
        out = explainer.fit(sample)
        assert out is explainer
        assert explainer.heatmap_.shape == (32, 32)
        assert explainer.selected_indices_ == selected
        assert explainer.report_.selected_indices == selected
        assert len(explainer.trace_.entries) <= 10
        assert explainer.config_.mode == "single_mask"

    def test_get_params_and_clone(self):
        model, sample, inside, selected = planted_case(14)
        explainer = MaskExplainer(adapter=model, lambda2=0.5, steps=3)
        params = explainer.get_params()
        assert params["lambda2"] == 0.5 and params["steps"] == 3
        twin = clone(explainer)
        assert twin.get_params()["lambda2"] == 0.5
        twin.set_params(lambda2=0.0)
        assert twin.lambda2 == 0.0 and explainer.lambda2 == 0.5

    def test_single_token_answer_override(self):
        model, base_sample, inside, _ = planted_case(15)
        sample = ScorableSample(
            image=base_sample.image, question="q", answer_tokens=[1], sample_id="one"
        )
        explainer = MaskExplainer(adapter=model, baseline="blank", steps=5)
        explainer.fit(sample)
        assert explainer.selected_indices_ == (0,)
        assert explainer.report_.selected_indices == ()
        assert explainer.report_.score_original is not None

    def test_missing_adapter_is_config_error(self):
        model, sample, inside, selected = planted_case(16)
        with pytest.raises(ConfigurationError):
            MaskExplainer().fit(sample)

    def test_separate_mode_via_estimator(self):
        model, sample, inside, selected = planted_case(17)
        explainer = MaskExplainer(adapter=model, mode="separate_masks",
                                  baseline="blank", steps=5)
        explainer.fit(sample)
        assert explainer.trace_.variable_pairs is not None

    def test_explain_returns_heatmap(self):
        model, sample, inside, selected = planted_case(18)
        heatmap = MaskExplainer(adapter=model, baseline="blank", steps=5).explain(sample)
        assert heatmap.shape == (32, 32)
