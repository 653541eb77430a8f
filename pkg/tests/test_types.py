"""Core type invariants and serialization round-trips."""

import json

import numpy as np
import pytest

from openlens import (
    EvaluationCurve,
    Image,
    InvariantViolation,
    Mask,
    OptimizationConfig,
    ScorableSample,
    TokenRecord,
    validate_sample,
)

from conftest import make_image


def sample_with_records(n_tokens=3):
    image = make_image(0, (8, 8, 3))
    records = [
        TokenRecord.from_logps(i, 10 + i, -0.5 * (i + 1), -1.0 * (i + 1))
        for i in range(n_tokens)
    ]
    return ScorableSample(
        image=image,
        question="q",
        answer_tokens=[10 + i for i in range(n_tokens)],
        records=records,
        sample_id="s",
    )


class TestValidateSample:
    def test_well_formed_sample_is_identity(self):
        sample = sample_with_records(3)
        assert validate_sample(sample) is sample

    def test_pixel_out_of_range_rejected_at_construction(self):
        bad = np.full((4, 4, 3), 1.5)
        with pytest.raises(InvariantViolation, match="pixel range"):
            Image(bad)

    def test_pixel_out_of_range_caught_by_validate(self):
        sample = sample_with_records(3)
        corrupt = np.asarray(sample.image.pixels).copy()
        corrupt[0, 0, 0] = 1.5
        object.__setattr__(sample.image, "pixels", corrupt)
        with pytest.raises(InvariantViolation, match="pixel range"):
            validate_sample(sample)

    def test_record_misalignment(self):
        sample = sample_with_records(3)
        broken = ScorableSample(
            image=sample.image,
            question=sample.question,
            answer_tokens=sample.answer_tokens,
            records=sample.records[:2],
        )
        with pytest.raises(InvariantViolation, match="record alignment"):
            validate_sample(broken)

    def test_record_token_mismatch(self):
        sample = sample_with_records(2)
        rewired = ScorableSample(
            image=sample.image,
            question=sample.question,
            answer_tokens=(10, 99),
            records=sample.records,
        )
        with pytest.raises(InvariantViolation, match="record alignment"):
            validate_sample(rewired)


class TestImageAndMask:
    def test_shape_properties(self):
        image = make_image(1, (6, 7, 3))
        assert (image.height, image.width, image.channels) == (6, 7, 3)

    def test_arrays_are_immutable(self):
        image = make_image(1, (4, 4, 3))
        with pytest.raises(ValueError):
            np.asarray(image.pixels)[0, 0, 0] = 0.2
        mask = Mask(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            np.asarray(mask.values)[0, 0] = 0.3

    def test_mask_range_enforced(self):
        with pytest.raises(InvariantViolation):
            Mask(np.full((3, 3), -0.1))
        with pytest.raises(InvariantViolation):
            Mask(np.full((3, 3), np.nan))

    def test_npy_roundtrip_bit_identical(self, tmp_path, rng):
        arr = rng.uniform(0, 1, (5, 6, 3))
        image = Image(arr)
        path = tmp_path / "img.npy"
        np.save(path, np.asarray(image.pixels))
        back = Image(np.load(path))
        assert np.array_equal(np.asarray(back.pixels), np.asarray(image.pixels))


class TestTokenRecord:
    def test_llr_is_exact_difference(self):
        rec = TokenRecord.from_logps(2, 7, -0.25, -1.5)
        assert rec.llr == -0.25 - (-1.5)

    def test_inconsistent_llr_rejected(self):
        with pytest.raises(InvariantViolation):
            TokenRecord(index=1, token_id=3, logp_original=-1.0, logp_baseline=-2.0, llr=0.5)

    def test_positive_logprob_rejected(self):
        with pytest.raises(InvariantViolation):
            TokenRecord.from_logps(0, 1, 0.2, -1.0)

    def test_first_token_cannot_be_selected(self):
        with pytest.raises(InvariantViolation):
            TokenRecord(
                index=0, token_id=1, logp_original=-1.0, logp_baseline=-3.0,
                llr=2.0, selected=True,
            )

    def test_json_roundtrip_bit_identical(self):
        rec = TokenRecord.from_logps(3, 11, -0.123456789123456, -2.71828182845904)
        back = TokenRecord.from_jsonable(json.loads(json.dumps(rec.to_jsonable())))
        assert back == rec


class TestOptimizationConfig:
    def test_defaults(self):
        cfg = OptimizationConfig()
        assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (1.0, 0.1, 10.0)
        assert cfg.gamma == 0.2
        assert cfg.steps == 30 and cfg.step_size == 1.0
        assert cfg.mask_resolution == (28, 28)
        assert cfg.mode == "single_mask"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lambda1": -1.0},
            {"gamma": 0.0},
            {"steps": 0},
            {"step_size": 0.0},
            {"mask_resolution": (0, 5)},
            {"mode": "both"},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(InvariantViolation):
            OptimizationConfig(**kwargs)

    def test_json_roundtrip_bit_identical(self):
        cfg = OptimizationConfig(lambda2=0.30000000000000004, mask_resolution=(14, 15))
        back = OptimizationConfig.from_jsonable(json.loads(json.dumps(cfg.to_jsonable())))
        assert back == cfg


class TestEvaluationCurve:
    def test_auc_is_trapezoid(self):
        curve = EvaluationCurve.from_points("deletion", [0, 0.5, 1.0], [1.0, 0.4, 0.0])
        assert curve.auc == pytest.approx(0.5 * (1.4 / 2) + 0.5 * (0.4 / 2), abs=1e-12)

    def test_fractions_must_strictly_increase(self):
        with pytest.raises(InvariantViolation):
            EvaluationCurve.from_points("deletion", [0, 0.5, 0.5, 1.0], [1, 1, 1, 0])
        with pytest.raises(InvariantViolation):
            EvaluationCurve.from_points("insertion", [0.1, 0.5, 1.0], [0, 0.5, 1])

    def test_stored_auc_checked(self):
        with pytest.raises(InvariantViolation):
            EvaluationCurve("deletion", ((0.0, 1.0), (1.0, 0.0)), auc=0.9)

    def test_json_roundtrip_bit_identical(self, rng):
        fr = np.linspace(0, 1, 9)
        sc = rng.normal(size=9)
        curve = EvaluationCurve.from_points("insertion", fr, sc)
        back = EvaluationCurve.from_jsonable(json.loads(json.dumps(curve.to_jsonable())))
        assert back == curve
