"""Shared fixtures: constructed toy models, stub adapters, planted cases."""

import json
from pathlib import Path

import numpy as np
import pytest

from openlens import Image, ScorableSample, ToyModel
from openlens.adapters import ModelAdapter


def make_image(seed, shape=(16, 16, 3), low=0.0, high=1.0):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(low, high, shape))


def uniform_toy(vocab_size=10, image_shape=(8, 8, 3)):
    """Constant logits: every conditional distribution is uniform over V."""
    h, w, _ = image_shape
    return ToyModel(
        image_shape=image_shape,
        regions=[(0, 0, h, w)],
        emission=np.zeros((1, vocab_size)),
    )


def planted_case(seed, image_hw=32, region_hw=10, vocab=8, gain=14.0, n_tokens=5):
    """ToyModel whose selected-token score depends only on one bright planted
    region; returns (model, sample, inside_mask, selected_indices)."""
    rng = np.random.default_rng(seed)
    H = W = image_hw
    rh = rw = region_hw
    top = int(rng.integers(2, H - rh - 2))
    left = int(rng.integers(2, W - rw - 2))
    pixels = rng.uniform(0.0, 0.25, (H, W, 3))
    pixels[top : top + rh, left : left + rw] = rng.uniform(0.75, 1.0, (rh, rw, 3))
    emission = np.zeros((1, vocab))
    emission[0, 1] = gain
    model = ToyModel(
        image_shape=(H, W, 3), regions=[(top, left, rh, rw)], emission=emission
    )
    sample = ScorableSample(
        image=Image(pixels),
        question="what stands out?",
        answer_tokens=[0] + [1] * n_tokens,
        sample_id=f"planted-{seed}",
    )
    inside = np.zeros((H, W), dtype=bool)
    inside[top : top + rh, left : left + rw] = True
    return model, sample, inside, tuple(range(1, n_tokens + 1))


def flat_cost_model(image_hw=48, vocab=512, n_regions=6):
    """Zero visual signal: the objective is flat, so every optimization step
    accepts its first line-search candidate. Used for cost comparisons."""
    return ToyModel(
        image_shape=(image_hw, image_hw, 3),
        regions=[(0, 0, image_hw, image_hw)] * n_regions,
        emission=np.zeros((n_regions, vocab)),
    )


class TableAdapter(ModelAdapter):
    """Per-token log-probabilities looked up by (image mean, token id).

    The image key is the channel mean rounded to one decimal, which survives
    8-bit image round-trips. No gradients: reliance statistics only.
    """

    supports_gradients = False
    thread_safe = True
    name = "table"

    def __init__(self, table, image_shape=(8, 8, 3), vocabulary_size=8):
        self.table = dict(table)
        self.expected_image_shape = tuple(image_shape)
        self.vocabulary_size = vocabulary_size

    def _key(self, image):
        return round(float(np.asarray(image.pixels).mean()), 1)

    def _generate(self, image, question, max_tokens):
        return [1]

    def _conditional_logprobs(self, image, question, answer):
        key = self._key(image)
        return np.array([np.log(self.table[(key, tok)]) for tok in answer])


class CountingAdapter(ModelAdapter):
    """Wraps an adapter and counts scoring/gradient calls."""

    def __init__(self, inner):
        self.inner = inner
        self.name = f"counting({inner.name})"
        self.vocabulary_size = inner.vocabulary_size
        self.expected_image_shape = inner.expected_image_shape
        self.supports_gradients = inner.supports_gradients
        self.thread_safe = False
        self.logprob_calls = 0
        self.gradient_calls = 0

    def _generate(self, image, question, max_tokens):
        return self.inner._generate(image, question, max_tokens)

    def _conditional_logprobs(self, image, question, answer):
        self.logprob_calls += 1
        return self.inner._conditional_logprobs(image, question, answer)

    def _score_gradient(self, image, question, answer, selected):
        self.gradient_calls += 1
        return self.inner._score_gradient(image, question, answer, selected)


def write_manifest_file(path: Path, entries, header=True):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(json.dumps({"schema_version": 1}) + "\n")
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
