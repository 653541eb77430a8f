"""Model adapter contract plus the deterministic toy model used in tests.

An adapter wraps one scorable model behind three operations: greedy
generation, teacher-forced conditional log-probabilities, and the gradient
of a selected-token score with respect to the input pixels. The public
methods validate inputs/outputs and delegate to ``_``-prefixed hooks, so
every adapter inherits the same error behavior.

Real large-model adapters are loaded as plugins (see ``load_plugins``); only
the toy model ships with the package.
"""

from __future__ import annotations

import hashlib
import importlib.util
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .exceptions import (
    ConfigurationError,
    EmptyGeneration,
    EmptySelection,
    GradientUnsupported,
    InvariantViolation,
    NonFiniteLogProb,
    ShapeMismatch,
)
from .types import Image


@dataclass(frozen=True)
class AdapterInfo:
    """Capability descriptor, serialized to JSON for tooling."""

    name: str
    vocabulary_size: int
    expected_image_shape: Tuple[int, int, int]
    supports_gradients: bool
    thread_safe: bool

    def to_jsonable(self) -> dict:
        return {
            "name": self.name,
            "vocabulary_size": self.vocabulary_size,
            "expected_image_shape": list(self.expected_image_shape),
            "supports_gradients": self.supports_gradients,
            "thread_safe": self.thread_safe,
        }


class ModelAdapter(ABC):
    """Contract every scorable model must satisfy."""

    name: str = "adapter"
    vocabulary_size: int
    expected_image_shape: Tuple[int, int, int]
    supports_gradients: bool = False
    thread_safe: bool = False

    # -- public, validated surface -------------------------------------

    def generate(self, image: Image, question: str, max_tokens: int) -> List[int]:
        """Greedy-decode an answer of length <= max_tokens (never empty)."""
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        self._check_image(image)
        tokens = self._generate(image, question, int(max_tokens))
        if not tokens:
            raise EmptyGeneration(
                f"{self.name}: end token emitted before any answer token"
            )
        return [int(t) for t in tokens]

    def conditional_logprobs(
        self, image: Image, question: str, answer: Sequence[int]
    ) -> np.ndarray:
        """Teacher-forced log P(a_t | a_1..a_{t-1}; image, question), nats."""
        if len(answer) == 0:
            raise ValueError("answer must be non-empty")
        tokens = [int(t) for t in answer]
        if any(t < 0 or t >= self.vocabulary_size for t in tokens):
            raise InvariantViolation(
                f"{self.name}: token id outside vocabulary of size {self.vocabulary_size}"
            )
        self._check_image(image)
        out = np.asarray(
            self._conditional_logprobs(image, question, tokens),
            dtype=np.float64,
        )
        if out.shape != (len(answer),):
            raise ShapeMismatch(
                f"{self.name}: expected {len(answer)} logprobs, got shape {out.shape}"
            )
        if not np.all(np.isfinite(out)) or np.any(out > 1e-12):
            raise NonFiniteLogProb(f"{self.name}: invalid log-probabilities")
        return out

    def score_gradient(
        self,
        image: Image,
        question: str,
        answer: Sequence[int],
        selected_indices: Sequence[int],
    ) -> np.ndarray:
        """d/d(pixels) of the cumulative selected-token log-likelihood."""
        if not self.supports_gradients:
            raise GradientUnsupported(f"{self.name} does not expose gradients")
        sel = sorted(int(k) for k in set(selected_indices))
        if not sel:
            raise EmptySelection("selected_indices must be non-empty")
        if sel[0] < 0 or sel[-1] >= len(answer):
            raise ValueError("selected_indices out of answer range")
        tokens = [int(t) for t in answer]
        if any(t < 0 or t >= self.vocabulary_size for t in tokens):
            raise InvariantViolation(
                f"{self.name}: token id outside vocabulary of size {self.vocabulary_size}"
            )
        self._check_image(image)
        grad = np.asarray(
            self._score_gradient(image, question, tokens, sel),
            dtype=np.float64,
        )
        if grad.shape != image.shape:
            raise ShapeMismatch(
                f"{self.name}: gradient shape {grad.shape} != image shape {image.shape}"
            )
        return grad

    def info(self) -> AdapterInfo:
        return AdapterInfo(
            name=self.name,
            vocabulary_size=self.vocabulary_size,
            expected_image_shape=tuple(self.expected_image_shape),
            supports_gradients=self.supports_gradients,
            thread_safe=self.thread_safe,
        )

    # -- hooks ----------------------------------------------------------

    def _check_image(self, image: Image) -> None:
        if tuple(image.shape) != tuple(self.expected_image_shape):
            raise ShapeMismatch(
                f"{self.name} expects image shape {tuple(self.expected_image_shape)}, "
                f"got {tuple(image.shape)}"
            )

    @abstractmethod
    def _generate(self, image: Image, question: str, max_tokens: int) -> List[int]:
        ...

    @abstractmethod
    def _conditional_logprobs(
        self, image: Image, question: str, answer: List[int]
    ) -> np.ndarray:
        ...

    def _score_gradient(
        self, image: Image, question: str, answer: List[int], selected: List[int]
    ) -> np.ndarray:
        raise GradientUnsupported(f"{self.name} does not expose gradients")


class ToyModel(ModelAdapter):
    """Small deterministic differentiable stand-in for a vision-language model.

    The image enters through a fixed set of spatial pooling windows: each
    window contributes the mean of the channel-averaged pixels inside it.
    Next-token logits are a linear map of those pooled values plus a bigram
    prior on the previous token and a per-question bias, so every
    conditional distribution is an exact softmax that is differentiable in
    every pixel. Decoding is greedy argmax (the zero-temperature limit).
    """

    supports_gradients = True
    thread_safe = True
    name = "toy"

    def __init__(
        self,
        image_shape: Tuple[int, int, int],
        regions: Sequence[Tuple[int, int, int, int]],
        emission: np.ndarray,
        bigram: Optional[np.ndarray] = None,
        start_bias: Optional[np.ndarray] = None,
        temperature: float = 1.0,
        eos_token: Optional[int] = None,
        question_scale: float = 0.0,
    ):
        h, w, c = image_shape
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.expected_image_shape = (int(h), int(w), int(c))
        self.regions = tuple(tuple(int(v) for v in r) for r in regions)
        for top, left, rh, rw in self.regions:
            if top < 0 or left < 0 or rh < 1 or rw < 1 or top + rh > h or left + rw > w:
                raise ValueError(f"region {(top, left, rh, rw)} outside image bounds")
        self.emission = np.asarray(emission, dtype=np.float64)
        if self.emission.shape[0] != len(self.regions):
            raise ValueError("emission rows must match region count")
        self.vocabulary_size = int(self.emission.shape[1])
        v = self.vocabulary_size
        self.bigram = (
            np.zeros((v, v)) if bigram is None else np.asarray(bigram, dtype=np.float64)
        )
        self.start_bias = (
            np.zeros(v) if start_bias is None else np.asarray(start_bias, dtype=np.float64)
        )
        if self.bigram.shape != (v, v) or self.start_bias.shape != (v,):
            raise ValueError("bigram/start_bias shapes inconsistent with vocabulary")
        self.temperature = float(temperature)
        self.eos_token = None if eos_token is None else int(eos_token)
        self.question_scale = float(question_scale)

    @classmethod
    def seeded(
        cls,
        seed: int,
        image_shape: Tuple[int, int, int] = (16, 16, 3),
        vocab_size: int = 12,
        n_regions: int = 5,
        temperature: float = 1.0,
        eos_token: Optional[int] = None,
        question_scale: float = 0.25,
        emission_scale: float = 4.0,
    ) -> "ToyModel":
        """Reproducible random instance: a full-image window plus random ones."""
        rng = np.random.default_rng(seed)
        h, w, _ = image_shape
        regions = [(0, 0, h, w)]
        for _ in range(max(0, n_regions - 1)):
            rh = int(rng.integers(1, max(2, h // 2 + 1)))
            rw = int(rng.integers(1, max(2, w // 2 + 1)))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            regions.append((top, left, rh, rw))
        emission = rng.normal(0.0, emission_scale, size=(len(regions), vocab_size))
        bigram = rng.normal(0.0, 1.0, size=(vocab_size, vocab_size))
        start = rng.normal(0.0, 1.0, size=vocab_size)
        return cls(
            image_shape=image_shape,
            regions=regions,
            emission=emission,
            bigram=bigram,
            start_bias=start,
            temperature=temperature,
            eos_token=eos_token,
            question_scale=question_scale,
        )

    # -- internals -------------------------------------------------------

    def _pooled(self, pixels: np.ndarray) -> np.ndarray:
        gray = pixels.mean(axis=2)
        return np.array(
            [gray[t : t + rh, l : l + rw].mean() for t, l, rh, rw in self.regions]
        )

    def _question_bias(self, question: str) -> np.ndarray:
        if self.question_scale == 0.0:
            return np.zeros(self.vocabulary_size)
        digest = hashlib.sha256(question.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0.0, self.question_scale, size=self.vocabulary_size)

    def _logits(self, pooled: np.ndarray, prev: Optional[int], qbias: np.ndarray) -> np.ndarray:
        prior = self.start_bias if prev is None else self.bigram[prev]
        return pooled @ self.emission / self.temperature + prior + qbias

    def _generate(self, image: Image, question: str, max_tokens: int) -> List[int]:
        pooled = self._pooled(image.pixels)
        qbias = self._question_bias(question)
        tokens: List[int] = []
        prev: Optional[int] = None
        for _ in range(max_tokens):
            nxt = int(np.argmax(self._logits(pooled, prev, qbias)))
            if nxt == self.eos_token:
                break
            tokens.append(nxt)
            prev = nxt
        return tokens

    def _conditional_logprobs(
        self, image: Image, question: str, answer: List[int]
    ) -> np.ndarray:
        pooled = self._pooled(image.pixels)
        qbias = self._question_bias(question)
        out = np.empty(len(answer))
        prev: Optional[int] = None
        for t, tok in enumerate(answer):
            out[t] = log_softmax(self._logits(pooled, prev, qbias))[tok]
            prev = tok
        return out

    def _score_gradient(
        self, image: Image, question: str, answer: List[int], selected: List[int]
    ) -> np.ndarray:
        pooled = self._pooled(image.pixels)
        qbias = self._question_bias(question)
        selected_set = set(selected)
        grad_pooled = np.zeros(len(self.regions))
        prev: Optional[int] = None
        for t, tok in enumerate(answer):
            if t in selected_set:
                probs = softmax(self._logits(pooled, prev, qbias))
                # d logP(tok)/d pooled = (e_tok - probs) @ emission^T / temperature
                grad_pooled += (self.emission[:, tok] - self.emission @ probs) / self.temperature
            prev = tok
        h, w, c = self.expected_image_shape
        grad = np.zeros((h, w, c))
        for g, (top, left, rh, rw) in zip(grad_pooled, self.regions):
            grad[top : top + rh, left : left + rw, :] += g / (rh * rw * c)
        return grad


# -- registry -------------------------------------------------------------

AdapterFactory = Callable[[Tuple[int, int, int], int], ModelAdapter]

_REGISTRY: Dict[str, AdapterFactory] = {}


def register_adapter(name: str, factory: AdapterFactory) -> None:
    _REGISTRY[name] = factory


def make_adapter(name: str, image_shape: Tuple[int, int, int], seed: int = 0) -> ModelAdapter:
    if name not in _REGISTRY:
        raise ConfigurationError(
            f"unknown adapter {name!r}; registered: {sorted(_REGISTRY)}"
        )
    return _REGISTRY[name](tuple(image_shape), seed)


def registered_adapters() -> List[str]:
    return sorted(_REGISTRY)


def load_plugins(path_spec: Optional[str] = None) -> None:
    """Import adapter plugins from OPENLENS_ADAPTER_PATH (os.pathsep-separated
    python files, each defining ``register(registry_fn)``)."""
    spec = path_spec if path_spec is not None else os.environ.get("OPENLENS_ADAPTER_PATH", "")
    for i, path in enumerate(p for p in spec.split(os.pathsep) if p):
        if not os.path.exists(path):
            raise ConfigurationError(f"adapter plugin not found: {path}")
        mod_spec = importlib.util.spec_from_file_location(f"openlens_plugin_{i}", path)
        module = importlib.util.module_from_spec(mod_spec)
        mod_spec.loader.exec_module(module)
        if not hasattr(module, "register"):
            raise ConfigurationError(f"adapter plugin {path} has no register()")
        module.register(register_adapter)


register_adapter("toy", lambda shape, seed: ToyModel.seeded(seed, image_shape=shape))
