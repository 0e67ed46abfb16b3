"""The adversarial input transformation and the defense built on it.

``g(x)`` runs least-likely-class PGD against a frozen external model ``f_b``
inside an L-infinity ball of radius ``delta`` around ``x``.  The classifier
``f_a`` is trained on, and predicts from, ``g(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateMode, Tensor
from .data import Dataset
from .errors import ArgumentError, ConfigurationError, DimensionError
from .nn import Model, SGDConfig, TrainResult, forward, input_gradient, philox, predict, train

TRAIN_STREAM = 0
INFER_STREAM = 1


@dataclass(frozen=True)
class TransformConfig:
    delta: float = 0.3
    steps: int = 13
    stepsize: float | None = None  # None -> delta / 6
    random_start: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("delta must be > 0")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.stepsize is None:
            object.__setattr__(self, "stepsize", self.delta / 6.0)
        if not self.stepsize > 0:
            raise ConfigurationError("stepsize must be > 0")

    def with_(self, **changes) -> "TransformConfig":
        if "delta" in changes and "stepsize" not in changes:
            changes["stepsize"] = changes["delta"] / 6.0
        return replace(self, **changes)


def least_likely_class(f_b: Model, x) -> np.ndarray | int:
    """Argmin of ``f_b`` logits (lowest index on ties); scalar for a single example."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if batch.ndim != 4 or tuple(batch.shape[1:]) != f_b.spec.input_shape:
        raise DimensionError(f"input shape {arr.shape} does not match {f_b.spec.input_shape}")
    y = np.argmin(forward(f_b, batch).data, axis=1)
    return int(y[0]) if single else y


def start_noise(shape: tuple[int, ...], delta: float, rng_seed: int, stream: int,
                keys: Sequence[int]) -> np.ndarray:
    """Per-example uniform [-delta, delta] offsets keyed by (rng_seed, stream, key)."""
    per = int(np.prod(shape[1:]))
    out = np.empty((len(keys), per))
    for i, k in enumerate(keys):
        out[i] = philox(rng_seed, stream, int(k)).uniform(-delta, delta, per)
    return out.reshape(shape)


def _check_range(x: np.ndarray):
    if x.size and (np.min(x) < 0.0 or np.max(x) > 1.0 or not np.all(np.isfinite(x))):
        raise ArgumentError("transformation input must lie in [0, 1]")


def ll_pgd(f_b: Model, cfg: TransformConfig, x, noise: np.ndarray | None,
           mode: SurrogateMode = SurrogateMode.EXACT, target=None) -> Tensor:
    """Unrolled LL-PGD on a batch.

    ``x`` may be a tracked tensor, in which case every step is recorded and
    ``mode`` selects the backward surrogate for sign and projection.  The
    random-start ``noise`` is a constant.  The least-likely target is taken
    from the clean ``x`` once and held for all steps.
    """
    x = ad.as_tensor(x)
    y_l = least_likely_class(f_b, x.data) if target is None else np.asarray(target)
    cur = x
    if noise is not None:
        cur = ad.clip(ad.project_linf(ad.add(x, noise), x, cfg.delta, mode))
    for _ in range(cfg.steps):
        grad = input_gradient(f_b, cur, y_l)
        step = ad.mul(ad.sign(grad, mode), cfg.stepsize)
        cur = ad.clip(ad.project_linf(ad.sub(cur, step), x, cfg.delta, mode))
    return cur


def adversarial_transform(f_b: Model, cfg: TransformConfig, x, sample_seed: int = 0,
                          indices: Sequence[int] | None = None, stream: int = INFER_STREAM,
                          mode: SurrogateMode = SurrogateMode.EXACT) -> Tensor:
    """``g(x)`` for a single example (C x H x W) or a batch.

    The random start of example ``i`` is keyed by
    ``(cfg.rng_seed, stream, sample_seed, indices[i])`` so the result does not
    depend on batch composition.  ``sample_seed`` may also be one seed per row.
    """
    xt = ad.as_tensor(x)
    single = xt.data.ndim == 3
    if single:
        xt = ad.reshape(xt, (1,) + xt.shape)
    if xt.data.ndim != 4 or tuple(xt.shape[1:]) != f_b.spec.input_shape:
        raise DimensionError(f"input shape {xt.shape} does not match {f_b.spec.input_shape}")
    _check_range(xt.data)
    noise = None
    if cfg.random_start:
        idx = np.arange(xt.shape[0]) if indices is None else np.asarray(indices)
        seeds = np.broadcast_to(np.asarray(sample_seed, dtype=np.int64), idx.shape)
        keys = [(int(s) << 32) + int(i) for s, i in zip(seeds, idx)]
        noise = start_noise(xt.shape, cfg.delta, cfg.rng_seed, stream, keys)
    out = ll_pgd(f_b, cfg, xt, noise, mode)
    return ad.reshape(out, out.shape[1:]) if single else out


@dataclass
class DefensePipeline:
    f_a: Model
    f_b: Model
    transform: TransformConfig
    f_b_digest: str = field(default="", repr=False)

    def __post_init__(self):
        if self.f_a.spec.input_shape != self.f_b.spec.input_shape:
            raise DimensionError("f_a and f_b must accept the same input shape")
        self.f_b_digest = self.f_b.digest()

    def check_frozen(self) -> bool:
        return self.f_b.digest() == self.f_b_digest

    def g(self, x, sample_seed: int = 0, indices=None) -> np.ndarray:
        return adversarial_transform(self.f_b, self.transform, x, sample_seed, indices).data

    def logits(self, x, sample_seed: int = 0, indices=None) -> np.ndarray:
        return defense_forward(self, x, sample_seed, indices).data

    def classify(self, x, sample_seed: int = 0, indices=None, batch_size: int = 500) -> np.ndarray:
        x = np.asarray(x)
        idx = np.arange(len(x)) if indices is None else np.asarray(indices)
        out = []
        for s in range(0, len(x), batch_size):
            xs = self.g(x[s:s + batch_size], sample_seed, idx[s:s + batch_size])
            out.append(predict(self.f_a, xs))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def with_transform(self, **changes) -> "DefensePipeline":
        return DefensePipeline(self.f_a, self.f_b, self.transform.with_(**changes))


def defense_forward(pipeline: DefensePipeline, x, sample_seed: int = 0, indices=None) -> Tensor:
    """``f_a(g(x))`` with one fresh transformation sample per example."""
    xt = ad.as_tensor(x)
    single = xt.data.ndim == 3
    gx = adversarial_transform(pipeline.f_b, pipeline.transform, xt, sample_seed, indices)
    if single:
        gx = ad.reshape(gx, (1,) + gx.shape)
    out = forward(pipeline.f_a, gx)
    return ad.reshape(out, out.shape[1:]) if single else out


def defense_accuracy(pipeline: DefensePipeline, dataset: Dataset, sample_seed: int = 0) -> float:
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    return float(np.mean(pipeline.classify(dataset.images, sample_seed) == dataset.labels))


def train_defense(pipeline: DefensePipeline, dataset: Dataset, cfg: SGDConfig, seed: int
                  ) -> tuple[DefensePipeline, TrainResult]:
    """SGD on the loss of ``f_a(g(x))``; a fresh random start per example and epoch.

    Only ``f_a`` is updated; ``f_b`` is read-only throughout.
    """
    f_b, tcfg = pipeline.f_b, pipeline.transform

    def transform(model, idx, xb, yb, epoch):
        return adversarial_transform(f_b, tcfg, xb, sample_seed=epoch, indices=idx,
                                     stream=TRAIN_STREAM).data

    result = train(pipeline.f_a, dataset, cfg, seed, transform)
    if not pipeline.check_frozen():
        raise RuntimeError("f_b was modified during defense training")
    return DefensePipeline(result.model, f_b, tcfg), result


@dataclass(frozen=True)
class EotDiagnostic:
    mean_transform: np.ndarray
    sample_count: int
    linf_distance: float


def eot_mean_transform(f_b: Model, cfg: TransformConfig, x, sample_count: int, seed: int,
                       chunk: int = 500) -> EotDiagnostic:
    """Monte-Carlo mean of ``sample_count`` transformation samples of one image."""
    if sample_count < 1:
        raise ArgumentError("sample_count must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError("eot_mean_transform expects a single C x H x W image")
    total = np.zeros_like(x)
    for s in range(0, sample_count, chunk):
        n = min(chunk, sample_count - s)
        batch = np.broadcast_to(x, (n,) + x.shape)
        total += adversarial_transform(f_b, cfg, batch, sample_seed=seed,
                                       indices=np.arange(s, s + n)).data.sum(axis=0)
    mean = total / sample_count
    return EotDiagnostic(mean, sample_count, float(np.max(np.abs(x - mean))))
