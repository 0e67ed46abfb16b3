"""Attacks used to stress the defense.

A *gradient rule* is any callable ``rule(x, y, step, indices) -> grad`` that
returns an estimate of the input gradient of the attacker's loss for a batch.
PGD is written once against that interface; the attacks differ only in which
rule they plug in (exact model gradient, BPDA surrogate, identity mapping,
EOT average, or a learned surrogate network).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateMode, Tape
from .data import Dataset
from .errors import ArgumentError, ConfigurationError, DimensionError
from .nn import Model, derive_seed, forward, init_params, philox, predict, sgd_step, SGDConfig, ModelSpec
from .transform import (DefensePipeline, adversarial_transform, start_noise)

log = logging.getLogger(__name__)

GradientRule = Callable[[np.ndarray, np.ndarray, int, np.ndarray], np.ndarray]
Classifier = Callable[[np.ndarray, np.ndarray], np.ndarray]

# stream tags for philox keys owned by this module
_PGD_START = 11
_EOT = 12
_QUERY = 13
_REPARAM = 14


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    steps: int = 50
    stepsize: float | None = None  # None -> 0.002 * epsilon / 0.031
    eot_samples: int = 1
    surrogate: SurrogateMode = SurrogateMode.SOFT_SIGN
    rng_seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        object.__setattr__(self, "surrogate", SurrogateMode.parse(self.surrogate))
        if not self.epsilon > 0:
            raise ConfigurationError("attack epsilon must be > 0")
        if self.steps < 1 or self.eot_samples < 1:
            raise ConfigurationError("attack steps and eot_samples must be >= 1")
        if self.stepsize is None:
            object.__setattr__(self, "stepsize", 0.002 * self.epsilon / 0.031)
        if not self.stepsize > 0:
            raise ConfigurationError("attack stepsize must be > 0")


CIFAR_PRESET = AttackConfig(epsilon=0.031, steps=50, stepsize=0.002)
MNIST_PRESET = AttackConfig(epsilon=0.3, steps=50)


@dataclass
class AttackResult:
    adversarial_examples: np.ndarray
    success_flags: np.ndarray
    queries_used: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def robust_accuracy(self) -> float:
        return float(1.0 - np.mean(self.success_flags)) if self.success_flags.size else float("nan")


def check_budget(clean: np.ndarray, adv: np.ndarray, epsilon: float, tol: float = 1e-12) -> None:
    """Hard assertion that every example is inside the ball and the pixel range."""
    if adv.shape != clean.shape:
        raise DimensionError("adversarial batch shape differs from clean batch")
    if np.max(np.abs(adv - clean), initial=0.0) > epsilon + tol:
        raise AssertionError("adversarial example leaves the epsilon ball")
    if adv.size and (adv.min() < 0.0 or adv.max() > 1.0):
        raise AssertionError("adversarial example leaves [0, 1]")


# -- classifiers and gradient rules ----------------------------------------

def model_classifier(model: Model) -> Classifier:
    return lambda x, idx: predict(model, x)


def pipeline_classifier(pipeline: DefensePipeline, sample_seed=0, resample: bool = False) -> Classifier:
    """Classifier view of a defense.

    By default each test example always sees the same transformation sample.
    With ``resample`` every call draws fresh samples.  A callable
    ``sample_seed`` is taken to be a ready-made classifier and returned as is.
    """
    if callable(sample_seed):
        return sample_seed
    if not resample:
        return lambda x, idx: pipeline.classify(x, sample_seed, idx)
    calls = [0]

    def classify(x, idx):
        calls[0] += 1
        return pipeline.classify(x, derive_seed(sample_seed, calls[0]), idx)
    return classify


def loss_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Input gradient of the summed cross-entropy (per-example gradients)."""
    tape = Tape()
    leaf = tape.leaf(x)
    (g,) = ad.grad(ad.softmax_cross_entropy(forward(model, leaf), y, "sum"), [leaf])
    return g


def model_rule(model: Model) -> GradientRule:
    return lambda x, y, step, idx: loss_gradient(model, x, y)


def _transform_gradient(pipeline: DefensePipeline, x, y, mode, sample_seed, indices) -> np.ndarray:
    tape = Tape()
    leaf = tape.leaf(x)
    gx = adversarial_transform(pipeline.f_b, pipeline.transform, leaf, sample_seed, indices, mode=mode)
    loss = ad.softmax_cross_entropy(forward(pipeline.f_a, gx), y, "sum")
    (g,) = ad.grad(loss, [leaf])
    return g


def bpda_gradient(pipeline: DefensePipeline, x, y, surrogate: SurrogateMode | str,
                  sample_seed=0, indices=None) -> np.ndarray:
    """Input gradient of the defense loss with every LL-PGD step unrolled.

    The forward pass is the exact transformation; the backward pass swaps the
    derivative of sign for the soft-sign or tanh derivative and the derivative
    of the projection for 1 inside the ball and 1/(1+|d|)^2 outside.
    """
    surrogate = SurrogateMode.parse(surrogate)
    if surrogate not in (SurrogateMode.SOFT_SIGN, SurrogateMode.TANH):
        raise ConfigurationError(f"BPDA needs a soft-sign or tanh surrogate, got {surrogate.value}")
    return _transform_gradient(pipeline, np.asarray(x, dtype=np.float64), y, surrogate, sample_seed, indices)


def exact_ad_gradient(pipeline: DefensePipeline, x, y, sample_seed=0, indices=None) -> np.ndarray:
    """Plain automatic differentiation through the transformation (sign has zero derivative)."""
    return _transform_gradient(pipeline, np.asarray(x, dtype=np.float64), y, SurrogateMode.EXACT,
                               sample_seed, indices)


def identity_gradient(pipeline: DefensePipeline, x, y, sample_seed=0, indices=None) -> np.ndarray:
    """Gradient of ``f_a`` evaluated at ``g(x)``, with ``g`` replaced by identity in the backward pass."""
    gx = adversarial_transform(pipeline.f_b, pipeline.transform, x, sample_seed, indices).data
    return loss_gradient(pipeline.f_a, gx, y)


def eot_gradient(sample_rule: Callable, x: np.ndarray, y: np.ndarray, K: int, seed: int,
                 indices=None, max_rows: int = 4000) -> np.ndarray:
    """Mean of ``sample_rule(x, y, sample_seeds, indices)`` over K seeded samples.

    Sample ``k`` uses seed ``derive_seed(seed, k)``.  Samples are stacked into
    batches of at most ``max_rows`` rows; the summation order is fixed.
    """
    if K < 1:
        raise ArgumentError("K must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    idx = np.arange(n) if indices is None else np.asarray(indices)
    seeds = np.array([derive_seed(seed, _EOT, k) for k in range(K)], dtype=np.int64)
    per = max(1, max_rows // max(n, 1))
    total = np.zeros_like(x)
    for s in range(0, K, per):
        ks = seeds[s:s + per]
        m = len(ks)
        g = sample_rule(np.tile(x, (m, 1, 1, 1)), np.tile(y, m), np.repeat(ks, n), np.tile(idx, m))
        total += g.reshape((m,) + x.shape).sum(axis=0)
    return total / K


def bpda_rule(pipeline: DefensePipeline, surrogate, eot_samples: int = 1, seed: int = 0) -> GradientRule:
    """BPDA gradient rule; wrapped in EOT when the defense uses a random start."""
    if not pipeline.transform.random_start:
        return lambda x, y, step, idx: bpda_gradient(pipeline, x, y, surrogate, 0, idx)

    def sample(x, y, seeds, idx):
        return bpda_gradient(pipeline, x, y, surrogate, seeds, idx)
    return lambda x, y, step, idx: eot_gradient(sample, x, y, eot_samples, derive_seed(seed, step), idx)


def identity_rule(pipeline: DefensePipeline, eot_samples: int = 1, seed: int = 0) -> GradientRule:
    if not pipeline.transform.random_start:
        return lambda x, y, step, idx: identity_gradient(pipeline, x, y, 0, idx)

    def sample(x, y, seeds, idx):
        return identity_gradient(pipeline, x, y, seeds, idx)
    return lambda x, y, step, idx: eot_gradient(sample, x, y, eot_samples, derive_seed(seed, step), idx)


def exact_ad_rule(pipeline: DefensePipeline, eot_samples: int = 1, seed: int = 0) -> GradientRule:
    if not pipeline.transform.random_start:
        return lambda x, y, step, idx: exact_ad_gradient(pipeline, x, y, 0, idx)

    def sample(x, y, seeds, idx):
        return exact_ad_gradient(pipeline, x, y, seeds, idx)
    return lambda x, y, step, idx: eot_gradient(sample, x, y, eot_samples, derive_seed(seed, step), idx)


# -- gradient-based attacks ------------------------------------------------

def fgsm(model: Model, x, y, epsilon: float) -> AttackResult:
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match {model.spec.input_shape}")
    adv = np.clip(x + epsilon * np.sign(loss_gradient(model, x, y)), 0.0, 1.0)
    return AttackResult(adv, predict(model, adv) != y)


def _ball_step(cur, clean, direction, stepsize, epsilon):
    nxt = cur + stepsize * np.sign(direction)
    return np.clip(clean + np.clip(nxt - clean, -epsilon, epsilon), 0.0, 1.0)


def pgd_perturb(model: Model, x, y, epsilon: float, steps: int, stepsize: float,
                random_start: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
    """Untargeted L-infinity PGD on a plain model (used by adversarial training)."""
    x = np.asarray(x, dtype=np.float64)
    cur = x
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        cur = np.clip(x + rng.uniform(-epsilon, epsilon, x.shape), 0.0, 1.0)
    for _ in range(steps):
        cur = _ball_step(cur, x, loss_gradient(model, cur, y), stepsize, epsilon)
    return cur


def pgd_attack(rule: GradientRule | None, x, y, cfg: AttackConfig, classify: Classifier,
               indices=None) -> AttackResult:
    """Untargeted PGD ascent under ``rule`` with one random start inside the ball.

    An example counts as a success when the target misclassifies either the
    final iterate or the clean input (the clean input is itself admissible,
    and is returned in that case).
    """
    if rule is None:
        raise ConfigurationError("pgd_attack needs a gradient rule")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    cur = x
    if cfg.random_start:
        noise = start_noise(x.shape, cfg.epsilon, cfg.rng_seed, _PGD_START, idx)
        cur = np.clip(x + noise, 0.0, 1.0)
    for t in range(cfg.steps):
        cur = _ball_step(cur, x, rule(cur, y, t, idx), cfg.stepsize, cfg.epsilon)
    clean_wrong = classify(x, idx) != y
    adv = np.where(clean_wrong[:, None, None, None], x, cur)
    success = clean_wrong | (classify(adv, idx) != y)
    check_budget(x, adv, cfg.epsilon)
    return AttackResult(adv, success)


def _batched(fn, dataset: Dataset, batch_size: int) -> AttackResult:
    parts = []
    for s in range(0, len(dataset), batch_size):
        idx = np.arange(s, min(s + batch_size, len(dataset)))
        parts.append(fn(dataset.images[idx], dataset.labels[idx], idx))
    queries = None
    if parts and parts[0].queries_used is not None:
        queries = np.concatenate([p.queries_used for p in parts])
    return AttackResult(np.concatenate([p.adversarial_examples for p in parts]),
                        np.concatenate([p.success_flags for p in parts]), queries)


def run_pgd(rule: GradientRule, dataset: Dataset, cfg: AttackConfig, classify: Classifier,
            batch_size: int = 250) -> AttackResult:
    return _batched(lambda x, y, idx: pgd_attack(rule, x, y, cfg, classify, idx), dataset, batch_size)


def bpda_unrolled_attack(pipeline: DefensePipeline, dataset: Dataset, cfg: AttackConfig,
                         eval_seed: int = 0) -> AttackResult:
    """PGD driven by BPDA gradients through all N unrolled transformation steps."""
    rule = bpda_rule(pipeline, cfg.surrogate, cfg.eot_samples, cfg.rng_seed)
    batch = max(10, 2000 // (cfg.eot_samples if pipeline.transform.random_start else 1))
    return run_pgd(rule, dataset, cfg, pipeline_classifier(pipeline, eval_seed), min(batch, 250))


def bpda_identity_attack(pipeline: DefensePipeline, dataset: Dataset, cfg: AttackConfig,
                         eval_seed: int = 0) -> AttackResult:
    """BPDA-I: PGD with g treated as identity in the backward pass (EOT over random starts)."""
    rule = identity_rule(pipeline, cfg.eot_samples, cfg.rng_seed)
    return run_pgd(rule, dataset, cfg, pipeline_classifier(pipeline, eval_seed))


def exact_ad_attack(pipeline: DefensePipeline, dataset: Dataset, cfg: AttackConfig,
                    eval_seed: int = 0) -> AttackResult:
    """PGD with naive automatic differentiation through the transformation."""
    rule = exact_ad_rule(pipeline, cfg.eot_samples, cfg.rng_seed)
    return run_pgd(rule, dataset, cfg, pipeline_classifier(pipeline, eval_seed))


def transfer_attack(source_rule: GradientRule, target: Classifier, dataset: Dataset,
                    cfg: AttackConfig) -> AttackResult:
    """Craft PGD examples with the source's gradients, score them on the target."""
    return run_pgd(source_rule, dataset, cfg, target)


def white_box_transfer(pipeline: DefensePipeline, dataset: Dataset, cfg: AttackConfig,
                       eval_seed: int = 0) -> AttackResult:
    return transfer_attack(model_rule(pipeline.f_a), pipeline_classifier(pipeline, eval_seed), dataset, cfg)


def black_box_transfer(source: Model, pipeline: DefensePipeline, dataset: Dataset, cfg: AttackConfig,
                       eval_seed: int = 0) -> AttackResult:
    return transfer_attack(model_rule(source), pipeline_classifier(pipeline, eval_seed), dataset, cfg)


def bpda_small_n_transfer(source: DefensePipeline, target: DefensePipeline, dataset: Dataset,
                          cfg: AttackConfig, eval_seed: int = 0) -> AttackResult:
    """Examples crafted by BPDA on a small-N defense, replayed against another defense."""
    rule = bpda_rule(source, cfg.surrogate, cfg.eot_samples, cfg.rng_seed)
    return transfer_attack(rule, pipeline_classifier(target, eval_seed), dataset, cfg)


# -- finite differences ----------------------------------------------------

def finite_difference_entry(g: Callable[[np.ndarray], np.ndarray], x, i: int, j: int, h: float) -> float:
    """Central-difference estimate of d g_i / d x_j (flat pixel indices).

    ``g`` must be deterministic (a fixed transformation sample).
    """
    if not h > 0:
        raise ArgumentError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    if not (0 <= i < x.size and 0 <= j < x.size):
        raise ArgumentError(f"pixel index out of range [0, {x.size})")
    xp = x.copy().reshape(-1)
    xm = x.copy().reshape(-1)
    xp[j] += h
    xm[j] -= h
    gp = np.asarray(g(xp.reshape(x.shape))).reshape(-1)[i]
    gm = np.asarray(g(xm.reshape(x.shape))).reshape(-1)[i]
    return float((gp - gm) / (2 * h))


def fd_sweep(pipeline: DefensePipeline, x, i: int, j: int, hs: Sequence[float],
             sample_seed: int = 0) -> np.ndarray:
    """Finite-difference Jacobian entry of the fixed-seed transformation for each step size."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1).copy()
    # move the probed pixel inward so both probes stay in [0, 1]
    flat[j] = np.clip(flat[j], max(hs), 1.0 - max(hs))
    x = flat.reshape(x.shape)

    def g(z):
        return pipeline.g(z, sample_seed)
    return np.array([finite_difference_entry(g, x, i, j, h) for h in hs])


# -- gradient-free query attack --------------------------------------------

class QueryOracle:
    """Forward-only access to a target: logits for a batch, with a query counter."""

    def __init__(self, logits_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self._logits = logits_fn
        self.queries = 0

    def __call__(self, x: np.ndarray, keys: np.ndarray) -> np.ndarray:
        self.queries += len(x)
        return self._logits(x, keys)

    @classmethod
    def for_model(cls, model: Model) -> "QueryOracle":
        return cls(lambda x, keys: forward(model, x).data)

    @classmethod
    def for_pipeline(cls, pipeline: DefensePipeline) -> "QueryOracle":
        # every query draws a fresh transformation sample
        return cls(lambda x, keys: pipeline.logits(x, keys >> 32, keys & 0xFFFFFFFF))


def _ce(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


def blackbox_query_attack(oracle: QueryOracle, dataset: Dataset, cfg: AttackConfig,
                          population: int = 10, generations: int = 20,
                          mutation_rate: float = 0.05) -> AttackResult:
    """Population search inside the epsilon ball using only logit queries.

    Member 0 of the initial population is the clean image; the rest are
    uniform draws from the ball.  Each generation keeps the highest-loss
    member (elitism 1) and fills the rest with mutated copies of members
    chosen by loss-ranked tournament.  An example stops as soon as any member
    is misclassified.
    """
    if population < 1 or generations < 0:
        raise ArgumentError("population must be >= 1 and generations >= 0")
    x = np.asarray(dataset.images, dtype=np.float64)
    y = dataset.labels
    n = len(x)
    eps = cfg.epsilon
    rngs = [philox(cfg.rng_seed, _QUERY, i) for i in range(n)]
    lo = np.maximum(-eps, -x)
    hi = np.minimum(eps, 1.0 - x)
    pop = np.zeros((n, population) + x.shape[1:])
    for i in range(n):
        if population > 1:
            pop[i, 1:] = rngs[i].uniform(-eps, eps, (population - 1,) + x.shape[1:])
    pop = np.clip(pop, lo[:, None], hi[:, None])
    done = np.zeros(n, dtype=bool)
    best = np.zeros_like(x)
    queries = np.zeros(n, dtype=np.int64)
    for gen in range(generations + 1):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        cand = (x[active, None] + pop[active]).reshape((-1,) + x.shape[1:])
        keys = (np.int64(gen) << 32) + np.repeat(active, population) * population + np.tile(np.arange(population), active.size)
        logits = oracle(cand, keys).reshape(active.size, population, -1)
        queries[active] += population
        yy = np.repeat(y[active], population)
        loss = _ce(logits.reshape(-1, logits.shape[-1]), yy).reshape(active.size, population)
        wrong = np.argmax(logits, axis=2) != y[active, None]
        order = np.argsort(-loss, axis=1, kind="stable")
        for r, i in enumerate(active):
            hit = np.flatnonzero(wrong[r])
            if hit.size:
                done[i] = True
                best[i] = pop[i, hit[0]]
                continue
            best[i] = pop[i, order[r, 0]]
            if gen == generations:
                continue
            rng = rngs[i]
            nxt = np.empty_like(pop[i])
            nxt[0] = pop[i, order[r, 0]]
            for m in range(1, population):
                a, b = rng.integers(0, population, 2)
                parent = pop[i, a] if loss[r, a] >= loss[r, b] else pop[i, b]
                mask = rng.random(parent.shape) < mutation_rate
                child = parent + mask * rng.uniform(-eps, eps, parent.shape)
                nxt[m] = np.clip(child, lo[i], hi[i])
            pop[i] = nxt
    adv = np.clip(x + best, 0.0, 1.0)
    check_budget(x, adv, eps)
    return AttackResult(adv, done, queries)


# -- reparameterization ----------------------------------------------------

@dataclass
class ReparamSurrogate:
    h: Model
    train_loss_trace: list[float]
    validation_loss_trace: list[float]

    @property
    def generalization_ratio(self) -> float:
        return self.validation_loss_trace[-1] / max(self.train_loss_trace[-1], 1e-300)


def _reparam_pairs(pipeline: DefensePipeline, images: np.ndarray, seed: int, stream: int):
    """Start points x'_0 = clip(x + delta) and targets g_delta(x) for one delta per image."""
    cfg = pipeline.transform
    idx = np.arange(len(images))
    target = adversarial_transform(pipeline.f_b, cfg, images, seed, idx, stream=stream).data
    if cfg.random_start:
        keys = [(int(seed) << 32) + int(i) for i in idx]
        noise = start_noise(images.shape, cfg.delta, cfg.rng_seed, stream, keys)
        start = np.clip(images + noise, 0.0, 1.0)
    else:
        start = images
    return start, target


def _mse_grads(h: Model, z, target):
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in h.ordered_params()}
    diff = ad.sub(forward(h, z, leaves), target)
    loss = ad.mul(ad.tsum(ad.mul(diff, diff)), 1.0 / len(z))
    grads = ad.backward(tape, loss)
    return float(loss.data), {n: grads.get(t.node, np.zeros_like(t.data)) for n, t in leaves.items()}


def _mse(h: Model, z, target) -> float:
    """Mean per-pixel squared error."""
    return float(np.mean((forward(h, z).data - target) ** 2))


def train_reparam_surrogate(pipeline: DefensePipeline, train: Dataset, validation: Dataset,
                            spec: ModelSpec, cfg: SGDConfig, seed: int = 0) -> ReparamSurrogate:
    """Fit h(x + delta) ~ g_delta(x) by squared error, tracking held-out error per epoch."""
    if spec.task != "image" or spec.input_shape != pipeline.f_a.spec.input_shape:
        raise ConfigurationError("surrogate must map images to images of the defense input shape")
    h = init_params(spec, seed)
    if spec.residual:
        last = [n for n, _ in spec.param_shapes() if n.endswith(".weight")][-1]
        h.params[last] = h.params[last] * 1e-3
    z_tr, t_tr = _reparam_pairs(pipeline, train.images, seed, _REPARAM)
    z_va, t_va = _reparam_pairs(pipeline, validation.images, seed + 1, _REPARAM)
    state = None
    train_trace, val_trace = [], []
    from .data import batch_iter
    for epoch in range(cfg.epochs):
        for idx, _, _ in batch_iter(train, cfg.batch_size, derive_seed(seed, _REPARAM, epoch)):
            _, grads = _mse_grads(h, z_tr[idx], t_tr[idx])
            h, state = sgd_step(h, grads, state, cfg)
        train_trace.append(_mse(h, z_tr, t_tr))
        val_trace.append(_mse(h, z_va, t_va))
    return ReparamSurrogate(h, train_trace, val_trace)


def reparam_rule(pipeline: DefensePipeline, h: Model, eot_samples: int = 1, seed: int = 0) -> GradientRule:
    """Gradient of the loss of f_a(h(x'_0)) where x'_0 is a sampled start point."""
    cfg = pipeline.transform

    def sample(x, y, seeds, idx):
        tape = Tape()
        leaf = tape.leaf(x)
        z = leaf
        if cfg.random_start:
            keys = [(int(s) << 32) + int(i) for s, i in zip(seeds, idx)]
            z = ad.clip(ad.add(leaf, start_noise(x.shape, cfg.delta, cfg.rng_seed, _REPARAM + 1, keys)))
        loss = ad.softmax_cross_entropy(forward(pipeline.f_a, forward(h, z)), y, "sum")
        (g,) = ad.grad(loss, [leaf])
        return g

    if not cfg.random_start:
        return lambda x, y, step, idx: sample(x, y, np.zeros(len(x), dtype=np.int64), idx)
    return lambda x, y, step, idx: eot_gradient(sample, x, y, eot_samples, derive_seed(seed, step), idx)


@dataclass
class ReparamOutcome:
    surrogate: ReparamSurrogate
    result: AttackResult


def reparameterization_attack(pipeline: DefensePipeline, train: Dataset, validation: Dataset,
                              test: Dataset, spec: ModelSpec, cfg: AttackConfig,
                              sgd: SGDConfig, eval_seed: int = 0) -> ReparamOutcome:
    surrogate = train_reparam_surrogate(pipeline, train, validation, spec, sgd, cfg.rng_seed)
    rule = reparam_rule(pipeline, surrogate.h, cfg.eot_samples, cfg.rng_seed)
    result = run_pgd(rule, test, cfg, pipeline_classifier(pipeline, eval_seed))
    result.info.update(train_mse=surrogate.train_loss_trace[-1],
                       validation_mse=surrogate.validation_loss_trace[-1])
    return ReparamOutcome(surrogate, result)


# -- worst-case aggregation ------------------------------------------------

BPDA_FAMILY = frozenset({"bpda-softsign", "bpda-tanh", "bpda-i", "bpda-transfer", "reparam"})


@dataclass
class AttackEntry:
    name: str
    run: Callable[[], AttackResult]
    family: str = "other"


@dataclass
class SuiteResult:
    standard_accuracy: float
    robust: dict[str, float]
    worst_case: float
    best_attack: str
    worst_case_bpda: float | None
    best_bpda_attack: str | None
    results: dict[str, AttackResult] = field(default_factory=dict, repr=False)


def argmin_name(scores: dict[str, float]) -> str:
    """Name with the lowest score; ties go to the lexicographically first name."""
    return min(sorted(scores), key=lambda k: scores[k])


def worst_case_eval(standard_accuracy: float, suite: Sequence[AttackEntry]) -> SuiteResult:
    """Run every attack; worst case is the minimum robust accuracy over the suite."""
    if not suite:
        raise ArgumentError("attack suite is empty")
    results = {}
    for entry in suite:
        log.info("running attack %s", entry.name)
        results[entry.name] = entry.run()
    robust = {k: r.robust_accuracy for k, r in results.items()}
    best = argmin_name(robust)
    bpda = {e.name: robust[e.name] for e in suite if e.family == "bpda" or e.name in BPDA_FAMILY}
    best_bpda = argmin_name(bpda) if bpda else None
    return SuiteResult(standard_accuracy, robust, robust[best], best,
                       bpda[best_bpda] if bpda else None, best_bpda, results)
