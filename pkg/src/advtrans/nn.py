"""Model specifications, initialization, SGD training and checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, batch_iter
from .errors import ArgumentError, ConfigurationError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"ADVTLAB1"
CHECKPOINT_VERSION = 1


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 32-bit child seed for ``(seed, *keys)``."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def philox(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# -- specification ---------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    inputs: int
    outputs: int


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


_LAYER_TYPES = {"dense": Dense, "conv": Conv, "relu": ReLU, "flatten": Flatten}
_LAYER_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    class_count: int
    input_shape: tuple[int, int, int] = (1, 28, 28)
    # "classify": output is class_count logits; "image": output reshaped to input_shape
    task: str = "classify"
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-example activation shape after each layer (validates the model spec)."""
        shape: tuple[int, ...] = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.inputs:
                    raise ConfigurationError(f"layer {i}: dense expects ({layer.inputs},), got {shape}")
                shape = (layer.outputs,)
            elif isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ConfigurationError(f"layer {i}: conv expects {layer.in_ch} channels, got {shape}")
                h = (shape[1] + 2 * layer.padding - layer.k) // layer.stride + 1
                w = (shape[2] + 2 * layer.padding - layer.k) // layer.stride + 1
                if h < 1 or w < 1 or layer.stride < 1:
                    raise ConfigurationError(f"layer {i}: conv output would be empty")
                shape = (layer.out_ch, h, w)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ConfigurationError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        if self.task == "image":
            if int(np.prod(shape)) != int(np.prod(self.input_shape)):
                raise ConfigurationError(f"image model output {shape} does not match input {self.input_shape}")
        elif self.task != "classify":
            raise ConfigurationError(f"unknown model task {self.task!r}")
        elif shape != (self.class_count,):
            raise ConfigurationError(f"final output {shape} does not match class_count {self.class_count}")
        elif self.residual:
            raise ConfigurationError("residual connections are only defined for image models")
        return out

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                out += [(f"{i}.weight", (layer.inputs, layer.outputs)), (f"{i}.bias", (layer.outputs,))]
            elif isinstance(layer, Conv):
                out += [(f"{i}.weight", (layer.out_ch, layer.in_ch, layer.k, layer.k)),
                        (f"{i}.bias", (layer.out_ch,))]
        return out

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"type": _LAYER_NAMES[type(layer)]}
            d.update(layer.__dict__)
            layers.append(d)
        d = {"layers": layers, "class_count": self.class_count, "input_shape": list(self.input_shape)}
        if self.task != "classify":
            d.update(task=self.task, residual=self.residual)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            layers = []
            for item in d["layers"]:
                item = dict(item)
                kind = _LAYER_TYPES[item.pop("type")]
                layers.append(kind(**item))
            return cls(tuple(layers), int(d["class_count"]), tuple(d.get("input_shape", (1, 28, 28))),
                       d.get("task", "classify"), bool(d.get("residual", False)))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model spec: {exc}") from None


def desk_fa_spec(classes: int = 10, side: int = 28) -> ModelSpec:
    s1 = (side + 2 - 3) // 2 + 1
    s2 = (s1 + 2 - 3) // 2 + 1
    return ModelSpec((Conv(1, 8, 3, 2, 1), ReLU(), Conv(8, 16, 3, 2, 1), ReLU(), Flatten(),
                      Dense(16 * s2 * s2, classes)), classes, (1, side, side))


def desk_fb_spec(classes: int = 10, side: int = 28, hidden: int = 64) -> ModelSpec:
    return ModelSpec((Flatten(), Dense(side * side, hidden), ReLU(), Dense(hidden, classes)),
                     classes, (1, side, side))


def surrogate_spec(side: int = 28, hidden: int = 256) -> ModelSpec:
    """Residual MLP image-to-image model used by the reparameterization attack."""
    return ModelSpec((Flatten(), Dense(side * side, hidden), ReLU(), Dense(hidden, side * side)),
                     0, (1, side, side), task="image", residual=True)


def linear_spec(classes: int, input_shape=(1, 28, 28)) -> ModelSpec:
    return ModelSpec((Flatten(), Dense(int(np.prod(input_shape)), classes)), classes, input_shape)


# -- model -----------------------------------------------------------------

@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    param_seed: int = 0

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(self.params) != {n for n, _ in expected}:
            raise ArgumentError("parameter names do not match the model spec")
        for name, shape in expected:
            if tuple(self.params[name].shape) != shape:
                raise DimensionError(f"{name}: shape {self.params[name].shape} != {shape}")

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.param_seed)

    def ordered_params(self) -> list[tuple[str, np.ndarray]]:
        return [(n, self.params[n]) for n, _ in self.spec.param_shapes()]

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for _, v in self.ordered_params():
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(spec: ModelSpec, seed: int) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, Philox-seeded per layer."""
    spec.shapes()
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        layer = int(name.split(".")[0])
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        params[name] = philox(seed, layer).standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Model(spec, params, seed)


def _check_batch(spec: ModelSpec, x: Tensor):
    if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input {spec.input_shape}")


def forward(model: Model, x, params: dict[str, Tensor] | None = None, keep=None) -> Tensor:
    """Logits for an N x C x H x W batch.

    ``params`` maps names to (possibly tracked) tensors; missing names are
    read from ``model.params`` as constants.  If ``keep`` is a list, the
    per-layer inputs are appended to it.
    """
    x = ad.as_tensor(x)
    _check_batch(model.spec, x)
    params = params or {}
    h = x
    for i, layer in enumerate(model.spec.layers):
        if keep is not None:
            keep.append(h)
        if isinstance(layer, Dense):
            w = params.get(f"{i}.weight", model.params[f"{i}.weight"])
            b = params.get(f"{i}.bias", model.params[f"{i}.bias"])
            h = ad.add(ad.matmul(h, w), b)
        elif isinstance(layer, Conv):
            w = params.get(f"{i}.weight", model.params[f"{i}.weight"])
            b = params.get(f"{i}.bias", model.params[f"{i}.bias"])
            bias = ad.reshape(b, (1, layer.out_ch, 1, 1))
            h = ad.add(ad.conv2d(h, w, layer.stride, layer.padding), bias)
        elif isinstance(layer, ReLU):
            h = ad.relu(h)
        elif isinstance(layer, Flatten):
            h = ad.reshape(h, (h.shape[0], -1))
    if model.spec.task == "image":
        h = ad.reshape(h, x.shape)
        if model.spec.residual:
            h = ad.add(h, x)
    return h


def model_forward(model: Model, batch, tape: Tape | None = None) -> Tensor:
    """Logits of shape N x class_count; parameters become tape leaves if ``tape`` is given."""
    if tape is None:
        return forward(model, batch)
    leaves = {name: tape.leaf(v, name) for name, v in model.ordered_params()}
    return forward(model, batch, leaves)


def input_gradient(model: Model, x, targets) -> Tensor:
    """Gradient of the summed cross-entropy w.r.t. the input, built from tape operations.

    The backward pass is written out as forward operations (softmax, transposed
    matmuls, transposed convolutions, ReLU masks) so that it can itself be
    recorded and differentiated; parameters are constants.  ReLU masks are
    constants, matching the zero second derivative of ReLU almost everywhere.
    """
    x = ad.as_tensor(x)
    keep: list[Tensor] = []
    logits = forward(model, x, keep=keep)
    t = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(t)), t] = 1.0
    g = ad.sub(ad.softmax(logits), onehot)
    for i in range(len(model.spec.layers) - 1, -1, -1):
        layer = model.spec.layers[i]
        inp = keep[i]
        if isinstance(layer, Dense):
            g = ad.matmul(g, model.params[f"{i}.weight"].T)
        elif isinstance(layer, Conv):
            g = ad.conv2d_transpose(g, model.params[f"{i}.weight"], inp.shape, layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            g = ad.mul(g, (inp.data > 0).astype(np.float64))
        elif isinstance(layer, Flatten):
            g = ad.reshape(g, inp.shape)
    return g


def predict(model: Model, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = [np.argmax(forward(model, images[s:s + batch_size]).data, axis=1)
           for s in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model: Model, dataset: Dataset, classify: Callable | None = None) -> float:
    """Argmax accuracy; ``classify`` overrides the plain model prediction."""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    preds = classify(dataset.images) if classify is not None else predict(model, dataset.images)
    return float(np.mean(preds == dataset.labels))


# -- optimisation ----------------------------------------------------------

@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 64

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


def sgd_step(model: Model, grads: dict[str, np.ndarray], state: dict[str, np.ndarray] | None,
             cfg: SGDConfig) -> tuple[Model, dict[str, np.ndarray]]:
    """Classic momentum: v <- momentum * v + g; theta <- theta - lr * v."""
    state = state or {}
    missing = [n for n in model.params if n not in grads]
    if missing:
        raise ArgumentError(f"missing gradients for {missing}")
    params, velocity = {}, {}
    for name, theta in model.params.items():
        v = state.get(name, np.zeros_like(theta))
        v = cfg.momentum * v + grads[name]
        velocity[name] = v
        params[name] = theta - cfg.learning_rate * v
    return Model(model.spec, params, model.param_seed), velocity


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in model.ordered_params()}
    loss = ad.softmax_cross_entropy(forward(model, x, leaves), y)
    grads = ad.backward(tape, loss)
    return float(loss.data), {n: grads.get(t.node, np.zeros_like(t.data)) for n, t in leaves.items()}


@dataclass
class TrainResult:
    model: Model
    loss_trace: list[float] = field(default_factory=list)
    seconds: float = 0.0


# (model, indices, images, labels, epoch) -> images actually fed to the optimizer
BatchTransform = Callable[[Model, np.ndarray, np.ndarray, np.ndarray, int], np.ndarray]


def train(model: Model, dataset: Dataset, cfg: SGDConfig, seed: int,
          transform: BatchTransform | None = None) -> TrainResult:
    """Seeded-shuffle minibatch SGD on mean softmax cross-entropy."""
    if len(dataset) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    start = time.perf_counter()
    state: dict[str, np.ndarray] | None = None
    trace = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx, xb, yb in batch_iter(dataset, cfg.batch_size, derive_seed(seed, epoch)):
            if transform is not None:
                xb = transform(model, idx, xb, yb, epoch)
            loss, grads = loss_and_grads(model, xb, yb)
            model, state = sgd_step(model, grads, state, cfg)
            total += loss * len(idx)
            count += len(idx)
        trace.append(total / count)
    return TrainResult(model, trace, time.perf_counter() - start)


def train_standard(model: Model, dataset: Dataset, cfg: SGDConfig, seed: int) -> TrainResult:
    return train(model, dataset, cfg, seed)


@dataclass(frozen=True)
class PGDParams:
    epsilon: float = 0.3
    steps: int = 10
    stepsize: float = 0.05
    random_start: bool = True
    # epsilon (and stepsize) ramp linearly from 0 over this many epochs; avoids
    # the collapse to a constant predictor seen when starting cold
    warmup_epochs: float = 0.0


def adversarial_train(model: Model, dataset: Dataset, cfg: SGDConfig, attack: PGDParams,
                      seed: int) -> TrainResult:
    """Madry-style training: each minibatch is replaced by untargeted PGD examples on the current model."""
    from .attacks import pgd_perturb

    batches = -(-len(dataset) // cfg.batch_size)
    counter = {"batch": 0}

    def transform(current, idx, xb, yb, epoch):
        counter["batch"] += 1
        scale = 1.0
        if attack.warmup_epochs > 0:
            scale = min(1.0, counter["batch"] / (attack.warmup_epochs * batches))
        eps = attack.epsilon * scale
        if eps == 0:
            return xb
        return pgd_perturb(current, xb, yb, eps, attack.steps, attack.stepsize * scale,
                           random_start=attack.random_start,
                           rng=philox(seed, 7, epoch, int(idx[0]), len(idx)))
    return train(model, dataset, cfg, seed, transform)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    header = json.dumps({"version": CHECKPOINT_VERSION, "spec": model.spec.to_dict(),
                         "param_seed": model.param_seed, "dtype": "f64"}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in model.ordered_params())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic bytes at offset 0")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header length at offset 8")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated JSON header at offset 12")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt JSON header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    if header.get("dtype") != "f64":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (ConfigurationError, KeyError) as exc:
        raise FormatError(f"{path}: invalid spec in header ({exc})") from None
    offset = 12 + hlen
    params = {}
    for name, shape in spec.param_shapes():
        n = int(np.prod(shape)) * 8
        if len(raw) < offset + n:
            raise FormatError(f"{path}: truncated payload at offset {len(raw)} while reading {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    return Model(spec, params, int(header.get("param_seed", 0)))
