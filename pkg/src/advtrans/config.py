"""Experiment configuration: an INI file with a fixed, published schema.

Every section maps onto a frozen dataclass.  Keys are the dataclass field
names; list values are comma-separated; ``auto`` leaves an optional value
unset.  Unknown sections or keys, unparseable values and failed validation
all raise :class:`ConfigurationError` naming the offending ``section.key``.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .attacks import AttackConfig
from .autodiff import SurrogateMode
from .errors import ConfigurationError
from .nn import SGDConfig, PGDParams, derive_seed
from .transform import TransformConfig

ATTACK_NAMES = ("bpda-softsign", "bpda-tanh", "bpda-i", "exact-ad", "pgd", "white-box-transfer",
                "black-box-transfer", "bpda-transfer", "reparam", "query")
SWEEP_PARAMETERS = ("defense.N", "defense.delta", "attack.eot_samples")
PRETRAIN_MODES = ("standard", "adversarial", "untrained")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    source: str = "digits"  # digits | idx | synthetic
    train_size: int = 10000
    test_size: int = 2000
    eval_size: int = 100
    synthetic_kind: str = "gaussian-blobs"
    image_side: int = 28
    classes: int = 10
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def check(self):
        if self.source not in ("digits", "idx", "synthetic"):
            raise ConfigurationError(f"data.source: unknown source {self.source!r}")
        for name in ("train_size", "test_size", "eval_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"data.{name}: must be >= 1")
        if self.eval_size > self.test_size:
            raise ConfigurationError("data.eval_size: exceeds data.test_size")
        if self.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, name):
                    raise ConfigurationError(f"data.{name}: required when data.source = idx")


@dataclass(frozen=True)
class ModelSection:
    arch: str = "cnn"  # cnn | mlp | linear
    hidden: int = 64

    def check(self, path: str):
        if self.arch not in ("cnn", "mlp", "linear"):
            raise ConfigurationError(f"{path}.arch: unknown architecture {self.arch!r}")
        if self.hidden < 1:
            raise ConfigurationError(f"{path}.hidden: must be >= 1")


@dataclass(frozen=True)
class FbSection(ModelSection):
    arch: str = "mlp"
    pretrain: str = "adversarial"  # standard | adversarial | untrained
    adv_epsilon: float = 0.1
    adv_steps: int = 7
    adv_stepsize: float = 0.033
    adv_warmup_epochs: float = 2.0

    def check(self, path: str = "fb"):
        super().check(path)
        if self.pretrain not in PRETRAIN_MODES:
            raise ConfigurationError(f"fb.pretrain: unknown mode {self.pretrain!r}")

    def pgd(self) -> PGDParams:
        return PGDParams(self.adv_epsilon, self.adv_steps, self.adv_stepsize, True, self.adv_warmup_epochs)


@dataclass(frozen=True)
class TransformSection:
    delta: float = 0.3
    steps: int = 13
    stepsize: float | None = None
    random_start: bool = True


@dataclass(frozen=True)
class SGDSection:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 8
    batch_size: int = 64

    def build(self) -> SGDConfig:
        return SGDConfig(self.learning_rate, self.momentum, self.epochs, self.batch_size)


@dataclass(frozen=True)
class AttackSection:
    epsilon: float = 0.05
    steps: int = 20
    stepsize: float | None = None
    eot_samples: int = 4
    surrogate: str = "soft-sign"
    random_start: bool = True
    eval_sampling: str = "fixed"  # fixed | resample
    suite: tuple[str, ...] = ("bpda-softsign", "bpda-i", "white-box-transfer", "black-box-transfer")
    query_population: int = 10
    query_generations: int = 20
    query_mutation_rate: float = 0.05
    reparam_train_size: int = 1000
    reparam_validation_size: int = 500
    reparam_hidden: int = 256
    reparam_epochs: int = 30
    reparam_learning_rate: float = 0.005
    reparam_batch_size: int = 32

    def check(self):
        if not self.suite:
            raise ConfigurationError("attack.suite: must name at least one attack")
        for name in self.suite:
            if name not in ATTACK_NAMES:
                raise ConfigurationError(f"attack.suite: unknown attack {name!r}")
        if len(set(self.suite)) != len(self.suite):
            raise ConfigurationError("attack.suite: duplicate attack names")
        if self.eval_sampling not in ("fixed", "resample"):
            raise ConfigurationError(f"attack.eval_sampling: unknown mode {self.eval_sampling!r}")


@dataclass(frozen=True)
class UndefendedSection:
    enabled: bool = True
    epsilon: float = 0.3
    steps: int = 40
    stepsize: float | None = None


@dataclass(frozen=True)
class BaselineSection:
    """Adversarial training of f_a, the cost reference for defense training."""
    enabled: bool = True
    epsilon: float = 0.1
    steps: int = 7
    stepsize: float = 0.033
    warmup_epochs: float = 2.0

    def pgd(self) -> PGDParams:
        return PGDParams(self.epsilon, self.steps, self.stepsize, True, self.warmup_epochs)


@dataclass(frozen=True)
class SweepSection:
    n_values: tuple[int, ...] = ()
    n_attacks: tuple[str, ...] = ("bpda-softsign",)
    delta_values: tuple[float, ...] = ()
    delta_attacks: tuple[str, ...] = ("bpda-i",)
    eot_values: tuple[int, ...] = ()
    eot_attacks: tuple[str, ...] = ("bpda-i",)
    eot_eval_size: int = 100
    eot_steps: int = 10

    def check(self):
        for key in ("n_attacks", "delta_attacks", "eot_attacks"):
            for name in getattr(self, key):
                if name not in ATTACK_NAMES or name in ("reparam", "query"):
                    raise ConfigurationError(f"sweep.{key}: unsupported attack {name!r}")


@dataclass(frozen=True)
class DiagnosticsSection:
    fb_selection: bool = False
    eot_mean_samples: int = 1000
    eot_images: int = 10
    fb_selection_attack: str = "bpda-i"
    fd_sweep: bool = False
    fd_steps: tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
    fd_probes: int = 3


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "fa": ModelSection,
    "fb": FbSection,
    "transform": TransformSection,
    "train_fb": SGDSection,
    "train_fa": SGDSection,
    "train_defense": SGDSection,
    "attack": AttackSection,
    "undefended": UndefendedSection,
    "baseline": BaselineSection,
    "sweep": SweepSection,
    "diagnostics": DiagnosticsSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    fa: ModelSection = field(default_factory=ModelSection)
    fb: FbSection = field(default_factory=FbSection)
    transform: TransformSection = field(default_factory=TransformSection)
    train_fb: SGDSection = field(default_factory=lambda: SGDSection(epochs=5))
    train_fa: SGDSection = field(default_factory=SGDSection)
    train_defense: SGDSection = field(default_factory=SGDSection)
    attack: AttackSection = field(default_factory=AttackSection)
    undefended: UndefendedSection = field(default_factory=UndefendedSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment, seed=seed))

    def transform_config(self, **changes) -> TransformConfig:
        t = self.transform
        cfg = TransformConfig(t.delta, t.steps, t.stepsize, t.random_start, derive_seed(self.seed, 3))
        return cfg.with_(**changes) if changes else cfg

    def attack_config(self, **changes) -> AttackConfig:
        a = self.attack
        base = dict(epsilon=a.epsilon, steps=a.steps, stepsize=a.stepsize, eot_samples=a.eot_samples,
                    surrogate=a.surrogate, rng_seed=derive_seed(self.seed, 4), random_start=a.random_start)
        base.update(changes)
        return AttackConfig(**base)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def validate(self) -> "ExperimentConfig":
        self.data.check()
        self.fa.check("fa")
        self.fb.check()
        self.attack.check()
        self.sweep.check()
        try:
            for name in ("train_fb", "train_fa", "train_defense"):
                getattr(self, name).build()
            self.transform_config()
            self.attack_config()
            SurrogateMode.parse(self.attack.surrogate)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{_guess_section(str(exc))}: {exc}") from None
        if self.diagnostics.fb_selection_attack not in ATTACK_NAMES:
            raise ConfigurationError("diagnostics.fb_selection_attack: unknown attack")
        return self


def _guess_section(message: str) -> str:
    if "attack" in message or "surrogate" in message:
        return "attack"
    if "delta" in message or "stepsize" in message or "steps" in message:
        return "transform"
    return "train"


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _convert(raw: str, hint, path: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)) and type(None) in args:
        if raw.lower() in ("", "auto", "none"):
            return None
        inner = next(a for a in args if a is not type(None))
        return _convert(raw, inner, path)
    if origin is tuple:
        inner = args[0]
        return tuple(_convert(p, inner, path) for p in raw.split(",") if p.strip())
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw, 0)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"{path}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    defaults = ExperimentConfig()
    sections = {}
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigurationError(f"{name}: unknown section")
        cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigurationError(f"{name}.{key}: unknown key")
            values[key] = _convert(raw, hints[key], f"{name}.{key}")
        sections[name] = dataclasses.replace(getattr(defaults, name), **values)
    return dataclasses.replace(defaults, **sections).validate()


def load_config(path) -> ExperimentConfig:
    """Load a config file; ``preset:<name>`` selects a bundled preset."""
    text, source = read_config_text(path)
    return parse_config_text(text, source)


def read_config_text(path) -> tuple[str, str]:
    path = str(path)
    if path.startswith("preset:"):
        name = path.split(":", 1)[1]
        try:
            return resources.files("advtrans.presets").joinpath(f"{name}.ini").read_text(), path
        except FileNotFoundError:
            raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}") from None
    try:
        return Path(path).read_text(), path
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read config ({exc.strerror})") from None


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("advtrans.presets").iterdir() if p.name.endswith(".ini"))


def schema_text() -> str:
    """The published schema: one line per key with its type and default."""
    defaults = ExperimentConfig()
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        hints = typing.get_type_hints(cls)
        section = getattr(defaults, name)
        for f in fields(cls):
            hint = hints[f.name]
            tname = getattr(hint, "__name__", None) or str(hint).replace("typing.", "")
            v = getattr(section, f.name)
            shown = ",".join(map(str, v)) if isinstance(v, tuple) else ("auto" if v is None else v)
            lines.append(f"{f.name} : {tname} = {shown}")
        lines.append("")
    return "\n".join(lines)
