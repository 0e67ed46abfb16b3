"""Experiment orchestration: phases, a digest-keyed model cache, sweeps and reports.

One global seed fixes every number in ``report.json``.  Wall-clock figures
vary between runs, so they go to a separate ``timings.json``; that keeps the
report byte-identical across reruns.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import attacks as A
from . import nn
from .attacks import AttackConfig, AttackEntry, AttackResult
from .config import ExperimentConfig, SWEEP_PARAMETERS
from .data import Dataset, digits_mnist_like, generate_synthetic, load_idx
from .errors import AdvTransError, ConfigurationError, FormatError
from .nn import Model, ModelSpec, derive_seed, evaluate_accuracy
from .transform import DefensePipeline, defense_accuracy, eot_mean_transform, train_defense

log = logging.getLogger(__name__)

REPORT_VERSION = 1
PHASES = ("data", "pretrain-fb", "train-fa", "undefended", "baseline", "train-defense",
          "attack", "sweep", "diagnostics")


class PhaseFailure(AdvTransError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


# -- canonical output ------------------------------------------------------

def canonical(obj):
    """Round floats to 6 significant digits and turn numpy scalars into Python ones."""
    if isinstance(obj, dict):
        return {str(k): canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [canonical(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        v = float(f"{v:.6g}")
        return 0.0 if v == 0 else v
    return obj


def dumps(report: dict) -> str:
    return json.dumps(canonical(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def revalidate(report: dict) -> dict:
    """Recompute both worst-case aggregations from the per-attack entries."""
    robust = report.get("robust") or {}
    for name, acc in list(robust.items()) + [("standard_accuracy", report.get("standard_accuracy"))]:
        if acc is not None and not 0.0 <= acc <= 1.0:
            raise AdvTransError(f"accuracy {name}={acc} outside [0, 1]")
    if robust:
        best = A.argmin_name(robust)
        report["worst_case"], report["best_attack"] = robust[best], best
        bpda = {k: v for k, v in robust.items() if k in A.BPDA_FAMILY}
        best_bpda = A.argmin_name(bpda) if bpda else None
        report["worst_case_bpda"] = bpda[best_bpda] if bpda else None
        report["best_bpda_attack"] = best_bpda
    else:
        report.update(worst_case=None, best_attack=None, worst_case_bpda=None, best_bpda_attack=None)
    return report


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(revalidate(report)), newline="\n")
    return path


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read report ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed report JSON at offset {exc.pos}") from None


@dataclass
class Curve:
    parameter: str
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "columns": self.columns, "rows": self.rows}

    def column(self, name: str) -> list[float]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def write_curve_csv(curve: Curve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(curve.columns)
        for row in curve.rows:
            w.writerow([f"{canonical(v):.6g}" if isinstance(v, float) else v for v in row])
    return path


def _key_digest(key) -> str:
    return hashlib.sha256(json.dumps(canonical(key), sort_keys=True).encode()).hexdigest()


# -- the experiment --------------------------------------------------------

class Experiment:
    """Lazily builds and caches every artifact an experiment needs."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.cache_dir = self.out / "cache"
        self.timings: dict[str, float] = {}
        self.train_seconds: dict[str, float] = {}
        self._data: tuple[Dataset, Dataset, Dataset] | None = None
        self._models: dict[str, Model] = {}
        self._defenses: dict[str, tuple[DefensePipeline, str]] = {}
        self._attacks: dict[str, AttackResult] = {}
        self.eval_seed = derive_seed(cfg.seed, 5)

    @contextlib.contextmanager
    def timed(self, phase: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - start

    # data ---------------------------------------------------------------
    def data(self) -> tuple[Dataset, Dataset, Dataset]:
        if self._data is None:
            d, seed = self.cfg.data, self.cfg.seed
            if d.source == "digits":
                train, test = digits_mnist_like(d.train_size, d.test_size, seed, d.image_side)
            elif d.source == "synthetic":
                train = generate_synthetic(d.synthetic_kind, d.train_size, d.classes, d.image_side,
                                           derive_seed(seed, 20))
                test = generate_synthetic(d.synthetic_kind, d.test_size, d.classes, d.image_side,
                                          derive_seed(seed, 21))
            else:
                train = load_idx(d.train_images, d.train_labels).head(d.train_size)
                test = load_idx(d.test_images, d.test_labels).head(d.test_size)
                if train.class_count != test.class_count:
                    merged = max(train.class_count, test.class_count)
                    train = Dataset(train.images, train.labels, merged)
                    test = Dataset(test.images, test.labels, merged)
            if len(test) < d.eval_size:
                raise ConfigurationError("data.eval_size: exceeds the available test examples")
            self._data = (train, test, test.head(d.eval_size))
        return self._data

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.data()[0].input_shape

    @property
    def classes(self) -> int:
        return self.data()[0].class_count

    def spec_for(self, section) -> ModelSpec:
        c, (ch, side, _) = self.classes, self.input_shape
        if section.arch == "cnn":
            return nn.desk_fa_spec(c, side)
        if section.arch == "mlp":
            return nn.desk_fb_spec(c, side, section.hidden)
        return nn.linear_spec(c, (ch, side, side))

    # models ---------------------------------------------------------------
    def _cached(self, label: str, key: dict, build: Callable[[], tuple[Model, float]]) -> Model:
        digest = _key_digest(key)
        if digest in self._models:
            return self._models[digest]
        path = self.cache_dir / f"{label}-{digest[:20]}.ckpt"
        meta = path.with_suffix(".json")
        if path.exists() and meta.exists():
            model = nn.load_checkpoint(path)
            seconds = json.loads(meta.read_text())["seconds"]
            log.info("cache hit for %s", label)
        else:
            model, seconds = build()
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            nn.save_checkpoint(model, path)
            meta.write_text(json.dumps({"seconds": seconds, "key": canonical(key)}, sort_keys=True))
        self.train_seconds.setdefault(label, seconds)
        self._models[digest] = model
        return model

    def _base_key(self, kind: str, spec: ModelSpec, init_seed: int, **extra) -> dict:
        return {"kind": kind, "spec": spec.to_dict(), "init_seed": init_seed,
                "data": self.data()[0].digest(), **extra}

    def f_b(self, mode: str | None = None) -> Model:
        fb = self.cfg.fb
        mode = mode or fb.pretrain
        spec, init_seed, train_seed = self.spec_for(fb), derive_seed(self.cfg.seed, 1), derive_seed(self.cfg.seed, 11)
        sgd = self.cfg.train_fb.build()
        extra = {"mode": mode}
        if mode != "untrained":
            extra.update(sgd=dataclasses.asdict(sgd), train_seed=train_seed)
        if mode == "adversarial":
            extra["pgd"] = dataclasses.asdict(fb.pgd())

        def build():
            model = nn.init_params(spec, init_seed)
            if mode == "untrained":
                return model, 0.0
            train = self.data()[0]
            if mode == "standard":
                r = nn.train_standard(model, train, sgd, train_seed)
            else:
                r = nn.adversarial_train(model, train, sgd, fb.pgd(), train_seed)
            return r.model, r.seconds
        return self._cached(f"f_b-{mode}", self._base_key("f_b", spec, init_seed, **extra), build)

    def _fa_init(self) -> tuple[ModelSpec, int]:
        return self.spec_for(self.cfg.fa), derive_seed(self.cfg.seed, 2)

    def f_a_standard(self) -> Model:
        spec, init_seed = self._fa_init()
        sgd, seed = self.cfg.train_fa.build(), derive_seed(self.cfg.seed, 12)

        def build():
            r = nn.train_standard(nn.init_params(spec, init_seed), self.data()[0], sgd, seed)
            return r.model, r.seconds
        key = self._base_key("f_a-standard", spec, init_seed, sgd=dataclasses.asdict(sgd), train_seed=seed)
        return self._cached("f_a-standard", key, build)

    def f_a_adversarial(self) -> Model:
        """Adversarially trained f_a at the defense's epochs: the cost reference."""
        spec, init_seed = self._fa_init()
        sgd, seed, pgd = self.cfg.train_defense.build(), derive_seed(self.cfg.seed, 13), self.cfg.baseline.pgd()

        def build():
            r = nn.adversarial_train(nn.init_params(spec, init_seed), self.data()[0], sgd, pgd, seed)
            return r.model, r.seconds
        key = self._base_key("f_a-adversarial", spec, init_seed, sgd=dataclasses.asdict(sgd),
                             train_seed=seed, pgd=dataclasses.asdict(pgd))
        return self._cached("f_a-adversarial", key, build)

    def defense(self, fb_mode: str | None = None, **transform_changes) -> DefensePipeline:
        """Train (or load) ``f_a`` on ``g(x)``; keyword arguments override the transform."""
        return self._defense(fb_mode, **transform_changes)[0]

    def _defense(self, fb_mode=None, **transform_changes) -> tuple[DefensePipeline, str]:
        f_b = self.f_b(fb_mode)
        tcfg = self.cfg.transform_config(**transform_changes)
        spec, init_seed = self._fa_init()
        sgd, seed = self.cfg.train_defense.build(), derive_seed(self.cfg.seed, 14)
        key = self._base_key("defense", spec, init_seed, sgd=dataclasses.asdict(sgd), train_seed=seed,
                             f_b=f_b.digest(), transform=dataclasses.asdict(tcfg))
        digest = _key_digest(key)
        if digest not in self._defenses:
            base = not transform_changes and (fb_mode in (None, self.cfg.fb.pretrain))
            label = "defense" if base else f"defense-{digest[:12]}"

            def build():
                pipe, r = train_defense(DefensePipeline(nn.init_params(spec, init_seed), f_b, tcfg),
                                        self.data()[0], sgd, seed)
                return pipe.f_a, r.seconds
            f_a = self._cached(label, key, build)
            self._defenses[digest] = (DefensePipeline(f_a, f_b, tcfg), digest)
        return self._defenses[digest]

    # attacks ----------------------------------------------------------------
    def attack(self, name: str, fb_mode: str | None = None, transform: dict | None = None,
               dataset: Dataset | None = None, **attack_changes) -> AttackResult:
        pipeline, pkey = self._defense(fb_mode, **(transform or {}))
        dataset = dataset if dataset is not None else self.data()[2]
        cfg = self.cfg.attack_config(**attack_changes)
        memo = _key_digest({"p": pkey, "n": name, "c": dataclasses.asdict(cfg), "d": dataset.digest()})
        if memo not in self._attacks:
            log.info("attack %s (N=%d, delta=%g, K=%d)", name, pipeline.transform.steps,
                     pipeline.transform.delta, cfg.eot_samples)
            res = self._run_attack(name, pipeline, cfg, dataset)
            A.check_budget(dataset.images, res.adversarial_examples, cfg.epsilon, tol=1e-9)
            self._attacks[memo] = res
        return self._attacks[memo]

    def target(self, pipeline: DefensePipeline):
        """The classifier attacks are scored against (see ``attack.eval_sampling``)."""
        return A.pipeline_classifier(pipeline, self.eval_seed, self.cfg.attack.eval_sampling == "resample")

    def _run_attack(self, name: str, pipeline: DefensePipeline, cfg: AttackConfig,
                    dataset: Dataset) -> AttackResult:
        es, a = self.target(pipeline), self.cfg.attack
        if name in ("bpda-softsign", "bpda-tanh"):
            surrogate = "soft-sign" if name == "bpda-softsign" else "tanh"
            return A.bpda_unrolled_attack(pipeline, dataset, dataclasses.replace(cfg, surrogate=surrogate), es)
        if name == "bpda-i":
            return A.bpda_identity_attack(pipeline, dataset, cfg, es)
        if name in ("exact-ad", "pgd"):
            return A.exact_ad_attack(pipeline, dataset, cfg, es)
        if name == "white-box-transfer":
            return A.white_box_transfer(pipeline, dataset, cfg, es)
        if name == "black-box-transfer":
            return A.black_box_transfer(self.f_a_standard(), pipeline, dataset, cfg, es)
        if name == "bpda-transfer":
            source = self.defense(delta=pipeline.transform.delta, steps=1)
            return A.bpda_small_n_transfer(source, pipeline, dataset, cfg, es)
        if name == "query":
            oracle = A.QueryOracle.for_pipeline(pipeline)
            res = A.blackbox_query_attack(oracle, dataset, cfg, a.query_population,
                                          a.query_generations, a.query_mutation_rate)
            res.info["queries"] = oracle.queries
            return res
        if name == "reparam":
            train = self.data()[0]
            n = min(a.reparam_train_size, len(train) - 1)
            v = min(a.reparam_validation_size, len(train) - n)
            sgd = nn.SGDConfig(a.reparam_learning_rate, 0.9, a.reparam_epochs, a.reparam_batch_size)
            spec = nn.surrogate_spec(self.input_shape[1], a.reparam_hidden)
            if self.input_shape[0] != 1:
                raise ConfigurationError("attack.suite: reparam supports single-channel data only")
            out = A.reparameterization_attack(pipeline, train.head(n), train.subset(range(n, n + v)),
                                              dataset, spec, cfg, sgd, es)
            return out.result
        raise ConfigurationError(f"attack.suite: unknown attack {name!r}")

    def standard_accuracy(self, fb_mode=None, transform: dict | None = None,
                          dataset: Dataset | None = None) -> float:
        dataset = dataset if dataset is not None else self.data()[2]
        pipe = self.defense(fb_mode, **(transform or {}))
        return float(np.mean(self.target(pipe)(dataset.images, np.arange(len(dataset))) == dataset.labels))

    # sweeps -------------------------------------------------------------------
    def sweep(self, parameter: str, values: Sequence | None = None) -> Curve:
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigurationError(f"sweep: unknown parameter {parameter!r}; "
                                     f"expected one of {', '.join(SWEEP_PARAMETERS)}")
        s = self.cfg.sweep
        if parameter == "defense.N":
            values = list(values if values is not None else s.n_values)
            names = list(s.n_attacks)
        elif parameter == "defense.delta":
            values = list(values if values is not None else s.delta_values)
            names = list(s.delta_attacks)
        else:
            values = list(values if values is not None else s.eot_values)
            names = list(s.eot_attacks)
        if not values:
            raise ConfigurationError(f"sweep: no values for {parameter}")
        curve = Curve(parameter, ["parameter_value", "standard_accuracy"] + [f"robust_{n}" for n in names])
        for v in values:
            transform, changes, dataset = {}, {}, None
            if parameter == "defense.N":
                transform = {"steps": int(v)}
            elif parameter == "defense.delta":
                transform = {"delta": float(v)}
            else:
                dataset = self.data()[2].head(s.eot_eval_size)
                changes = {"eot_samples": int(v), "steps": s.eot_steps,
                           "stepsize": 2.5 * self.cfg.attack.epsilon / s.eot_steps}
            row = [v, self.standard_accuracy(transform=transform, dataset=dataset)]
            for n in names:
                row.append(self.attack(n, transform=transform, dataset=dataset, **changes).robust_accuracy)
            curve.rows.append(row)
            log.info("sweep %s=%s -> %s", parameter, v, row[1:])
        return curve

    # diagnostics -------------------------------------------------------------
    def fb_selection(self) -> dict:
        dg = self.cfg.diagnostics
        images = self.data()[2].images[:dg.eot_images]
        tcfg = self.cfg.transform_config()
        out = {}
        for mode in ("untrained", "standard", "adversarial"):
            f_b = self.f_b(mode)
            linf, mean_abs = [], []
            for i, x in enumerate(images):
                diag = eot_mean_transform(f_b, tcfg, x, dg.eot_mean_samples, derive_seed(self.cfg.seed, 6, i))
                linf.append(diag.linf_distance)
                mean_abs.append(float(np.mean(np.abs(x - diag.mean_transform))))
            out[mode] = {
                "linf_distance": float(np.mean(linf)),
                "mean_abs_distance": float(np.mean(mean_abs)),
                "f_b_test_accuracy": evaluate_accuracy(f_b, self.data()[1]),
                "standard_accuracy": self.standard_accuracy(fb_mode=mode),
                "robust_accuracy": self.attack(dg.fb_selection_attack, fb_mode=mode).robust_accuracy,
            }
        return out

    def fd_sweep(self) -> Curve:
        """Diagonal finite-difference entries of g at the central pixel of a few test images."""
        dg = self.cfg.diagnostics
        pipe = self.defense()
        images = self.data()[2].images[:dg.fd_probes]
        _, h, w = self.input_shape
        j = (h // 2) * w + w // 2
        cols = [A.fd_sweep(pipe, x, j, j, dg.fd_steps, self.eval_seed) for x in images]
        curve = Curve("fd_step", ["h"] + [f"probe_{k}" for k in range(len(images))])
        for r, step in enumerate(dg.fd_steps):
            curve.rows.append([step] + [float(c[r]) for c in cols])
        return curve


def fd_spread_ratio(curve: Curve, min_step: float = 1e-3) -> float:
    """max |entry| / min |entry| over step sizes >= ``min_step``, pooled over probes."""
    vals = np.abs([v for row in curve.rows if row[0] >= min_step for v in row[1:]])
    if vals.size == 0 or vals.max() == 0:
        return 0.0
    return float(vals.max() / max(vals.min(), 1e-12))


# -- phases ------------------------------------------------------------------

def _phase_data(exp: Experiment, report: dict):
    train, test, ev = exp.data()
    report["data"] = {"source": exp.cfg.data.source, "train_size": len(train), "test_size": len(test),
                      "eval_size": len(ev), "train_digest": train.digest(), "test_digest": test.digest()}


def _phase_pretrain_fb(exp: Experiment, report: dict):
    f_b = exp.f_b()
    report["digests"]["f_b"] = f_b.digest()
    report["f_b"] = {"pretrain": exp.cfg.fb.pretrain, "test_accuracy": evaluate_accuracy(f_b, exp.data()[1])}


def _phase_train_fa(exp: Experiment, report: dict):
    report["digests"]["f_a_standard"] = exp.f_a_standard().digest()


def _phase_undefended(exp: Experiment, report: dict):
    u = exp.cfg.undefended
    if not u.enabled:
        return
    model, (_, test, ev) = exp.f_a_standard(), exp.data()
    cfg = AttackConfig(u.epsilon, u.steps, u.stepsize, rng_seed=derive_seed(exp.cfg.seed, 4))
    res = A.run_pgd(A.model_rule(model), ev, cfg, A.model_classifier(model))
    A.check_budget(ev.images, res.adversarial_examples, cfg.epsilon, tol=1e-9)
    report["undefended"] = {"standard_accuracy_test": evaluate_accuracy(model, test),
                            "standard_accuracy": evaluate_accuracy(model, ev),
                            "pgd_robust_accuracy": res.robust_accuracy,
                            "epsilon": cfg.epsilon, "steps": cfg.steps, "stepsize": cfg.stepsize}


def _phase_baseline(exp: Experiment, report: dict):
    if not exp.cfg.baseline.enabled:
        return
    model = exp.f_a_adversarial()
    report["digests"]["f_a_adversarial"] = model.digest()
    report["baseline"] = {"standard_accuracy_test": evaluate_accuracy(model, exp.data()[1]),
                          "epochs": exp.cfg.train_defense.epochs,
                          "pgd": dataclasses.asdict(exp.cfg.baseline.pgd())}


def _phase_train_defense(exp: Experiment, report: dict):
    pipe = exp.defense()
    report["digests"]["f_a_defense"] = pipe.f_a.digest()
    report["standard_accuracy_test"] = defense_accuracy(pipe, exp.data()[1], exp.eval_seed)
    report["standard_accuracy"] = exp.standard_accuracy()
    report["transform"] = dataclasses.asdict(pipe.transform)


def _phase_attack(exp: Experiment, report: dict):
    a = exp.cfg.attack
    suite = [AttackEntry(n, (lambda n=n: exp.attack(n)), "bpda" if n in A.BPDA_FAMILY else "other")
             for n in a.suite]
    result = A.worst_case_eval(exp.standard_accuracy(), suite)
    report["robust"] = dict(result.robust)
    cfg = exp.cfg.attack_config()
    details = {}
    for n, r in result.results.items():
        d = {"epsilon": cfg.epsilon, "steps": cfg.steps, "stepsize": cfg.stepsize,
             "eot_samples": cfg.eot_samples, "random_starts": 1 if cfg.random_start else 0,
             "eval_sampling": "per-query" if n == "query" else exp.cfg.attack.eval_sampling}
        d.update({k: v for k, v in r.info.items() if isinstance(v, (int, float, str))})
        details[n] = d
    report["attacks"] = details


def _phase_sweep(exp: Experiment, report: dict, parameters: Sequence[str] | None = None):
    s = exp.cfg.sweep
    configured = {"defense.N": s.n_values, "defense.delta": s.delta_values, "attack.eot_samples": s.eot_values}
    for p in parameters or [p for p in SWEEP_PARAMETERS if configured[p]]:
        curve = exp.sweep(p)
        report["curves"][p] = curve.to_dict()
        write_curve_csv(curve, exp.out / "curves" / f"{p}.csv")


def _phase_diagnostics(exp: Experiment, report: dict):
    diag = {}
    if exp.cfg.diagnostics.fb_selection:
        diag["fb_selection"] = exp.fb_selection()
    if exp.cfg.diagnostics.fd_sweep:
        curve = exp.fd_sweep()
        report["curves"]["fd_sweep"] = curve.to_dict()
        write_curve_csv(curve, exp.out / "curves" / "fd_sweep.csv")
        diag["fd_sweep"] = {"spread_ratio": fd_spread_ratio(curve),
                            "max_abs_at_smallest_step": float(np.max(np.abs(curve.rows[0][1:])))}
    if "reparam" in exp.cfg.attack.suite:
        info = exp.attack("reparam").info
        diag["reparam"] = {"train_mse": info["train_mse"], "validation_mse": info["validation_mse"],
                           "ratio": info["validation_mse"] / max(info["train_mse"], 1e-300)}
    report["diagnostics"] = diag


PHASE_FUNCS: dict[str, Callable[[Experiment, dict], None]] = {
    "data": _phase_data, "pretrain-fb": _phase_pretrain_fb, "train-fa": _phase_train_fa,
    "undefended": _phase_undefended, "baseline": _phase_baseline, "train-defense": _phase_train_defense,
    "attack": _phase_attack, "sweep": _phase_sweep, "diagnostics": _phase_diagnostics,
}


def new_report(cfg: ExperimentConfig) -> dict:
    return {"report_version": REPORT_VERSION, "status": "running", "failed_phase": None, "error": None,
            "config": cfg.to_dict(), "digests": {}, "curves": {}, "robust": {},
            "standard_accuracy": None, "timings_file": "timings.json"}


def timings_summary(exp: Experiment) -> dict:
    out = {"phases": dict(exp.timings), "training_seconds": dict(exp.train_seconds)}
    d, b = exp.train_seconds.get("defense"), exp.train_seconds.get("f_a-adversarial")
    if d is not None and b:
        out["defense_over_adversarial_training"] = d / b
    return out


def run_phases(cfg: ExperimentConfig, out_dir, phases: Sequence[str] = PHASES,
               write: bool = True) -> tuple[dict, Experiment]:
    """Run the named phases in order; on failure the report is written as partial."""
    for p in phases:
        if p not in PHASE_FUNCS:
            raise ConfigurationError(f"unknown phase {p!r}")
    exp = Experiment(cfg, out_dir)
    report = new_report(cfg)
    report["phases"] = list(phases)
    try:
        for phase in phases:
            log.info("phase %s", phase)
            try:
                with exp.timed(phase):
                    PHASE_FUNCS[phase](exp, report)
            except (ConfigurationError, FormatError):
                raise
            except Exception as exc:
                report.update(status="partial", failed_phase=phase, error=f"{type(exc).__name__}: {exc}")
                raise PhaseFailure(phase, exc) from exc
        report["status"] = "complete"
    finally:
        if write and report["status"] != "running":
            exp.out.mkdir(parents=True, exist_ok=True)
            write_report(report, exp.out / "report.json")
            (exp.out / "timings.json").write_text(json.dumps(canonical(timings_summary(exp)),
                                                             sort_keys=True, indent=2) + "\n")
    return report, exp


def run_experiment(config_path, out_dir=None, seed: int | None = None) -> dict:
    """Load a config, run every phase and return the written report."""
    from .config import load_config
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out = Path(out_dir) if out_dir is not None else Path("runs") / cfg.experiment.name
    return run_phases(cfg, out)[0]


def export_models(exp: Experiment, names: Sequence[str]) -> dict[str, str]:
    """Copy selected models to ``<out>/models`` under stable names."""
    target = exp.out / "models"
    target.mkdir(parents=True, exist_ok=True)
    getters = {"f_b": exp.f_b, "f_a_defense": lambda: exp.defense().f_a, "f_a_standard": exp.f_a_standard}
    out = {}
    for n in names:
        model = getters[n]()
        nn.save_checkpoint(model, target / f"{n}.ckpt")
        out[n] = model.digest()
    return out


def check_ordering(values: Sequence[float], tolerance: float = 0.0, strict: bool = False) -> bool:
    """True when the sequence rises (strictly, or allowing ``tolerance`` dips)."""
    pairs = list(zip(values, values[1:]))
    if strict:
        return all(b > a for a, b in pairs)
    return all(b >= a - tolerance for a, b in pairs)


__all__ = ["Experiment", "Curve", "PhaseFailure", "PHASES", "run_phases", "run_experiment", "write_report",
           "read_report", "revalidate", "dumps", "canonical", "write_curve_csv", "export_models",
           "check_ordering"]
