"""Acceptance criteria, one test each, at the stated tolerances.

Every test emits a ``criterion N: PASS|FAIL`` line, collected and printed
again in the terminal summary.  Criteria 4-7, 9 and 10 read the desk-preset
reports, which are produced twice from scratch in fresh directories.
"""

import json
import time

import numpy as np
import pytest

from advtrans import attacks as A
from advtrans import autodiff as ad
from advtrans import nn
from advtrans.config import load_config
from advtrans.data import generate_synthetic
from advtrans.harness import check_ordering, read_report, run_phases
from advtrans.nn import SGDConfig
from advtrans.transform import DefensePipeline, TransformConfig, adversarial_transform, train_defense

from conftest import CRITERIA


def verdict(number: int, ok: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Two independent end-to-end runs of the desk preset."""
    cfg = load_config("preset:desk")
    outs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"desk{i}")
        run_phases(cfg, out)
        outs.append(out)
    return outs


@pytest.fixture(scope="session")
def desk_report(desk):
    return read_report(desk[0] / "report.json")


@pytest.fixture(scope="session")
def desk_timings(desk):
    return json.loads((desk[0] / "timings.json").read_text())


# -- standalone criteria ------------------------------------------------------

def random_smooth_graph(rng):
    """Conv and/or dense layers with smooth activations, ending in softmax-CE."""
    n, c, side = 2, int(rng.integers(1, 3)), int(rng.integers(5, 9))
    classes = int(rng.integers(2, 5))
    use_conv = bool(rng.integers(0, 2)) or side > 6
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    k = rng.normal(0, 0.5, (int(rng.integers(1, 4)), c, 3, 3))
    act = [ad.tanh, ad.softsign][int(rng.integers(0, 2))]
    if use_conv:
        ho = (side + 2 * pad - 3) // stride + 1
        width = k.shape[0] * ho * ho
    else:
        width = c * side * side
    hidden = int(rng.integers(3, 8))
    w1 = rng.normal(0, 0.4, (width, hidden))
    w2 = rng.normal(0, 0.4, (hidden, classes))
    target = rng.integers(0, classes, n)

    def fn(x):
        h = act(ad.conv2d(x, k, stride, pad)) if use_conv else x
        h = ad.tanh(ad.matmul(ad.reshape(h, (n, -1)), w1))
        return ad.softmax_cross_entropy(ad.matmul(h, w2), target)
    return fn, rng.random((n, c, side, side))


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    errs = [ad.grad_check(*random_smooth_graph(rng)) for _ in range(50)]
    elapsed = time.perf_counter() - start
    verdict(1, max(errs) < 1e-5 and elapsed < 30,
            f"max relative error {max(errs):.2e} over 50 graphs in {elapsed:.1f}s")


def test_criterion_2_transformation_invariants(tiny_fb):
    rng = np.random.default_rng(7)
    violations = 0
    for call in range(10_000):
        delta = float(rng.uniform(0.05, 0.4))
        steps = int(rng.integers(0, 14))
        rs = bool(rng.integers(0, 2))
        seed = int(rng.integers(0, 2**31))
        x = rng.random((1, 1, 12, 12))
        cfg = TransformConfig(delta, steps, random_start=rs, rng_seed=seed)
        out = adversarial_transform(tiny_fb, cfg, x, call).data
        bad = (np.max(np.abs(out - x)) > delta + 1e-12 or out.min() < 0 or out.max() > 1
               or not np.array_equal(out, adversarial_transform(tiny_fb, cfg, x, call).data)
               or (steps == 0 and not rs and not np.array_equal(out, x)))
        violations += bool(bad)
    verdict(2, violations == 0, f"{violations} violations in 10000 calls")


@pytest.mark.slow
def test_criterion_8_eot_variance_and_sweep(desk_report):
    train = generate_synthetic("gaussian-blobs", 300, 4, 12, seed=11, noise=0.1)
    f_b = nn.train_standard(nn.init_params(nn.desk_fb_spec(4, 12, 16), 1), train,
                            SGDConfig(0.05, 0.9, 2, 32), 0).model
    pipe = DefensePipeline(nn.init_params(nn.desk_fa_spec(4, 12), 2), f_b, TransformConfig(0.3, 13))
    pipe = train_defense(pipe, train, SGDConfig(0.05, 0.9, 2, 32), 0)[0]
    x, y = train.images[:2], train.labels[:2]

    def sample(xx, yy, seeds, idx):
        return A.identity_gradient(pipe, xx, yy, seeds, idx)

    scaled = {}
    for K in (10, 40, 160):
        est = np.stack([A.eot_gradient(sample, x, y, K, r) for r in range(40)])
        scaled[K] = K * float(np.mean(est.var(axis=0, ddof=1)))
    spread = max(scaled.values()) / min(scaled.values())

    curve = desk_report["curves"]["attack.eot_samples"]
    ks = [r[0] for r in curve["rows"]]
    robust = dict(zip(ks, [r[2] for r in curve["rows"]]))
    gap = abs(robust[100] - robust[500])
    verdict(8, spread <= 2 and gap < 0.05,
            f"K*var spread {spread:.2f} (<=2) over K=10,40,160; success gap K=100 vs 500 {gap:.3f} (<0.05)")


# -- desk-preset criteria -------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_undefended_collapse(desk_report, desk_timings):
    u = desk_report["undefended"]
    t = desk_timings["phases"]
    runtime = t["data"] + t["train-fa"] + t["undefended"]
    verdict(3, u["standard_accuracy_test"] > 0.9 and u["pgd_robust_accuracy"] < 0.1 and runtime < 600,
            f"standard {u['standard_accuracy_test']:.3f} (>0.9), PGD eps=0.3 robust "
            f"{u['pgd_robust_accuracy']:.3f} (<0.1), {runtime:.0f}s")


@pytest.mark.slow
def test_criterion_4_bpda_trend(desk_report, desk_timings):
    curve = desk_report["curves"]["defense.N"]
    rows = {r[0]: r for r in curve["rows"]}
    col = curve["columns"].index("robust_bpda-softsign")
    std13, rob13, rob1 = rows[13][1], rows[13][col], rows[1][col]
    t = desk_timings["phases"]
    runtime = t["pretrain-fb"] + t["train-defense"] + t["sweep"]
    verdict(4, std13 - rob13 <= 0.15 and rob13 - rob1 >= 0.20 and runtime < 1800,
            f"N=13 std {std13:.2f} robust {rob13:.2f} (gap <=0.15); N=1 robust {rob1:.2f} "
            f"(lift >=0.20); {runtime:.0f}s")


@pytest.mark.slow
def test_criterion_5_delta_trend(desk_report):
    curve = desk_report["curves"]["defense.delta"]
    col = curve["columns"].index("robust_bpda-i")
    series = [r[col] for r in sorted(curve["rows"])]
    verdict(5, check_ordering(series, 0.03), f"BPDA-I robust over delta 0.05..0.3: {series}")


@pytest.mark.slow
def test_criterion_6_fb_selection(desk_report):
    sel = desk_report["diagnostics"]["fb_selection"]
    modes = ("untrained", "standard", "adversarial")
    linf = [sel[m]["linf_distance"] for m in modes]
    rob = [sel[m]["robust_accuracy"] for m in modes]
    verdict(6, check_ordering(linf, strict=True) and check_ordering(rob, strict=True),
            f"L-inf distance {linf}; BPDA-I robust {rob} (both strictly increasing)")


@pytest.mark.slow
def test_criterion_7_training_cost(desk_timings):
    ratio = desk_timings.get("defense_over_adversarial_training")
    verdict(7, ratio is not None and ratio < 1, f"defense / adversarial training wall-clock = {ratio}")


@pytest.mark.slow
def test_criterion_9_reparam_gap(desk_report):
    r = desk_report["diagnostics"]["reparam"]
    std, rob = desk_report["standard_accuracy"], desk_report["robust"]["reparam"]
    verdict(9, r["ratio"] >= 2 and std - rob <= 0.05,
            f"validation/train MSE {r['ratio']:.2f} (>=2); accuracy {std:.2f} -> {rob:.2f} (drop <=0.05)")


@pytest.mark.slow
def test_criterion_10_report_integrity(desk):
    a, b = ((d / "report.json").read_bytes() for d in desk)
    consistent = True
    for raw in (a, b):
        rep = json.loads(raw)
        consistent &= rep["worst_case"] == min(rep["robust"].values())
        bpda = [v for k, v in rep["robust"].items() if k in A.BPDA_FAMILY]
        consistent &= rep["worst_case_bpda"] == (min(bpda) if bpda else None)
    verdict(10, a == b and consistent, f"byte-identical reruns: {a == b}; worst-case consistent: {consistent}")
