import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advtrans import attacks as A
from advtrans import nn
from advtrans.attacks import AttackConfig, AttackEntry, AttackResult
from advtrans.autodiff import SurrogateMode
from advtrans.errors import ArgumentError, ConfigurationError
from advtrans.nn import Dense, Flatten, Model, ModelSpec, SGDConfig
from advtrans.transform import DefensePipeline, TransformConfig, start_noise, train_defense


@pytest.fixture(scope="module")
def pipeline(blobs, tiny_fb):
    pipe = DefensePipeline(nn.init_params(nn.desk_fa_spec(4, 12), 0), tiny_fb, TransformConfig(0.2, 4))
    return train_defense(pipe, blobs, SGDConfig(0.05, 0.9, 3, 32), 0)[0]


@pytest.fixture(scope="module")
def identity_pipeline(tiny_fa, tiny_fb):
    return DefensePipeline(tiny_fa, tiny_fb, TransformConfig(0.2, 0, random_start=False))


def linear_model(w, b, shape) -> Model:
    spec = ModelSpec((Flatten(), Dense(int(np.prod(shape)), len(b))), len(b), shape)
    return Model(spec, {"1.weight": np.asarray(w, float), "1.bias": np.asarray(b, float)})


class TestConfig:
    def test_default_stepsize_scales_with_epsilon(self):
        assert AttackConfig(0.031).stepsize == pytest.approx(0.002)
        assert AttackConfig(0.3).stepsize == pytest.approx(0.002 * 0.3 / 0.031)

    @pytest.mark.parametrize("kwargs", [dict(epsilon=0), dict(steps=0), dict(eot_samples=0)])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigurationError):
            AttackConfig(**kwargs)

    def test_presets(self):
        assert A.CIFAR_PRESET.epsilon == 0.031 and A.MNIST_PRESET.epsilon == 0.3


class TestFgsm:
    def test_zero_epsilon(self, tiny_fa, blobs_test):
        x = blobs_test.images[:5]
        assert np.array_equal(A.fgsm(tiny_fa, x, blobs_test.labels[:5], 0.0).adversarial_examples, x)

    def test_logistic_sign_oracle(self):
        # two-logit linear model: logit difference is w.x, CE gradient = (sigmoid - t) w
        w = np.array([0.7, -1.3, 0.0, 2.1])
        weight = np.stack([np.zeros(4), w], axis=1)
        model = linear_model(weight, [0.0, 0.1], (1, 1, 4))
        x = np.full((1, 1, 1, 4), 0.5)
        for label in (0, 1):
            s = 1 / (1 + np.exp(-(w @ x.reshape(-1) + 0.1)))
            grad = (s - label) * w
            adv = A.fgsm(model, x, np.array([label]), 0.1).adversarial_examples
            assert np.array_equal(np.sign(adv - x).reshape(-1), np.sign(grad))

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.0, 0.5), st.integers(0, 1000))
    def test_budget(self, tiny_fa, eps, seed):
        x = np.random.default_rng(seed).random((3, 1, 12, 12))
        adv = A.fgsm(tiny_fa, x, np.array([0, 1, 2]), eps).adversarial_examples
        A.check_budget(x, adv, eps)


class TestPgd:
    def test_missing_rule(self, tiny_fa, blobs_test):
        with pytest.raises(ConfigurationError):
            A.pgd_attack(None, blobs_test.images, blobs_test.labels, AttackConfig(), A.model_classifier(tiny_fa))

    def test_one_step_is_fgsm_from_start(self, tiny_fa, blobs_test):
        x, y = blobs_test.images[:8], blobs_test.labels[:8]
        cfg = AttackConfig(0.1, 1, 0.1, rng_seed=3)
        res = A.pgd_attack(A.model_rule(tiny_fa), x, y, cfg, A.model_classifier(tiny_fa))
        start = np.clip(x + start_noise(x.shape, 0.1, 3, A._PGD_START, np.arange(8)), 0, 1)
        step = np.clip(start + 0.1 * np.sign(A.loss_gradient(tiny_fa, start, y)), x - 0.1, x + 0.1)
        expected = np.clip(step, 0, 1)
        keep = ~(A.model_classifier(tiny_fa)(x, None) != y)
        assert np.allclose(res.adversarial_examples[keep], expected[keep], atol=1e-15)

    def test_breaks_plain_model(self, tiny_fa, blobs_test):
        res = A.run_pgd(A.model_rule(tiny_fa), blobs_test, AttackConfig(0.3, 20, 0.03),
                        A.model_classifier(tiny_fa))
        assert res.robust_accuracy < nn.evaluate_accuracy(tiny_fa, blobs_test)

    def test_transfer_to_self_equals_pgd(self, tiny_fa, blobs_test):
        cfg = AttackConfig(0.2, 5, 0.05)
        a = A.run_pgd(A.model_rule(tiny_fa), blobs_test, cfg, A.model_classifier(tiny_fa))
        b = A.transfer_attack(A.model_rule(tiny_fa), A.model_classifier(tiny_fa), blobs_test, cfg)
        assert a.robust_accuracy == b.robust_accuracy

    def test_batching_is_invisible(self, tiny_fa, blobs_test):
        cfg = AttackConfig(0.2, 3, 0.05)
        a = A.run_pgd(A.model_rule(tiny_fa), blobs_test, cfg, A.model_classifier(tiny_fa), batch_size=7)
        b = A.run_pgd(A.model_rule(tiny_fa), blobs_test, cfg, A.model_classifier(tiny_fa), batch_size=500)
        assert np.array_equal(a.adversarial_examples, b.adversarial_examples)

    def test_budget_violation_detected(self):
        with pytest.raises(AssertionError):
            A.check_budget(np.zeros((1, 1, 2, 2)), np.full((1, 1, 2, 2), 0.2), 0.1)


class TestBpda:
    def test_exact_surrogate_rejected(self, pipeline, blobs_test):
        with pytest.raises(ConfigurationError):
            A.bpda_gradient(pipeline, blobs_test.images[:2], blobs_test.labels[:2], SurrogateMode.EXACT)

    @pytest.mark.parametrize("mode", ["soft-sign", "tanh"])
    def test_identity_transform_gives_exact_gradient(self, identity_pipeline, blobs_test, mode):
        x, y = blobs_test.images[:4], blobs_test.labels[:4]
        assert np.allclose(A.bpda_gradient(identity_pipeline, x, y, mode),
                           A.loss_gradient(identity_pipeline.f_a, x, y), atol=1e-14)

    def test_finite_for_thirteen_steps(self, tiny_fa, tiny_fb, blobs_test):
        pipe = DefensePipeline(tiny_fa, tiny_fb, TransformConfig(0.2, 13))
        g = A.bpda_gradient(pipe, blobs_test.images[:4], blobs_test.labels[:4], "soft-sign", 1)
        assert np.all(np.isfinite(g)) and np.any(g != 0)

    def test_hand_unrolled_one_step(self):
        # f_b, f_a linear on 2 pixels.  g(x) = clip(P(x - e*sgn(u))), u = d CE_b/dx.
        # BPDA: dg/dx = P'(.)*(I - e * diag(softsign'(u)) * du/dx) with clip interior.
        wb = np.array([[1.0, -2.0], [0.5, 1.0]])
        wa = np.array([[2.0, -1.0], [-1.0, 1.5]])
        f_b = linear_model(wb, [0.0, 0.0], (1, 1, 2))
        f_a = linear_model(wa, [0.0, 0.0], (1, 1, 2))
        delta, eps = 0.5, 0.1
        pipe = DefensePipeline(f_a, f_b, TransformConfig(delta, 1, eps, random_start=False))
        x = np.array([0.4, 0.6])
        y = 0
        zb = wb.T @ x
        y_l = int(np.argmin(zb))
        pb = np.exp(zb) / np.exp(zb).sum()
        u = wb @ (pb - np.eye(2)[y_l])
        jac_u = wb @ (np.diag(pb) - np.outer(pb, pb)) @ wb.T
        gx = x - eps * np.sign(u)
        d = gx - x  # inside the ball: projection derivative 1 (w.r.t. its input) and 0 w.r.t. center
        assert np.all(np.abs(d) < delta)
        dg_dx = np.eye(2) - eps * np.diag(1 / (1 + np.abs(u)) ** 2) @ jac_u
        za = wa.T @ gx
        pa = np.exp(za) / np.exp(za).sum()
        dl_dg = wa @ (pa - np.eye(2)[y])
        expected = dg_dx.T @ dl_dg
        got = A.bpda_gradient(pipe, x.reshape(1, 1, 1, 2), np.array([y]), "soft-sign").reshape(-1)
        assert np.allclose(got, expected, atol=1e-12)

    def test_identity_attack_degenerate_is_pgd(self, identity_pipeline, blobs_test):
        cfg = AttackConfig(0.2, 5, 0.05)
        a = A.bpda_identity_attack(identity_pipeline, blobs_test, cfg)
        b = A.run_pgd(A.model_rule(identity_pipeline.f_a), blobs_test, cfg,
                      A.model_classifier(identity_pipeline.f_a))
        assert np.array_equal(a.adversarial_examples, b.adversarial_examples)

    def test_robust_not_above_standard(self, pipeline, blobs_test):
        from advtrans.transform import defense_accuracy
        std = defense_accuracy(pipeline, blobs_test)
        for res in (A.bpda_unrolled_attack(pipeline, blobs_test, AttackConfig(0.1, 3, 0.03, eot_samples=2)),
                    A.bpda_identity_attack(pipeline, blobs_test, AttackConfig(0.1, 3, 0.03, eot_samples=2)),
                    A.white_box_transfer(pipeline, blobs_test, AttackConfig(0.1, 3, 0.03))):
            assert res.robust_accuracy <= std
            A.check_budget(blobs_test.images, res.adversarial_examples, 0.1)


class TestEot:
    def test_deterministic_rule(self, identity_pipeline, blobs_test):
        x, y = blobs_test.images[:3], blobs_test.labels[:3]

        def rule(xx, yy, seeds, idx):
            return A.loss_gradient(identity_pipeline.f_a, xx, yy)
        single = rule(x, y, None, None)
        assert np.allclose(A.eot_gradient(rule, x, y, 7, 0), single, atol=1e-13)

    def test_unbiased_on_linear_toy(self):
        # per-sample "gradient" x + delta with delta ~ U[-D, D]: expectation is x
        x = np.full((1, 1, 1, 1), 0.5)
        D, K = 0.3, 10_000

        def rule(xx, yy, seeds, idx):
            keys = [(int(s) << 32) + int(i) for s, i in zip(seeds, idx)]
            return xx + start_noise(xx.shape, D, 0, 99, keys)
        est = A.eot_gradient(rule, x, np.zeros(1, dtype=int), K, 5)
        se = D / np.sqrt(3) / np.sqrt(K)
        assert abs(est.item() - 0.5) < 3 * se

    def test_invalid_k(self):
        with pytest.raises(ArgumentError):
            A.eot_gradient(lambda *a: a[0], np.zeros((1, 1, 1, 1)), np.zeros(1), 0, 0)


class TestFiniteDifference:
    def test_identity_jacobian(self):
        x = np.full((1, 3, 3), 0.5)
        g = lambda z: z  # noqa: E731
        assert A.finite_difference_entry(g, x, 4, 4, 1e-3) == pytest.approx(1.0)
        assert A.finite_difference_entry(g, x, 4, 5, 1e-3) == 0.0
        assert A.finite_difference_entry(g, x, 4, 4, 2e-3) == pytest.approx(1.0)

    def test_identity_pipeline(self, identity_pipeline, blobs_test):
        vals = A.fd_sweep(identity_pipeline, blobs_test.images[0], 70, 70, [1e-4, 1e-2])
        assert np.allclose(vals, 1.0)

    def test_bad_arguments(self):
        x = np.zeros((1, 2, 2))
        with pytest.raises(ArgumentError):
            A.finite_difference_entry(lambda z: z, x, 4, 0, 1e-3)
        with pytest.raises(ArgumentError):
            A.finite_difference_entry(lambda z: z, x, 0, 0, 0.0)


class TestQuery:
    def test_trivial_budget_returns_clean(self, tiny_fa, blobs_test):
        oracle = A.QueryOracle.for_model(tiny_fa)
        res = A.blackbox_query_attack(oracle, blobs_test, AttackConfig(0.2), population=1, generations=0)
        assert np.array_equal(res.adversarial_examples, blobs_test.images)
        assert np.array_equal(res.success_flags, nn.predict(tiny_fa, blobs_test.images) != blobs_test.labels)

    def test_budget_and_queries(self, pipeline, blobs_test):
        oracle = A.QueryOracle.for_pipeline(pipeline)
        res = A.blackbox_query_attack(oracle, blobs_test, AttackConfig(0.15), population=4, generations=3)
        A.check_budget(blobs_test.images, res.adversarial_examples, 0.15)
        assert oracle.queries > 0 and res.queries_used.sum() <= oracle.queries

    def test_search_only_adds_successes(self, pipeline, blobs_test):
        cfg = AttackConfig(0.3)
        none = A.blackbox_query_attack(A.QueryOracle.for_pipeline(pipeline), blobs_test, cfg, 10, 0)
        some = A.blackbox_query_attack(A.QueryOracle.for_pipeline(pipeline), blobs_test, cfg, 10, 15)
        assert np.all(some.success_flags[none.success_flags])
        assert some.success_flags.mean() > none.success_flags.mean()

    def test_oracle_exposes_no_gradient(self, tiny_fa):
        oracle = A.QueryOracle.for_model(tiny_fa)
        assert not any("grad" in name for name in dir(oracle))


class TestReparam:
    def test_identity_target_is_learnable(self, tiny_fa, tiny_fb, blobs):
        pipe = DefensePipeline(tiny_fa, tiny_fb, TransformConfig(0.2, 0, random_start=False))
        s = A.train_reparam_surrogate(pipe, blobs.head(100), blobs.subset(range(100, 150)),
                                      nn.surrogate_spec(12, 32), SGDConfig(0.01, 0.9, 5, 20), 0)
        assert s.train_loss_trace[-1] < 1e-6

    def test_wrong_surrogate_shape(self, pipeline, blobs):
        with pytest.raises(ConfigurationError):
            A.train_reparam_surrogate(pipeline, blobs.head(10), blobs.head(10), nn.desk_fb_spec(4, 12),
                                      SGDConfig(), 0)

    def test_attack_runs_and_reports_losses(self, pipeline, blobs, blobs_test):
        out = A.reparameterization_attack(pipeline, blobs.head(60), blobs.subset(range(60, 90)), blobs_test,
                                          nn.surrogate_spec(12, 32), AttackConfig(0.1, 3, 0.03),
                                          SGDConfig(0.005, 0.9, 3, 20))
        assert out.result.info["train_mse"] == out.surrogate.train_loss_trace[-1]
        A.check_budget(blobs_test.images, out.result.adversarial_examples, 0.1)


def fixed(acc: float, n: int = 10):
    k = int(round((1 - acc) * n))
    flags = np.array([True] * k + [False] * (n - k))
    return lambda: AttackResult(np.zeros((n, 1, 1, 1)), flags)


class TestWorstCase:
    def test_minimum_and_name(self):
        r = A.worst_case_eval(0.9, [AttackEntry("b", fixed(0.7)), AttackEntry("a", fixed(0.5)),
                                    AttackEntry("bpda-i", fixed(0.6))])
        assert r.worst_case == pytest.approx(0.5) and r.best_attack == "a"
        assert r.worst_case_bpda == pytest.approx(0.6) and r.best_bpda_attack == "bpda-i"

    def test_single(self):
        r = A.worst_case_eval(0.9, [AttackEntry("pgd", fixed(0.3))])
        assert r.worst_case == pytest.approx(0.3) and r.worst_case_bpda is None

    def test_empty(self):
        with pytest.raises(ArgumentError):
            A.worst_case_eval(0.9, [])

    def test_ties_lexicographic(self):
        assert A.argmin_name({"zeta": 0.4, "alpha": 0.4, "mid": 0.5}) == "alpha"

    @given(st.lists(st.integers(0, 10), min_size=1, max_size=6), st.integers(0, 10))
    def test_adding_attack_never_raises_worst_case(self, accs, extra):
        suite = [AttackEntry(f"a{i}", fixed(v / 10)) for i, v in enumerate(accs)]
        before = A.worst_case_eval(1.0, suite).worst_case
        after = A.worst_case_eval(1.0, suite + [AttackEntry("new", fixed(extra / 10))]).worst_case
        assert after <= before
