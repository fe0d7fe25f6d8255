import numpy as np
import pytest

from ranklab import diffcore as dc
from ranklab.diffcore import (
    ParamSet,
    Tensor,
    cross_entropy_soft,
    grad_check,
    value_and_grad,
)


def entropy(p):
    """Independent oracle: H(p) = -sum p log p."""
    p = np.asarray(p, dtype=np.float64)
    return -float((p * np.log(p)).sum())


class TestCrossEntropySoft:
    def test_one_hot_uniform_logits(self):
        target = np.array([1.0, 0.0, 0.0])
        logits = np.zeros(3)
        assert cross_entropy_soft(target, logits) == pytest.approx(np.log(3), abs=1e-12)

    def test_self_entropy_two_classes(self):
        logits = np.array([0.7, 0.7])
        target = dc.softmax_np(logits)
        assert cross_entropy_soft(target, logits) == pytest.approx(np.log(2), abs=1e-12)

    def test_root_marginal_entropy(self):
        # normalized (1.25, 5/6, 0.2); oracle entropy frozen below
        raw = np.array([1.25, 0.5 + 1.0 / 3.0, 0.2])
        p = raw / raw.sum()
        assert entropy(p) == pytest.approx(0.9109908631705586, abs=1e-12)
        logits = np.log(p)  # softmax(log p) = p
        assert cross_entropy_soft(p, logits) == pytest.approx(entropy(p), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy_soft(np.array([0.5, 0.5]), np.zeros(3))

    def test_unnormalized_target_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy_soft(np.array([0.5, 0.6]), np.zeros(2))

    def test_gradient_is_softmax_minus_target(self):
        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=7), requires_grad=True)
        t = rng.random(7)
        t /= t.sum()
        loss = cross_entropy_soft(t, z)
        loss.backward()
        np.testing.assert_allclose(z.grad, dc.softmax_np(z.data) - t, atol=1e-14)

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = rng.integers(2, 9)
            p = rng.random(n)
            p /= p.sum()
            z = rng.normal(scale=3.0, size=n)
            assert cross_entropy_soft(p, z) >= entropy(p) - 1e-12

    def test_equality_iff_softmax_matches(self):
        p = np.array([0.2, 0.3, 0.5])
        assert cross_entropy_soft(p, np.log(p)) == pytest.approx(entropy(p), abs=1e-12)
        assert cross_entropy_soft(p, np.log(p) + 0.4) == pytest.approx(entropy(p), abs=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = rng.integers(2, 8)
            p = rng.random(n)
            p /= p.sum()
            z = rng.normal(scale=4.0, size=n)
            c = rng.normal(scale=100.0)
            a = cross_entropy_soft(p, z)
            b = cross_entropy_soft(p, z + c)
            assert b == pytest.approx(a, abs=1e-9)


class TestGradCheck:
    def test_square(self):
        params = ParamSet({"x": np.array([3.0])})

        def f(leaves):
            return dc.tsum(dc.mul(leaves["x"], leaves["x"]))

        _, grads = value_and_grad(f, params)
        assert grads["x"][0] == pytest.approx(6.0, abs=1e-12)
        report = grad_check(f, params, eps=1e-5)
        assert report.max_rel_error < 1e-8

    def test_softmax_ce_identity(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=5)
        y = np.zeros(5)
        y[2] = 1.0
        params = ParamSet({"z": z})

        def f(leaves):
            return cross_entropy_soft(y, leaves["z"])

        _, grads = value_and_grad(f, params)
        np.testing.assert_allclose(grads["z"], dc.softmax_np(z) - y, atol=1e-14)
        assert grad_check(f, params).max_rel_error < 1e-7

    def test_zero_gradient_absolute_fallback(self):
        params = ParamSet({"x": np.zeros(3)})

        def f(leaves):
            # cubic: gradient is exactly zero at the origin
            x = leaves["x"]
            return dc.tsum(dc.mul(dc.mul(x, x), x))

        report = grad_check(f, params, eps=1e-4)
        assert report.max_rel_error < 1e-7

    def test_invalid_eps_rejected(self):
        params = ParamSet({"x": np.ones(1)})
        with pytest.raises(ValueError):
            grad_check(lambda lv: dc.tsum(lv["x"]), params, eps=0.0)

    def test_sampled_coordinates(self):
        rng = np.random.default_rng(9)
        params = ParamSet({"w": rng.normal(size=(10, 10))})

        def f(leaves):
            return dc.tsum(dc.mul(leaves["w"], leaves["w"]))

        report = grad_check(f, params, sample=20, seed=1)
        assert report.max_rel_error < 1e-8


class TestOps:
    def test_matmul_grads(self):
        rng = np.random.default_rng(2)
        params = ParamSet({"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))})

        def f(leaves):
            return dc.tsum(dc.matmul(leaves["a"], leaves["b"]))

        assert grad_check(f, params).max_rel_error < 1e-7

    def test_batched_matmul_grads(self):
        rng = np.random.default_rng(4)
        params = ParamSet({"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))})

        def f(leaves):
            out = dc.matmul(leaves["a"], leaves["b"])
            return dc.tsum(dc.mul(out, out))

        assert grad_check(f, params).max_rel_error < 1e-6

    def test_layer_norm_grads(self):
        rng = np.random.default_rng(7)
        params = ParamSet({
            "x": rng.normal(size=(4, 6)),
            "g": 1.0 + 0.1 * rng.normal(size=6),
            "b": 0.1 * rng.normal(size=6),
        })

        def f(leaves):
            out = dc.layer_norm(leaves["x"], leaves["g"], leaves["b"])
            return dc.tsum(dc.mul(out, out))

        assert grad_check(f, params).max_rel_error < 1e-6

    def test_gather_softmax_logsigmoid_grads(self):
        rng = np.random.default_rng(8)
        idx = np.array([0, 2, 2, 1])
        params = ParamSet({"table": rng.normal(size=(3, 5))})

        def f(leaves):
            rows = dc.gather_rows(leaves["table"], idx)
            s = dc.softmax(rows)
            ls = dc.log_sigmoid(dc.tsum(s, axis=0, keepdims=True))
            return dc.tsum(dc.mul(ls, ls))

        assert grad_check(f, params).max_rel_error < 1e-6

    def test_transpose_reshape_concat_grads(self):
        rng = np.random.default_rng(12)
        params = ParamSet({"x": rng.normal(size=(2, 3, 4)), "y": rng.normal(size=(3, 8))})

        def f(leaves):
            xt = dc.transpose(leaves["x"], (1, 0, 2))
            xr = dc.reshape(xt, (3, 8))
            c = dc.concat([xr, leaves["y"]], axis=-1)
            return dc.tsum(dc.mul(c, c))

        assert grad_check(f, params).max_rel_error < 1e-6

    def test_weighted_soft_ce_matches_rowwise(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(4, 6))
        targets = rng.random((4, 6))
        targets /= targets.sum(axis=1, keepdims=True)
        weights = rng.random(4)
        fused = dc.weighted_soft_ce(targets, Tensor(logits), weights).item()
        ref = sum(w * cross_entropy_soft(t, z)
                  for w, t, z in zip(weights, targets, logits))
        assert fused == pytest.approx(ref, rel=1e-12)

    def test_paramset_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ParamSet({"x": np.array([1.0, np.inf])})

    def test_paramset_fixed_shapes(self):
        ps = ParamSet({"x": np.zeros((2, 2))})
        with pytest.raises(ValueError):
            ps["x"] = np.zeros(3)
