"""Model forward/backward correctness, determinism, and fitting behavior."""

from dataclasses import dataclass

import numpy as np
import pytest

from taskqp import models
from taskqp.gradcheck import check_gradient, finite_diff


@dataclass
class Cfg:
    learning_rate: float = 1e-2
    batch_size: int = 8
    epochs: int = 3
    seed: int = 0
    eval_every: int = 1


def flat_loss(model, x, w, mode="eval", rng=None):
    def f(theta):
        model.set_flat(theta)
        out = model.forward(x, mode=mode, rng=rng)
        return float((w * out).sum())
    return f


class TestLinearModel:
    def test_gradient_matches_finite_differences(self, rng):
        model = models.LinearModel(4, 3, seed=1)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((5, 3))
        theta = model.get_flat()
        model.forward(x, mode="eval")
        grads, _ = model.backward(w)
        numeric = finite_diff(flat_loss(model, x, w), theta, step=1e-6)
        rep = check_gradient(model.flatten_grads(grads), numeric)
        assert rep.passed, rep

    def test_softmax_gradient_matches_finite_differences(self, rng):
        model = models.LinearModel(4, 5, seed=2, softmax_head=True)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 5))
        theta = model.get_flat()
        model.forward(x, mode="eval")
        grads, _ = model.backward(w)
        numeric = finite_diff(flat_loss(model, x, w), theta, step=1e-6)
        assert check_gradient(model.flatten_grads(grads), numeric).passed

    def test_zero_weights_softmax_gives_uniform(self):
        model = models.LinearModel(7, 4, softmax_head=True)
        model.params()["W"][...] = 0.0
        model.params()["b"][...] = 0.0
        out = model.forward(np.random.default_rng(0).standard_normal((6, 7)))
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_input_gradient(self, rng):
        model = models.LinearModel(3, 2, seed=0)
        x = rng.standard_normal((1, 3))
        w = rng.standard_normal((1, 2))
        model.forward(x)
        _, dx = model.backward(w)
        num = finite_diff(
            lambda v: float((w * model.forward(v[None, :])).sum()), x[0], step=1e-6)
        np.testing.assert_allclose(dx[0], num, rtol=1e-6, atol=1e-9)


class TestMlpModel:
    def test_eval_mode_gradient_matches_finite_differences(self, rng):
        # batch-norm uses fixed running statistics here, dropout is off
        model = models.MlpModel(4, 3, hidden=9, seed=3)
        # non-trivial running stats
        model._buffers["rm1"] += rng.standard_normal(9) * 0.1
        model._buffers["rv2"] += rng.random(9) * 0.1
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((5, 3))
        theta = model.get_flat()
        model.forward(x, mode="eval")
        grads, _ = model.backward(w)
        numeric = finite_diff(flat_loss(model, x, w), theta, step=1e-6)
        rep = check_gradient(model.flatten_grads(grads), numeric)
        assert rep.passed, rep

    def test_train_mode_batchnorm_gradient(self, rng):
        # with dropout disabled the train-mode loss is deterministic, so the
        # batch-statistics backward formulas can be checked directly
        model = models.MlpModel(3, 2, hidden=7, seed=4, dropout_p=0.0)
        x = rng.standard_normal((6, 3))
        w = rng.standard_normal((6, 2))
        theta = model.get_flat()
        buffers0 = {k: v.copy() for k, v in model._buffers.items()}

        def f(t):
            model.set_flat(t)
            for k, v in buffers0.items():
                model._buffers[k][...] = v
            out = model.forward(x, mode="train")
            return float((w * out).sum())

        for k, v in buffers0.items():
            model._buffers[k][...] = v
        model.set_flat(theta)
        model.forward(x, mode="train")
        grads, _ = model.backward(w)
        numeric = finite_diff(f, theta, step=1e-6)
        rep = check_gradient(model.flatten_grads(grads), numeric)
        assert rep.passed, rep

    def test_softmax_residual_gradient(self, rng):
        model = models.MlpModel(4, 3, hidden=6, seed=5, softmax_head=True,
                                residual=True)
        model.init_residual(rng.standard_normal((3, 4)), rng.standard_normal(3))
        x = rng.standard_normal((4, 4))
        w = rng.standard_normal((4, 3))
        theta = model.get_flat()
        model.forward(x, mode="eval")
        grads, _ = model.backward(w)
        numeric = finite_diff(flat_loss(model, x, w), theta, step=1e-6)
        assert check_gradient(model.flatten_grads(grads), numeric).passed

    def test_residual_init_reproduces_linear_regression(self, rng):
        x = rng.standard_normal((40, 6))
        y = x @ rng.standard_normal((6, 3)) + rng.standard_normal(3)
        W, b = models.fit_linear_regression(x, y)
        model = models.MlpModel(6, 3, hidden=11, seed=6, residual=True)
        model.init_residual(W, b)
        out = model.forward(x, mode="eval")
        np.testing.assert_array_equal(out, x @ W.T + b)

    def test_dropout_deterministic_per_key(self, rng):
        model = models.MlpModel(4, 2, hidden=8, seed=7)
        x = rng.standard_normal((10, 4))
        a = model.forward(x, mode="train", rng=models.dropout_rng(1, 2, 3))
        b = model.forward(x, mode="train", rng=models.dropout_rng(1, 2, 3))
        np.testing.assert_array_equal(a, b)
        c = model.forward(x, mode="train", rng=models.dropout_rng(1, 2, 4))
        assert np.abs(a - c).max() > 0

    def test_train_mode_without_rng_rejected(self, rng):
        model = models.MlpModel(4, 2, hidden=8, seed=8)
        with pytest.raises(ValueError, match="rng"):
            model.forward(rng.standard_normal((3, 4)), mode="train")

    def test_unknown_mode_rejected(self, rng):
        model = models.MlpModel(4, 2, hidden=8, seed=8)
        with pytest.raises(ValueError, match="mode"):
            model.forward(rng.standard_normal((3, 4)), mode="predict")


class TestAdam:
    def test_two_steps_match_hand_computation(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        opt = models.Adam(lr=lr)
        p = {"w": np.array([1.0])}
        g1, g2 = np.array([0.5]), np.array([-0.25])

        m = (1 - b1) * g1
        v = (1 - b2) * g1 * g1
        w_ref = 1.0 - lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
        opt.step(p, {"w": g1})
        np.testing.assert_allclose(p["w"], w_ref, rtol=1e-14)

        m = b1 * m + (1 - b1) * g2
        v = b2 * v + (1 - b2) * g2 * g2
        w_ref = w_ref - lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
        opt.step(p, {"w": g2})
        np.testing.assert_allclose(p["w"], w_ref, rtol=1e-14)

    def test_first_step_is_signed_lr(self):
        opt = models.Adam(lr=1e-3)
        p = {"w": np.zeros(3)}
        opt.step(p, {"w": np.array([4.0, -2.0, 1e-4])})
        np.testing.assert_allclose(p["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-4)


class TestFitting:
    def test_linear_regression_exact_on_linear_data(self):
        x = np.arange(1.0, 9.0)[:, None]
        y = 2.0 * x[:, 0]
        W, b = models.fit_linear_regression(x, y)
        assert abs(W[0, 0] - 2.0) < 1e-8
        assert abs(b[0]) < 1e-8

    def test_linear_regression_multi_output_shapes(self, rng):
        x = rng.standard_normal((30, 5))
        y = rng.standard_normal((30, 4))
        W, b = models.fit_linear_regression(x, y)
        assert W.shape == (4, 5) and b.shape == (4,)

    def test_mle_loss_decreases_first_epoch_on_separable_data(self, rng):
        n, k = 40, 3
        y = rng.integers(0, k, n)
        x = np.eye(k)[y] * 4.0 + 0.05 * rng.standard_normal((n, k))
        model = models.LinearModel(k, k, seed=0, softmax_head=True)
        before = models.cross_entropy(model.forward(x), y)
        cfg = Cfg(epochs=1, learning_rate=0.05)
        models.fit_mle(model, x, y, cfg, x_val=x, y_val=y, loss="cross_entropy")
        after = models.cross_entropy(model.forward(x), y)
        assert after < before

    def test_mle_returns_best_validation_params(self, rng):
        # run long enough to overfit; returned params must match the best
        # validation loss seen at any evaluation point
        n = 30
        x = rng.standard_normal((n, 2))
        y = (x @ np.array([1.0, -1.0]) + 0.1 * rng.standard_normal(n))[:, None]
        xv = rng.standard_normal((10, 2))
        yv = (xv @ np.array([1.0, -1.0]))[:, None]
        model = models.LinearModel(2, 1, seed=1)
        history = []
        cfg = Cfg(epochs=12, learning_rate=0.05, batch_size=4)

        def batch_grad(model, xb, yb, rng_):
            return models.mle_batch_grad(model, xb, yb, rng_, "mse")

        best = models.sgd_train(model, x, y, cfg, batch_grad,
                                val_fn=lambda mdl: models.mse(mdl.forward(xv), yv),
                                history=history)
        final_val = models.mse(model.forward(xv), yv)
        assert final_val == pytest.approx(best, rel=1e-12)
        assert best == pytest.approx(min(v for _, v in history), rel=1e-12)

    def test_mle_rejects_unknown_loss(self, rng):
        model = models.LinearModel(2, 2, softmax_head=True)
        with pytest.raises(ValueError, match="loss"):
            models.fit_mle(model, np.zeros((4, 2)), np.zeros(4, dtype=int),
                           Cfg(), loss="hinge")

    def test_residual_variance_per_dimension_and_floor(self):
        pred = np.zeros((4, 2))
        target = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        v = models.residual_variance(pred, target)
        assert v[0] == pytest.approx(1.0)
        assert v[1] == pytest.approx(1e-8)


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, tmp_path, rng):
        model = models.MlpModel(5, 3, hidden=7, seed=9, residual=True,
                                softmax_head=False)
        model.init_residual(rng.standard_normal((3, 5)), rng.standard_normal(3))
        model._buffers["rm1"] += 0.3
        x = rng.standard_normal((4, 5))
        path = tmp_path / "model.npz"
        models.save_checkpoint(model, path)
        loaded = models.load_checkpoint(path)
        np.testing.assert_array_equal(loaded.forward(x), model.forward(x))

    def test_linear_roundtrip(self, tmp_path, rng):
        model = models.LinearModel(3, 2, seed=4, softmax_head=True)
        path = tmp_path / "lin.npz"
        models.save_checkpoint(model, path)
        loaded = models.load_checkpoint(path)
        x = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(loaded.forward(x), model.forward(x))

    def test_version_mismatch_rejected(self, tmp_path):
        model = models.LinearModel(2, 2)
        path = tmp_path / "v.npz"
        models.save_checkpoint(model, path)
        data = dict(np.load(path))
        data["__version__"] = np.array([99])
        np.savez(path, **data)
        with pytest.raises(ValueError, match="version"):
            models.load_checkpoint(path)


class TestLossHelpers:
    def test_cross_entropy_gradient_matches_finite_differences(self, rng):
        probs = rng.random((4, 3)) + 0.1
        probs /= probs.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 3, 4)
        g = models.cross_entropy_grad(probs, labels)
        num = finite_diff(
            lambda p: models.cross_entropy(p.reshape(4, 3), labels),
            probs.ravel(), step=1e-7).reshape(4, 3)
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)

    def test_mse_gradient_matches_finite_differences(self, rng):
        pred = rng.standard_normal((3, 4))
        target = rng.standard_normal((3, 4))
        g = models.mse_grad(pred, target)
        num = finite_diff(lambda p: models.mse(p.reshape(3, 4), target),
                          pred.ravel(), step=1e-6).reshape(3, 4)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-10)
