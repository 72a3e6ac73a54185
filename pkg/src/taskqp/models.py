"""Predictive models trained with plain numpy: a linear map and a two
hidden-layer perceptron (affine, batch-norm, ReLU, dropout per layer) with
an optional residual connection from input to output and an optional
softmax head.

All stochastic choices are keyed: dropout masks come from a counter-based
generator seeded by (seed, epoch, batch), so a training run is a pure
function of its configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "LinearModel",
    "MlpModel",
    "Adam",
    "fit_linear_regression",
    "fit_mle",
    "sgd_train",
    "dropout_rng",
    "softmax",
    "cross_entropy",
    "cross_entropy_grad",
    "mse",
    "mse_grad",
    "residual_variance",
    "save_checkpoint",
    "load_checkpoint",
]

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def dropout_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    """Counter-based generator keyed by position in the training run."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence((seed, epoch, batch))))


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)
    return float(-np.log(p).mean())


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean negative log-likelihood in the probabilities."""
    g = np.zeros_like(probs)
    idx = np.arange(len(labels))
    g[idx, labels] = -1.0 / (len(labels) * np.clip(probs[idx, labels], 1e-12, None))
    return g


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(((pred - target) ** 2).mean())


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


class _ModelBase:
    """Shared parameter bookkeeping; subclasses define forward/backward."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._cache: dict = {}

    def params(self) -> dict[str, np.ndarray]:
        return self._params

    def param_names(self) -> list[str]:
        return sorted(self._params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self._params[k].ravel() for k in self.param_names()])

    def set_flat(self, theta: np.ndarray) -> None:
        off = 0
        for k in self.param_names():
            sz = self._params[k].size
            self._params[k][...] = theta[off:off + sz].reshape(self._params[k].shape)
            off += sz
        if off != theta.size:
            raise ValueError(f"flat vector has {theta.size} entries, expected {off}")

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in self.param_names()])

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.copy() for k, v in self._params.items()}
        out.update({f"buffer/{k}": v.copy() for k, v in self._buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            kind, name = k.split("/", 1)
            target = self._params if kind == "param" else self._buffers
            target[name][...] = v


class LinearModel(_ModelBase):
    def __init__(self, d_in: int, d_out: int, seed: int = 0,
                 softmax_head: bool = False):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.softmax_head = softmax_head
        rng = np.random.default_rng((seed, 0xA11CE))
        self._params["W"] = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        self._params["b"] = np.zeros(d_out)

    def config(self) -> dict:
        return {"class": "LinearModel", "d_in": self.d_in, "d_out": self.d_out,
                "softmax_head": self.softmax_head}

    def forward(self, x: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = x @ self._params["W"].T + self._params["b"]
        cache = {"x": x}
        if self.softmax_head:
            out = softmax(out)
            cache["probs"] = out
        self._cache = cache
        return out

    def backward(self, dL_dout: np.ndarray):
        cache = self._cache
        x = cache["x"]
        d = np.atleast_2d(dL_dout)
        if self.softmax_head:
            p = cache["probs"]
            d = p * (d - (d * p).sum(axis=1, keepdims=True))
        grads = {"W": d.T @ x, "b": d.sum(axis=0)}
        return grads, d @ self._params["W"]


def _bn_forward(x, gamma, beta, rmean, rvar, mode):
    if mode == "train":
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        rmean *= 1.0 - _BN_MOMENTUM
        rmean += _BN_MOMENTUM * mean
        rvar *= 1.0 - _BN_MOMENTUM
        rvar += _BN_MOMENTUM * var
    else:
        mean, var = rmean.copy(), rvar.copy()
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, {"xhat": xhat, "inv": inv, "gamma": gamma,
                                 "mode": mode}


def _bn_backward(dout, cache):
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if cache["mode"] == "train":
        B = xhat.shape[0]
        dx = (inv / B) * (B * dxhat - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
    else:
        # statistics held fixed: the normalization is a constant affine map
        dx = dxhat * inv
    return dx, dgamma, dbeta


class MlpModel(_ModelBase):
    """Two hidden layers of affine + batch-norm + ReLU + dropout, an affine
    output layer, and optionally a linear residual shortcut from the input."""

    def __init__(self, d_in: int, d_out: int, hidden: int = 200, seed: int = 0,
                 softmax_head: bool = False, residual: bool = False,
                 dropout_p: float = 0.2):
        super().__init__()
        self.d_in, self.d_out, self.hidden = d_in, d_out, hidden
        self.softmax_head = softmax_head
        self.residual = residual
        self.dropout_p = dropout_p
        rng = np.random.default_rng((seed, 0xB0B))
        p = self._params
        p["W1"] = rng.standard_normal((hidden, d_in)) * np.sqrt(2.0 / d_in)
        p["b1"] = np.zeros(hidden)
        p["g1"] = np.ones(hidden)
        p["be1"] = np.zeros(hidden)
        p["W2"] = rng.standard_normal((hidden, hidden)) * np.sqrt(2.0 / hidden)
        p["b2"] = np.zeros(hidden)
        p["g2"] = np.ones(hidden)
        p["be2"] = np.zeros(hidden)
        if residual:
            # zero hidden-path output: the net starts as exactly its shortcut
            p["W3"] = np.zeros((d_out, hidden))
            p["b3"] = np.zeros(d_out)
            p["Wres"] = np.zeros((d_out, d_in))
            p["bres"] = np.zeros(d_out)
        else:
            p["W3"] = rng.standard_normal((d_out, hidden)) * np.sqrt(1.0 / hidden)
            p["b3"] = np.zeros(d_out)
        b = self._buffers
        b["rm1"] = np.zeros(hidden)
        b["rv1"] = np.ones(hidden)
        b["rm2"] = np.zeros(hidden)
        b["rv2"] = np.ones(hidden)

    def config(self) -> dict:
        return {"class": "MlpModel", "d_in": self.d_in, "d_out": self.d_out,
                "hidden": self.hidden, "softmax_head": self.softmax_head,
                "residual": self.residual, "dropout_p": self.dropout_p}

    def init_residual(self, W: np.ndarray, b: np.ndarray) -> None:
        if not self.residual:
            raise ValueError("model was built without a residual connection")
        self._params["Wres"][...] = W
        self._params["bres"][...] = b

    def _dropout(self, x, mode, rng):
        if mode != "train" or self.dropout_p <= 0.0:
            return x, None
        if rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        keep = 1.0 - self.dropout_p
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def forward(self, x: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p, bufs = self._params, self._buffers
        cache = {"x": x}
        a1 = x @ p["W1"].T + p["b1"]
        n1, cache["bn1"] = _bn_forward(a1, p["g1"], p["be1"], bufs["rm1"],
                                       bufs["rv1"], mode)
        r1 = np.maximum(n1, 0.0)
        cache["relu1"] = n1 > 0
        d1, cache["mask1"] = self._dropout(r1, mode, rng)
        a2 = d1 @ p["W2"].T + p["b2"]
        n2, cache["bn2"] = _bn_forward(a2, p["g2"], p["be2"], bufs["rm2"],
                                       bufs["rv2"], mode)
        r2 = np.maximum(n2, 0.0)
        cache["relu2"] = n2 > 0
        d2, cache["mask2"] = self._dropout(r2, mode, rng)
        cache["d1"], cache["d2"] = d1, d2
        out = d2 @ p["W3"].T + p["b3"]
        if self.residual:
            out = out + x @ p["Wres"].T + p["bres"]
        if self.softmax_head:
            out = softmax(out)
            cache["probs"] = out
        self._cache = cache
        return out

    def backward(self, dL_dout: np.ndarray):
        p = self._params
        cache = self._cache
        x = cache["x"]
        d = np.atleast_2d(dL_dout)
        if self.softmax_head:
            pr = cache["probs"]
            d = pr * (d - (d * pr).sum(axis=1, keepdims=True))
        grads = {}
        grads["W3"] = d.T @ cache["d2"]
        grads["b3"] = d.sum(axis=0)
        if self.residual:
            grads["Wres"] = d.T @ x
            grads["bres"] = d.sum(axis=0)
        dd2 = d @ p["W3"]
        if cache["mask2"] is not None:
            dd2 = dd2 * cache["mask2"]
        dn2 = dd2 * cache["relu2"]
        da2, grads["g2"], grads["be2"] = _bn_backward(dn2, cache["bn2"])
        grads["W2"] = da2.T @ cache["d1"]
        grads["b2"] = da2.sum(axis=0)
        dd1 = da2 @ p["W2"]
        if cache["mask1"] is not None:
            dd1 = dd1 * cache["mask1"]
        dn1 = dd1 * cache["relu1"]
        da1, grads["g1"], grads["be1"] = _bn_backward(dn1, cache["bn1"])
        grads["W1"] = da1.T @ x
        grads["b1"] = da1.sum(axis=0)
        dx = da1 @ p["W1"]
        if self.residual:
            dx = dx + d @ p["Wres"]
        return grads, dx


class Adam:
    """Adam with bias correction; parameters update in sorted-name order."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            params[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def fit_linear_regression(x: np.ndarray, y: np.ndarray,
                          ridge: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Least squares by normal equations with a small ridge; returns (W, b)
    mapping x -> W x + b with y possibly multi-output."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    X = np.hstack([x, np.ones((x.shape[0], 1))])
    XtX = X.T @ X + ridge * np.eye(X.shape[1])
    beta = np.linalg.solve(XtX, X.T @ y)
    return beta[:-1].T.copy(), beta[-1].copy()


def residual_variance(pred: np.ndarray, target: np.ndarray,
                      floor: float = 1e-8) -> np.ndarray:
    """Per-output-dimension variance of prediction residuals."""
    r = np.asarray(target) - np.asarray(pred)
    return np.maximum((r ** 2).mean(axis=0), floor)


def sgd_train(model, x, y, config, batch_grad_fn: Callable,
              val_fn: Callable | None = None, patience: int | None = None,
              history: list | None = None,
              epoch_hook: Callable | None = None):
    """Shared minibatch Adam loop.

    ``batch_grad_fn(model, xb, yb, rng)`` returns a gradient dict (averaged
    over the batch) or None to skip the step.  ``val_fn(model)`` returns the
    validation metric; the best-metric state is restored on exit.  The
    shuffle for epoch e is keyed by (seed, e) and the dropout generator for
    batch i by (seed, e, i), so the trajectory depends only on the inputs.
    ``epoch_hook(epoch)`` runs after each epoch's updates and before its
    validation, for callers that track per-epoch state.

    The starting parameters are scored before any update, so a fit that never
    improves on its warm start hands the warm start back.
    """
    N = len(x)
    adam = Adam(lr=config.learning_rate)
    best_val = np.inf
    best_state = None
    bad_evals = 0
    eval_points = 0
    if val_fn is not None:
        best_val = val_fn(model)
        best_state = model.state()
    for epoch in range(config.epochs):
        perm = np.random.default_rng((config.seed, 1009, epoch)).permutation(N)
        for bi, start in enumerate(range(0, N, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            rng = dropout_rng(config.seed, epoch, bi)
            grads = batch_grad_fn(model, x[idx], y[idx], rng)
            if grads is None:
                continue
            adam.step(model.params(), grads)
        if epoch_hook is not None:
            epoch_hook(epoch)
        if val_fn is not None and (epoch + 1) % config.eval_every == 0:
            metric = val_fn(model)
            eval_points += 1
            if history is not None:
                history.append((epoch, metric))
            if metric < best_val - 1e-12:
                best_val = metric
                best_state = model.state()
                bad_evals = 0
            else:
                bad_evals += 1
                if patience is not None and bad_evals >= patience:
                    break
    if best_state is not None:
        model.load_state(best_state)
    return best_val


def fit_mle(model, x, y, config, x_val=None, y_val=None,
            loss: str = "cross_entropy"):
    """Maximum-likelihood / least-squares fit; returns the model holding the
    parameters with the best validation loss seen during training."""
    if loss not in ("cross_entropy", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    if x_val is None:
        # deterministic tail split when no explicit validation set is given
        n_val = max(1, int(0.2 * len(x)))
        x, x_val = x[:-n_val], x[-n_val:]
        y, y_val = y[:-n_val], y[-n_val:]

    def batch_grad(model, xb, yb, rng):
        return mle_batch_grad(model, xb, yb, rng, loss)

    def val_metric(model):
        out = model.forward(x_val, mode="eval")
        return cross_entropy(out, y_val) if loss == "cross_entropy" else mse(out, y_val)

    sgd_train(model, x, y, config, batch_grad, val_fn=val_metric,
              patience=getattr(config, "patience", None))
    return model


def mle_batch_grad(model, xb, yb, rng, loss: str):
    """The gradient step fit_mle takes on one batch; exposed so task-loss
    training with nll_mix=1 follows the identical path."""
    out = model.forward(xb, mode="train", rng=rng)
    dl = cross_entropy_grad(out, yb) if loss == "cross_entropy" else mse_grad(out, yb)
    grads, _ = model.backward(dl)
    return grads


def save_checkpoint(model, path) -> None:
    arrays = model.state()
    arrays["__config__"] = np.frombuffer(
        json.dumps(model.config()).encode(), dtype=np.uint8)
    arrays["__version__"] = np.array([CHECKPOINT_VERSION])
    np.savez(path, **arrays)


def load_checkpoint(path):
    data = np.load(path)
    version = int(data["__version__"][0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = json.loads(bytes(data["__config__"]).decode())
    cls = cfg.pop("class")
    if cls == "LinearModel":
        model = LinearModel(cfg["d_in"], cfg["d_out"],
                            softmax_head=cfg["softmax_head"])
    elif cls == "MlpModel":
        model = MlpModel(cfg["d_in"], cfg["d_out"], hidden=cfg["hidden"],
                         softmax_head=cfg["softmax_head"],
                         residual=cfg["residual"], dropout_p=cfg["dropout_p"])
    else:
        raise ValueError(f"unknown model class {cls!r}")
    model.load_state({k: data[k] for k in data.files
                      if not k.startswith("__")})
    return model
