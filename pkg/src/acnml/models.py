"""Differentiable classifiers and MAP fitting.

Parameters are flat float64 vectors. All likelihood quantities use the
*sum* over examples; the fitting objective is the *mean* log-likelihood
minus ``lam * ||theta||^2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import ContractError, ConvergenceError, NumericalError


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled inputs: ``inputs`` is (n, d), ``labels`` holds ints in [0, k)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.inputs, dtype=float, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels)
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ContractError(f"inputs {X.shape} and labels {y.shape} disagree")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ContractError("dataset needs n >= 1 and d >= 1")
        if not np.all(np.isfinite(X)):
            raise ContractError("inputs contain non-finite values")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        yi = y.astype(np.int64)
        if not np.array_equal(yi, y) or yi.min() < 0 or yi.max() >= self.num_classes:
            raise ContractError(f"labels must be integers in [0, {self.num_classes})")
        X.setflags(write=False)
        yi = yi.copy()
        yi.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", yi)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.n

    def concat(self, other: "Dataset") -> "Dataset":
        if other.num_classes != self.num_classes or other.dim != self.dim:
            raise ContractError("cannot concatenate datasets of different shape")
        return Dataset(np.vstack([self.inputs, other.inputs]),
                       np.concatenate([self.labels, other.labels]), self.num_classes)

    def with_point(self, x, y: int) -> "Dataset":
        """Return a copy with ``(x, y)`` appended."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return self.concat(Dataset(x, np.array([y]), self.num_classes))

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.num_classes)


@dataclass(frozen=True)
class L2Prior:
    """Penalty ``lam * ||theta||^2`` added to the mean log-likelihood objective."""

    lam: float = 0.0

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ContractError(f"prior lambda must be finite and >= 0, got {self.lam}")


@dataclass(frozen=True)
class OptimizerConfig:
    """Stopping rule for :func:`fit_map`.

    ``tolerance`` bounds the infinity norm of the objective gradient. ``None``
    picks a per-model default: 1e-8 for Newton (exact Hessians), 1e-5 otherwise.
    """

    tolerance: Optional[float] = None
    max_iters: Optional[int] = None


def log_softmax(z, axis=1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(z, axis=1):
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _as_theta(model, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != model.param_count:
        raise ContractError(
            f"theta has shape {theta.shape}, model expects ({model.param_count},)")
    return theta


def _as_inputs(model, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.input_dim:
        raise ContractError(f"input dimension {X.shape[1]} != model input_dim {model.input_dim}")
    return X


class Classifier:
    """Shared plumbing for the concrete classifiers.

    Subclasses implement ``logits``, ``per_example_grads`` and
    ``hessian_log_likelihood``; everything else is derived.
    """

    kind = "abstract"
    exact_hessian = False
    input_dim: int
    num_classes: int
    hidden_sizes: tuple = ()

    @property
    def param_count(self) -> int:
        raise NotImplementedError

    def log_probs(self, theta, X) -> np.ndarray:
        """(n, k) matrix of ``log p_theta(c | x_i)``."""
        return log_softmax(self.logits(theta, X), axis=1)

    def log_likelihood(self, theta, data: Dataset) -> float:
        self._check_data(data)
        lp = self.log_probs(theta, data.inputs)
        return float(lp[np.arange(data.n), data.labels].sum())

    def log_prob(self, theta, x, y: int) -> float:
        return float(self.log_probs(theta, x)[0, y])

    def grad_log_prob(self, theta, x, y: int) -> np.ndarray:
        """Gradient of ``log p_theta(y | x)`` for a single input."""
        X = _as_inputs(self, x)
        return self.per_example_grads(theta, X, np.array([y]))[0]

    def grad_log_likelihood(self, theta, data: Dataset) -> np.ndarray:
        self._check_data(data)
        return self.per_example_grads(theta, data.inputs, data.labels).sum(axis=0)

    def batch_logits(self, thetas, x) -> np.ndarray:
        """(m, k) logits at a single input ``x`` under each row of ``thetas``."""
        return np.vstack([self.logits(t, x) for t in np.atleast_2d(thetas)])

    def label_grads(self, thetas, x, labels) -> np.ndarray:
        """Row ``i``: gradient of ``log p(labels[i] | x)`` at ``thetas[i]``."""
        X = _as_inputs(self, x)
        return np.vstack([self.per_example_grads(t, X, np.array([c]))
                          for t, c in zip(thetas, labels)])

    def query_grad_fn(self, x):
        """Return ``f(thetas)`` whose row ``c`` is the gradient of
        ``log p(c | x)`` at ``thetas[c]``; ``x`` is validated once."""
        X = _as_inputs(self, x)
        labels = np.arange(self.num_classes)
        return lambda thetas: self.label_grads(thetas, X[0], labels)

    def predict(self, theta, x) -> np.ndarray:
        """Class probabilities at a single input ``x``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ContractError("predict expects a single input vector")
        return softmax(self.logits(theta, x[None, :]), axis=1)[0]

    def predict_batch(self, theta, X) -> np.ndarray:
        return softmax(self.logits(theta, X), axis=1)

    def per_example_hessians(self, theta, X, y) -> np.ndarray:
        """(n, p, p) Hessians of each ``log p_theta(y_i | x_i)``.

        Central differences of :meth:`per_example_grads`; subclasses with
        closed forms override this.
        """
        theta = _as_theta(self, theta)
        X = _as_inputs(self, X)
        p = self.param_count
        out = np.empty((X.shape[0], p, p))
        h = 1e-4
        for j in range(p):
            e = np.zeros(p)
            e[j] = h
            out[:, :, j] = (self.per_example_grads(theta + e, X, y)
                            - self.per_example_grads(theta - e, X, y)) / (2 * h)
        return 0.5 * (out + out.transpose(0, 2, 1))

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.param_count)

    def describe(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim,
                "num_classes": self.num_classes, "hidden_sizes": list(self.hidden_sizes)}

    def _check_data(self, data: Dataset):
        if data.dim != self.input_dim or data.num_classes != self.num_classes:
            raise ContractError(
                f"dataset (d={data.dim}, k={data.num_classes}) does not match model "
                f"(d={self.input_dim}, k={self.num_classes})")


class LogisticRegression(Classifier):
    """Multiclass softmax regression with one logit row per class.

    ``theta.reshape(k, d + 1)`` holds ``[w_c, b_c]`` in row ``c``; the bias is
    the last column.
    """

    kind = "logistic-regression"
    exact_hessian = True

    def __init__(self, input_dim: int, num_classes: int):
        if input_dim < 1 or num_classes < 2:
            raise ContractError("logistic regression needs d >= 1 and k >= 2")
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden_sizes = ()

    @property
    def param_count(self) -> int:
        return self.num_classes * (self.input_dim + 1)

    def weights(self, theta) -> np.ndarray:
        return _as_theta(self, theta).reshape(self.num_classes, self.input_dim + 1)

    def bias_index(self) -> np.ndarray:
        d1 = self.input_dim + 1
        return np.arange(self.num_classes) * d1 + self.input_dim

    @staticmethod
    def _augment(X):
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def logits(self, theta, X) -> np.ndarray:
        Wb = self.weights(theta)
        X = _as_inputs(self, X)
        return X @ Wb[:, :-1].T + Wb[:, -1]

    def batch_logits(self, thetas, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.input_dim:
            raise ContractError(f"input dimension {x.shape[0]} != model input_dim {self.input_dim}")
        Wb = np.asarray(thetas, dtype=float).reshape(-1, self.num_classes, self.input_dim + 1)
        return Wb[:, :, :-1] @ x + Wb[:, :, -1]

    def label_grads(self, thetas, x, labels) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        R = -softmax(self.batch_logits(thetas, x), axis=1)
        R[np.arange(R.shape[0]), np.asarray(labels)] += 1.0
        xa = np.append(x, 1.0)
        return (R[:, :, None] * xa).reshape(R.shape[0], -1)

    def query_grad_fn(self, x):
        xa = np.append(_as_inputs(self, x)[0], 1.0)
        k = self.num_classes
        # logits = thetas @ B and grads = R @ B.T with B = kron(I_k, xa) as (p, k)
        B = np.kron(np.eye(k), xa[:, None])
        Bt = np.ascontiguousarray(B.T)
        diag = np.arange(k) * (k + 1)

        def grads(thetas):
            z = thetas @ B
            e = np.exp(z - z.max(axis=1, keepdims=True))
            R = e / -e.sum(axis=1, keepdims=True)
            R.flat[diag] += 1.0
            return R @ Bt

        return grads

    def per_example_grads(self, theta, X, y) -> np.ndarray:
        X = _as_inputs(self, X)
        P = softmax(self.logits(theta, X), axis=1)
        R = -P
        R[np.arange(X.shape[0]), np.asarray(y)] += 1.0
        Xa = self._augment(X)
        return (R[:, :, None] * Xa[:, None, :]).reshape(X.shape[0], -1)

    def grad_log_likelihood(self, theta, data: Dataset) -> np.ndarray:
        self._check_data(data)
        P = softmax(self.logits(theta, data.inputs), axis=1)
        P[np.arange(data.n), data.labels] -= 1.0
        return -(P.T @ self._augment(data.inputs)).ravel()

    def _curvature_blocks(self, P):
        # -d^2 log p / d logits^2 = diag(p) - p p^T, per example
        W = -P[:, :, None] * P[:, None, :]
        idx = np.arange(P.shape[1])
        W[:, idx, idx] += P
        return W

    def hessian_log_likelihood(self, theta, data: Dataset) -> np.ndarray:
        self._check_data(data)
        X = data.inputs
        P = softmax(self.logits(theta, X), axis=1)
        Xa = self._augment(X)
        W = self._curvature_blocks(P)
        k, d1 = self.num_classes, self.input_dim + 1
        H = -np.einsum("nab,ni,nj->aibj", W, Xa, Xa).reshape(k * d1, k * d1)
        H = 0.5 * (H + H.T)
        if not np.all(np.isfinite(H)):
            raise NumericalError("non-finite Hessian entries")
        return H

    def per_example_hessians(self, theta, X, y) -> np.ndarray:
        # labels do not enter the softmax Hessian
        X = _as_inputs(self, X)
        P = softmax(self.logits(theta, X), axis=1)
        Xa = self._augment(X)
        W = self._curvature_blocks(P)
        p = self.param_count
        H = -np.einsum("nab,ni,nj->naibj", W, Xa, Xa).reshape(X.shape[0], p, p)
        return H


class MLP(Classifier):
    """Fully connected tanh network with a softmax output layer.

    Parameters are packed layer by layer as ``[W_1.ravel(), b_1, W_2.ravel(), ...]``
    with ``W_l`` of shape (fan_out, fan_in).
    """

    kind = "mlp"
    exact_hessian = False

    def __init__(self, input_dim: int, num_classes: int, hidden_sizes: Sequence[int] = (16,)):
        if input_dim < 1 or num_classes < 2 or any(h < 1 for h in hidden_sizes):
            raise ContractError("invalid MLP architecture")
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        sizes = [self.input_dim, *self.hidden_sizes, self.num_classes]
        self._shapes = list(zip(sizes[1:], sizes[:-1]))
        self._param_count = sum(o * i + o for o, i in self._shapes)

    @property
    def param_count(self) -> int:
        return self._param_count

    def unpack(self, theta):
        theta = _as_theta(self, theta)
        layers, pos = [], 0
        for o, i in self._shapes:
            W = theta[pos:pos + o * i].reshape(o, i)
            pos += o * i
            b = theta[pos:pos + o]
            pos += o
            layers.append((W, b))
        return layers

    def init_params(self, rng=None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        parts = []
        for o, i in self._shapes:
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(i), size=o * i))
            parts.append(np.zeros(o))
        return np.concatenate(parts)

    def _forward(self, theta, X):
        layers = self.unpack(theta)
        acts = [_as_inputs(self, X)]
        for W, b in layers[:-1]:
            acts.append(np.tanh(acts[-1] @ W.T + b))
        W, b = layers[-1]
        return layers, acts, acts[-1] @ W.T + b

    def logits(self, theta, X) -> np.ndarray:
        return self._forward(theta, X)[2]

    def _stacked_forward(self, thetas, x):
        # one input, many parameter vectors: weights carry a leading batch axis
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        m = thetas.shape[0]
        layers, pos = [], 0
        for o, i in self._shapes:
            W = thetas[:, pos:pos + o * i].reshape(m, o, i)
            pos += o * i
            layers.append((W, thetas[:, pos:pos + o]))
            pos += o
        a = np.broadcast_to(np.asarray(x, dtype=float).ravel(), (m, self.input_dim))
        acts = [a]
        for W, b in layers[:-1]:
            acts.append(np.tanh(np.einsum("moi,mi->mo", W, acts[-1]) + b))
        W, b = layers[-1]
        return layers, acts, np.einsum("moi,mi->mo", W, acts[-1]) + b

    def batch_logits(self, thetas, x) -> np.ndarray:
        return self._stacked_forward(thetas, x)[2]

    def label_grads(self, thetas, x, labels) -> np.ndarray:
        layers, acts, z = self._stacked_forward(thetas, x)
        m = z.shape[0]
        delta = -softmax(z, axis=1)
        delta[np.arange(m), np.asarray(labels)] += 1.0
        grads = []
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            a = acts[l]
            grads.append(delta)
            grads.append((delta[:, :, None] * a[:, None, :]).reshape(m, -1))
            if l > 0:
                delta = np.einsum("mo,moi->mi", delta, W) * (1.0 - a * a)
        return np.concatenate(grads[::-1], axis=1)

    def _backward(self, theta, X, y, per_example):
        layers, acts, z = self._forward(theta, X)
        n = acts[0].shape[0]
        delta = -softmax(z, axis=1)
        delta[np.arange(n), np.asarray(y)] += 1.0
        grads = []
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            a = acts[l]
            if per_example:
                grads.append(delta)
                grads.append((delta[:, :, None] * a[:, None, :]).reshape(n, -1))
            else:
                grads.append(delta.sum(axis=0))
                grads.append((delta.T @ a).ravel())
            if l > 0:
                delta = (delta @ W) * (1.0 - a * a)
        axis = 1 if per_example else 0
        return np.concatenate(grads[::-1], axis=axis)

    def per_example_grads(self, theta, X, y) -> np.ndarray:
        return self._backward(theta, X, y, per_example=True)

    def grad_log_likelihood(self, theta, data: Dataset) -> np.ndarray:
        self._check_data(data)
        return self._backward(theta, data.inputs, data.labels, per_example=False)

    def hessian_log_likelihood(self, theta, data: Dataset, step: float = 1e-4) -> np.ndarray:
        """Central differences of the analytic gradient, one column at a time."""
        theta = _as_theta(self, theta)
        p = self.param_count
        H = np.empty((p, p))
        for j in range(p):
            e = np.zeros(p)
            e[j] = step
            H[:, j] = (self.grad_log_likelihood(theta + e, data)
                       - self.grad_log_likelihood(theta - e, data)) / (2 * step)
        H = 0.5 * (H + H.T)
        if not np.all(np.isfinite(H)):
            raise NumericalError("non-finite Hessian entries")
        return H


def build_model(spec: dict, input_dim: int, num_classes: int) -> Classifier:
    kind = spec.get("kind", "logistic-regression")
    if kind in ("logistic-regression", "logistic"):
        return LogisticRegression(input_dim, num_classes)
    if kind == "mlp":
        return MLP(input_dim, num_classes, spec.get("hidden_sizes", [16]))
    raise ContractError(f"unknown model kind {kind!r}")


# -- MAP objective -----------------------------------------------------------

def map_objective(model, theta, data: Dataset, prior: L2Prior) -> float:
    """Mean log-likelihood minus ``lam * ||theta||^2``."""
    theta = _as_theta(model, theta)
    return model.log_likelihood(theta, data) / data.n - prior.lam * float(theta @ theta)


def map_objective_grad(model, theta, data: Dataset, prior: L2Prior) -> np.ndarray:
    theta = _as_theta(model, theta)
    return model.grad_log_likelihood(theta, data) / data.n - 2.0 * prior.lam * theta


def map_objective_hessian(model, theta, data: Dataset, prior: L2Prior) -> np.ndarray:
    H = model.hessian_log_likelihood(theta, data) / data.n
    return H - 2.0 * prior.lam * np.eye(model.param_count)


@dataclass
class FitInfo:
    iterations: int = 0
    grad_norm: float = float("nan")
    objective: float = float("nan")
    method: str = ""


def fit_map(model, data: Dataset, prior: L2Prior = L2Prior(), init=None,
            opt: OptimizerConfig = OptimizerConfig(), info: Optional[FitInfo] = None) -> np.ndarray:
    """Maximise the mean log-likelihood minus the L2 penalty.

    Newton's method with backtracking for models with exact Hessians,
    L-BFGS otherwise. Raises :class:`ConvergenceError` when the gradient
    infinity norm does not reach the tolerance within ``max_iters``.
    """
    if data.n < 1:
        raise ContractError("cannot fit an empty dataset")
    check = getattr(model, "_check_data", None)
    if check is not None:
        check(data)
    theta = model.init_params(0) if init is None else _as_theta(model, init).copy()
    info = FitInfo() if info is None else info
    if model.param_count == 0:
        info.grad_norm = 0.0
        info.method = "none"
        return theta
    if getattr(model, "exact_hessian", False):
        return _fit_newton(model, data, prior, theta, opt, info)
    return _fit_lbfgs(model, data, prior, theta, opt, info)


def _fit_newton(model, data, prior, theta, opt, info):
    tol = 1e-8 if opt.tolerance is None else opt.tolerance
    max_iters = 100 if opt.max_iters is None else opt.max_iters
    info.method = "newton"
    p = model.param_count
    f = map_objective(model, theta, data, prior)
    for it in range(max_iters):
        g = map_objective_grad(model, theta, data, prior)
        gnorm = float(np.max(np.abs(g)))
        info.iterations, info.grad_norm, info.objective = it, gnorm, f
        if not np.isfinite(gnorm):
            raise NumericalError("non-finite gradient during Newton iterations")
        J = -map_objective_hessian(model, theta, data, prior)
        try:
            cho = linalg.cho_factor(J, lower=True)
            step = linalg.cho_solve(cho, g)
        except linalg.LinAlgError:
            # singular curvature (label gauge at lam = 0, or separable data):
            # minimum-norm Newton step; separable data keeps growing theta and
            # runs out of iterations below
            step = np.linalg.lstsq(J, g, rcond=1e-10)[0]
        snorm = float(np.max(np.abs(step)))
        if gnorm <= tol and snorm <= 1e-6 * max(1.0, float(np.max(np.abs(theta)))):
            return theta
        if gnorm < 1e-6:
            # local quadratic convergence: take the full step
            theta = theta + step
            f = map_objective(model, theta, data, prior)
            continue
        t, slope = 1.0, float(g @ step)
        for _ in range(60):
            cand = theta + t * step
            fc = map_objective(model, cand, data, prior)
            if np.isfinite(fc) and fc >= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise ConvergenceError("line search failed", gnorm, theta)
        theta, f = cand, fc
    g = map_objective_grad(model, theta, data, prior)
    info.grad_norm = float(np.max(np.abs(g)))
    raise ConvergenceError(f"Newton did not converge in {max_iters} iterations",
                           info.grad_norm, theta)


def _fit_lbfgs(model, data, prior, theta, opt, info):
    tol = 1e-5 if opt.tolerance is None else opt.tolerance
    max_iters = 5000 if opt.max_iters is None else opt.max_iters
    info.method = "lbfgs"

    def fun(t):
        val = map_objective(model, t, data, prior)
        grad = map_objective_grad(model, t, data, prior)
        return -val, -grad

    res = optimize.minimize(fun, theta, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iters, "gtol": tol * 0.5,
                                     "ftol": 1e-16, "maxcor": 30})
    theta = res.x
    g = map_objective_grad(model, theta, data, prior)
    gnorm = float(np.max(np.abs(g)))
    info.iterations, info.grad_norm, info.objective = int(res.nit), gnorm, -float(res.fun)
    if not np.isfinite(gnorm):
        raise NumericalError("non-finite gradient in L-BFGS fit")
    if gnorm > tol:
        raise ConvergenceError(f"L-BFGS stopped after {res.nit} iterations ({res.message})",
                               gnorm, theta)
    return theta
