import math

import numpy as np
import pytest
from scipy.stats import norm

from acnml.models import Classifier, Dataset, LogisticRegression, log_softmax


class GaussianMeanModel:
    """Observations ``z_i ~ N(theta, sigma^2 I)``; labels are ignored.

    Quadratic log-likelihood with constant Hessian ``-n / sigma^2 I``.
    """

    kind = "gaussian-mean"
    exact_hessian = True

    def __init__(self, dim=1, sigma=1.0):
        self.input_dim = dim
        self.num_classes = 2
        self.sigma = sigma

    @property
    def param_count(self):
        return self.input_dim

    def init_params(self, rng=None):
        return np.zeros(self.input_dim)

    def log_likelihood(self, theta, data):
        r = data.inputs - theta
        n, d = r.shape
        return float(-0.5 * np.sum(r * r) / self.sigma**2
                     - 0.5 * n * d * math.log(2 * math.pi * self.sigma**2))

    def grad_log_likelihood(self, theta, data):
        return (data.inputs - theta).sum(axis=0) / self.sigma**2

    def hessian_log_likelihood(self, theta, data):
        return -data.n / self.sigma**2 * np.eye(self.input_dim)

    def per_example_grads(self, theta, X, y):
        return (np.atleast_2d(X) - theta) / self.sigma**2

    def grad_log_prob(self, theta, x, y):
        return (np.asarray(x, dtype=float) - theta) / self.sigma**2

    def per_example_hessians(self, theta, X, y):
        n = np.atleast_2d(X).shape[0]
        return np.broadcast_to(-np.eye(self.input_dim) / self.sigma**2,
                               (n, self.input_dim, self.input_dim)).copy()


class ProbitModel(Classifier):
    """Binary ``p(y=1 | x) = Phi(theta x)`` with a scalar weight."""

    kind = "probit"

    def __init__(self):
        self.input_dim = 1
        self.num_classes = 2

    @property
    def param_count(self):
        return 1

    def log_probs(self, theta, X):
        u = np.atleast_2d(X)[:, 0] * np.asarray(theta)[0]
        return np.column_stack([norm.logcdf(-u), norm.logcdf(u)])

    def predict(self, theta, x):
        return np.exp(self.log_probs(theta, np.atleast_2d(x))[0])


class FixedModel(Classifier):
    """A model class with a single member: fixed logistic weights, no parameters."""

    kind = "fixed"

    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.num_classes, self.input_dim = self.W.shape

    @property
    def param_count(self):
        return 0

    def logits(self, theta, X):
        return np.atleast_2d(X) @ self.W.T + self.b

    def per_example_grads(self, theta, X, y):
        return np.zeros((np.atleast_2d(X).shape[0], 0))

    def hessian_log_likelihood(self, theta, data):
        return np.zeros((0, 0))


class TwoParamLogistic(Classifier):
    """Binary logistic model on 1-D inputs with logits ``(0, a x + b)``."""

    kind = "two-param"
    exact_hessian = True

    def __init__(self):
        self.input_dim = 1
        self.num_classes = 2

    @property
    def param_count(self):
        return 2

    def logits(self, theta, X):
        u = np.atleast_2d(X)[:, 0] * theta[0] + theta[1]
        return np.column_stack([np.zeros_like(u), u])

    def per_example_grads(self, theta, X, y):
        X = np.atleast_2d(X)
        p1 = 1.0 / (1.0 + np.exp(-(X[:, 0] * theta[0] + theta[1])))
        r = np.asarray(y) - p1
        return np.column_stack([r * X[:, 0], r])

    def hessian_log_likelihood(self, theta, data):
        x = data.inputs[:, 0]
        p1 = 1.0 / (1.0 + np.exp(-(x * theta[0] + theta[1])))
        w = p1 * (1 - p1)
        F = np.column_stack([x, np.ones_like(x)])
        return -(F * w[:, None]).T @ F

    def per_example_hessians(self, theta, X, y):
        X = np.atleast_2d(X)
        p1 = 1.0 / (1.0 + np.exp(-(X[:, 0] * theta[0] + theta[1])))
        F = np.column_stack([X[:, 0], np.ones(len(X))])
        return -(p1 * (1 - p1))[:, None, None] * F[:, :, None] * F[:, None, :]


def two_blob_data(n, seed, k=2, spread=1.5, noise=1.0):
    """Overlapping Gaussian classes on a circle (non-separable for moderate n)."""
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * np.arange(k) / k
    means = spread * np.column_stack([np.cos(ang), np.sin(ang)])
    y = rng.integers(0, k, n)
    X = means[y] + noise * rng.standard_normal((n, 2))
    return Dataset(X, y, k)


@pytest.fixture
def blob_data():
    return two_blob_data(60, 0)


@pytest.fixture
def logreg():
    return LogisticRegression(2, 2)


# -- acceptance reporting -----------------------------------------------------------

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """``acceptance(num, ok, detail)`` records one criterion line, prints it and returns ``ok``."""
    def record(num, ok, detail):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
