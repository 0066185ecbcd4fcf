"""Gaussian approximate posteriors over a flat parameter vector.

Three fitting routes are provided: Laplace (full or diagonal precision at the
MAP), SWAG-D (moments of late SGD iterates) and a diagonal variational fit
with reparameterised gradients.

File format written by :func:`save_posterior`::

    ACNML-POSTERIOR 1\\n
    kind=<diagonal|full> p=<int> alpha=<float.hex> source=<label>\\n
    <p float64 little-endian: mean>
    <payload, float64 little-endian>

The payload is the ``p`` variances for ``kind=diagonal``, or the lower
triangle of the covariance Cholesky factor in row-major order
(``p*(p+1)/2`` values) for ``kind=full``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import (ContractError, DataFormatError, IndefiniteError,
                     InsufficientTrajectoryError, NumericalError)
from .models import (Dataset, FitInfo, L2Prior, OptimizerConfig, fit_map,
                     map_objective_grad)

VARIANCE_FLOOR = 1e-8
ALPHA_GRID = (0.25, 0.5, 1.0, 1.5, 2.0)

_LOG_2PI = math.log(2.0 * math.pi)
_MAGIC = b"ACNML-POSTERIOR 1\n"


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """Gaussian ``q(theta)`` stored as mean plus variances or a Cholesky factor.

    Use :meth:`from_diagonal`, :meth:`from_covariance` or
    :meth:`from_cholesky` rather than the raw constructor.
    """

    mean: np.ndarray
    shape: str
    variances: Optional[np.ndarray] = None
    chol: Optional[np.ndarray] = None
    temperature_alpha: float = 1.0
    source: str = "unspecified"

    def __post_init__(self):
        if self.shape not in ("diagonal", "full"):
            raise ContractError(f"unknown covariance shape {self.shape!r}")
        if not (self.temperature_alpha > 0 and math.isfinite(self.temperature_alpha)):
            raise ContractError("temperature alpha must be a positive finite number")
        if not np.all(np.isfinite(self.mean)):
            raise ContractError("posterior mean must be finite")
        for arr in (self.mean, self.variances, self.chol):
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def from_diagonal(cls, mean, variances, alpha: float = 1.0, source: str = "unspecified"):
        mean = np.array(mean, dtype=float, copy=True)
        var = np.array(variances, dtype=float, copy=True)
        if var.shape != mean.shape or mean.ndim != 1:
            raise ContractError("mean and variances must be vectors of equal length")
        if not np.all(var > 0) or not np.all(np.isfinite(var)):
            raise ContractError("diagonal variances must be positive and finite")
        return cls(mean, "diagonal", variances=var, temperature_alpha=float(alpha), source=source)

    @classmethod
    def from_covariance(cls, mean, covariance, alpha: float = 1.0, source: str = "unspecified"):
        cov = np.asarray(covariance, dtype=float)
        try:
            L = linalg.cholesky(0.5 * (cov + cov.T), lower=True)
        except linalg.LinAlgError:
            raise IndefiniteError("covariance is not positive definite",
                                  float(np.linalg.eigvalsh(0.5 * (cov + cov.T))[0])) from None
        return cls.from_cholesky(mean, L, alpha, source)

    @classmethod
    def from_cholesky(cls, mean, chol, alpha: float = 1.0, source: str = "unspecified"):
        mean = np.array(mean, dtype=float, copy=True)
        L = np.tril(np.array(chol, dtype=float, copy=True))
        p = mean.shape[0]
        if mean.ndim != 1 or L.shape != (p, p):
            raise ContractError("Cholesky factor shape does not match the mean")
        if not np.all(np.diag(L) > 0) or not np.all(np.isfinite(L)):
            raise IndefiniteError("Cholesky factor must have a positive diagonal",
                                  float(np.min(np.diag(L)) ** 2) if p else 0.0)
        return cls(mean, "full", chol=L, temperature_alpha=float(alpha), source=source)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def covariance(self) -> np.ndarray:
        cov = np.diag(self.variances) if self.shape == "diagonal" else self.chol @ self.chol.T
        cov.setflags(write=False)
        return cov

    def with_alpha(self, alpha: float) -> "GaussianPosterior":
        return replace(self, temperature_alpha=float(alpha))

    def cov_matvec(self, v) -> np.ndarray:
        """``Sigma @ v``; ``v`` may hold one vector per column."""
        if self.shape == "diagonal":
            return (self.variances * v.T).T
        return self.chol @ (self.chol.T @ v)

    def precision_matvec(self, v) -> np.ndarray:
        """``Sigma^{-1} @ v``."""
        if self.shape == "diagonal":
            return (v.T / self.variances).T
        return linalg.cho_solve((self.chol, True), v)

    def log_det_cov(self) -> float:
        if self.shape == "diagonal":
            return float(np.sum(np.log(self.variances)))
        return float(2.0 * np.sum(np.log(np.diag(self.chol))))

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.mean.shape:
            raise ContractError(f"theta shape {theta.shape} != posterior dim ({self.dim},)")
        return theta


def log_density(q: GaussianPosterior, theta) -> float:
    """Normalised Gaussian log-density ``log q(theta)``."""
    r = q._check(theta) - q.mean
    if q.shape == "diagonal":
        maha = float(np.sum(r * r / q.variances))
    else:
        z = linalg.solve_triangular(q.chol, r, lower=True)
        maha = float(z @ z)
    return -0.5 * (q.dim * _LOG_2PI + q.log_det_cov() + maha)


def grad_log_density(q: GaussianPosterior, theta) -> np.ndarray:
    """``-Sigma^{-1} (theta - mean)``."""
    return -q.precision_matvec(q._check(theta) - q.mean)


def sample(q: GaussianPosterior, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw one sample (or ``size`` samples as rows) from ``q``."""
    m = 1 if size is None else size
    z = rng.standard_normal((m, q.dim))
    if q.shape == "diagonal":
        draws = q.mean + z * np.sqrt(q.variances)
    else:
        draws = q.mean + z @ q.chol.T
    return draws[0] if size is None else draws


# -- Laplace -----------------------------------------------------------------

def laplace_precision(model, theta_map, data: Dataset, prior: L2Prior) -> np.ndarray:
    """Negative Hessian of the log posterior ``sum log p - n*lam*||theta||^2``."""
    H = model.hessian_log_likelihood(theta_map, data)
    return -H + 2.0 * data.n * prior.lam * np.eye(model.param_count)


def laplace_fit(model, data: Dataset, prior: L2Prior = L2Prior(), shape: str = "full",
                damping: Optional[float] = None, init=None,
                opt: OptimizerConfig = OptimizerConfig(), alpha: float = 1.0,
                info: Optional[FitInfo] = None) -> GaussianPosterior:
    """Gaussian at the MAP with covariance from the log-posterior curvature.

    ``damping`` is added to the precision diagonal; ``None`` uses
    ``1e-4 * max(diag(precision))``. The log posterior is the MAP objective
    scaled by ``n``, so variances contract like ``1/n``.
    """
    if shape not in ("diagonal", "full"):
        raise ContractError(f"unknown Laplace shape {shape!r}")
    theta = fit_map(model, data, prior, init=init, opt=opt, info=info)
    P = laplace_precision(model, theta, data, prior)
    if damping is None:
        damping = 1e-4 * float(np.max(np.diag(P)))
    if damping < 0:
        raise ContractError("damping must be >= 0")
    P = P + damping * np.eye(model.param_count)
    source = f"laplace-{'diag' if shape == 'diagonal' else 'full'}"
    if shape == "diagonal":
        d = np.diag(P).copy()
        if np.any(d <= 0):
            raise IndefiniteError("diagonal precision has non-positive entries", float(d.min()))
        return GaussianPosterior.from_diagonal(theta, 1.0 / d, alpha, source)
    try:
        cho = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError:
        raise IndefiniteError("Laplace precision is not positive definite after damping",
                              float(np.linalg.eigvalsh(P)[0])) from None
    cov = linalg.cho_solve(cho, np.eye(model.param_count))
    return GaussianPosterior.from_covariance(theta, 0.5 * (cov + cov.T), alpha, source)


# -- SWAG-D ------------------------------------------------------------------

@dataclass(frozen=True)
class SgdTrajectoryConfig:
    """SGD schedule for SWAG-D.

    One iterate is collected at the end of every ``collection_interval``-th
    epoch from ``collect_start_epoch`` on. ``collect_learning_rate`` (if set)
    replaces ``learning_rate`` during the collection phase.
    """

    learning_rate: float = 0.05
    num_epochs: int = 60
    batch_size: int = 16
    collect_start_epoch: int = 30
    collection_interval: int = 1
    seed: int = 0
    collect_learning_rate: Optional[float] = None

    def __post_init__(self):
        if not self.collect_start_epoch < self.num_epochs:
            raise ContractError("collect_start_epoch must be < num_epochs")
        if self.batch_size < 1 or self.collection_interval < 1:
            raise ContractError("batch_size and collection_interval must be >= 1")
        if self.learning_rate < 0 or (self.collect_learning_rate or 0) < 0:
            raise ContractError("learning rates must be >= 0")


def swag_diag_fit(model, data: Dataset, prior: L2Prior, cfg: SgdTrajectoryConfig,
                  init=None, alpha: float = 1.0) -> GaussianPosterior:
    """Diagonal Gaussian from the first two moments of collected SGD iterates."""
    if cfg.batch_size > data.n:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds dataset size {data.n}")
    rng = np.random.default_rng(cfg.seed)
    theta = model.init_params(cfg.seed) if init is None else np.array(init, dtype=float)
    mean = np.zeros_like(theta)
    sq_mean = np.zeros_like(theta)
    collected = 0
    for epoch in range(cfg.num_epochs):
        collecting = epoch >= cfg.collect_start_epoch
        lr = cfg.learning_rate
        if collecting and cfg.collect_learning_rate is not None:
            lr = cfg.collect_learning_rate
        order = rng.permutation(data.n)
        for start in range(0, data.n - cfg.batch_size + 1, cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            theta = theta + lr * map_objective_grad(model, theta, batch, prior)
        if not np.all(np.isfinite(theta)):
            raise NumericalError(f"SGD iterate became non-finite at epoch {epoch}")
        if collecting and (epoch - cfg.collect_start_epoch) % cfg.collection_interval == 0:
            mean = mean * collected / (collected + 1) + theta / (collected + 1)
            sq_mean = sq_mean * collected / (collected + 1) + theta ** 2 / (collected + 1)
            collected += 1
    if collected < 2:
        raise InsufficientTrajectoryError(f"only {collected} iterate(s) collected; need >= 2")
    var = np.maximum(sq_mean - mean ** 2, VARIANCE_FLOOR)
    return GaussianPosterior.from_diagonal(mean, var, alpha, "swag-diag")


# -- variational diagonal ----------------------------------------------------

@dataclass(frozen=True)
class ViConfig:
    """Settings for :func:`vi_diag_fit`.

    The learning rate decays geometrically to ``final_lr_fraction`` of its
    initial value over ``num_steps``. ``batch_size=None`` uses the full data.
    """

    prior_std: float = 0.1
    num_elbo_samples: int = 1
    learning_rate: float = 1e-2
    num_steps: int = 2000
    seed: int = 0
    init_std: Optional[float] = None
    batch_size: Optional[int] = None
    final_lr_fraction: float = 0.1
    smoothing_window: int = 100

    def __post_init__(self):
        if not self.prior_std > 0:
            raise ContractError("prior_std must be > 0")
        if self.num_elbo_samples < 1 or self.num_steps < 1:
            raise ContractError("num_elbo_samples and num_steps must be >= 1")


def gaussian_kl(mean, std, prior_std) -> float:
    """KL(N(mean, diag std^2) || N(0, prior_std^2 I))."""
    return float(np.sum(np.log(prior_std / std) + (std ** 2 + mean ** 2) / (2 * prior_std ** 2) - 0.5))


def vi_diag_fit(model, data: Dataset, cfg: ViConfig, init=None, alpha: float = 1.0,
                trace: Optional[list] = None) -> GaussianPosterior:
    """Diagonal Gaussian maximising a reparameterised ELBO estimate with Adam.

    ELBO = E_q[sum log-likelihood] - KL(q || N(0, prior_std^2 I)). The iterate
    with the best trailing-window mean ELBO is returned. Per-step ELBO
    estimates are appended to ``trace`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    p = model.param_count
    mu = model.init_params(cfg.seed) if init is None else np.array(init, dtype=float)
    init_std = cfg.init_std if cfg.init_std is not None else min(cfg.prior_std, 1e-2)
    s = np.full(p, math.log(init_std))
    tau = cfg.prior_std
    scale = 1.0
    batch = data
    # Adam state for the stacked (mu, log-std) vector
    m1 = np.zeros(2 * p)
    m2 = np.zeros(2 * p)
    b1, b2, eps = 0.9, 0.999, 1e-8
    decay = cfg.final_lr_fraction ** (1.0 / cfg.num_steps)
    window = cfg.smoothing_window
    recent = []
    best = (-np.inf, mu.copy(), s.copy())
    trace = [] if trace is None else trace
    for t in range(1, cfg.num_steps + 1):
        if cfg.batch_size is not None and cfg.batch_size < data.n:
            batch = data.subset(rng.choice(data.n, cfg.batch_size, replace=False))
            scale = data.n / cfg.batch_size
        std = np.exp(s)
        eps_draw = rng.standard_normal((cfg.num_elbo_samples, p))
        g_mu = np.zeros(p)
        g_s = np.zeros(p)
        ll = 0.0
        for e in eps_draw:
            th = mu + std * e
            g = scale * model.grad_log_likelihood(th, batch)
            ll += scale * model.log_likelihood(th, batch)
            g_mu += g
            g_s += g * e * std
        S = cfg.num_elbo_samples
        kl = gaussian_kl(mu, std, tau)
        elbo = ll / S - kl
        if not math.isfinite(elbo):
            raise NumericalError(f"non-finite ELBO at step {t}")
        trace.append(elbo)
        recent.append(elbo)
        if len(recent) > window:
            recent.pop(0)
        smoothed = sum(recent) / len(recent)
        if len(recent) == window or t == cfg.num_steps:
            if smoothed > best[0]:
                best = (smoothed, mu.copy(), s.copy())
        grad = np.concatenate([g_mu / S - mu / tau ** 2,
                               g_s / S + 1.0 - std ** 2 / tau ** 2])
        m1 = b1 * m1 + (1 - b1) * grad
        m2 = b2 * m2 + (1 - b2) * grad ** 2
        lr = cfg.learning_rate * decay ** (t - 1)
        update = lr * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + eps)
        mu = mu + update[:p]
        s = s + update[p:]
    _, mu, s = best
    var = np.maximum(np.exp(2 * s), VARIANCE_FLOOR)
    return GaussianPosterior.from_diagonal(mu, var, alpha, "vi-diag")


# -- serialisation -----------------------------------------------------------

def save_posterior(q: GaussianPosterior, path) -> None:
    header = (f"kind={q.shape} p={q.dim} alpha={float(q.temperature_alpha).hex()} "
              f"source={q.source}\n").encode("ascii")
    if q.shape == "diagonal":
        payload = q.variances
    else:
        payload = q.chol[np.tril_indices(q.dim)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(header)
        fh.write(np.asarray(q.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(payload, dtype="<f8").tobytes())


def load_posterior(path) -> GaussianPosterior:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise DataFormatError(f"{path}: not a posterior file")
    rest = raw[len(_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise DataFormatError(f"{path}: truncated header")
    try:
        fields = dict(item.split("=", 1) for item in rest[:nl].decode("ascii").split())
        kind, p = fields["kind"], int(fields["p"])
        alpha = float.fromhex(fields["alpha"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: malformed header ({exc})") from None
    body = np.frombuffer(rest[nl + 1:], dtype="<f8").astype(float)
    n_payload = p if kind == "diagonal" else p * (p + 1) // 2
    if body.shape[0] != p + n_payload:
        raise DataFormatError(f"{path}: expected {p + n_payload} values, found {body.shape[0]}")
    mean, payload = body[:p], body[p:]
    source = fields.get("source", "unspecified")
    if kind == "diagonal":
        return GaussianPosterior.from_diagonal(mean, payload, alpha, source)
    if kind != "full":
        raise DataFormatError(f"{path}: unknown covariance kind {kind!r}")
    L = np.zeros((p, p))
    L[np.tril_indices(p)] = payload
    return GaussianPosterior.from_cholesky(mean, L, alpha, source)
