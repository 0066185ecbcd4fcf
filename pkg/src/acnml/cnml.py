"""Per-query CNML predictors.

``exact_cnml`` refits the MAP on the training set plus the query for every
candidate label. ``acnml`` replaces the training likelihood with a Gaussian
posterior so each refit only touches the query. ``influence_shift`` is the
one-step first-order estimate of the same refit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import ContractError, ConvergenceError, NumericalError
from .models import Dataset, FitInfo, L2Prior, OptimizerConfig, fit_map
from .posterior import GaussianPosterior, sample


@dataclass(frozen=True, eq=False)
class CnmlResult:
    """Per-label refit parameters and the normalised predictive distribution.

    ``probs[y] == exp(per_label_log_prob[y] - log_normalizer_phi)``.
    """

    per_label_params: np.ndarray
    per_label_log_prob: np.ndarray
    probs: np.ndarray
    log_normalizer_phi: float

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class AcnmlConfig:
    """Preconditioned gradient-ascent settings for :func:`acnml`.

    ``alpha=None`` uses the posterior's own temperature.
    """

    num_steps: int = 5
    step_size: float = 0.5
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.num_steps < 1:
            raise ContractError("num_steps must be >= 1")
        if not self.step_size >= 0:
            raise ContractError("step_size must be >= 0")
        if self.alpha is not None and not self.alpha > 0:
            raise ContractError("alpha must be > 0")


def cnml_from_params(model, per_label_params, x) -> CnmlResult:
    """Score label ``y`` under its own parameters and normalise across labels."""
    params = np.array(per_label_params, dtype=float)
    k = model.num_classes
    if params.shape != (k, model.param_count):
        raise ContractError(f"expected ({k}, {model.param_count}) per-label parameters, "
                            f"got {params.shape}")
    x = np.asarray(x, dtype=float)
    if model.param_count:
        z = model.batch_logits(params, x)
        top = z.max(axis=1)
        lp = z.diagonal() - top - np.log(np.exp(z - top[:, None]).sum(axis=1))
    else:
        lp = np.array([model.log_probs(params[y], x)[0, y] for y in range(k)])
    top = lp.max()
    phi = float(top + np.log(np.exp(lp - top).sum()))
    probs = np.exp(lp - phi)
    params.setflags(write=False)
    return CnmlResult(params, lp, probs, phi)


def exact_cnml(model, train: Dataset, x, prior: L2Prior = L2Prior(),
               opt: OptimizerConfig = OptimizerConfig(), theta_train=None) -> CnmlResult:
    """CNML (CNMAP when ``prior.lam > 0``) by refitting once per label.

    Each refit starts from the training-only MAP, which is computed here
    unless ``theta_train`` is supplied.
    """
    if theta_train is None:
        theta_train = fit_map(model, train, prior, opt=opt)
    x = np.asarray(x, dtype=float)
    params = []
    for y in range(model.num_classes):
        info = FitInfo()
        try:
            params.append(fit_map(model, train.with_point(x, y), prior,
                                  init=theta_train, opt=opt, info=info))
        except ConvergenceError as exc:
            raise ConvergenceError(f"refit for label {y} failed: {exc}",
                                   exc.grad_norm, exc.theta) from exc
    return cnml_from_params(model, np.array(params).reshape(model.num_classes, model.param_count), x)


def acnml(model, q: GaussianPosterior, x, cfg: AcnmlConfig = AcnmlConfig()) -> CnmlResult:
    """Amortised CNML over a Gaussian posterior.

    For every label ``y`` run ``cfg.num_steps`` iterations of
    ``theta <- theta + eps * Sigma (alpha * grad log p_theta(y|x) + grad log q(theta))``
    from ``theta = q.mean``. The posterior term reduces to ``-(theta - mean)``
    after preconditioning, so no solve is needed.
    """
    if q.dim != model.param_count:
        raise ContractError(f"posterior dim {q.dim} != model param_count {model.param_count}")
    alpha = q.temperature_alpha if cfg.alpha is None else cfg.alpha
    eps = cfg.step_size
    x = np.asarray(x, dtype=float)
    grads = model.query_grad_fn(x)
    # theta <- (1 - eps) theta + eps mean + eps alpha Sigma g, rows = labels
    keep = 1.0 - eps
    anchor = eps * q.mean
    if q.shape == "diagonal":
        scale = (eps * alpha) * q.variances
        precondition = lambda G: G * scale
    else:
        M = (eps * alpha) * q.covariance
        precondition = lambda G: G @ M
    params = np.tile(q.mean, (model.num_classes, 1))
    for step in range(cfg.num_steps):
        params = keep * params + anchor + precondition(grads(params))
        if not math.isfinite(params.sum()):
            bad = ~np.all(np.isfinite(params), axis=1)
            raise NumericalError(f"ACNML iterate for label {int(np.argmax(bad))} "
                                 f"became non-finite at step {step}")
    return cnml_from_params(model, params, x)


def influence_shift(model, theta_hat, mean_hessian, x, y: int, n: int,
                    prior: Optional[L2Prior] = None) -> np.ndarray:
    """First-order estimate of the MAP after appending ``(x, y)``.

    Returns ``theta_hat - (1/n) H^{-1} g`` where ``H`` is the Hessian of the
    mean training objective and ``g`` the gradient of ``log p(y|x)``. When
    ``prior`` is given, ``g`` also carries the query's share of the penalty,
    ``-2 lam theta_hat``, matching the objective that :func:`fit_map` refits.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    theta_hat = np.asarray(theta_hat, dtype=float)
    g = model.grad_log_prob(theta_hat, x, y)
    if prior is not None:
        g = g - 2.0 * prior.lam * theta_hat
    J = -np.asarray(mean_hessian, dtype=float)
    try:
        cho = linalg.cho_factor(J, lower=True)
    except linalg.LinAlgError:
        raise NumericalError("mean Hessian is singular or not negative definite") from None
    return theta_hat + linalg.cho_solve(cho, g) / n


def map_predict(model, q: GaussianPosterior, x) -> np.ndarray:
    """Prediction at the posterior mean."""
    return model.predict(q.mean, np.asarray(x, dtype=float))


def bma_predict(model, q: GaussianPosterior, x, num_samples: int,
                rng: np.random.Generator) -> np.ndarray:
    """Average of predictions over ``num_samples`` posterior draws."""
    if num_samples < 1:
        raise ContractError("num_samples must be >= 1")
    x = np.asarray(x, dtype=float)
    draws = sample(q, rng, num_samples)
    avg = np.zeros(model.num_classes)
    # running mean keeps identical draws bit-exact
    for i, theta in enumerate(draws):
        avg += (model.predict(theta, x) - avg) / (i + 1)
    return avg
