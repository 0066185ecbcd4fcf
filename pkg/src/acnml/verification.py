"""Numerical certificates for the influence-function approximation.

The parameter bound treats "add one query point" as a reweighting problem
over ``N = n + 2`` points: the ``n`` training points, the query with a
negated loss and the query again. Under unit weights the two query terms
cancel; the target weight vector puts a 2 on the last entry. All losses are
negative log-likelihood plus the per-example share ``lam * ||theta||^2`` of
the prior, so the reweighted optimum is exactly the MAP refit on the
augmented data and the first-order estimate is :func:`influence_shift`.

Suprema over the parameter region are estimated from uniform samples in a
ball around the training MAP. Certificates inflate every sampled supremum
by ``INFLATION`` and keep the raw values alongside.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp, xlogy

from .calibration import dumps_json
from .cnml import AcnmlConfig, CnmlResult, acnml, exact_cnml, influence_shift
from .errors import ContractError
from .models import (Dataset, L2Prior, LogisticRegression, OptimizerConfig, fit_map,
                     map_objective_hessian)
from .posterior import GaussianPosterior

INFLATION = 1.2
NUM_SAMPLES = 10_000
BOX_SCALE = 1.5
SEGMENT_POINTS = 50
MAX_SEQUENCES = 1_000_000


@dataclass(frozen=True)
class ThetaBox:
    """Euclidean ball of parameters around ``center``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not (self.radius >= 0 and math.isfinite(self.radius)):
            raise ContractError("box radius must be finite and >= 0")

    def sample(self, num: int, rng: np.random.Generator) -> np.ndarray:
        """``num`` points uniform in the ball; row 0 is the centre itself."""
        c = np.asarray(self.center, dtype=float)
        p = c.shape[0]
        u = rng.standard_normal((num, p))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = self.radius * rng.random(num) ** (1.0 / p)
        pts = c + u * r[:, None]
        pts[0] = c
        return pts


@dataclass(frozen=True)
class Constants:
    """Raw sampled constants for one (train, query, label) problem.

    ``c_op = inf`` marks a sampled non-degeneracy violation (a sampled
    training Hessian that is not positive definite).
    """

    c_op: float
    c_g: float
    c_h: float
    l_h: float
    delta: float
    delta_threshold: float
    c_w: float
    c_ij: float
    delta_theta: float
    n: int
    dim: int
    num_samples: int
    nondegenerate: bool


def _definition_constants(c_op, l_h, delta_theta, n, dim):
    N = n + 2
    c_w = math.sqrt((N + 3) / N)
    if not math.isfinite(c_op):
        return c_w, math.inf, 0.0
    c_ij = 1.0 + dim * c_w * l_h * c_op
    threshold = min(delta_theta / c_op, (1.0 / n) / (c_ij * c_op))
    return c_w, c_ij, threshold


def _stats_generic(model, train, prior, x, y, thetas):
    """Per-sample sufficient statistics via the model's per-example derivatives."""
    lam, n, p = prior.lam, train.n, model.param_count
    X, labels = train.inputs, train.labels
    xq = np.asarray(x, dtype=float).reshape(1, -1)
    eye = np.eye(p)
    out = {k: np.empty(len(thetas)) for k in ("min_eig", "g_sq", "h_sq", "dh_sq", "q_g1", "q_h1")}
    h_ref = None
    for s, th in enumerate(thetas):
        g = -model.per_example_grads(th, X, labels) + 2 * lam * th
        h = -model.per_example_hessians(th, X, labels) + 2 * lam * eye
        gz = -model.per_example_grads(th, xq, [y])[0] + 2 * lam * th
        hz = -model.per_example_hessians(th, xq, [y])[0] + 2 * lam * eye
        if h_ref is None:
            h_ref, hz_ref = h, hz
        H = h.sum(axis=0) / (n + 2)
        out["min_eig"][s] = np.linalg.eigvalsh(0.5 * (H + H.T))[0]
        out["g_sq"][s] = np.sum(g * g) + 2 * gz @ gz
        out["h_sq"][s] = np.sum(h * h) + 2 * np.sum(hz * hz)
        out["dh_sq"][s] = np.sum((h - h_ref) ** 2) + 2 * np.sum((hz - hz_ref) ** 2)
        out["q_g1"][s] = np.abs(gz).sum()
        out["q_h1"][s] = np.abs(hz).sum()
    return out


def _stats_logistic(model, train, prior, x, y, thetas, chunk=128):
    """Closed-form version of :func:`_stats_generic` for softmax regression.

    Per-example loss Hessians are ``C_i kron (xa_i xa_i^T) + 2 lam I`` with
    ``C_i = diag(p_i) - p_i p_i^T``, so Frobenius norms factor through
    ``||xa_i||^2``.
    """
    lam, n = prior.lam, train.n
    k, d1, p = model.num_classes, model.input_dim + 1, model.param_count
    Xa = np.hstack([train.inputs, np.ones((n, 1))])
    xa = np.append(np.asarray(x, dtype=float).ravel(), 1.0)
    s_tr = np.einsum("ni,ni->n", Xa, Xa)
    s_q = xa @ xa
    Y = np.eye(k)[train.labels]
    ey = np.eye(k)[y]
    eye_k = np.eye(k)
    S = len(thetas)
    out = {key: np.empty(S) for key in ("min_eig", "g_sq", "h_sq", "dh_sq", "q_g1", "q_h1")}
    C_ref = Cq_ref = None
    for lo in range(0, S, chunk):
        th = thetas[lo:lo + chunk]
        m = th.shape[0]
        W = th.reshape(m, k, d1)
        Z = np.einsum("skj,nj->snk", W, Xa)
        P = np.exp(Z - logsumexp(Z, axis=2, keepdims=True))
        C = P[..., :, None] * (eye_k - P[..., None, :])  # diag(p) - p p^T
        zq = W @ xa
        pq = np.exp(zq - logsumexp(zq, axis=1, keepdims=True))
        Cq = pq[:, :, None] * (eye_k - pq[:, None, :])
        if C_ref is None:
            C_ref, Cq_ref = C[0], Cq[0]
        # training-mean loss Hessian in the (N = n + 2) normalisation
        H = np.einsum("snab,ni,nj->saibj", C, Xa, Xa).reshape(m, p, p)
        H[:, np.arange(p), np.arange(p)] += 2 * lam * n
        out["min_eig"][lo:lo + m] = np.linalg.eigvalsh(H / (n + 2))[:, 0]
        # gradients: g_i = -(y_i - p_i) kron xa_i + 2 lam theta
        R = Y - P
        rz = np.einsum("snk,snk->sn", R, Z)
        tt = np.einsum("sp,sp->s", th, th)
        g_tr = (np.einsum("snk,snk->sn", R, R) * s_tr - 4 * lam * rz).sum(axis=1) + 4 * lam**2 * n * tt
        Gq = -(ey - pq)[:, :, None] * xa + 2 * lam * W
        out["g_sq"][lo:lo + m] = g_tr + 2 * np.einsum("skj,skj->s", Gq, Gq)
        out["q_g1"][lo:lo + m] = np.abs(Gq).sum(axis=(1, 2))
        trC = np.einsum("snaa->sn", C)
        h_tr = (np.einsum("snab,snab->sn", C, C) * s_tr**2 + 4 * lam * trC * s_tr).sum(axis=1) \
            + 4 * lam**2 * p * n
        Hq = np.einsum("sab,i,j->saibj", Cq, xa, xa).reshape(m, p, p)
        Hq[:, np.arange(p), np.arange(p)] += 2 * lam
        out["h_sq"][lo:lo + m] = h_tr + 2 * np.einsum("sij,sij->s", Hq, Hq)
        out["q_h1"][lo:lo + m] = np.abs(Hq).sum(axis=(1, 2))
        dC = C - C_ref
        dCq = Cq - Cq_ref
        out["dh_sq"][lo:lo + m] = (np.einsum("snab,snab->sn", dC, dC) * s_tr**2).sum(axis=1) \
            + 2 * np.einsum("sab,sab->s", dCq, dCq) * s_q**2
    return out


def measure_constants(model, train: Dataset, prior: L2Prior, query, theta_box: ThetaBox,
                      num_samples: int = NUM_SAMPLES, seed: int = 0) -> Constants:
    """Sample the assumption constants over ``theta_box`` for query ``(x, y)``.

    ``theta_box.center`` must be the training MAP: the Lipschitz ratio for
    the Hessians is measured relative to it.
    """
    x, y = query
    if not 0 <= int(y) < model.num_classes:
        raise ContractError(f"label {y} outside [0, {model.num_classes})")
    if num_samples < 1:
        raise ContractError("num_samples must be >= 1")
    n, p = train.n, model.param_count
    N = n + 2
    thetas = theta_box.sample(num_samples, np.random.default_rng(seed))
    if type(model) is LogisticRegression:
        st = _stats_logistic(model, train, prior, x, int(y), thetas)
    else:
        st = _stats_generic(model, train, prior, x, int(y), thetas)
    nondegenerate = bool(np.all(st["min_eig"] > 0))
    c_op = float(np.max(1.0 / st["min_eig"])) if nondegenerate else math.inf
    dist = np.linalg.norm(thetas - theta_box.center, axis=1)
    moved = dist > 0
    l_h = float(np.max(np.sqrt(st["dh_sq"][moved] / N) / dist[moved])) if moved.any() else 0.0
    delta = float(np.max(np.maximum(st["q_g1"], st["q_h1"]))) / N
    c_w, c_ij, threshold = _definition_constants(c_op, l_h, theta_box.radius, n, p)
    return Constants(c_op=c_op, c_g=float(np.sqrt(st["g_sq"].max() / N)),
                     c_h=float(np.sqrt(st["h_sq"].max() / N)), l_h=l_h, delta=delta,
                     delta_threshold=threshold, c_w=c_w, c_ij=c_ij,
                     delta_theta=float(theta_box.radius), n=n, dim=p,
                     num_samples=num_samples, nondegenerate=nondegenerate)


@dataclass(frozen=True)
class BoundCertificate:
    """Parameter-error certificate for one (query, label).

    ``c_op``, ``c_ij``, ``delta`` and ``delta_threshold`` are the inflated
    values used in the comparison; ``raw`` keeps the sampled constants.
    """

    n: int
    label: int
    delta: float
    c_op: float
    c_ij: float
    delta_threshold: float
    lhs: float
    rhs: float
    holds: bool
    applicable: bool
    inflation: float
    box_radius: float
    raw: Constants

    @staticmethod
    def assemble(n, label, lhs, raw: Constants, inflation: float = INFLATION,
                 box_radius: Optional[float] = None) -> "BoundCertificate":
        c_op = raw.c_op * inflation
        l_h = raw.l_h * inflation
        delta = raw.delta * inflation
        _, c_ij, threshold = _definition_constants(c_op, l_h, raw.delta_theta, raw.n, raw.dim)
        rhs = 2.0 * c_op**2 * c_ij * delta**2
        return BoundCertificate(n=n, label=int(label), delta=delta, c_op=c_op, c_ij=c_ij,
                                delta_threshold=threshold, lhs=float(lhs), rhs=rhs,
                                holds=bool(lhs <= rhs), applicable=bool(delta <= threshold),
                                inflation=inflation,
                                box_radius=raw.delta_theta if box_radius is None else box_radius,
                                raw=raw)

    def recheck(self) -> bool:
        """Recompute ``holds`` and ``applicable`` from the stored fields."""
        rhs = 2.0 * self.c_op**2 * self.c_ij * self.delta**2
        return (rhs == self.rhs and (self.lhs <= rhs) == self.holds
                and (self.delta <= self.delta_threshold) == self.applicable)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def certify_parameter_bound(model, train: Dataset, prior: L2Prior, x, y: int,
                            num_samples: int = NUM_SAMPLES, seed: int = 0,
                            theta_train=None, opt: OptimizerConfig = OptimizerConfig()
                            ) -> BoundCertificate:
    """Compare the exact refit with its first-order estimate for label ``y``.

    The sampling region is a ball around the training MAP whose radius is
    ``BOX_SCALE`` times the largest displacement among the per-label refits.
    """
    if theta_train is None:
        theta_train = fit_map(model, train, prior, opt=opt)
    x = np.asarray(x, dtype=float)
    refits = exact_cnml(model, train, x, prior, opt, theta_train=theta_train).per_label_params
    approx = influence_shift(model, theta_train, map_objective_hessian(model, theta_train, train, prior),
                             x, y, train.n, prior)
    radius = BOX_SCALE * float(np.max(np.linalg.norm(refits - theta_train, axis=1)))
    box = ThetaBox(np.asarray(theta_train, dtype=float), radius)
    raw = measure_constants(model, train, prior, (x, y), box, num_samples, seed)
    lhs = float(np.linalg.norm(refits[y] - approx))
    return BoundCertificate.assemble(train.n, y, lhs, raw)


@dataclass(frozen=True)
class DistBoundCertificate:
    k: int
    L: float
    delta: float
    lhs: float
    rhs: float
    holds: bool
    inflation: float = INFLATION

    def recheck(self) -> bool:
        rhs = (self.k + 1) * self.L * self.delta
        return rhs == self.rhs and (self.lhs <= rhs) == self.holds

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def segment_lipschitz(model, start, end, x, y: int, num_points: int = SEGMENT_POINTS) -> float:
    """Largest ``||grad log p_theta(y|x)||_2`` over points of the segment."""
    t = np.linspace(0.0, 1.0, num_points)[:, None]
    thetas = (1.0 - t) * np.asarray(start, dtype=float) + t * np.asarray(end, dtype=float)
    G = model.label_grads(thetas, x, np.full(num_points, y))
    return float(np.max(np.linalg.norm(G, axis=1)))


def distribution_certificate(model, exact: CnmlResult, approx: CnmlResult, x,
                             inflation: float = INFLATION,
                             num_points: int = SEGMENT_POINTS) -> DistBoundCertificate:
    k = model.num_classes
    if exact.num_classes != k or approx.num_classes != k:
        raise ContractError("results do not match the model's class count")
    x = np.asarray(x, dtype=float)
    diffs = exact.per_label_params - approx.per_label_params
    delta = float(np.max(np.linalg.norm(diffs, axis=1)))
    L = inflation * max(segment_lipschitz(model, exact.per_label_params[y],
                                          approx.per_label_params[y], x, y, num_points)
                        for y in range(k))
    lhs = float(np.max(np.abs((exact.per_label_log_prob - exact.log_normalizer_phi)
                              - (approx.per_label_log_prob - approx.log_normalizer_phi))))
    rhs = (k + 1) * L * delta
    return DistBoundCertificate(k=k, L=L, delta=delta, lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs),
                                inflation=inflation)


def certify_distribution_bound(model, train: Dataset, prior: L2Prior, q: GaussianPosterior, x,
                               cfg: AcnmlConfig = AcnmlConfig(), theta_train=None,
                               opt: OptimizerConfig = OptimizerConfig()) -> DistBoundCertificate:
    """Check the log-probability gap between exact CNML and ACNML at ``x``."""
    if theta_train is None:
        theta_train = q.mean
    exact = exact_cnml(model, train, x, prior, opt, theta_train=theta_train)
    return distribution_certificate(model, exact, acnml(model, q, x, cfg), x)


# -- brute-force NML on finite spaces -----------------------------------------

@dataclass(frozen=True, eq=False)
class DiscreteModelClass:
    """Finite family of i.i.d. distributions over ``{0, ..., |X|-1}``.

    ``probs[t, v]`` is the probability of symbol ``v`` under member ``t``.
    """

    probs: np.ndarray

    def __post_init__(self):
        P = np.array(self.probs, dtype=float)
        if P.ndim != 2 or P.shape[0] < 1 or P.shape[1] < 1:
            raise ContractError("probs must be a (members, symbols) matrix")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ContractError("every member must be a distribution")
        P.setflags(write=False)
        object.__setattr__(self, "probs", P)

    @property
    def num_symbols(self) -> int:
        return self.probs.shape[1]

    @staticmethod
    def bernoulli_grid(num_points: int = 1001) -> "DiscreteModelClass":
        p = np.linspace(0.0, 1.0, num_points)
        return DiscreteModelClass(np.column_stack([1.0 - p, p]))


def all_sequences(num_symbols: int, m: int) -> np.ndarray:
    """Every length-``m`` sequence in lexicographic order, one per row."""
    total = num_symbols ** m
    if total > MAX_SEQUENCES:
        raise ContractError(f"{num_symbols}^{m} = {total} sequences exceeds cap {MAX_SEQUENCES}")
    return np.array(list(itertools.product(range(num_symbols), repeat=m)), dtype=int).reshape(total, m)


def max_log_likelihoods(cls: DiscreteModelClass, m: int, chunk: int = 4096) -> np.ndarray:
    """``max_t log prod_i probs[t, x_i]`` for every sequence of length ``m``."""
    seqs = all_sequences(cls.num_symbols, m)
    counts = np.stack([(seqs == v).sum(axis=1) for v in range(cls.num_symbols)], axis=1)
    out = np.empty(len(seqs))
    for lo in range(0, len(seqs), chunk):
        c = counts[lo:lo + chunk]
        # xlogy gives 0 * log 0 = 0 for symbols a sequence never uses
        ll = xlogy(c[:, None, :], cls.probs[None, :, :]).sum(axis=2)
        out[lo:lo + chunk] = ll.max(axis=1)
    return out


def brute_force_nml(cls: DiscreteModelClass, m: int) -> np.ndarray:
    """NML distribution over all sequences, in :func:`all_sequences` order."""
    if m < 1:
        raise ContractError("sequence length must be >= 1")
    ml = max_log_likelihoods(cls, m)
    return np.exp(ml - logsumexp(ml))


def regret(q, cls: DiscreteModelClass, m: int) -> np.ndarray:
    """Per-sequence regret ``log max_t p_t(x) - log q(x)``."""
    q = np.asarray(q, dtype=float)
    ml = max_log_likelihoods(cls, m)
    if q.shape != ml.shape:
        raise ContractError(f"q has shape {q.shape}, expected {ml.shape}")
    with np.errstate(divide="ignore"):
        return ml - np.log(q)
