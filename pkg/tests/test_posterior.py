import math

import numpy as np
import pytest
from scipy import integrate

from acnml.errors import ContractError, DataFormatError, IndefiniteError, InsufficientTrajectoryError
from acnml.models import MLP, Dataset, L2Prior, LogisticRegression, map_objective_hessian
from acnml.posterior import (VARIANCE_FLOOR, GaussianPosterior, SgdTrajectoryConfig, ViConfig,
                             grad_log_density, laplace_fit, laplace_precision, load_posterior,
                             log_density, sample, save_posterior, swag_diag_fit, vi_diag_fit)

from conftest import GaussianMeanModel, two_blob_data


# -- GaussianPosterior ---------------------------------------------------------------

def test_constructors_validate():
    with pytest.raises(ContractError):
        GaussianPosterior.from_diagonal([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(IndefiniteError):
        GaussianPosterior.from_covariance([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ContractError):
        GaussianPosterior.from_diagonal([0.0], [1.0], alpha=0.0)


def test_standard_normal_log_density():
    q = GaussianPosterior.from_diagonal([0.0], [1.0])
    assert log_density(q, [1.0]) == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi), abs=1e-15)


def test_gradient_zero_at_mean_and_mode_is_max():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    q = GaussianPosterior.from_covariance(rng.normal(size=3), A @ A.T + np.eye(3))
    np.testing.assert_allclose(grad_log_density(q, q.mean), 0.0, atol=1e-14)
    top = log_density(q, q.mean)
    assert all(top >= log_density(q, q.mean + rng.normal(size=3)) for _ in range(100))


@pytest.mark.parametrize("shape", ["diagonal", "full"])
def test_grad_log_density_matches_finite_differences(shape):
    rng = np.random.default_rng(1)
    mean = rng.normal(size=4)
    if shape == "diagonal":
        q = GaussianPosterior.from_diagonal(mean, rng.uniform(0.5, 2.0, 4))
    else:
        A = rng.normal(size=(4, 4))
        q = GaussianPosterior.from_covariance(mean, A @ A.T + np.eye(4))
    th = rng.normal(size=4)
    h = 1e-6
    fd = np.array([(log_density(q, th + h * e) - log_density(q, th - h * e)) / (2 * h)
                   for e in np.eye(4)])
    np.testing.assert_allclose(grad_log_density(q, th), fd, atol=1e-6)


def test_density_integrates_to_one_in_one_dimension():
    for q in (GaussianPosterior.from_diagonal([0.3], [0.7]),
              GaussianPosterior.from_covariance([-1.0], [[2.5]])):
        total, _ = integrate.quad(lambda t: math.exp(log_density(q, [t])), -np.inf, np.inf)
        assert total == pytest.approx(1.0, abs=1e-6)


def test_alpha_changes_neither_mean_nor_density_argmax():
    q = GaussianPosterior.from_diagonal([1.0, -2.0], [0.5, 3.0])
    q2 = q.with_alpha(2.0)
    assert q2.temperature_alpha == 2.0
    np.testing.assert_array_equal(q2.mean, q.mean)
    assert log_density(q2, [0.0, 0.0]) == log_density(q, [0.0, 0.0])


def test_dimension_mismatch():
    q = GaussianPosterior.from_diagonal([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ContractError):
        log_density(q, [0.0])
    with pytest.raises(ContractError):
        grad_log_density(q, [0.0, 0.0, 0.0])


# -- sampling -------------------------------------------------------------------------

def test_sample_mean_clt():
    q = GaussianPosterior.from_diagonal([1.0, -3.0], [4.0, 0.25])
    N = 100_000
    draws = sample(q, np.random.default_rng(2), N)
    sd = np.sqrt(q.variances)
    assert np.all(np.abs(draws.mean(axis=0) - q.mean) <= 4 * sd / math.sqrt(N))


def test_sample_determinism():
    q = GaussianPosterior.from_diagonal([0.0, 1.0], [1.0, 2.0])
    a = sample(q, np.random.default_rng(3), 10)
    b = sample(q, np.random.default_rng(3), 10)
    np.testing.assert_array_equal(a, b)
    assert sample(q, np.random.default_rng(3)).shape == (2,)


def test_full_covariance_sample_moments():
    cov = np.array([[2.0, 0.8, 0.0], [0.8, 1.0, -0.3], [0.0, -0.3, 0.5]])
    q = GaussianPosterior.from_covariance(np.zeros(3), cov)
    draws = sample(q, np.random.default_rng(4), 100_000)
    emp = np.cov(draws.T)
    assert np.linalg.norm(emp - cov) <= 0.1 * np.linalg.norm(cov)


# -- Laplace --------------------------------------------------------------------------

def test_laplace_exact_on_gaussian_log_posterior():
    m = GaussianMeanModel(1, sigma=0.5)
    rng = np.random.default_rng(5)
    d = Dataset(rng.normal(1.0, 0.5, size=(30, 1)), np.zeros(30, int), 2)
    lam = 0.2
    q = laplace_fit(m, d, L2Prior(lam), "full", damping=0.0)
    # log posterior: sum log N(z_i; theta, s^2) - n lam theta^2
    prec = d.n / 0.25 + 2 * d.n * lam
    assert q.covariance[0, 0] == pytest.approx(1.0 / prec, abs=1e-8)
    assert q.mean[0] == pytest.approx(d.inputs.sum() / 0.25 / prec, abs=1e-8)


def test_laplace_precision_spd_without_damping():
    m = LogisticRegression(2, 2)
    d = two_blob_data(60, 6)
    q = laplace_fit(m, d, L2Prior(0.1), "full", damping=0.0)
    np.linalg.cholesky(laplace_precision(m, q.mean, d, L2Prior(0.1)))


def test_laplace_precision_reconstructs_objective_hessian():
    m = LogisticRegression(2, 3)
    d = two_blob_data(90, 7, k=3)
    prior = L2Prior(0.05)
    damping = 1e-3
    q = laplace_fit(m, d, prior, "full", damping=damping)
    P = np.linalg.inv(q.covariance)
    expected = -d.n * map_objective_hessian(m, q.mean, d, prior) + damping * np.eye(m.param_count)
    np.testing.assert_allclose(P, expected, atol=1e-8 * np.abs(expected).max())


def test_laplace_variances_contract_with_n():
    m = LogisticRegression(2, 2)
    small = laplace_fit(m, two_blob_data(400, 8), L2Prior(1e-3), "diagonal")
    large = laplace_fit(m, two_blob_data(800, 8), L2Prior(1e-3), "diagonal")
    ratio = small.variances / large.variances
    assert np.all(np.abs(ratio - 2.0) <= 0.3 * 2.0)


def test_laplace_diagonal_keeps_precision_diagonal():
    m = LogisticRegression(2, 2)
    d = two_blob_data(50, 9)
    full = laplace_fit(m, d, L2Prior(0.01), "full", damping=0.0)
    diag = laplace_fit(m, d, L2Prior(0.01), "diagonal", damping=0.0)
    P = laplace_precision(m, full.mean, d, L2Prior(0.01))
    np.testing.assert_allclose(diag.variances, 1.0 / np.diag(P), rtol=1e-10)


def test_laplace_indefinite_reports_smallest_eigenvalue():
    m = LogisticRegression(1, 2)
    d = Dataset([[0.0], [0.0]], [0, 1], 2)
    with pytest.raises(IndefiniteError) as exc:
        laplace_fit(m, d, L2Prior(0.0), "full", damping=0.0)
    assert exc.value.min_eigenvalue <= 1e-12


# -- SWAG-D ---------------------------------------------------------------------------

def test_swag_zero_collection_rate_gives_floor():
    m = LogisticRegression(2, 2)
    cfg = SgdTrajectoryConfig(learning_rate=0.1, num_epochs=10, batch_size=10,
                              collect_start_epoch=5, collect_learning_rate=0.0)
    q = swag_diag_fit(m, two_blob_data(40, 10), L2Prior(0.01), cfg)
    np.testing.assert_array_equal(q.variances, np.full(m.param_count, VARIANCE_FLOOR))


def test_swag_deterministic():
    m = MLP(2, 2, (3,))
    cfg = SgdTrajectoryConfig(num_epochs=8, collect_start_epoch=4, batch_size=8, seed=3)
    d = two_blob_data(40, 11)
    a = swag_diag_fit(m, d, L2Prior(0.01), cfg)
    b = swag_diag_fit(m, d, L2Prior(0.01), cfg)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.variances, b.variances)


def test_swag_mean_near_quadratic_optimum():
    m = GaussianMeanModel(2, sigma=1.0)
    rng = np.random.default_rng(12)
    d = Dataset(rng.normal([1.0, -2.0], 1.0, size=(200, 2)), np.zeros(200, int), 2)
    lam = 0.05
    # maximiser of mean log-likelihood - lam ||theta||^2
    opt = d.inputs.mean(axis=0) / (1 + 2 * lam)
    cfg = SgdTrajectoryConfig(learning_rate=0.05, num_epochs=60, batch_size=10,
                              collect_start_epoch=20)
    q = swag_diag_fit(m, d, L2Prior(lam), cfg)
    assert np.all(np.abs(q.mean - opt) <= 3 * np.sqrt(q.variances))


def test_swag_needs_two_iterates():
    cfg = SgdTrajectoryConfig(num_epochs=3, collect_start_epoch=2, batch_size=5)
    with pytest.raises(InsufficientTrajectoryError):
        swag_diag_fit(LogisticRegression(2, 2), two_blob_data(20, 13), L2Prior(0.1), cfg)


def test_swag_config_validation():
    with pytest.raises(ContractError):
        SgdTrajectoryConfig(num_epochs=5, collect_start_epoch=5)
    with pytest.raises(ContractError):
        swag_diag_fit(LogisticRegression(2, 2), two_blob_data(5, 0), L2Prior(0.1),
                      SgdTrajectoryConfig(batch_size=6))


# -- VI -------------------------------------------------------------------------------

def test_vi_recovers_conjugate_posterior():
    sigma, tau = 1.0, 2.0
    m = GaussianMeanModel(1, sigma=sigma)
    rng = np.random.default_rng(14)
    d = Dataset(rng.normal(0.8, sigma, size=(50, 1)), np.zeros(50, int), 2)
    prec = d.n / sigma**2 + 1 / tau**2
    mean = d.inputs.sum() / sigma**2 / prec
    q = vi_diag_fit(m, d, ViConfig(prior_std=tau, num_elbo_samples=32, learning_rate=0.02,
                                   num_steps=3000, seed=1, init_std=0.5, final_lr_fraction=0.01))
    assert q.mean[0] == pytest.approx(mean, rel=0.05)
    assert q.variances[0] == pytest.approx(1 / prec, rel=0.05)


def test_vi_tiny_prior_std_pins_mean():
    m = LogisticRegression(2, 2)
    q = vi_diag_fit(m, two_blob_data(40, 15), ViConfig(prior_std=1e-4, num_steps=500),
                    init=np.full(6, 0.5))
    assert np.linalg.norm(q.mean) <= 1e-2


def test_vi_elbo_nondecreasing_after_smoothing():
    m = LogisticRegression(2, 2)
    trace = []
    vi_diag_fit(m, two_blob_data(100, 16), ViConfig(prior_std=1.0, num_steps=2000, seed=2),
                trace=trace)
    windows = np.array(trace).reshape(-1, 100).mean(axis=1)
    # single-sample ELBO estimates are noisy; allow drops within three noise standard errors
    noise = np.array(trace[-500:]).std() / math.sqrt(100)
    assert np.all(np.diff(windows) >= -3 * noise)
    assert windows[-1] > windows[0]


def test_vi_config_validation():
    with pytest.raises(ContractError):
        ViConfig(prior_std=0.0)


# -- serialisation --------------------------------------------------------------------

@pytest.mark.parametrize("shape", ["diagonal", "full"])
def test_round_trip_bit_exact(tmp_path, shape):
    rng = np.random.default_rng(17)
    mean = rng.normal(size=5)
    if shape == "diagonal":
        q = GaussianPosterior.from_diagonal(mean, rng.uniform(0.1, 1, 5), alpha=1.5, source="t")
    else:
        A = rng.normal(size=(5, 5))
        q = GaussianPosterior.from_covariance(mean, A @ A.T + np.eye(5), alpha=0.25, source="t")
    path = tmp_path / "q.bin"
    save_posterior(q, path)
    r = load_posterior(path)
    assert (r.shape, r.temperature_alpha, r.source) == (q.shape, q.temperature_alpha, q.source)
    np.testing.assert_array_equal(r.mean, q.mean)
    if shape == "diagonal":
        np.testing.assert_array_equal(r.variances, q.variances)
    else:
        np.testing.assert_array_equal(r.chol, q.chol)
    save_posterior(r, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a posterior")
    with pytest.raises(DataFormatError):
        load_posterior(p)
