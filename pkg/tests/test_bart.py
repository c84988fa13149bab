import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import multivariate_normal, norm

from ivbart import bart
from ivbart.bart import Ensemble, LeafPriorSpec, WeightedResiduals
from ivbart.exceptions import InputError, InvariantViolation
from ivbart.treekit import CutpointGrid, RegressionTree, TreePriorConfig, evaluate_tree, log_tree_structure_prior


@pytest.mark.parametrize("data_range, k, H, sigma_mu", [
    (4.0, 2.0, 1, 1.0),
    (4.0, 2.0, 100, 0.1),
    (4.0, 1e9, 1, 2e-9),
])
def test_leaf_prior_scale(data_range, k, H, sigma_mu):
    assert bart.leaf_prior_scale(LeafPriorSpec(k, data_range, H)) == pytest.approx(sigma_mu)


def test_leaf_prior_spec_validation():
    with pytest.raises(ValueError):
        LeafPriorSpec(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        LeafPriorSpec(2.0, 0.0, 1)
    with pytest.raises(ValueError):
        LeafPriorSpec(2.0, 1.0, 0)


def test_weighted_residuals_need_positive_variances():
    with pytest.raises(InvariantViolation):
        WeightedResiduals([1.0, 2.0], [1.0, 0.0])


def test_leaf_posterior_examples():
    assert bart.leaf_posterior(WeightedResiduals([], []), 1.5) == pytest.approx((0.0, 2.25))
    assert bart.leaf_posterior(WeightedResiduals([2.0], [1.0]), 1.0) == pytest.approx((1.0, 0.5))
    r = np.array([0.3, -1.2, 2.5, 0.7])
    mean, _ = bart.leaf_posterior(WeightedResiduals(r, 0.4), 1e8)
    assert mean == pytest.approx(r.mean())


def test_leaf_posterior_precision_weighting():
    r = np.array([1.0, 3.0])
    v = np.array([1.0, 0.25])
    mean, var = bart.leaf_posterior(WeightedResiduals(r, v), 2.0)
    precision = 1.0 / 4.0 + 1.0 + 4.0
    assert var == pytest.approx(1.0 / precision)
    assert mean == pytest.approx((1.0 + 12.0) / precision)


def test_log_marginal_leaf():
    assert bart.log_marginal_leaf(WeightedResiduals([], []), 0.7) == pytest.approx(0.0)
    rng = np.random.default_rng(11)
    r = rng.normal(size=6)
    v = rng.uniform(0.3, 2.0, size=6)
    sigma_mu = 0.8
    cov = np.diag(v) + sigma_mu ** 2 * np.ones((6, 6))
    expected = multivariate_normal(np.zeros(6), cov).logpdf(r)
    assert bart.log_marginal_leaf(WeightedResiduals(r, v), sigma_mu) == pytest.approx(expected, abs=1e-10)


def test_linear_leaf_posterior_matches_regression():
    rng = np.random.default_rng(12)
    t = rng.normal(size=8)
    r = 0.5 + 1.5 * t + rng.normal(size=8)
    v = rng.uniform(0.5, 1.5, size=8)
    scales = (1.2, 0.9)
    post = bart.linear_leaf_posterior(t, WeightedResiduals(r, v), scales)

    design = np.column_stack([np.ones(8), t])
    precision = design.T @ (design / v[:, None]) + np.diag(1.0 / np.square(scales))
    covariance = np.linalg.inv(precision)
    assert post.covariance == pytest.approx(covariance)
    assert post.mean == pytest.approx(covariance @ design.T @ (r / v))

    marginal_cov = np.diag(v) + scales[0] ** 2 + scales[1] ** 2 * np.outer(t, t)
    expected = multivariate_normal(np.zeros(8), marginal_cov).logpdf(r)
    assert post.log_marginal == pytest.approx(expected, abs=1e-10)


def test_linear_leaf_posterior_degenerate_cases():
    scales = (1.0, 0.5)
    prior = bart.linear_leaf_posterior([], WeightedResiduals([], []), scales)
    assert prior.mean == pytest.approx([0.0, 0.0])
    assert prior.covariance == pytest.approx(np.diag([1.0, 0.25]))
    assert prior.log_marginal == pytest.approx(0.0)

    residuals = WeightedResiduals([2.0], [1.0])
    post = bart.linear_leaf_posterior([0.0], residuals, scales)
    mean, var = bart.leaf_posterior(residuals, 1.0)
    assert post.mean == pytest.approx([mean, 0.0])
    assert post.covariance == pytest.approx(np.diag([var, 0.25]))


def test_predict_stumps_and_single_tree():
    rows = np.random.default_rng(0).uniform(-1, 1, size=(7, 2))
    grid = CutpointGrid.from_data(rows)
    assert bart.predict(Ensemble.stumps(5, 1.0, grid), rows) == pytest.approx(np.zeros(7))

    tree = RegressionTree.stump().grow(0, grid.rule(1, 50), -0.25, 0.75)
    ensemble = Ensemble((tree,), 1.0, grid)
    assert bart.predict(ensemble, rows) == pytest.approx([evaluate_tree(tree, row) for row in rows])


def test_predict_errors():
    grid = CutpointGrid([[0.0]])
    tree = RegressionTree.stump().grow(0, grid.rule(0, 0), 1.0, 2.0)
    scalar = Ensemble((tree,), 1.0, grid)
    with pytest.raises(InputError):
        bart.predict(scalar, [[0.5]], exposure=[1.0])
    with pytest.raises(InputError):
        bart.predict(scalar, [[math.nan]])
    linear = Ensemble.stumps(2, (1.0, 1.0), grid)
    with pytest.raises(InputError):
        bart.predict(linear, [[0.5]])
    assert bart.predict(linear, [[0.5], [1.0]], exposure=2.0) == pytest.approx([0.0, 0.0])


def test_ensemble_serialization_keeps_predictions():
    grid = CutpointGrid([[0.0, 1.0]])
    tree = RegressionTree.stump((0.0, 0.0)).grow(0, grid.rule(0, 1), (1.0, 2.0), (-1.0, 0.5))
    ensemble = Ensemble((tree, tree), (0.3, 0.2), grid)
    restored = Ensemble.deserialize(ensemble.serialize(), grid)
    rows, exposure = np.array([[0.0], [2.0]]), np.array([1.0, -1.0])
    assert restored.leaf_scale == (0.3, 0.2)
    assert restored.predict(rows, exposure) == pytest.approx(ensemble.predict(rows, exposure))


def test_backfit_sweep_tracks_residuals():
    rng = np.random.default_rng(21)
    X = rng.uniform(-1, 1, size=(200, 2))
    y = np.where(X[:, 0] >= 0, 1.0, -1.0) + 0.1 * rng.normal(size=200)
    grid = CutpointGrid.from_data(X, n_cutpoints=20)
    scale = bart.leaf_prior_scale(LeafPriorSpec(2.0, float(np.ptp(y)), 20))
    ensemble = Ensemble.stumps(20, scale, grid, n=200)
    wr = WeightedResiduals(y.copy(), 0.01)
    first = ensemble
    for _ in range(60):
        ensemble = bart.backfit_sweep(ensemble, X, wr, TreePriorConfig(), rng)
    assert wr.r == pytest.approx(y - ensemble.fitted())
    assert first.fitted() == pytest.approx(np.zeros(200))
    assert np.sqrt(np.mean((ensemble.fitted() - y) ** 2)) < 0.2
    assert ensemble.fits == pytest.approx(np.stack([t.predict(X) for t in ensemble.trees]))


def test_backfit_sweep_linear_leaves():
    rng = np.random.default_rng(22)
    X = rng.uniform(-1, 1, size=(200, 1))
    t = rng.normal(size=200)
    y = np.where(X[:, 0] >= 0, 2.0, 0.0) * t + 0.1 * rng.normal(size=200)
    grid = CutpointGrid.from_data(X, n_cutpoints=20)
    ensemble = Ensemble.stumps(10, bart.linear_leaf_prior_scales(2.0, float(np.ptp(y)), float(np.ptp(t)), 10), grid, n=200)
    wr = WeightedResiduals(y.copy(), 0.01)
    for _ in range(60):
        ensemble = bart.backfit_sweep(ensemble, X, wr, TreePriorConfig(), rng, exposure=t)
    assert wr.r == pytest.approx(y - ensemble.fitted())
    assert np.sqrt(np.mean((ensemble.fitted() - y) ** 2)) < 0.3
    with pytest.raises(InputError):
        bart.backfit_sweep(ensemble, X, wr, TreePriorConfig(), rng)


@pytest.mark.parametrize("seed, sigma_mu", [
    (31, 0.8),
    (32, 0.05),
    (33, 3.0),
])
def test_log_marginal_leaf_matches_quadrature(seed, sigma_mu):
    rng = np.random.default_rng(seed)
    r = rng.normal(0.4, 1.0, size=10)
    v = rng.uniform(0.3, 2.0, size=10)

    def log_joint(mu):
        return float(np.sum(norm.logpdf(r, loc=mu, scale=np.sqrt(v))) + norm.logpdf(mu, scale=sigma_mu))

    mean, var = bart.leaf_posterior(WeightedResiduals(r, v), sigma_mu)
    offset = log_joint(mean)
    half_width = 40.0 * math.sqrt(var)
    area, _ = integrate.quad(lambda mu: math.exp(log_joint(mu) - offset), mean - half_width, mean + half_width,
                             epsabs=0.0, epsrel=1e-13, limit=200)
    assert bart.log_marginal_leaf(WeightedResiduals(r, v), sigma_mu) == pytest.approx(offset + math.log(area), abs=1e-8)


def _flat_backfit(ensemble, X, rng, sweeps):
    """Backfit sweeps under a likelihood too weak to move the trees."""
    wr = WeightedResiduals(np.zeros(X.shape[0]), 1e12)
    for _ in range(sweeps):
        ensemble = bart.backfit_sweep(ensemble, X, wr, TreePriorConfig(), rng)
        yield ensemble


@pytest.mark.slow
def test_prior_sum_sd_follows_calibration():
    rng = np.random.default_rng(41)
    X = rng.uniform(-1, 1, size=(10, 2))
    grid = CutpointGrid.from_data(X, n_cutpoints=5)
    H, data_range = 4, 6.0
    ensemble = Ensemble.stumps(H, bart.leaf_prior_scale(LeafPriorSpec(2.0, data_range, H)), grid, n=10)
    draws = np.array([e.fitted()[0] for e in _flat_backfit(ensemble, X, rng, 20000)])
    assert np.mean(draws) == pytest.approx(0.0, abs=0.05)
    assert np.std(draws) == pytest.approx(data_range / 4.0, rel=0.02)


@pytest.mark.slow
def test_single_tree_depth_on_noise_follows_prior():
    rng = np.random.default_rng(42)
    grid = CutpointGrid([[0.0, 1.0]])
    X = np.repeat([[-1.0], [0.5], [2.0]], 20, axis=0)
    cfg = TreePriorConfig()
    trees = [RegressionTree.stump(), *(RegressionTree.stump().grow(0, grid.rule(0, c)) for c in (0, 1))]
    trees += [trees[1].grow(2, grid.rule(0, 1)), trees[2].grow(1, grid.rule(0, 0))]
    prior = np.zeros(3)
    for tree in trees:
        prior[tree.depth] += math.exp(log_tree_structure_prior(tree, cfg, grid))

    # noise target with leaves too tight to fit it
    y = rng.normal(size=X.shape[0])
    ensemble = Ensemble.stumps(1, 1e-4, grid, n=X.shape[0])
    wr = WeightedResiduals(y.copy(), 1.0)
    depths = []
    for step in range(100000):
        ensemble = bart.backfit_sweep(ensemble, X, wr, cfg, rng)
        if step % 10 == 9:
            depths.append(ensemble.trees[0].depth)
    observed = np.bincount(depths, minlength=3) / len(depths)
    assert observed == pytest.approx(prior, abs=0.03)


def test_backfit_sweep_survives_zero_uniform():
    class ZeroUniform:
        def __init__(self, rng):
            self._rng = rng

        def uniform(self, *args, **kwargs):
            return 0.0 if not args and not kwargs else self._rng.uniform(*args, **kwargs)

        def __getattr__(self, name):
            return getattr(self._rng, name)

    rng = ZeroUniform(np.random.default_rng(43))
    X = np.linspace(-1, 1, 40)[:, None]
    y = np.where(X[:, 0] >= 0, 1.0, -1.0)
    ensemble = Ensemble.stumps(3, 0.5, CutpointGrid.from_data(X, n_cutpoints=10), n=40)
    wr = WeightedResiduals(y.copy(), 0.01)
    for _ in range(5):
        ensemble = bart.backfit_sweep(ensemble, X, wr, TreePriorConfig(), rng)
    assert np.all(np.isfinite(ensemble.fitted()))
    assert wr.r == pytest.approx(y - ensemble.fitted())


@pytest.mark.slow
def test_backfit_recovers_step_function():
    rng = np.random.default_rng(44)
    X = rng.uniform(-1, 1, size=(500, 1))
    grid = CutpointGrid.from_data(X)
    # step on a grid cutpoint
    truth = np.where(X[:, 0] >= grid[0][60], 1.0, -1.0)
    y = truth + 0.2 * rng.normal(size=500)
    ensemble = Ensemble.stumps(50, bart.leaf_prior_scale(LeafPriorSpec(2.0, float(np.ptp(y)), 50)), grid, n=500)
    wr = WeightedResiduals(y.copy(), 0.04)
    total = np.zeros(500)
    for sweep in range(1000):
        ensemble = bart.backfit_sweep(ensemble, X, wr, TreePriorConfig(), rng)
        if sweep >= 500:
            total += ensemble.fitted()
    posterior_mean = total / 500
    assert np.sqrt(np.mean((posterior_mean - truth) ** 2)) < 0.1
