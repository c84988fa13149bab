"""Additive regression-tree ensembles.

Conjugate leaf updates with observation-specific noise variances, integrated
leaf likelihoods for the structural Metropolis-Hastings step, the ``k`` leaf-prior
calibration and the Bayesian backfitting sweep. Leaves are either scalars or lines
in the exposure.
"""

import math
import logging
from dataclasses import dataclass

import numpy as np

from ivbart.exceptions import InputError, InvariantViolation
from ivbart.treekit import (RegressionTree, TreePriorConfig, CutpointGrid, leaf_counter,
                            log_tree_structure_prior, propose_move)

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, slots=True)
class LeafPriorSpec:
    """Leaf-prior calibration: ``data_range`` covers the central mass of the prior on
    the sum of ``H`` leaves, ``k`` standard deviations wide on each side."""
    k: float
    data_range: float
    H: int

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.data_range > 0:
            raise ValueError(f"data_range must be positive, got {self.data_range}")
        if not self.H >= 1:
            raise ValueError(f"H must be at least 1, got {self.H}")


@dataclass(slots=True, eq=False)
class WeightedResiduals:
    """Partial residuals with their per-observation conditional variances."""
    r: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.v = np.broadcast_to(np.asarray(self.v, dtype=float), self.r.shape).copy()
        if self.r.ndim != 1:
            raise InputError("Residuals must be a vector")
        if not np.all(self.v > 0):
            raise InvariantViolation("Conditional variances must be positive")

    def __len__(self):
        return self.r.size

    def __getitem__(self, index) -> "WeightedResiduals":
        return WeightedResiduals(self.r[index], self.v[index])


@dataclass(frozen=True, slots=True, eq=False)
class LinearLeafPosterior:
    """Bivariate normal posterior on a leaf's (intercept, slope)."""
    mean: np.ndarray
    covariance: np.ndarray
    log_marginal: float


def leaf_prior_scale(spec: LeafPriorSpec) -> float:
    """Return sigma_mu = data_range / (2 k sqrt(H))."""
    return spec.data_range / (2.0 * spec.k * math.sqrt(spec.H))


def linear_leaf_prior_scales(k: float, y_range: float, t_range: float, H: int) -> tuple[float, float]:
    """Intercept scale from the outcome range, slope scale from the range ratio."""
    sigma_a = leaf_prior_scale(LeafPriorSpec(k, y_range, H))
    sigma_b = leaf_prior_scale(LeafPriorSpec(k, y_range / t_range, H))
    return sigma_a, sigma_b


def _scalar_leaf_terms(inverse: np.ndarray, n_leaves: int, r: np.ndarray, v: np.ndarray, sigma_mu: float):
    precision = 1.0 / sigma_mu ** 2 + np.bincount(inverse, weights=1.0 / v, minlength=n_leaves)
    mean = np.bincount(inverse, weights=r / v, minlength=n_leaves) / precision
    return mean, precision


def _scalar_log_marginal(mean, precision, r, v, sigma_mu) -> float:
    data_term = -0.5 * np.sum(_LOG_2PI + np.log(v)) - 0.5 * np.sum(r ** 2 / v)
    leaf_terms = 0.5 * mean ** 2 * precision - 0.5 * np.log(sigma_mu ** 2 * precision)
    return float(data_term + np.sum(leaf_terms))


def _linear_leaf_terms(inverse, n_leaves, exposure, r, v, scales):
    sigma_a, sigma_b = scales
    s0 = np.bincount(inverse, weights=1.0 / v, minlength=n_leaves) + 1.0 / sigma_a ** 2
    s1 = np.bincount(inverse, weights=exposure / v, minlength=n_leaves)
    s2 = np.bincount(inverse, weights=exposure ** 2 / v, minlength=n_leaves) + 1.0 / sigma_b ** 2
    b0 = np.bincount(inverse, weights=r / v, minlength=n_leaves)
    b1 = np.bincount(inverse, weights=exposure * r / v, minlength=n_leaves)
    det = s0 * s2 - s1 ** 2
    c00, c01, c11 = s2 / det, -s1 / det, s0 / det
    mean = np.stack([c00 * b0 + c01 * b1, c01 * b0 + c11 * b1], axis=1)
    return mean, (c00, c01, c11), det, (b0, b1)


def _linear_log_marginal(mean, det, rhs, r, v, scales) -> float:
    sigma_a, sigma_b = scales
    data_term = -0.5 * np.sum(_LOG_2PI + np.log(v)) - 0.5 * np.sum(r ** 2 / v)
    quad = mean[:, 0] * rhs[0] + mean[:, 1] * rhs[1]
    leaf_terms = 0.5 * quad - 0.5 * np.log(det * sigma_a ** 2 * sigma_b ** 2)
    return float(data_term + np.sum(leaf_terms))


def leaf_posterior(residuals: WeightedResiduals, sigma_mu: float) -> tuple[float, float]:
    """Conjugate normal posterior of a scalar leaf.

    Arguments:
        residuals -- residuals and variances of the rows in the leaf
        sigma_mu -- prior standard deviation of the leaf

    Returns:
        posterior mean and variance
    """
    if not sigma_mu > 0:
        raise ValueError("sigma_mu must be positive")
    mean, precision = _scalar_leaf_terms(np.zeros(len(residuals), dtype=np.int64), 1, residuals.r, residuals.v, sigma_mu)
    return float(mean[0]), float(1.0 / precision[0])


def log_marginal_leaf(residuals: WeightedResiduals, sigma_mu: float) -> float:
    """Log likelihood of a leaf's residuals with the leaf value integrated out."""
    mean, precision = _scalar_leaf_terms(np.zeros(len(residuals), dtype=np.int64), 1, residuals.r, residuals.v, sigma_mu)
    return _scalar_log_marginal(mean, precision, residuals.r, residuals.v, sigma_mu)


def linear_leaf_posterior(exposure: np.ndarray, residuals: WeightedResiduals,
                          scales: tuple[float, float]) -> LinearLeafPosterior:
    """Conjugate posterior of a line-valued leaf.

    Bayesian linear regression of the residuals on (1, exposure) with known
    per-row noise variances and independent zero-mean normal priors.

    Arguments:
        exposure -- exposure values of the rows in the leaf
        residuals -- residuals and variances of the rows in the leaf
        scales -- prior standard deviations (intercept, slope)

    Returns:
        posterior mean, covariance and log marginal likelihood
    """
    if not (scales[0] > 0 and scales[1] > 0):
        raise ValueError("Prior scales must be positive")
    exposure = np.asarray(exposure, dtype=float)
    inverse = np.zeros(len(residuals), dtype=np.int64)
    mean, cov, det, rhs = _linear_leaf_terms(inverse, 1, exposure, residuals.r, residuals.v, scales)
    covariance = np.array([[cov[0][0], cov[1][0]], [cov[1][0], cov[2][0]]])
    log_marginal = _linear_log_marginal(mean, det, rhs, residuals.r, residuals.v, scales)
    return LinearLeafPosterior(mean[0], covariance, log_marginal)


@dataclass(frozen=True, slots=True, eq=False)
class Ensemble:
    """H trees on a shared cutpoint grid.

    ``fits`` caches the per-tree fitted values on the training rows (H x n).
    """
    trees: tuple[RegressionTree, ...]
    leaf_scale: float | tuple[float, float]
    grid: CutpointGrid
    fits: np.ndarray | None = None

    def __post_init__(self):
        if len(self.trees) < 1:
            raise ValueError("An ensemble needs at least one tree")
        scales = self.leaf_scale if isinstance(self.leaf_scale, tuple) else (self.leaf_scale,)
        if not all(s > 0 for s in scales):
            raise ValueError("Leaf scales must be positive")

    @classmethod
    def stumps(cls, H: int, leaf_scale: float | tuple[float, float], grid: CutpointGrid, n: int | None = None) -> "Ensemble":
        """Ensemble of root-only trees with zero payloads."""
        linear = isinstance(leaf_scale, tuple)
        tree = RegressionTree.stump((0.0, 0.0) if linear else 0.0)
        fits = np.zeros((H, n)) if n is not None else None
        return cls(tuple([tree] * H), leaf_scale, grid, fits)

    @property
    def H(self) -> int:  # pylint: disable=invalid-name
        return len(self.trees)

    @property
    def linear(self) -> bool:
        return isinstance(self.leaf_scale, tuple)

    def fitted(self) -> np.ndarray:
        if self.fits is None:
            raise InvariantViolation("Ensemble carries no training fits")
        return self.fits.sum(axis=0)

    def predict(self, X: np.ndarray, exposure: np.ndarray | None = None) -> np.ndarray:
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X, exposure)
        return total

    def serialize(self) -> dict:
        scale = list(self.leaf_scale) if self.linear else self.leaf_scale
        return {"leaf_scale": scale, "trees": [tree.serialize() for tree in self.trees]}

    @classmethod
    def deserialize(cls, obj: dict, grid: CutpointGrid) -> "Ensemble":
        scale = obj["leaf_scale"]
        scale = tuple(scale) if isinstance(scale, list) else scale
        return cls(tuple(RegressionTree.deserialize(t) for t in obj["trees"]), scale, grid)


def predict(ensemble: Ensemble, rows: np.ndarray, exposure: np.ndarray | None = None) -> np.ndarray:
    """Sum of the tree outputs for every row.

    Arguments:
        ensemble -- tree ensemble
        rows -- n x p covariate matrix

    Keyword Arguments:
        exposure -- exposure values, required iff the leaves are lines (default: {None})

    Raises:
        InputError: on missing values or a payload kind / exposure mismatch

    Returns:
        vector of predictions
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if ensemble.linear != (exposure is not None):
        raise InputError("Exposure values must be given iff the ensemble has line-valued leaves")
    used = sorted({rule.predictor_index for tree in ensemble.trees for rule in tree.rules.values()})
    if used and (max(used) >= rows.shape[1] or np.isnan(rows[:, used]).any()):
        raise InputError("Rows are missing values for predictors used by the ensemble")
    if exposure is not None:
        exposure = np.broadcast_to(np.asarray(exposure, dtype=float), rows.shape[:1])
    return ensemble.predict(rows, exposure)


def _draw_leaves(tree: RegressionTree, ids: np.ndarray, r: np.ndarray, v: np.ndarray,
                 leaf_scale, exposure: np.ndarray | None, rng: np.random.Generator) -> tuple[RegressionTree, np.ndarray, float]:
    """Redraw every leaf from its conditional posterior.

    Returns:
        new tree, its fitted values and the tree's log marginal likelihood
    """
    leaves = np.array(sorted(tree.leaves), dtype=np.int64)
    inverse = np.searchsorted(leaves, ids)
    n_leaves = leaves.size
    if exposure is None:
        mean, precision = _scalar_leaf_terms(inverse, n_leaves, r, v, leaf_scale)
        log_marginal = _scalar_log_marginal(mean, precision, r, v, leaf_scale)
        values = mean + rng.standard_normal(n_leaves) / np.sqrt(precision)
        fit = values[inverse]
        payloads = dict(zip(leaves.tolist(), values.tolist()))
    else:
        mean, (c00, c01, c11), det, rhs = _linear_leaf_terms(inverse, n_leaves, exposure, r, v, leaf_scale)
        log_marginal = _linear_log_marginal(mean, det, rhs, r, v, leaf_scale)
        l00 = np.sqrt(c00)
        l10 = c01 / l00
        l11 = np.sqrt(np.maximum(c11 - l10 ** 2, 0.0))
        z = rng.standard_normal((n_leaves, 2))
        a = mean[:, 0] + l00 * z[:, 0]
        b = mean[:, 1] + l10 * z[:, 0] + l11 * z[:, 1]
        fit = a[inverse] + b[inverse] * exposure
        payloads = {node: (ai, bi) for node, ai, bi in zip(leaves.tolist(), a.tolist(), b.tolist())}
    return tree.with_leaf_values(payloads), fit, log_marginal


def _tree_log_marginal(tree: RegressionTree, ids: np.ndarray, r: np.ndarray, v: np.ndarray,
                       leaf_scale, exposure: np.ndarray | None) -> float:
    leaves = np.array(sorted(tree.leaves), dtype=np.int64)
    inverse = np.searchsorted(leaves, ids)
    if exposure is None:
        mean, precision = _scalar_leaf_terms(inverse, leaves.size, r, v, leaf_scale)
        return _scalar_log_marginal(mean, precision, r, v, leaf_scale)
    mean, _, det, rhs = _linear_leaf_terms(inverse, leaves.size, exposure, r, v, leaf_scale)
    return _linear_log_marginal(mean, det, rhs, r, v, leaf_scale)


def backfit_sweep(ensemble: Ensemble, X: np.ndarray, wr: WeightedResiduals, cfg: TreePriorConfig,
                  rng: np.random.Generator, exposure: np.ndarray | None = None) -> Ensemble:
    """One Bayesian backfitting sweep over all trees.

    For every tree: add its fit back to the residuals, propose a structural move,
    accept it by Metropolis-Hastings on the integrated leaf likelihood, redraw all
    leaves from their conditional posterior and subtract the new fit.

    ``wr.r`` holds the residuals of the full model and is updated in place; the
    input ensemble is left untouched.

    Arguments:
        ensemble -- current ensemble
        X -- n x p design the trees split on
        wr -- full-model residuals and conditional variances
        cfg -- structure prior and move mixture
        rng -- random generator

    Keyword Arguments:
        exposure -- exposure values for line-valued leaves (default: {None})

    Returns:
        updated ensemble
    """
    if ensemble.linear != (exposure is not None):
        raise InputError("Exposure values must be given iff the ensemble has line-valued leaves")
    fits = ensemble.fits.copy() if ensemble.fits is not None else np.stack([tree.predict(X, exposure) for tree in ensemble.trees])
    trees = list(ensemble.trees)
    counter = leaf_counter(X)
    accepted = 0
    for h, tree in enumerate(trees):
        partial = wr.r + fits[h]
        proposal = propose_move(tree, cfg, ensemble.grid, counter, rng)
        if proposal.valid:
            old_ids = tree.leaf_index(X)
            new_ids = proposal.tree.leaf_index(X)
            log_alpha = (_tree_log_marginal(proposal.tree, new_ids, partial, wr.v, ensemble.leaf_scale, exposure)
                         - _tree_log_marginal(tree, old_ids, partial, wr.v, ensemble.leaf_scale, exposure)
                         + log_tree_structure_prior(proposal.tree, cfg, ensemble.grid)
                         - log_tree_structure_prior(tree, cfg, ensemble.grid)
                         + proposal.log_transition_ratio)
            # 1 - u lies in (0, 1]
            if math.log1p(-rng.uniform()) < log_alpha:
                tree, ids = proposal.tree, new_ids
                accepted += 1
            else:
                ids = old_ids
        else:
            ids = tree.leaf_index(X)
        tree, fit, _ = _draw_leaves(tree, ids, partial, wr.v, ensemble.leaf_scale, exposure, rng)
        trees[h] = tree
        fits[h] = fit
        wr.r = partial - fit
    logger.debug("Backfit sweep accepted %d of %d structural proposals", accepted, len(trees))
    return Ensemble(tuple(trees), ensemble.leaf_scale, ensemble.grid, fits)
