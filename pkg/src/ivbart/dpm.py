"""Dirichlet-process mixture of zero-mean bivariate normals for the error pairs.

Covariances are drawn from an inverse-Wishart base measure. Assignments are updated
by collapsed Gibbs on the conjugate marginal, cluster covariances from their
inverse-Wishart posteriors and the concentration by the auxiliary-variable scheme
of Escobar and West.
"""

import math
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import multivariate_t

from ivbart import wishart
from ivbart.wishart import IWPrior
from ivbart.exceptions import InvariantViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class DPMHyper:
    """Gamma(alpha_shape, alpha_rate) prior on the concentration and the base measure."""
    alpha_shape: float
    alpha_rate: float
    base: IWPrior
    update_alpha: bool = True

    def __post_init__(self):
        if not (self.alpha_shape > 0 and self.alpha_rate > 0):
            raise ValueError("Gamma prior parameters of alpha must be positive")


@dataclass(slots=True, eq=False)
class DPMState:
    """Cluster labels 0..K-1 per observation, one covariance per cluster."""
    assignments: np.ndarray
    cluster_sigmas: list[np.ndarray]
    alpha: float
    base: IWPrior
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        self.counts = np.bincount(self.assignments, minlength=len(self.cluster_sigmas))
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @classmethod
    def single_cluster(cls, n: int, sigma: np.ndarray, alpha: float, base: IWPrior) -> "DPMState":
        return cls(np.zeros(n, dtype=np.int64), [np.asarray(sigma, dtype=float)], alpha, base)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sigmas)

    def sigma_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-observation (s_tt, s_ty, s_yy)."""
        sigmas = np.array(self.cluster_sigmas)
        chosen = sigmas[self.assignments]
        return chosen[:, 0, 0], chosen[:, 0, 1], chosen[:, 1, 1]

    def validate(self):
        """Check the partition: nonempty clusters, labels in range, SPD covariances."""
        k = len(self.cluster_sigmas)
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= k):
            raise InvariantViolation("Assignment references an inactive cluster")
        counts = np.bincount(self.assignments, minlength=k)
        if np.any(counts == 0):
            raise InvariantViolation("Empty active cluster")
        if not np.array_equal(counts, self.counts):
            raise InvariantViolation("Cluster counts out of sync with assignments")
        for c, sigma in enumerate(self.cluster_sigmas):
            if not wishart.is_spd(sigma):
                raise InvariantViolation(f"Covariance of cluster {c} is not SPD")


def log_new_cluster_marginal(errors: np.ndarray, base: IWPrior) -> np.ndarray:
    """Log of the zero-centered bivariate Student-t marginal of a new cluster."""
    dof = base.dof - 1.0
    return np.atleast_1d(multivariate_t.logpdf(np.asarray(errors, dtype=float), loc=np.zeros(2), shape=base.scale / dof, df=dof))


def new_cluster_marginal(errors: np.ndarray, base: IWPrior) -> float | np.ndarray:
    """Density of an error pair under a fresh cluster.

    The normal likelihood integrated against the inverse-Wishart base is a
    zero-centered bivariate Student-t with dof - 1 degrees of freedom and scale
    S0 / (dof - 1).

    Arguments:
        errors -- error pair, or an m x 2 array of pairs
        base -- base measure

    Returns:
        density value(s)
    """
    values = np.exp(log_new_cluster_marginal(errors, base))
    return float(values[0]) if np.ndim(errors) == 1 else values


def _remove(state: DPMState, i: int):
    c = state.assignments[i]
    state.counts[c] -= 1
    if state.counts[c] == 0:
        last = len(state.cluster_sigmas) - 1
        if c != last:
            # move the last cluster into the freed label
            state.cluster_sigmas[c] = state.cluster_sigmas[last]
            state.assignments[state.assignments == last] = c
            state.counts[c] = state.counts[last]
        state.cluster_sigmas.pop()
        state.counts = state.counts[:last]
    state.assignments[i] = -1


def assignment_sweep(errors: np.ndarray, state: DPMState, rng: np.random.Generator) -> DPMState:
    """Collapsed Gibbs sweep over the cluster assignments.

    Observation i joins cluster c with probability proportional to
    n_{-i,c} N2(e_i; 0, Sigma_c), or a new cluster with probability proportional to
    alpha times the new-cluster marginal; a new cluster draws its covariance from
    the single-observation posterior.

    Arguments:
        errors -- n x 2 error pairs
        state -- current state, updated in place
        rng -- random generator

    Returns:
        the updated state
    """
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    log_new = log_new_cluster_marginal(errors, state.base) + math.log(state.alpha)
    sigmas = np.array(state.cluster_sigmas)
    for i in range(errors.shape[0]):
        k_before = len(state.cluster_sigmas)
        _remove(state, i)
        if len(state.cluster_sigmas) != k_before:
            sigmas = np.array(state.cluster_sigmas).reshape(-1, 2, 2)
        with np.errstate(divide="ignore"):
            log_weights = np.log(state.counts.astype(float)) + wishart.bvn_logpdf(errors[i], sigmas[:, 0, 0], sigmas[:, 0, 1], sigmas[:, 1, 1])
        log_weights = np.append(log_weights, log_new[i])
        weights = np.exp(log_weights - log_weights.max())
        choice = rng.choice(weights.size, p=weights / weights.sum())
        if choice == len(state.cluster_sigmas):
            sigma = wishart.draw(wishart.posterior(errors[i], state.base), rng)
            state.cluster_sigmas.append(sigma)
            state.counts = np.append(state.counts, 0)
            sigmas = np.array(state.cluster_sigmas)
        state.assignments[i] = choice
        state.counts[choice] += 1
    return state


def cluster_param_sweep(errors: np.ndarray, state: DPMState, rng: np.random.Generator) -> DPMState:
    """Redraw every cluster covariance from IW(dof + n_c, S0 + scatter_c)."""
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    for c in range(len(state.cluster_sigmas)):
        members = errors[state.assignments == c]
        state.cluster_sigmas[c] = wishart.draw(wishart.posterior(members, state.base), rng)
    return state


def alpha_update(state: DPMState, hyper: DPMHyper, n: int, rng: np.random.Generator) -> float:
    """Draw the concentration given the number of clusters.

    Auxiliary eta ~ Beta(alpha + 1, n); alpha is then drawn from the two-component
    Gamma mixture with shapes a + K and a + K - 1 and rate b - log(eta).

    Arguments:
        state -- current state
        hyper -- concentration prior
        n -- number of observations
        rng -- random generator

    Returns:
        new concentration (unchanged when the update is disabled)
    """
    if not hyper.update_alpha:
        return state.alpha
    k = state.n_clusters
    eta = rng.beta(state.alpha + 1.0, n)
    rate = hyper.alpha_rate - math.log(eta)
    odds = (hyper.alpha_shape + k - 1.0) / (n * rate)
    shape = hyper.alpha_shape + k if rng.uniform() < odds / (1.0 + odds) else hyper.alpha_shape + k - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


def dpm_iteration(errors: np.ndarray, state: DPMState, hyper: DPMHyper, rng: np.random.Generator,
                  debug: bool = False) -> DPMState:
    """Assignments, cluster covariances and concentration, in that order."""
    assignment_sweep(errors, state, rng)
    cluster_param_sweep(errors, state, rng)
    state.alpha = alpha_update(state, hyper, len(state.assignments), rng)
    if debug:
        state.validate()
    return state
