"""Two-stage least squares and the first-stage F statistic."""

import math
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from ivbart.exceptions import InputError, RankDeficiencyError

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10


@dataclass(frozen=True, slots=True, eq=False)
class TSLSFit:
    """Result of a 2SLS fit: y = intercept + beta_hat t + X coef_x."""
    beta_hat: float
    coef_x: np.ndarray
    se_beta: float
    first_stage_F: float  # pylint: disable=invalid-name
    intercept: float = 0.0

    @property
    def perfect_first_stage(self) -> bool:
        return math.isinf(self.first_stage_F)

    def predict(self, t: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        fitted = self.intercept + self.beta_hat * t
        if self.coef_x.size:
            fitted = fitted + np.asarray(X, dtype=float) @ self.coef_x
        return fitted

    def partial_dependence(self, t_points: Sequence[float], profiles: Sequence[Mapping[int, float]],
                           background: np.ndarray | None) -> np.ndarray:
        """Linear fit averaged over background rows, profile columns held fixed.

        Returns:
            len(profiles) x len(t_points) array
        """
        t_points = np.asarray(t_points, dtype=float)
        out = np.empty((len(profiles), t_points.size))
        for p, profile in enumerate(profiles):
            if self.coef_x.size:
                rows = np.array(background, dtype=float, copy=True)
                for column, value in profile.items():
                    rows[:, column] = value
                offset = float(np.mean(rows @ self.coef_x))
            else:
                offset = 0.0
            out[p] = self.intercept + offset + self.beta_hat * t_points
        return out


def _names(n_z: int, n_x: int, names: Sequence[str] | None) -> list[str]:
    if names is not None:
        return ["intercept", *names]
    return ["intercept", *(f"z{j + 1}" for j in range(n_z)), *(f"x{j + 1}" for j in range(n_x))]


def _check_rank(design: np.ndarray, names: list[str]):
    """Raise when the design is rank deficient, naming the dropped columns."""
    _, r, pivots = linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return
    rank = int(np.sum(diag > RANK_TOLERANCE * diag[0]))
    if rank < design.shape[1]:
        collinear = [names[p] for p in pivots[rank:]]
        raise RankDeficiencyError(f"Design is rank deficient; collinear columns: {', '.join(collinear)}")


def _lstsq(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    coef, *_ = linalg.lstsq(design, target)
    return coef


def _columns(a, n: int) -> np.ndarray:
    if a is None:
        return np.empty((n, 0))
    a = np.asarray(a, dtype=float)
    return a.reshape(n, -1) if a.size else np.empty((n, 0))


def _prepare(y, t, Z, X):
    t = np.asarray(t, dtype=float).ravel()
    n = t.size
    Z = _columns(Z, n)
    X = _columns(X, n)
    y = None if y is None else np.asarray(y, dtype=float).ravel()
    if y is not None and y.size != n:
        raise InputError("Outcome and exposure lengths differ")
    if Z.shape[1] == 0:
        raise InputError("At least one instrument is required")
    if not n > Z.shape[1] + X.shape[1] + 1:
        raise InputError(f"Need more rows ({n}) than stage-1 columns ({Z.shape[1] + X.shape[1] + 1})")
    return y, t, Z, X


def _first_stage_F(t, Z, X, names) -> float:  # pylint: disable=invalid-name
    n = t.size
    ones = np.ones((n, 1))
    full = np.hstack([ones, Z, X])
    _check_rank(full, names)
    restricted = np.hstack([ones, X])
    rss_u = float(np.sum((t - full @ _lstsq(full, t)) ** 2))
    rss_r = float(np.sum((t - restricted @ _lstsq(restricted, t)) ** 2))
    q = Z.shape[1]
    dof = n - full.shape[1]
    if rss_u <= RANK_TOLERANCE * max(rss_r, 1.0):
        logger.warning("Instruments fit the exposure exactly; first-stage F reported as +inf")
        return math.inf
    return ((rss_r - rss_u) / q) / (rss_u / dof)


def first_stage_F(t: np.ndarray, Z: np.ndarray, X: np.ndarray | None = None,  # pylint: disable=invalid-name
                  names: Sequence[str] | None = None) -> float:
    """Partial F statistic of the instruments in the regression of t on [1, Z, X].

    Arguments:
        t -- exposure vector
        Z -- n x q instruments

    Keyword Arguments:
        X -- n x p covariates (default: {None})
        names -- column names of Z followed by X, used in error messages (default: {None})

    Raises:
        RankDeficiencyError: on a rank-deficient stage-1 design

    Returns:
        F statistic; +inf when the instruments fit the exposure exactly
    """
    _, t, Z, X = _prepare(None, t, Z, X)
    return _first_stage_F(t, Z, X, _names(Z.shape[1], X.shape[1], names))


def fit_2sls(y: np.ndarray, t: np.ndarray, Z: np.ndarray, X: np.ndarray | None = None,
             names: Sequence[str] | None = None) -> TSLSFit:
    """Two-stage least squares with an intercept.

    Stage 1 regresses t on [1, Z, X]; stage 2 regresses y on [1, t_hat, X]. The
    standard error uses the stage-2 coefficients with residuals taken at the
    observed exposure.

    Arguments:
        y -- outcome vector
        t -- exposure vector
        Z -- n x q instruments

    Keyword Arguments:
        X -- n x p covariates (default: {None})
        names -- column names of Z followed by X, used in error messages (default: {None})

    Raises:
        InputError: on too few rows or mismatched lengths
        RankDeficiencyError: on a rank-deficient design

    Returns:
        fitted 2SLS model
    """
    y, t, Z, X = _prepare(y, t, Z, X)
    column_names = _names(Z.shape[1], X.shape[1], names)
    n = t.size
    ones = np.ones((n, 1))
    stage1 = np.hstack([ones, Z, X])
    f_stat = _first_stage_F(t, Z, X, column_names)
    t_hat = stage1 @ _lstsq(stage1, t)

    stage2 = np.hstack([ones, t_hat[:, None], X])
    _check_rank(stage2, ["intercept", "t_hat", *column_names[1 + Z.shape[1]:]])
    coef = _lstsq(stage2, y)
    structural = np.hstack([ones, t[:, None], X])
    residuals = y - structural @ coef
    sigma2 = float(residuals @ residuals) / (n - stage2.shape[1])
    _, r = linalg.qr(stage2, mode="economic")
    r_inv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    cov = sigma2 * (r_inv @ r_inv.T)
    se_beta = math.sqrt(max(cov[1, 1], 0.0))
    logger.debug("2SLS beta_hat=%.6g se=%.3g F=%.4g", coef[1], se_beta, f_stat)
    return TSLSFit(float(coef[1]), coef[2:], se_beta, f_stat, float(coef[0]))
