"""Bivariate normal error pairs and their inverse-Wishart conjugate prior.

Covariances of the (exposure, outcome) error pair are handled either as 2 x 2
arrays or, in the vectorized paths, through their three free entries
(s_tt, s_ty, s_yy).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import invwishart

from ivbart.exceptions import InvariantViolation

_LOG_2PI = math.log(2.0 * math.pi)


def is_spd(sigma: np.ndarray) -> bool:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (2, 2) or not np.all(np.isfinite(sigma)) or sigma[0, 1] != sigma[1, 0]:
        return False
    return bool(sigma[0, 0] > 0 and sigma[0, 0] * sigma[1, 1] - sigma[0, 1] ** 2 > 0)


@dataclass(frozen=True, slots=True, eq=False)
class IWPrior:
    """Inverse-Wishart prior IW(dof, scale) on a 2 x 2 covariance matrix."""
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=float)
        object.__setattr__(self, "scale", scale)
        if not self.dof > 1:
            raise ValueError(f"Inverse-Wishart dof must exceed d - 1 = 1, got {self.dof}")
        if not is_spd(scale):
            raise InvariantViolation("Inverse-Wishart scale must be a symmetric positive definite 2 x 2 matrix")

    @property
    def mean(self) -> np.ndarray:
        if self.dof <= 3:
            raise ValueError("Inverse-Wishart mean requires dof > 3")
        return self.scale / (self.dof - 3.0)

    @classmethod
    def calibrated(cls, variances: tuple[float, float], dof: float = 6.0) -> "IWPrior":
        """Prior whose mean is diag(variances)."""
        return cls(dof, (dof - 3.0) * np.diag(np.asarray(variances, dtype=float)))

    def to_dict(self) -> dict:
        return {"dof": self.dof, "scale": self.scale.tolist()}


def scatter(errors: np.ndarray) -> np.ndarray:
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    return errors.T @ errors


def posterior(errors: np.ndarray, prior: IWPrior) -> IWPrior:
    """Conjugate update for zero-mean bivariate normal errors."""
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    return IWPrior(prior.dof + errors.shape[0], prior.scale + scatter(errors))


def draw(prior: IWPrior, rng: np.random.Generator) -> np.ndarray:
    sigma = np.atleast_2d(invwishart.rvs(df=prior.dof, scale=prior.scale, random_state=rng))
    # symmetrize against rounding
    return (sigma + sigma.T) / 2.0


def bvn_logpdf(errors: np.ndarray, s_tt, s_ty, s_yy) -> np.ndarray:
    """Zero-mean bivariate normal log density, broadcasting over covariance entries."""
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    e_t, e_y = errors[:, 0], errors[:, 1]
    det = s_tt * s_yy - s_ty ** 2
    quad = (s_yy * e_t ** 2 - 2.0 * s_ty * e_t * e_y + s_tt * e_y ** 2) / det
    return -_LOG_2PI - 0.5 * np.log(det) - 0.5 * quad


def correlation(s_tt, s_ty, s_yy):
    return s_ty / np.sqrt(s_tt * s_yy)
