import math
from typing import Mapping

import numpy as np

from ivbart.bart import Ensemble, LeafPriorSpec, WeightedResiduals, backfit_sweep, leaf_prior_scale
from ivbart.models.variant import Stage2Design, Stage2Model, Stage2Settings, Variant, register


def beta_prior_sd(y_range: float, t_range: float, k: float) -> float:
    """Slope prior scale: the range ratio covered by k standard deviations each side."""
    return (y_range / t_range) / (2.0 * k)


def update_beta(residuals: np.ndarray, t: np.ndarray, w: np.ndarray, sigma_beta: float,
                rng: np.random.Generator) -> float:
    """Conjugate normal draw of the global exposure slope.

    Arguments:
        residuals -- y* minus the covariate ensemble
        t -- exposure values
        w -- conditional variances of the residuals
        sigma_beta -- prior standard deviation of beta
        rng -- random generator

    Returns:
        beta draw
    """
    if not sigma_beta > 0:
        raise ValueError("sigma_beta must be positive")
    t = np.asarray(t, dtype=float)
    w = np.broadcast_to(np.asarray(w, dtype=float), t.shape)
    precision = 1.0 / sigma_beta ** 2 + np.sum(t ** 2 / w)
    mean = np.sum(t * np.asarray(residuals, dtype=float) / w) / precision
    return float(mean + rng.standard_normal() / math.sqrt(precision))


@register(Variant.IVBART_G)
class IvBartG(Stage2Model):
    """f2(t, x) = beta t + f22(x)."""

    def __init__(self, design: Stage2Design, settings: Stage2Settings):
        super().__init__(design, settings)
        scale = leaf_prior_scale(LeafPriorSpec(settings.k, design.y_range, settings.H))
        self._f22 = Ensemble.stumps(settings.H, scale, settings.grid_factory(design.X), design.n)
        self._beta = 0.0
        self._sigma_beta = settings.beta_prior_sd or beta_prior_sd(design.y_range, design.t_range, settings.k)

    @property
    def beta(self) -> float:
        return self._beta

    @property
    def sigma_beta(self) -> float:
        return self._sigma_beta

    @property
    def ensembles(self) -> dict[str, Ensemble]:
        return {"f22": self._f22}

    def fitted(self) -> np.ndarray:
        return self._beta * self.design.t + self._f22.fitted()

    def update(self, y_star: np.ndarray, w: np.ndarray, rng: np.random.Generator):
        t = self.design.t
        wr = WeightedResiduals(y_star - self.fitted(), w)
        self._f22 = backfit_sweep(self._f22, self.design.X, wr, self._settings.tree, rng)
        self._beta = update_beta(y_star - self._f22.fitted(), t, wr.v, self._sigma_beta, rng)

    @classmethod
    def evaluate_centered(cls, ensembles: Mapping[str, Ensemble], beta: float | None,
                          t: np.ndarray, X: np.ndarray) -> np.ndarray:
        return beta * t + ensembles["f22"].predict(X)
