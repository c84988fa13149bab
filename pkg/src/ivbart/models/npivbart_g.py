from typing import Mapping

import numpy as np

from ivbart.bart import Ensemble, LeafPriorSpec, WeightedResiduals, backfit_sweep, leaf_prior_scale
from ivbart.models.variant import Stage2Design, Stage2Model, Stage2Settings, Variant, register


@register(Variant.NPIVBART_G)
class NpivBartG(Stage2Model):
    """f2(t, x) = f21(t) + f22(x), each ensemble with H trees.

    The leaf scale is calibrated on the 2H trees of the sum, so the prior on f2
    matches the single-ensemble variants.
    """

    def __init__(self, design: Stage2Design, settings: Stage2Settings):
        super().__init__(design, settings)
        self._t = design.t[:, None]
        scale = leaf_prior_scale(LeafPriorSpec(settings.k, design.y_range, 2 * settings.H))
        self._f21 = Ensemble.stumps(settings.H, scale, settings.grid_factory(self._t), design.n)
        self._f22 = Ensemble.stumps(settings.H, scale, settings.grid_factory(design.X), design.n)

    @property
    def ensembles(self) -> dict[str, Ensemble]:
        return {"f21": self._f21, "f22": self._f22}

    def fitted(self) -> np.ndarray:
        return self._f21.fitted() + self._f22.fitted()

    def update(self, y_star: np.ndarray, w: np.ndarray, rng: np.random.Generator):
        wr = WeightedResiduals(y_star - self.fitted(), w)
        self._f21 = backfit_sweep(self._f21, self._t, wr, self._settings.tree, rng)
        self._f22 = backfit_sweep(self._f22, self.design.X, wr, self._settings.tree, rng)

    @classmethod
    def evaluate_centered(cls, ensembles: Mapping[str, Ensemble], beta: float | None,
                          t: np.ndarray, X: np.ndarray) -> np.ndarray:
        return ensembles["f21"].predict(t[:, None]) + ensembles["f22"].predict(X)
