from typing import Mapping

import numpy as np

from ivbart.bart import Ensemble, LeafPriorSpec, WeightedResiduals, backfit_sweep, leaf_prior_scale
from ivbart.models.variant import Stage2Design, Stage2Model, Stage2Settings, Variant, register


@register(Variant.NPIVBART_H)
class NpivBartH(Stage2Model):
    """f2(t, x) as a single ensemble splitting on the exposure and the covariates."""

    def __init__(self, design: Stage2Design, settings: Stage2Settings):
        super().__init__(design, settings)
        self._joint = design.joint
        scale = leaf_prior_scale(LeafPriorSpec(settings.k, design.y_range, settings.H))
        self._f2 = Ensemble.stumps(settings.H, scale, settings.grid_factory(self._joint), design.n)

    @property
    def ensembles(self) -> dict[str, Ensemble]:
        return {"f2": self._f2}

    def fitted(self) -> np.ndarray:
        return self._f2.fitted()

    def update(self, y_star: np.ndarray, w: np.ndarray, rng: np.random.Generator):
        wr = WeightedResiduals(y_star - self._f2.fitted(), w)
        self._f2 = backfit_sweep(self._f2, self._joint, wr, self._settings.tree, rng)

    @classmethod
    def evaluate_centered(cls, ensembles: Mapping[str, Ensemble], beta: float | None,
                          t: np.ndarray, X: np.ndarray) -> np.ndarray:
        return ensembles["f2"].predict(np.column_stack([t, X]))
