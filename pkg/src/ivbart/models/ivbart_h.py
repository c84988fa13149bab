from typing import Mapping

import numpy as np

from ivbart.bart import Ensemble, WeightedResiduals, backfit_sweep, linear_leaf_prior_scales
from ivbart.models.variant import Stage2Design, Stage2Model, Stage2Settings, Variant, register


@register(Variant.IVBART_H)
class IvBartH(Stage2Model):
    """f2(t, x) = a(x) + b(x) t: trees over x whose leaves hold lines in t.

    Intercepts and slopes share one ensemble; the slope scale comes from the
    outcome-to-exposure range ratio.
    """

    def __init__(self, design: Stage2Design, settings: Stage2Settings):
        super().__init__(design, settings)
        scales = linear_leaf_prior_scales(settings.k, design.y_range, design.t_range, settings.H)
        self._lines = Ensemble.stumps(settings.H, scales, settings.grid_factory(design.X), design.n)

    @property
    def ensembles(self) -> dict[str, Ensemble]:
        return {"lines": self._lines}

    def fitted(self) -> np.ndarray:
        return self._lines.fitted()

    def update(self, y_star: np.ndarray, w: np.ndarray, rng: np.random.Generator):
        wr = WeightedResiduals(y_star - self._lines.fitted(), w)
        self._lines = backfit_sweep(self._lines, self.design.X, wr, self._settings.tree, rng, exposure=self.design.t)

    @classmethod
    def evaluate_centered(cls, ensembles: Mapping[str, Ensemble], beta: float | None,
                          t: np.ndarray, X: np.ndarray) -> np.ndarray:
        return ensembles["lines"].predict(X, t)
