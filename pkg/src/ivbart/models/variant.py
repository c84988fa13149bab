from enum import Enum
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from ivbart.bart import Ensemble
from ivbart.treekit import CutpointGrid, TreePriorConfig
from ivbart.exceptions import InputError


class Variant(str, Enum):
    def __new__(cls, value, description):
        obj = str.__new__(cls, value)
        obj._value_ = value
        obj.description = description
        return obj

    NPIVBART_H = ("npivbart-h", "Nonparametric f2(t, x) on one ensemble")
    NPIVBART_G = ("npivbart-g", "Additive f21(t) + f22(x) on two ensembles")
    IVBART_H = ("ivbart-h", "Line in t per leaf of one ensemble over x")
    IVBART_G = ("ivbart-g", "Global slope beta t plus an ensemble over x")
    PLAIN_BART = ("plain-bart", "Ensemble over (t, x) ignoring instruments")

    def __str__(self):
        return self.description

    @property
    def uses_instruments(self) -> bool:
        return self is not Variant.PLAIN_BART


@dataclass(frozen=True, slots=True, eq=False)
class Stage2Design:
    """Outcome-equation data on the centered scale.

    ``t`` and the outcome are centered; ``t_center``/``y_center`` restore the
    original scale. ``X`` may have zero columns.
    """
    t: np.ndarray
    X: np.ndarray
    y_range: float
    t_range: float
    t_center: float = 0.0
    y_center: float = 0.0

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.t.size:
            raise InputError("Covariates must be an n x p matrix matching the exposure")
        if not (self.y_range > 0 and self.t_range > 0):
            raise InputError("Outcome and exposure must not be constant")

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def joint(self) -> np.ndarray:
        """Design [t, X] used by the ensembles splitting on the exposure."""
        return np.column_stack([self.t, self.X])


@dataclass(frozen=True, slots=True)
class Stage2Settings:
    """Prior settings of an outcome-equation model."""
    k: float
    H: int
    tree: TreePriorConfig
    grid_factory: Callable[[np.ndarray], CutpointGrid]
    beta_prior_sd: float | None = None


_MODEL_TYPES: dict["Variant", type["Stage2Model"]] = {}


def register(variant: Variant):
    """Class decorator mapping a variant to its model type."""
    def wrap(cls):
        cls.variant = variant
        _MODEL_TYPES[variant] = cls
        return cls
    return wrap


def model_type(variant: Variant | str) -> type["Stage2Model"]:
    return _MODEL_TYPES[Variant(variant)]


@dataclass(frozen=True, slots=True, eq=False)
class F2Draw:
    """One posterior draw of f2, self-contained for evaluation on new rows."""
    variant: Variant
    ensembles: Mapping[str, Ensemble]
    t_center: float
    y_center: float
    beta: float | None = None

    def evaluate(self, t: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Evaluate f2 on the original scale.

        Arguments:
            t -- exposure values
            X -- n x p covariate rows (p may be 0)

        Returns:
            vector of f2 values
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        X = np.asarray(X, dtype=float)
        X = X.reshape(t.size, -1) if X.size else np.empty((t.size, 0))
        centered = model_type(self.variant).evaluate_centered(self.ensembles, self.beta, t - self.t_center, X)
        return self.y_center + centered

    def serialize(self) -> dict:
        obj = {
            "variant": self.variant.value,
            "t_center": self.t_center,
            "y_center": self.y_center,
            "ensembles": {name: ensemble.serialize() for name, ensemble in self.ensembles.items()},
        }
        if self.beta is not None:
            obj["beta"] = self.beta
        return obj

    @classmethod
    def deserialize(cls, obj: dict) -> "F2Draw":
        # cut values travel with the rules, evaluation needs no grid
        grid = CutpointGrid([])
        ensembles = {name: Ensemble.deserialize(e, grid) for name, e in obj["ensembles"].items()}
        return cls(Variant(obj["variant"]), ensembles, obj["t_center"], obj["y_center"], obj.get("beta"))


class Stage2Model:
    """Base class for the outcome-equation models.

    A model owns the ensembles of one chain and is updated in place. ``update``
    receives the stage-2 pseudo-outcomes and their conditional variances.
    """
    variant: Variant

    def __init__(self, design: Stage2Design, settings: Stage2Settings):
        self._design = design
        self._settings = settings

    @property
    def design(self) -> Stage2Design:
        return self._design

    @property
    def beta(self) -> float | None:
        return None

    @property
    def ensembles(self) -> dict[str, Ensemble]:
        raise NotImplementedError

    def fitted(self) -> np.ndarray:
        """Current f2 on the training rows, centered scale."""
        raise NotImplementedError

    def update(self, y_star: np.ndarray, w: np.ndarray, rng: np.random.Generator):
        raise NotImplementedError

    @classmethod
    def evaluate_centered(cls, ensembles: Mapping[str, Ensemble], beta: float | None,
                          t: np.ndarray, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def snapshot(self) -> F2Draw:
        # drop the training fits, keep the trees
        ensembles = {name: Ensemble(e.trees, e.leaf_scale, e.grid) for name, e in self.ensembles.items()}
        return F2Draw(self.variant, ensembles, self._design.t_center, self._design.y_center, self.beta)
