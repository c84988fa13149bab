"""Sampler policy: the declared defaults of every prior and MCMC setting."""

from functools import partial
from dataclasses import dataclass

import numpy as np

from ivbart.treekit import TreePriorConfig, CutpointGrid
from ivbart.wishart import IWPrior


@dataclass(slots=True)
class TreePrior:
    """Tree structure prior settings."""
    base: float = 0.95
    power: float = 2.0
    move_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)  # grow, prune, change
    n_cutpoints: int = 100


@dataclass(slots=True)
class LeafPrior:
    """Leaf prior settings."""
    k: float = 2.0
    n_trees: int = 200


@dataclass(slots=True)
class ErrorPrior:
    """Error model settings."""
    iw_dof: float = 6.0
    alpha_shape: float = 2.0
    alpha_rate: float = 2.0
    alpha_init: float = 1.0
    update_alpha: bool = True
    debug_checks: bool = False


@dataclass(slots=True)
class ResidualVariance:
    """Scaled-inverse-chi2 prior on the outcome variance when no instruments are used."""
    nu: float = 3.0
    quantile: float = 0.9


@dataclass(slots=True)
class Mcmc:
    """MCMC run lengths."""
    burn_in: int = 500
    draws: int = 500
    chains: int = 1
    thin: int = 1


class SamplerPolicy:
    """Represent a sampler policy.

    Most hyperparameters of the model are not fixed by the method itself. The policy
    collects the declared defaults in one place:

    - factory methods binding the defaults to the prior objects, e.g., the tree
      structure prior and the cutpoint grid.
    - attribute groups holding the plain settings.

    To run with other defaults, create a policy (or subclass this one) and register
    it with set_policy.
    """

    def __init__(self):
        self.tree = TreePrior()
        self.leaf = LeafPrior()
        self.errors = ErrorPrior()
        self.variance = ResidualVariance()
        self.mcmc = Mcmc()

    def TreePriorConfig(self, *args, **kwargs):  # pylint: disable=invalid-name
        func = partial(
            TreePriorConfig,
            base=self.tree.base,
            power=self.tree.power,
            move_probs=tuple(self.tree.move_probs))
        return func(*args, **kwargs)

    def CutpointGrid(self, *args, **kwargs):  # pylint: disable=invalid-name
        func = partial(CutpointGrid.from_data, n_cutpoints=self.tree.n_cutpoints)
        return func(*args, **kwargs)

    def IWPrior(self, variances, **kwargs):  # pylint: disable=invalid-name
        """Inverse-Wishart prior with mean diag(variances)."""
        return IWPrior.calibrated(tuple(np.asarray(variances, dtype=float)), dof=kwargs.get("dof", self.errors.iw_dof))
