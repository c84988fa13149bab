"""Joint Gibbs sampler of the simultaneous-equations IV model.

    t = f1(z) + e_t
    y = f2(t, x) + e_y,    (e_t, e_y) ~ N2(0, Sigma_i)

Each iteration updates f1 on the stage-1 pseudo-outcomes, f2 on the stage-2
pseudo-outcomes and then the error covariances, either one shared Sigma with an
inverse-Wishart prior or a Dirichlet-process mixture. Exposure and outcome are
centered before sampling; stored f2 draws add the centers back.
"""

import math
import logging
from enum import Enum
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg
from scipy.stats import norm

from ivbart import SCHEMA_VERSION, __version__, checksum, get_policy, wishart
from ivbart.bart import Ensemble, LeafPriorSpec, WeightedResiduals, backfit_sweep, leaf_prior_scale
from ivbart.dpm import DPMHyper, DPMState, dpm_iteration
from ivbart.exceptions import InputError, InvariantViolation
from ivbart.models import (F2Draw, Stage2Design, Stage2Model, Stage2Settings, Variant, model_type,
                           update_beta, calibrate_lambda, draw_residual_variance)
from ivbart.streams.file import FileInput
from ivbart.streams.stream import DrawSink
from ivbart.treekit import CutpointGrid, TreePriorConfig
from ivbart.wishart import IWPrior

logger = logging.getLogger(__name__)

__all__ = [
    "ErrorModel", "ModelSpec", "IVData", "EvalGrid", "IVModelState", "DrawRecord", "PosteriorDraws",
    "McmcConfig", "SamplerContext", "RhoDiagnostics", "Variant", "IWPrior",
    "stage1_pseudo_outcome", "stage2_pseudo_outcome", "update_sigma_iw", "update_beta",
    "prepare", "initial_state", "gibbs_iteration", "log_likelihood", "fit",
    "evaluate_pd", "pd_draws", "partial_dependence", "predict_f2", "rho_diagnostics",
]


class ErrorModel(str, Enum):
    def __new__(cls, value, description):
        obj = str.__new__(cls, value)
        obj._value_ = value
        obj.description = description
        return obj

    BIVARIATE_NORMAL = ("bivariate-normal", "One error covariance shared by all observations")
    DPM = ("dpm", "Dirichlet-process mixture of error covariances")

    def __str__(self):
        return self.description


def _positive(name: str, value: float):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True, slots=True)
class ModelSpec:  # pylint: disable=invalid-name
    """Model variant and prior calibration; unset fields take the policy defaults."""
    variant: Variant = Variant.NPIVBART_H
    k_stage1: float = field(default_factory=lambda: get_policy().leaf.k)
    k_stage2: float = field(default_factory=lambda: get_policy().leaf.k)
    H_t: int = field(default_factory=lambda: get_policy().leaf.n_trees)
    H_y: int = field(default_factory=lambda: get_policy().leaf.n_trees)
    error_model: ErrorModel = ErrorModel.BIVARIATE_NORMAL
    beta_prior_sd: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "error_model", ErrorModel(self.error_model))
        _positive("k_stage1", self.k_stage1)
        _positive("k_stage2", self.k_stage2)
        if int(self.H_t) < 1 or int(self.H_y) < 1:
            raise ValueError("Tree counts must be at least 1")
        if self.beta_prior_sd is not None:
            _positive("beta_prior_sd", self.beta_prior_sd)
            if self.variant is not Variant.IVBART_G:
                raise ValueError("beta_prior_sd only applies to ivbart-g")

    @property
    def uses_dpm(self) -> bool:
        return self.variant.uses_instruments and self.error_model is ErrorModel.DPM


@dataclass(frozen=True, slots=True, eq=False)
class IVData:
    """Outcome, exposure, n x q instruments and n x p covariates (q or p may be 0)."""
    y: np.ndarray
    t: np.ndarray
    Z: np.ndarray | None = None
    X: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        t = np.asarray(self.t, dtype=float).ravel()
        n = t.size
        if y.size != n:
            raise InputError(f"Outcome has {y.size} rows, exposure {n}")
        if n < 2:
            raise InputError("At least two observations are required")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        for name in ("Z", "X"):
            value = getattr(self, name)
            value = np.empty((n, 0)) if value is None else np.asarray(value, dtype=float)
            if value.ndim == 1:
                value = value[:, None]
            if value.ndim != 2 or value.shape[0] != n:
                raise InputError(f"{name} must have {n} rows")
            object.__setattr__(self, name, value)
        for name in ("y", "t", "Z", "X"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} contains missing or non-finite values")

    @property
    def n(self) -> int:
        return self.t.size


@dataclass(frozen=True, slots=True, eq=False)
class EvalGrid:
    """Exposure points crossed with covariate profiles.

    A profile maps covariate columns to fixed values; the remaining columns are
    averaged over the background rows. The empty profile averages over all of them.
    """
    t_points: tuple[float, ...] = (-2.5, -1.25, 0.0, 1.25, 2.5)
    profiles: tuple[Mapping[int, float], ...] = ({},)
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        t_points = tuple(float(t) for t in self.t_points)
        if not t_points or not all(math.isfinite(t) for t in t_points):
            raise ValueError("Grid needs at least one finite exposure point")
        profiles = tuple({int(c): float(v) for c, v in p.items()} for p in self.profiles)
        if not profiles:
            raise ValueError("Grid needs at least one covariate profile")
        labels = tuple(self.labels) if self.labels is not None else tuple(self._label(p) for p in profiles)
        if len(labels) != len(profiles):
            raise ValueError("One label per profile is required")
        object.__setattr__(self, "t_points", t_points)
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "labels", labels)

    @staticmethod
    def _label(profile: Mapping[int, float]) -> str:
        if not profile:
            return "all"
        return ",".join(f"x{c + 1}={v:g}" for c, v in sorted(profile.items()))

    @classmethod
    def simulation(cls) -> "EvalGrid":
        """Five exposure points crossed with x1 = -0.5 and x1 = +0.5."""
        return cls(profiles=({0: -0.5}, {0: 0.5}), labels=("x1=-0.5", "x1=+0.5"))

    def check(self, n_covariates: int):
        for profile in self.profiles:
            bad = [c for c in profile if not 0 <= c < n_covariates]
            if bad:
                raise InputError(f"Grid profile refers to covariate columns {bad} of {n_covariates}")

    def to_dict(self) -> dict:
        return {
            "t_points": list(self.t_points),
            "profiles": [{str(c): v for c, v in p.items()} for p in self.profiles],
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalGrid":
        return cls(tuple(obj["t_points"]), tuple(obj["profiles"]), tuple(obj["labels"]) if "labels" in obj else None)


@dataclass(frozen=True, slots=True)
class McmcConfig:
    """Run lengths, seeding and outputs of one fit."""
    burn_in: int = field(default_factory=lambda: get_policy().mcmc.burn_in)
    draws: int = field(default_factory=lambda: get_policy().mcmc.draws)
    chains: int = field(default_factory=lambda: get_policy().mcmc.chains)
    thin: int = field(default_factory=lambda: get_policy().mcmc.thin)
    seed: int = 0
    eval_grid: EvalGrid = field(default_factory=EvalGrid)
    store_models: bool = False
    parallel: int = 1

    def __post_init__(self):
        if self.burn_in < 0 or self.draws < 0:
            raise ValueError("burn_in and draws must be non-negative")
        if self.chains < 1 or self.thin < 1:
            raise ValueError("chains and thin must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def iterations(self) -> int:
        return self.burn_in + self.draws * self.thin


def _entries(sigma) -> tuple:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape[-2:] != (2, 2):
        raise InputError("Error covariances must be 2 x 2")
    return sigma[..., 0, 0], sigma[..., 0, 1], sigma[..., 1, 1]


def _stage1(t, y, f2, s_tt, s_ty, s_yy):
    if np.any(np.asarray(s_yy) <= 0):
        raise InvariantViolation("sigma_yy must be positive")
    return t - (s_ty / s_yy) * (y - f2), s_tt - s_ty ** 2 / s_yy


def _stage2(t, y, f1, s_tt, s_ty, s_yy):
    if np.any(np.asarray(s_tt) <= 0):
        raise InvariantViolation("sigma_tt must be positive")
    return y - (s_ty / s_tt) * (t - f1), s_yy - s_ty ** 2 / s_tt


def stage1_pseudo_outcome(t, y, f1, f2, sigma):  # pylint: disable=unused-argument
    """Exposure pseudo-outcome and its conditional variance.

    t* = t - (s_ty / s_yy)(y - f2) and v = s_tt - s_ty^2 / s_yy, so that t* given
    the outcome residual is N(f1, v).

    Arguments:
        t -- exposure value(s)
        y -- outcome value(s)
        f1 -- current f1 value(s)
        f2 -- current f2 value(s)
        sigma -- 2 x 2 covariance, or n x 2 x 2 per observation

    Raises:
        InvariantViolation: when s_yy <= 0

    Returns:
        (t*, v)
    """
    return _stage1(t, y, f2, *_entries(sigma))


def stage2_pseudo_outcome(t, y, f1, sigma):
    """Outcome pseudo-outcome y* = y - (s_ty / s_tt)(t - f1) and w = s_yy - s_ty^2 / s_tt."""
    return _stage2(t, y, f1, *_entries(sigma))


def update_sigma_iw(errors: np.ndarray, prior: IWPrior, rng: np.random.Generator) -> np.ndarray:
    """Draw Sigma from IW(dof + n, S0 + sum e e')."""
    return wishart.draw(wishart.posterior(errors, prior), rng)


@dataclass(frozen=True, slots=True, eq=False)
class SamplerContext:
    """Data and resolved priors shared read-only by the chains of one fit."""
    spec: ModelSpec
    y: np.ndarray
    t: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    design: Stage2Design
    stage2: Stage2Settings
    tree: TreePriorConfig
    initial_sigma: np.ndarray
    iw_prior: IWPrior
    f1_grid: CutpointGrid | None = None
    f1_scale: float | None = None
    dpm_hyper: DPMHyper | None = None
    alpha_init: float = 1.0
    variance_nu: float = 3.0
    variance_lambda: float = 1.0
    debug_checks: bool = False

    @property
    def n(self) -> int:
        return self.t.size


def _residual_variance(target: np.ndarray, design: np.ndarray) -> float:
    n = target.size
    total = float(np.var(target))
    if n - design.shape[1] < 1:
        return total
    coef, *_ = linalg.lstsq(design, target)
    resid = target - design @ coef
    return max(float(resid @ resid) / (n - design.shape[1]), 1e-6 * total)


def prepare(data: IVData, spec: ModelSpec, policy=None) -> SamplerContext:
    """Center the data and resolve every prior against the policy.

    Arguments:
        data -- model data
        spec -- model specification

    Keyword Arguments:
        policy -- sampler policy (default: {None}, the global policy)

    Raises:
        InputError: on constant exposure or outcome, or missing instruments

    Returns:
        sampler context
    """
    policy = policy or get_policy()
    if spec.variant.uses_instruments and data.Z.shape[1] == 0:
        raise InputError(f"{spec.variant.value} needs at least one instrument")
    t_range, y_range = float(np.ptp(data.t)), float(np.ptp(data.y))
    if t_range == 0 or y_range == 0:
        raise InputError("Exposure and outcome must not be constant")
    t_center, y_center = float(np.mean(data.t)), float(np.mean(data.y))
    tc, yc = data.t - t_center, data.y - y_center
    tree = policy.TreePriorConfig()
    design = Stage2Design(tc, data.X, y_range, t_range, t_center, y_center)
    stage2 = Stage2Settings(spec.k_stage2, int(spec.H_y), tree, policy.CutpointGrid, spec.beta_prior_sd)

    ones = np.ones((data.n, 1))
    var_t = _residual_variance(tc, np.hstack([ones, data.Z, data.X]))
    var_y = _residual_variance(yc, np.hstack([ones, tc[:, None], data.X]))
    iw_prior = policy.IWPrior((var_t, var_y))
    initial_sigma = np.diag([np.var(tc), np.var(yc)])

    extras = {}
    if spec.variant.uses_instruments:
        extras["f1_grid"] = policy.CutpointGrid(data.Z)
        extras["f1_scale"] = leaf_prior_scale(LeafPriorSpec(spec.k_stage1, t_range, int(spec.H_t)))
    else:
        extras["variance_nu"] = policy.variance.nu
        extras["variance_lambda"] = calibrate_lambda(var_y, policy.variance.nu, policy.variance.quantile)
    if spec.uses_dpm:
        errors = policy.errors
        extras["dpm_hyper"] = DPMHyper(errors.alpha_shape, errors.alpha_rate, iw_prior, errors.update_alpha)
        extras["alpha_init"] = errors.alpha_init
    return SamplerContext(spec, yc, tc, data.Z, data.X, design, stage2, tree, initial_sigma, iw_prior,
                          debug_checks=policy.errors.debug_checks, **extras)


@dataclass(slots=True, eq=False)
class IVModelState:
    """One Gibbs frame of a chain.

    ``sigma`` is the shared error covariance; under the mixture error model the
    per-observation covariances come from ``dpm``. Without instruments only
    ``sigma[1, 1]`` is used.
    """
    f2: Stage2Model
    sigma: np.ndarray
    f1: Ensemble | None = None
    dpm: DPMState | None = None

    def sigma_entries(self) -> tuple:
        if self.dpm is not None:
            return self.dpm.sigma_entries()
        return float(self.sigma[0, 0]), float(self.sigma[0, 1]), float(self.sigma[1, 1])

    def rho(self) -> float | np.ndarray:
        if self.f1 is None:
            return 0.0
        return wishart.correlation(*self.sigma_entries())

    def validate(self):
        sigmas = self.dpm.cluster_sigmas if self.dpm is not None else [self.sigma]
        for sigma in sigmas:
            if not wishart.is_spd(sigma):
                raise InvariantViolation("Error covariance is not symmetric positive definite")


def initial_state(context: SamplerContext) -> IVModelState:
    """Root-only zero trees, beta = 0 and the empirical variances on the diagonal."""
    spec = context.spec
    f2 = model_type(spec.variant)(context.design, context.stage2)
    sigma = context.initial_sigma.copy()
    state = IVModelState(f2, sigma)
    if spec.variant.uses_instruments:
        state.f1 = Ensemble.stumps(int(spec.H_t), context.f1_scale, context.f1_grid, context.n)
    if spec.uses_dpm:
        state.dpm = DPMState.single_cluster(context.n, sigma, context.alpha_init, context.iw_prior)
    state.validate()
    return state


def _errors(state: IVModelState, context: SamplerContext) -> np.ndarray:
    return np.column_stack([context.t - state.f1.fitted(), context.y - state.f2.fitted()])


def gibbs_iteration(state: IVModelState, context: SamplerContext, rng: np.random.Generator) -> IVModelState:
    """One sweep: f1, then f2, then the error covariances.

    Arguments:
        state -- current state, updated in place
        context -- data and priors
        rng -- random generator

    Returns:
        the updated state
    """
    if state.f1 is None:
        s_yy = state.sigma[1, 1]
        state.f2.update(context.y, np.full(context.n, s_yy), rng)
        s_yy = draw_residual_variance(context.y - state.f2.fitted(), context.variance_nu, context.variance_lambda, rng)
        state.sigma = np.diag([state.sigma[0, 0], s_yy])
        return state

    entries = state.sigma_entries()
    t_star, v = _stage1(context.t, context.y, state.f2.fitted(), *entries)
    f1_fit = state.f1.fitted()
    state.f1 = backfit_sweep(state.f1, context.Z, WeightedResiduals(t_star - f1_fit, v), context.tree, rng)

    y_star, w = _stage2(context.t, context.y, state.f1.fitted(), *entries)
    state.f2.update(y_star, w, rng)

    errors = _errors(state, context)
    if state.dpm is not None:
        dpm_iteration(errors, state.dpm, context.dpm_hyper, rng, debug=context.debug_checks)
    else:
        state.sigma = update_sigma_iw(errors, context.iw_prior, rng)
        if context.debug_checks:
            state.validate()
    return state


def log_likelihood(state: IVModelState, context: SamplerContext) -> float:
    """Log density of the data given the current state."""
    if state.f1 is None:
        resid = context.y - state.f2.fitted()
        return float(np.sum(norm.logpdf(resid, scale=math.sqrt(state.sigma[1, 1]))))
    return float(np.sum(wishart.bvn_logpdf(_errors(state, context), *state.sigma_entries())))


def evaluate_pd(f2: F2Draw, t_points: Sequence[float], profiles: Sequence[Mapping[int, float]],
                background: np.ndarray) -> np.ndarray:
    """Partial dependence of one f2 draw.

    For every profile and exposure point, f2 is averaged over the background rows
    with the profile's columns set to the profile values.

    Arguments:
        f2 -- f2 draw
        t_points -- exposure points
        profiles -- covariate profiles (column -> value)
        background -- m x p background covariate rows

    Returns:
        len(profiles) x len(t_points) array
    """
    t_points = np.asarray(t_points, dtype=float)
    background = np.asarray(background, dtype=float)
    m = background.shape[0]
    out = np.empty((len(profiles), t_points.size))
    for p, profile in enumerate(profiles):
        rows = background.copy()
        for column, value in profile.items():
            rows[:, column] = value
        values = f2.evaluate(np.repeat(t_points, m), np.tile(rows, (t_points.size, 1)))
        out[p] = values.reshape(t_points.size, m).mean(axis=1)
    return out


@dataclass(frozen=True, slots=True, eq=False)
class DrawRecord:
    """A retained iteration of one chain."""
    chain: int
    iteration: int
    pd: np.ndarray
    rho: float | np.ndarray
    log_likelihood: float
    beta: float | None = None
    n_clusters: int | None = None
    alpha: float | None = None
    sigma: np.ndarray | None = None
    model: F2Draw | None = None

    @property
    def rho_mean(self) -> float:
        return float(np.mean(self.rho))

    def to_dict(self) -> dict:
        obj = {
            "chain": self.chain,
            "iteration": self.iteration,
            "pd": np.asarray(self.pd).tolist(),
            "rho": np.asarray(self.rho).tolist(),
            "rho_mean": self.rho_mean,
            "log_likelihood": self.log_likelihood,
        }
        for key in ("beta", "n_clusters", "alpha"):
            value = getattr(self, key)
            if value is not None:
                obj[key] = value
        if self.sigma is not None:
            obj["sigma"] = np.asarray(self.sigma).tolist()
        if self.model is not None:
            obj["model"] = self.model.serialize()
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "DrawRecord":
        rho = obj["rho"]
        return cls(
            chain=obj["chain"],
            iteration=obj["iteration"],
            pd=np.asarray(obj["pd"], dtype=float),
            rho=np.asarray(rho, dtype=float) if isinstance(rho, list) else float(rho),
            log_likelihood=obj["log_likelihood"],
            beta=obj.get("beta"),
            n_clusters=obj.get("n_clusters"),
            alpha=obj.get("alpha"),
            sigma=np.asarray(obj["sigma"]) if "sigma" in obj else None,
            model=F2Draw.deserialize(obj["model"]) if "model" in obj else None)


@dataclass(slots=True, eq=False)
class PosteriorDraws:
    """Retained draws of all chains, in chain order."""
    grid: EvalGrid
    records: list[DrawRecord]
    n_obs: int
    t_range: tuple[float, float]
    variant: Variant
    background: np.ndarray | None = None
    header: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def chain_ids(self) -> np.ndarray:
        return np.array([r.chain for r in self.records], dtype=np.int64)

    @property
    def chains(self) -> list[int]:
        return sorted(set(self.chain_ids.tolist()))

    @property
    def pd(self) -> np.ndarray:
        """draws x profiles x exposure points."""
        if not self.records:
            return np.empty((0, len(self.grid.profiles), len(self.grid.t_points)))
        return np.stack([r.pd for r in self.records])

    @property
    def beta(self) -> np.ndarray | None:
        if not self.records or self.records[0].beta is None:
            return None
        return np.array([r.beta for r in self.records])

    @property
    def rho_mean(self) -> np.ndarray:
        return np.array([r.rho_mean for r in self.records])

    @property
    def n_clusters(self) -> np.ndarray | None:
        if not self.records or self.records[0].n_clusters is None:
            return None
        return np.array([r.n_clusters for r in self.records])

    @property
    def log_likelihood(self) -> np.ndarray:
        return np.array([r.log_likelihood for r in self.records])

    @property
    def models(self) -> list[F2Draw]:
        missing = [r.iteration for r in self.records if r.model is None]
        if missing:
            raise InputError("Draws carry no stored f2 models; fit with store_models enabled")
        return [r.model for r in self.records]

    @classmethod
    def from_file(cls, path) -> "PosteriorDraws":
        stream = FileInput(path)
        header = stream.header
        records = [DrawRecord.from_dict(obj) for obj in stream]
        return cls(EvalGrid.from_dict(header["grid"]), records, header["n_obs"], tuple(header["t_range"]),
                   Variant(header["variant"]), header=header)


class RhoDiagnostics(NamedTuple):
    per_draw: pd.DataFrame
    per_observation: pd.DataFrame


def _run_chain(chain: int, seed: np.random.SeedSequence, context: SamplerContext, mcmc: McmcConfig,
               background: np.ndarray) -> list[DrawRecord]:
    rng = np.random.default_rng(seed)
    state = initial_state(context)
    grid = mcmc.eval_grid
    records = []
    logger.info("Chain %d: %d burn-in and %d retained iterations", chain, mcmc.burn_in, mcmc.draws)
    for it in range(mcmc.iterations):
        gibbs_iteration(state, context, rng)
        if it < mcmc.burn_in or (it - mcmc.burn_in) % mcmc.thin != mcmc.thin - 1:
            continue
        f2 = state.f2.snapshot()
        records.append(DrawRecord(
            chain=chain,
            iteration=it,
            pd=evaluate_pd(f2, grid.t_points, grid.profiles, background),
            rho=state.rho(),
            log_likelihood=log_likelihood(state, context),
            beta=state.f2.beta,
            n_clusters=state.dpm.n_clusters if state.dpm is not None else None,
            alpha=state.dpm.alpha if state.dpm is not None else None,
            sigma=state.sigma.copy() if state.dpm is None else None,
            model=f2 if mcmc.store_models else None))
        if len(records) % 100 == 0:
            logger.debug("Chain %d: %d of %d draws retained", chain, len(records), mcmc.draws)
    logger.info("Chain %d done", chain)
    return records


def _header(data: IVData, spec: ModelSpec, mcmc: McmcConfig, t_range) -> dict:
    config = {
        "spec": spec,
        "mcmc": {key: getattr(mcmc, key) for key in ("burn_in", "draws", "chains", "thin", "seed", "store_models")},
        "grid": mcmc.eval_grid.to_dict(),
        "data": checksum.calculate_arrays(data.y, data.t, data.Z, data.X),
    }
    return {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "seed": mcmc.seed,
        "config_hash": checksum.calculate(config),
        "variant": spec.variant.value,
        "error_model": spec.error_model.value,
        "n_obs": data.n,
        "t_range": list(t_range),
        "grid": mcmc.eval_grid.to_dict(),
        "chains": mcmc.chains,
        "burn_in": mcmc.burn_in,
        "draws": mcmc.draws,
        "thin": mcmc.thin,
    }


def fit(data: IVData, spec: ModelSpec | None = None, mcmc: McmcConfig | None = None,
        output: DrawSink | None = None, policy=None) -> PosteriorDraws:
    """Run the chains of one model fit.

    Chain c samples with the c-th child of SeedSequence(seed); chains run in
    worker processes when ``mcmc.parallel`` is not 1. Records are written to
    ``output`` in chain order after all chains finished.

    Arguments:
        data -- model data

    Keyword Arguments:
        spec -- model specification (default: {None}, npivBART-h with policy defaults)
        mcmc -- run configuration (default: {None}, policy defaults)
        output -- sink for the header and the draw records (default: {None})
        policy -- sampler policy (default: {None}, the global policy)

    Raises:
        InputError: on unusable data or grid profiles outside the covariates

    Returns:
        posterior draws
    """
    spec = spec or ModelSpec()
    mcmc = mcmc or McmcConfig()
    mcmc.eval_grid.check(data.X.shape[1])
    context = prepare(data, spec, policy)
    t_range = (float(data.t.min()), float(data.t.max()))
    header = _header(data, spec, mcmc, t_range)

    results = []
    if mcmc.draws > 0:
        seeds = np.random.SeedSequence(mcmc.seed).spawn(mcmc.chains)
        results = Parallel(n_jobs=mcmc.parallel)(
            delayed(_run_chain)(c, s, context, mcmc, data.X) for c, s in enumerate(seeds))
    records = [record for chain in results for record in chain]
    draws = PosteriorDraws(mcmc.eval_grid, records, data.n, t_range, spec.variant, data.X, header)
    if output is not None:
        output.write_header(header)
        for record in records:
            output.write(record.to_dict())
    return draws


def pd_draws(draws: PosteriorDraws, t_points: Sequence[float], profiles: Sequence[Mapping[int, float]],
             background: np.ndarray | None = None) -> np.ndarray:
    """Partial dependence of every stored f2 draw, draws x profiles x points."""
    background = draws.background if background is None else np.asarray(background, dtype=float)
    if background is None:
        raise InputError("A background covariate matrix is required")
    models = draws.models
    if not models:
        return np.empty((0, len(profiles), len(t_points)))
    return np.stack([evaluate_pd(f2, t_points, profiles, background) for f2 in models])


def partial_dependence(draws: PosteriorDraws, t_points: Sequence[float] | None = None,
                       profiles: Sequence[Mapping[int, float]] | None = None,
                       background: np.ndarray | None = None, level: float = 0.95) -> pd.DataFrame:
    """Posterior mean and equal-tailed credible band of the partial dependence.

    Without arguments the grid evaluated during sampling is summarized. A new
    grid or background needs the stored f2 draws.

    Arguments:
        draws -- posterior draws

    Keyword Arguments:
        t_points -- exposure points (default: {None}, the sampling grid)
        profiles -- covariate profiles (default: {None}, the sampling grid)
        background -- background covariate rows (default: {None}, the training rows)
        level -- credible level (default: {0.95})

    Returns:
        one row per (profile, t) with mean, lower, upper and an extrapolation flag
    """
    if t_points is None and profiles is None and background is None:
        grid = draws.grid
        values = draws.pd
    else:
        grid = EvalGrid(t_points if t_points is not None else draws.grid.t_points,
                        profiles if profiles is not None else draws.grid.profiles,
                        None if profiles is not None else draws.grid.labels)
        values = pd_draws(draws, grid.t_points, grid.profiles, background)
    lo_q, hi_q = 50.0 * (1.0 - level), 50.0 * (1.0 + level)
    rows = []
    t_min, t_max = draws.t_range
    for p, label in enumerate(grid.labels):
        for j, t in enumerate(grid.t_points):
            column = values[:, p, j]
            empty = column.size == 0
            rows.append({
                "profile": label,
                "t": t,
                "mean": math.nan if empty else float(np.mean(column)),
                "lower": math.nan if empty else float(np.percentile(column, lo_q)),
                "upper": math.nan if empty else float(np.percentile(column, hi_q)),
                "extrapolated": not t_min <= t <= t_max,
            })
    frame = pd.DataFrame(rows, columns=["profile", "t", "mean", "lower", "upper", "extrapolated"])
    if frame["extrapolated"].any():
        logger.warning("Exposure points outside the observed range [%g, %g] are extrapolated", t_min, t_max)
    return frame


def predict_f2(draws: PosteriorDraws, t: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
    """Posterior draws of f2 at new rows, draws x rows."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    X = np.asarray(X if X is not None else [], dtype=float)
    X = X.reshape(t.size, -1) if X.size else np.empty((t.size, 0))
    models = draws.models
    if not models:
        return np.empty((0, t.size))
    return np.stack([f2.evaluate(t, X) for f2 in models])


def rho_diagnostics(draws: PosteriorDraws) -> RhoDiagnostics:
    """Averages of the error correlations within each chain.

    ``per_draw`` holds the mean of rho_i over observations for every draw;
    ``per_observation`` the mean of rho_i over the draws of a chain for every
    observation. A shared covariance is broadcast to all observations.
    """
    per_draw = pd.DataFrame({
        "chain": draws.chain_ids,
        "iteration": np.array([r.iteration for r in draws.records], dtype=np.int64),
        "rho_mean": draws.rho_mean,
    })
    frames = []
    for chain in draws.chains:
        chain_records = [r for r in draws.records if r.chain == chain]
        stacked = np.stack([np.broadcast_to(np.asarray(r.rho, dtype=float), (draws.n_obs,)) for r in chain_records])
        frames.append(pd.DataFrame({
            "chain": chain,
            "observation": np.arange(draws.n_obs),
            "rho_mean": stacked.mean(axis=0),
        }))
    per_observation = (pd.concat(frames, ignore_index=True) if frames
                       else pd.DataFrame({"chain": [], "observation": [], "rho_mean": []}))
    return RhoDiagnostics(per_draw, per_observation)
