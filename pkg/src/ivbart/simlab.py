"""Simulation laboratory: data generators and the replication study runner.

Datasets follow the simultaneous-equations design: correlated SNP genotypes as
instruments, a Friedman first stage scaled to a chosen signal strength, uniform
covariates, one of four true outcome functions and bivariate normal errors with
unit variances and correlation rho.
"""

import json
import math
import logging
from enum import Enum
from pathlib import Path
from dataclasses import dataclass, field, fields
from typing import Iterable, NamedTuple

import numpy as np
import pandas as pd
import scipy
from joblib import Parallel, delayed
from scipy import linalg
from scipy.stats import norm

from ivbart import SCHEMA_VERSION, __version__, checksum, get_policy
from ivbart.exceptions import ConfigError, GenerationError, InputError
from ivbart.ivmodels import ErrorModel, EvalGrid, IVData, McmcConfig, ModelSpec, fit
from ivbart.models import Variant
from ivbart.streams.file import write_table
from ivbart.tsls import fit_2sls

logger = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"


class Truth(str, Enum):
    def __new__(cls, value, description):
        obj = str.__new__(cls, value)
        obj._value_ = value
        obj.description = description
        return obj

    LINEAR_G = ("linear-g", "t + 1{x1 >= 0}")
    NONLINEAR_G = ("nonlinear-g", "cos(t) + 1{x1 >= 0}")
    LINEAR_H = ("linear-h", "t 1{x1 >= 0}")
    NONLINEAR_H = ("nonlinear-h", "cos(t) 1{x1 >= 0}")

    def __str__(self):
        return self.description


class Method(str, Enum):
    def __new__(cls, value, variant):
        obj = str.__new__(cls, value)
        obj._value_ = value
        obj.variant = variant
        return obj

    NPIVBART_H = ("npivbart-h", Variant.NPIVBART_H)
    NPIVBART_G = ("npivbart-g", Variant.NPIVBART_G)
    IVBART_H = ("ivbart-h", Variant.IVBART_H)
    IVBART_G = ("ivbart-g", Variant.IVBART_G)
    PLAIN_BART = ("plain-bart", Variant.PLAIN_BART)
    TSLS = ("2sls", None)


@dataclass(frozen=True, slots=True, eq=False)
class GenotypeModel:
    """Minor-allele frequencies and the latent correlation (LD) of the SNPs."""
    allele_freqs: np.ndarray
    latent_corr: np.ndarray

    def __post_init__(self):
        freqs = np.asarray(self.allele_freqs, dtype=float)
        corr = np.asarray(self.latent_corr, dtype=float)
        object.__setattr__(self, "allele_freqs", freqs)
        object.__setattr__(self, "latent_corr", corr)
        if freqs.ndim != 1 or not np.all((freqs > 0) & (freqs < 1)):
            raise InputError("Allele frequencies must lie in (0, 1)")
        if corr.shape != (freqs.size, freqs.size) or not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
            raise InputError("Latent correlation must be a symmetric unit-diagonal matrix matching the frequencies")

    @property
    def n_snps(self) -> int:
        return self.allele_freqs.size

    @classmethod
    def default(cls, n_snps: int = 20, ld: float = 0.6) -> "GenotypeModel":
        """Frequencies evenly spread over [0.15, 0.45] with AR(1) latent correlation ``ld``."""
        lags = np.abs(np.subtract.outer(np.arange(n_snps), np.arange(n_snps)))
        return cls(np.linspace(0.15, 0.45, n_snps), ld ** lags)

    def to_dict(self) -> dict:
        return {"allele_freqs": self.allele_freqs.tolist(), "latent_corr": self.latent_corr.tolist()}


@dataclass(frozen=True, slots=True)
class SimScenario:  # pylint: disable=invalid-name
    """One data-generating setting."""
    truth: Truth
    rho: float = 0.0
    C: float = 1.0
    n: int = 1000
    n_snps: int = 20
    n_x: int = 10
    replications: int = 1000
    seed: int = 0
    ld: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "truth", Truth(self.truth))
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.C < 0:
            raise ValueError(f"C must be non-negative, got {self.C}")
        if self.n < 2 or self.n_snps < 5 or self.n_x < 1 or self.replications < 1:
            raise ValueError("Need n >= 2, n_snps >= 5, n_x >= 1 and replications >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def label(self) -> str:
        return f"{self.truth.value}_rho{self.rho:g}_C{self.C:g}_n{self.n}"

    @property
    def genotypes(self) -> GenotypeModel:
        return GenotypeModel.default(self.n_snps, self.ld)


def friedman_f1(z: np.ndarray) -> float | np.ndarray:
    """sin(pi z1 z2) + 2 z3^2 + z4 + 0.5 z5 over the last axis; extra coordinates are ignored."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < 5:
        raise InputError("The Friedman function needs at least five coordinates")
    value = np.sin(math.pi * z[..., 0] * z[..., 1]) + 2.0 * z[..., 2] ** 2 + z[..., 3] + 0.5 * z[..., 4]
    return float(value) if value.ndim == 0 else value


def standardize_signal(f1: np.ndarray, C: float) -> np.ndarray:  # pylint: disable=invalid-name
    """Return C (f1 - mean) / sd over the sample, so the signal variance is C^2.

    Raises:
        GenerationError: when C > 0 and the sample is constant
    """
    f1 = np.asarray(f1, dtype=float)
    if C == 0:
        return np.zeros_like(f1)
    sd = float(np.std(f1))
    if sd == 0:
        raise GenerationError("First-stage signal has zero variance")
    return C * (f1 - f1.mean()) / sd


def true_f2(truth: Truth | str, t, x1):
    """Outcome function of a truth at exposure t and first covariate x1."""
    truth = Truth(truth)
    t = np.asarray(t, dtype=float)
    on = (np.asarray(x1, dtype=float) >= 0).astype(float)
    match truth:
        case Truth.LINEAR_G:
            value = t + on
        case Truth.NONLINEAR_G:
            value = np.cos(t) + on
        case Truth.LINEAR_H:
            value = t * on
        case Truth.NONLINEAR_H:
            value = np.cos(t) * on
    return float(value) if np.ndim(value) == 0 else value


def simulate_genotypes(n: int, model: GenotypeModel, rng: np.random.Generator) -> np.ndarray:
    """Genotype counts 0/1/2 from thresholded correlated normals.

    Each latent coordinate is cut at the Hardy-Weinberg quantiles of its allele
    frequency f: P(0) = (1 - f)^2, P(2) = f^2.

    Arguments:
        n -- number of individuals
        model -- allele frequencies and latent correlation
        rng -- random generator

    Raises:
        InputError: when the latent correlation is not positive definite

    Returns:
        n x p matrix of genotype counts
    """
    try:
        chol = linalg.cholesky(model.latent_corr, lower=True)
    except linalg.LinAlgError as e:
        raise InputError("Latent correlation is not positive definite") from e
    latent = rng.standard_normal((n, model.n_snps)) @ chol.T
    f = model.allele_freqs
    low = norm.ppf((1.0 - f) ** 2)
    high = norm.ppf(1.0 - f ** 2)
    return (latent > low).astype(float) + (latent > high).astype(float)


def replication_rng(seed: int, rep_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep_index]))


def generate_dataset(scenario: SimScenario, rep_index: int) -> IVData:
    """Simulate the dataset of one replication.

    The stream depends only on (seed, rep_index); the Friedman first stage reads
    the first five genotypes rescaled to [0, 1].

    Arguments:
        scenario -- data-generating setting
        rep_index -- replication number

    Returns:
        outcome, exposure, instruments and covariates
    """
    if rep_index < 0:
        raise ValueError("rep_index must be non-negative")
    rng = replication_rng(scenario.seed, rep_index)
    Z = simulate_genotypes(scenario.n, scenario.genotypes, rng)
    X = rng.uniform(-1.0, 1.0, size=(scenario.n, scenario.n_x))
    e_t = rng.standard_normal(scenario.n)
    e_y = scenario.rho * e_t + math.sqrt(1.0 - scenario.rho ** 2) * rng.standard_normal(scenario.n)
    t = standardize_signal(friedman_f1(Z / 2.0), scenario.C) + e_t
    y = true_f2(scenario.truth, t, X[:, 0]) + e_y
    return IVData(y, t, Z, X)


def dataset_frame(data: IVData) -> pd.DataFrame:
    """Columns y, t, z1..zq, x1..xp."""
    columns = {"y": data.y, "t": data.t}
    columns.update({f"z{j + 1}": data.Z[:, j] for j in range(data.Z.shape[1])})
    columns.update({f"x{j + 1}": data.X[:, j] for j in range(data.X.shape[1])})
    return pd.DataFrame(columns)


def write_dataset(scenario: SimScenario, rep_index: int, path) -> Path:
    """Write one simulated dataset as a stamped CSV."""
    stamp = {"schema": SCHEMA_VERSION, "seed": scenario.seed, "rep": rep_index,
             "config_hash": checksum.calculate({f.name: getattr(scenario, f.name) for f in fields(SimScenario)})}
    return write_table(dataset_frame(generate_dataset(scenario, rep_index)), path, stamp)


class ReplicationScore(NamedTuple):
    bias: np.ndarray
    rmse: np.ndarray


def evaluate_replication(pd_mean: np.ndarray, scenario: SimScenario, grid: EvalGrid) -> ReplicationScore:
    """Bias per gridpoint and RMSE over the exposure points, per x1 profile.

    Arguments:
        pd_mean -- posterior mean partial dependence, profiles x exposure points
        scenario -- data-generating setting
        grid -- grid whose profiles all fix covariate 0

    Returns:
        bias (profiles x points) and RMSE (profiles)
    """
    pd_mean = np.asarray(pd_mean, dtype=float)
    t = np.asarray(grid.t_points)
    truth = np.empty((len(grid.profiles), t.size))
    for p, profile in enumerate(grid.profiles):
        if 0 not in profile:
            raise InputError("Simulation grid profiles must fix x1")
        truth[p] = true_f2(scenario.truth, t, np.full(t.size, profile[0]))
    bias = pd_mean - truth
    return ReplicationScore(bias, np.sqrt(np.mean(bias ** 2, axis=1)))


@dataclass(frozen=True, slots=True)
class StudyConfig:  # pylint: disable=invalid-name
    """Scenarios crossed with methods, stage-2 k values and replications."""
    scenarios: tuple[SimScenario, ...]
    methods: tuple[Method, ...] = (Method.NPIVBART_H, Method.PLAIN_BART, Method.TSLS)
    k_values: tuple[float, ...] = (2.0,)
    k_stage1: float = 2.0
    H_t: int = 50
    H_y: int = 50
    burn_in: int = 500
    draws: int = 500
    chains: int = 1
    thin: int = 1
    error_model: ErrorModel = ErrorModel.BIVARIATE_NORMAL
    grid: EvalGrid = field(default_factory=EvalGrid.simulation)
    name: str = "study"
    parallel: int = 1

    def __post_init__(self):
        if not self.scenarios:
            raise ConfigError("A study needs at least one scenario")
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "k_values", tuple(float(k) for k in self.k_values))
        object.__setattr__(self, "error_model", ErrorModel(self.error_model))
        if not self.methods or not self.k_values:
            raise ConfigError("A study needs at least one method and one k value")

    @classmethod
    def from_dict(cls, obj: dict) -> "StudyConfig":
        """Build a study from its declarative form; unknown keys are rejected.

        Scenario entries are SimScenario fields; the top-level ``seed`` and
        ``replications`` apply to scenarios that do not set their own.
        """
        known = {f.name for f in fields(cls)} | {"seed", "replications"}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"Unknown study config keys: {', '.join(unknown)}")
        obj = dict(obj)
        scenario_keys = {f.name for f in fields(SimScenario)}
        defaults = {key: obj.pop(key) for key in ("seed", "replications") if key in obj}
        scenarios = []
        for i, entry in enumerate(obj.pop("scenarios", [])):
            bad = sorted(set(entry) - scenario_keys)
            if bad:
                raise ConfigError(f"Unknown keys in scenario {i}: {', '.join(bad)}")
            try:
                scenarios.append(SimScenario(**{**defaults, **entry}))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Scenario {i}: {e}") from e
        if "grid" in obj:
            obj["grid"] = EvalGrid.from_dict(obj["grid"])
        for key in ("methods", "k_values"):
            if key in obj:
                obj[key] = tuple(obj[key])
        try:
            return cls(tuple(scenarios), **obj)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_file(cls, path) -> "StudyConfig":
        with open(path, encoding="utf-8") as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "scenarios": [{**{f.name: getattr(s, f.name) for f in fields(SimScenario)}, "truth": s.truth.value}
                          for s in self.scenarios],
            "methods": [m.value for m in self.methods],
            "k_values": list(self.k_values),
            "k_stage1": self.k_stage1,
            "H_t": self.H_t,
            "H_y": self.H_y,
            "burn_in": self.burn_in,
            "draws": self.draws,
            "chains": self.chains,
            "thin": self.thin,
            "error_model": self.error_model.value,
            "grid": self.grid.to_dict(),
        }

    @property
    def config_hash(self) -> str:
        return checksum.calculate(self.to_dict())

    def units(self) -> Iterable[tuple[int, Method, float, int]]:
        for s, scenario in enumerate(self.scenarios):
            for method in self.methods:
                # the k values only matter to the Bayesian methods
                ks = self.k_values if method is not Method.TSLS else self.k_values[:1]
                for k in ks:
                    for rep in range(scenario.replications):
                        yield s, method, k, rep


def _mcmc_seed(seed: int, rep_index: int) -> int:
    return int(np.random.SeedSequence([seed, rep_index, 1]).generate_state(1)[0])


def run_replication(config: StudyConfig, scenario_index: int, method: Method, k: float, rep_index: int,
                    policy=None) -> dict:
    """Fit one method to one simulated dataset and score it.

    Returns:
        JSON-ready record keyed by (scenario, method, k, rep)
    """
    scenario = config.scenarios[scenario_index]
    data = generate_dataset(scenario, rep_index)
    grid = config.grid
    beta = None
    if method is Method.TSLS:
        tsls_fit = fit_2sls(data.y, data.t, data.Z, data.X)
        pd_mean = tsls_fit.partial_dependence(grid.t_points, grid.profiles, data.X)
        beta = tsls_fit.beta_hat
    else:
        spec = ModelSpec(method.variant, k_stage1=config.k_stage1, k_stage2=k, H_t=config.H_t, H_y=config.H_y,
                         error_model=config.error_model)
        mcmc = McmcConfig(burn_in=config.burn_in, draws=config.draws, chains=config.chains, thin=config.thin,
                          seed=_mcmc_seed(scenario.seed, rep_index), eval_grid=grid)
        draws = fit(data, spec, mcmc, policy=policy)
        pd_mean = draws.pd.mean(axis=0)
        if draws.beta is not None:
            beta = float(draws.beta.mean())
    score = evaluate_replication(pd_mean, scenario, grid)
    return {
        "scenario": scenario_index,
        "method": method.value,
        "k": k,
        "rep": rep_index,
        "bias": score.bias.tolist(),
        "rmse": score.rmse.tolist(),
        "beta": beta,
    }


def _key(record: dict) -> tuple:
    return record["scenario"], record["method"], float(record["k"]), record["rep"]


def load_records(output_dir) -> list[dict]:
    path = Path(output_dir) / RECORDS_FILE
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                # torn last line of an interrupted run
                logger.warning("Skipping unreadable record in %s", path)
    return records


def _scenario_columns(scenario: SimScenario) -> dict:
    return {"scenario": scenario.label, "truth": scenario.truth.value, "rho": scenario.rho, "C": scenario.C,
            "n": scenario.n}


def _sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else math.nan


def aggregate(config: StudyConfig, records: list[dict]) -> dict[str, pd.DataFrame]:
    """Bias, RMSE and beta tables from the replication records.

    Records are sorted by key first, so the tables do not depend on the order in
    which replications completed.
    """
    records = sorted(records, key=_key)
    grouped: dict[tuple, list[dict]] = {}
    for record in records:
        grouped.setdefault(_key(record)[:3], []).append(record)
    bias_rows, rmse_rows, beta_rows = [], [], []
    for (s, method, k), group in grouped.items():
        scenario = config.scenarios[s]
        base = {**_scenario_columns(scenario), "method": method, "k": k, "replications": len(group)}
        bias = np.array([r["bias"] for r in group])
        rmse = np.array([r["rmse"] for r in group])
        for p, label in enumerate(config.grid.labels):
            for j, t in enumerate(config.grid.t_points):
                column = bias[:, p, j]
                bias_rows.append({**base, "profile": label, "t": t, "mean_bias": float(column.mean()),
                                  "mean_abs_bias": float(np.abs(column).mean()), "sd_bias": _sd(column)})
            rmse_rows.append({**base, "profile": label, "mean_rmse": float(rmse[:, p].mean()),
                              "sd_rmse": _sd(rmse[:, p])})
        betas = np.array([r["beta"] for r in group if r["beta"] is not None], dtype=float)
        if betas.size:
            beta_rows.append({**base, "mean_beta": float(betas.mean()), "sd_beta": _sd(betas)})
    return {
        "bias_by_gridpoint": pd.DataFrame(bias_rows),
        "rmse_table": pd.DataFrame(rmse_rows),
        "beta_table": pd.DataFrame(beta_rows),
    }


def run_study(config: StudyConfig, output_dir, parallel: int | None = None, resume: bool = False,
              policy=None) -> dict[str, pd.DataFrame]:
    """Run every (scenario, method, k, replication) unit and write the study report.

    Completed units are appended to ``records.jsonl`` as they finish; with
    ``resume`` the units already recorded are skipped. The tables are written
    once all units are done.

    Arguments:
        config -- study configuration
        output_dir -- directory receiving records, tables and the manifest

    Keyword Arguments:
        parallel -- worker processes (default: {None}, the config value)
        resume -- reuse recorded units (default: {False})
        policy -- sampler policy (default: {None}, the global policy)

    Returns:
        the tables, by name
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    policy = policy or get_policy()
    records_path = output_dir / RECORDS_FILE
    records = _resumable_records(config, output_dir) if resume else []
    _write_manifest(config, output_dir, len(records))
    # drops a torn last line left by an interrupted run
    with open(records_path, "w", encoding="utf-8") as f:
        f.writelines(json.dumps(r, sort_keys=True) + "\n" for r in records)
    done = {_key(r) for r in records}
    pending = [unit for unit in config.units() if (unit[0], unit[1].value, float(unit[2]), unit[3]) not in done]
    logger.info("Study %s: %d units recorded, %d to run", config.name, len(done), len(pending))

    n_jobs = parallel if parallel is not None else config.parallel
    results = Parallel(n_jobs=n_jobs, return_as="generator")(
        delayed(run_replication)(config, s, method, k, rep, policy) for s, method, k, rep in pending)
    with open(records_path, "a", encoding="utf-8") as f:
        for i, record in enumerate(results, start=1):
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()
            records.append(record)
            logger.debug("Unit %d of %d done: %s", i, len(pending), record["method"])

    tables = aggregate(config, records)
    for name, table in tables.items():
        write_table(table, output_dir / f"{name}.csv", _stamp(config))
    _write_manifest(config, output_dir, len(records))
    logger.info("Study %s written to %s", config.name, output_dir)
    return tables


def _stamp(config: StudyConfig) -> dict:
    return {"schema": SCHEMA_VERSION, "seed": config.scenarios[0].seed, "config_hash": config.config_hash}


def _write_manifest(config: StudyConfig, output_dir: Path, n_units: int):
    manifest = {
        **_stamp(config),
        "version": __version__,
        "config": config.to_dict(),
        "seeds": sorted({s.seed for s in config.scenarios}),
        "units": n_units,
        "libraries": {"numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__},
    }
    with open(output_dir / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _resumable_records(config: StudyConfig, output_dir: Path) -> list[dict]:
    """Records of an earlier run of the same configuration.

    Raises:
        ConfigError: if the directory holds records of another configuration
    """
    records = load_records(output_dir)
    if not records:
        return []
    try:
        with open(output_dir / MANIFEST_FILE, encoding="utf-8") as f:
            recorded_hash = json.load(f).get("config_hash")
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot resume in {output_dir}: no readable {MANIFEST_FILE}") from e
    if recorded_hash != config.config_hash:
        raise ConfigError(f"Cannot resume in {output_dir}: records belong to config {recorded_hash}, "
                          f"not {config.config_hash}")
    wanted = {(s, method.value, float(k), rep) for s, method, k, rep in config.units()}
    kept = [r for r in records if _key(r) in wanted]
    if len(kept) < len(records):
        logger.warning("Dropping %d records with no unit in study %s", len(records) - len(kept), config.name)
    return kept
