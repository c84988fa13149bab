"""Command line interface: ``ivbart fit``, ``ivbart simulate`` and ``ivbart summarize``."""

import os
import sys
import json
import logging
import argparse
from pathlib import Path
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import pandas as pd

from ivbart import SCHEMA_VERSION, __version__, checksum
from ivbart.exceptions import ConfigError, InputError, IvBartException, RankDeficiencyError
from ivbart.ivmodels import (EvalGrid, IVData, McmcConfig, ModelSpec, PosteriorDraws, fit,
                             partial_dependence, rho_diagnostics)
from ivbart.plotting import plot_partial_dependence, plot_rho_histograms, plot_trace
from ivbart.simlab import StudyConfig, run_study
from ivbart.streams.file import FileOutput, read_stamp, write_table
from ivbart.summary import summarize
from ivbart.tsls import fit_2sls

logger = logging.getLogger(__name__)

PARALLEL_ENV = "IVBART_PARALLEL"


def _reject_unknown(obj: dict, known: set, where: str):
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in {where}: {', '.join(unknown)}")


@dataclass(frozen=True, slots=True)
class FitConfig:
    """Declarative description of one model fit on a CSV file."""
    data: Path
    outcome: str
    exposure: str
    instruments: tuple[str, ...] = ()
    covariates: tuple[str, ...] = ()
    model: ModelSpec = field(default_factory=ModelSpec)
    burn_in: int | None = None
    draws: int | None = None
    chains: int | None = None
    thin: int | None = None
    store_models: bool = False
    grid: dict | None = None
    seed: int = 0
    output: Path = Path("ivbart-out")

    def __post_init__(self):
        roles = [self.outcome, self.exposure, *self.instruments, *self.covariates]
        duplicated = sorted({c for c in roles if roles.count(c) > 1})
        if duplicated:
            raise ConfigError(f"Columns assigned to more than one role: {', '.join(duplicated)}")
        if self.chains is not None and self.chains < 1:
            raise ConfigError("chains must be at least 1")

    @property
    def columns(self) -> list[str]:
        return [self.outcome, self.exposure, *self.instruments, *self.covariates]

    @classmethod
    def from_dict(cls, obj: dict, base_dir: Path = Path(".")) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        _reject_unknown(obj, known, "fit config")
        obj = dict(obj)
        for key in ("data", "outcome", "exposure"):
            if key not in obj:
                raise ConfigError(f"Fit config needs '{key}'")
        model = obj.pop("model", {})
        _reject_unknown(model, {f.name for f in fields(ModelSpec)}, "model")
        try:
            obj["model"] = ModelSpec(**model)
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e
        obj["data"] = base_dir / obj["data"]
        obj["output"] = base_dir / obj.get("output", "ivbart-out")
        for key in ("instruments", "covariates"):
            obj[key] = tuple(obj.get(key, ()))
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "FitConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read fit config {path}: {e}") from e
        return cls.from_dict(obj, path.parent)

    def eval_grid(self) -> EvalGrid:
        """Grid with profile columns given by covariate name."""
        if self.grid is None:
            return EvalGrid()
        _reject_unknown(self.grid, {"t_points", "profiles", "labels"}, "grid")
        index = {name: j for j, name in enumerate(self.covariates)}
        profiles = []
        for profile in self.grid.get("profiles", [{}]):
            missing = sorted(set(profile) - set(index))
            if missing:
                raise ConfigError(f"Grid profile uses non-covariate columns: {', '.join(missing)}")
            profiles.append({index[name]: value for name, value in profile.items()})
        t_points = self.grid.get("t_points", EvalGrid().t_points)
        labels = self.grid.get("labels")
        return EvalGrid(tuple(t_points), tuple(profiles), tuple(labels) if labels is not None else None)

    def mcmc(self, parallel: int) -> McmcConfig:
        sizes = {key: getattr(self, key) for key in ("burn_in", "draws", "chains", "thin") if getattr(self, key) is not None}
        return McmcConfig(seed=self.seed, eval_grid=self.eval_grid(), store_models=self.store_models,
                          parallel=parallel, **sizes)

    def to_dict(self) -> dict:
        obj = {f.name: getattr(self, f.name) for f in fields(self)}
        obj["data"] = str(self.data)
        obj["output"] = str(self.output)
        return obj


def load_csv(path, columns: Sequence[str]) -> pd.DataFrame:
    """Read the declared columns of a CSV file as floats.

    Leading ``#`` stamp lines are skipped. Cells are parsed strictly; the first
    missing, non-numeric or non-finite cell is reported with its data row
    (1-based, header excluded) and column.

    Raises:
        InputError: on a missing file, a missing column or a bad cell

    Returns:
        frame holding the declared columns
    """
    try:
        _, skip = read_stamp(path)
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skiprows=skip)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"Cannot read {path}: {e}") from e
    missing = [c for c in columns if c not in raw.columns]
    if missing:
        raise InputError(f"Columns not in the header of {path}: {', '.join(missing)}")
    out = {}
    for column in columns:
        values = pd.to_numeric(raw[column].str.strip(), errors="coerce")
        bad = ~np.isfinite(values.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise InputError(f"{path}: row {row + 1}, column '{column}': cannot use value {raw[column].iloc[row]!r}")
        out[column] = values.to_numpy(dtype=float)
    return pd.DataFrame(out)


def _data(config: FitConfig) -> IVData:
    frame = load_csv(config.data, config.columns)
    return IVData(frame[config.outcome].to_numpy(), frame[config.exposure].to_numpy(),
                  frame[list(config.instruments)].to_numpy() if config.instruments else None,
                  frame[list(config.covariates)].to_numpy() if config.covariates else None)


def _tsls_summary(data: IVData, config: FitConfig) -> dict | None:
    if not config.instruments:
        return None
    try:
        result = fit_2sls(data.y, data.t, data.Z, data.X, names=[*config.instruments, *config.covariates])
    except (RankDeficiencyError, InputError) as e:
        logger.warning("2SLS comparator skipped: %s", e)
        return None
    return {"beta_hat": result.beta_hat, "se_beta": result.se_beta,
            "first_stage_F": None if result.perfect_first_stage else result.first_stage_F,
            "perfect_first_stage": result.perfect_first_stage}


def cmd_fit(config: FitConfig, parallel: int = 1) -> int:
    """Fit the configured model and write draws, summaries and figures."""
    data = _data(config)
    mcmc = config.mcmc(parallel)
    output = Path(config.output)
    output.mkdir(parents=True, exist_ok=True)
    logger.info("Fitting %s on %d rows from %s", config.model.variant.value, data.n, config.data)
    with FileOutput(output / "draws.jsonl") as stream:
        draws = fit(data, config.model, mcmc, output=stream)
    stamp = {"schema": SCHEMA_VERSION, "seed": mcmc.seed, "config_hash": draws.header["config_hash"]}

    pd_frame = partial_dependence(draws)
    write_table(pd_frame, output / "pd_summary.csv", stamp)
    plot_partial_dependence(pd_frame, output / "pd_summary.svg", title=config.model.variant.value)

    rho = rho_diagnostics(draws)
    write_table(rho.per_draw, output / "rho_per_draw.csv", stamp)
    write_table(rho.per_observation, output / "rho_per_observation.csv", stamp)
    plot_rho_histograms(rho.per_draw, rho.per_observation, output / "rho.svg")
    plot_trace(rho.per_draw, "rho_mean", output / "rho_trace.svg")

    scalars = summarize(draws)
    write_table(scalars, output / "scalar_summary.csv", stamp)
    report = {
        **stamp,
        "version": __version__,
        "config": json.loads(checksum.canonical_json(config.to_dict())),
        "partial_dependence": pd_frame.to_dict(orient="records"),
        "scalars": scalars.to_dict(orient="records"),
        "tsls": _tsls_summary(data, config),
    }
    with open(output / "summary.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    logger.info("Wrote %d draws to %s", len(draws), output)
    return 0


def cmd_simulate(config: StudyConfig, output, parallel: int = 1, resume: bool = False) -> int:
    """Run a simulation study."""
    run_study(config, output, parallel=parallel, resume=resume)
    return 0


def cmd_summarize(path, as_json: bool = False, out=None) -> int:
    """Print per-chain and pooled summaries of a draw file."""
    out = out or sys.stdout
    draws = PosteriorDraws.from_file(path)
    table = summarize(draws)
    if as_json:
        report = {"schema": SCHEMA_VERSION, "seed": draws.header.get("seed"),
                  "config_hash": draws.header.get("config_hash"), "summary": table.to_dict(orient="records")}
        out.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    else:
        out.write(f"# {draws.header.get('variant')} draws={len(draws)} chains={len(draws.chains)}\n")
        out.write(table.to_string(index=False) + "\n")
    return 0


def _default_parallel() -> int:
    value = os.environ.get(PARALLEL_ENV, "1")
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f"{PARALLEL_ENV} must be an integer, got {value!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivbart", description="Bayesian IV regression with tree ensembles")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug output")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    fit_parser = commands.add_parser("fit", help="fit a model to a CSV file")
    fit_parser.add_argument("--config", required=True, help="fit config (JSON)")
    fit_parser.add_argument("--seed", type=int, help="master seed, overrides the config")
    fit_parser.add_argument("--parallel", type=int, help=f"worker processes for chains (default: ${PARALLEL_ENV} or 1)")
    fit_parser.add_argument("--output", help="output directory, overrides the config")

    sim_parser = commands.add_parser("simulate", help="run a simulation study")
    sim_parser.add_argument("--config", required=True, help="study config (JSON)")
    sim_parser.add_argument("--seed", type=int, help="master seed for every scenario, overrides the config")
    sim_parser.add_argument("--parallel", type=int, help=f"worker processes for replications (default: ${PARALLEL_ENV} or 1)")
    sim_parser.add_argument("--resume", action="store_true", help="reuse completed replications in the output directory")
    sim_parser.add_argument("--output", required=True, help="output directory")

    sum_parser = commands.add_parser("summarize", help="summarize a draw file")
    sum_parser.add_argument("draws", help="draw file (JSON lines)")
    sum_parser.add_argument("--json", action="store_true", help="print JSON instead of a text table")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "summarize":
            return cmd_summarize(args.draws, as_json=args.json)
        parallel = args.parallel if args.parallel is not None else _default_parallel()
        if args.command == "fit":
            config = FitConfig.from_file(args.config)
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.output is not None:
                overrides["output"] = Path(args.output)
            if overrides:
                config = FitConfig(**{**{f.name: getattr(config, f.name) for f in fields(config)}, **overrides})
            return cmd_fit(config, parallel)
        study = StudyConfig.from_file(args.config)
        if args.seed is not None:
            obj = study.to_dict()
            for scenario in obj["scenarios"]:
                scenario["seed"] = args.seed
            study = StudyConfig.from_dict(obj)
        return cmd_simulate(study, args.output, parallel, args.resume)
    except IvBartException as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
