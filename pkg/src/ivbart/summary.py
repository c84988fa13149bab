"""Posterior summaries and the split-chain potential scale reduction."""

import math
from typing import Sequence

import numpy as np
import pandas as pd

from ivbart.ivmodels import PosteriorDraws

SUMMARY_COLUMNS = ["quantity", "chain", "n", "mean", "sd", "p2.5", "p50", "p97.5", "rhat"]


def split_rhat(chains: Sequence[np.ndarray]) -> float:
    """Split-chain R-hat of one scalar.

    Every chain is cut into two halves (a middle draw of an odd-length chain is
    dropped). Chains of unequal length are truncated to the shortest.

    Arguments:
        chains -- one draw vector per chain

    Returns:
        R-hat; +inf when the halves are constant but disagree, nan when it is
        undefined (fewer than two draws per half or all draws equal)
    """
    length = min((len(c) for c in chains), default=0) // 2
    if length < 2:
        return math.nan
    halves = []
    for chain in chains:
        chain = np.asarray(chain, dtype=float)
        halves.append(chain[:length])
        halves.append(chain[-length:])
    halves = np.stack(halves)
    means = halves.mean(axis=1)
    between = length * np.var(means, ddof=1)
    within = float(np.mean(np.var(halves, axis=1, ddof=1)))
    if within == 0.0:
        return math.inf if between > 0 else math.nan
    var_plus = (length - 1) / length * within + between / length
    return math.sqrt(var_plus / within)


def _row(quantity: str, chain, values: np.ndarray, rhat: float) -> dict:
    n = values.size
    if n == 0:
        stats = dict.fromkeys(("mean", "sd", "p2.5", "p50", "p97.5"), math.nan)
    else:
        p = np.percentile(values, [2.5, 50.0, 97.5])
        stats = {
            "mean": float(np.mean(values)),
            "sd": float(np.std(values, ddof=1)) if n > 1 else 0.0,
            "p2.5": float(p[0]),
            "p50": float(p[1]),
            "p97.5": float(p[2]),
        }
    return {"quantity": quantity, "chain": chain, "n": n, **stats, "rhat": rhat}


def scalar_traces(draws: PosteriorDraws) -> dict[str, np.ndarray]:
    """Scalar traces present in the draws: beta, mean rho, cluster count."""
    traces = {}
    if draws.beta is not None:
        traces["beta"] = draws.beta
    traces["rho_mean"] = draws.rho_mean
    if draws.n_clusters is not None:
        traces["n_clusters"] = draws.n_clusters.astype(float)
    return traces


def summarize(draws: PosteriorDraws) -> pd.DataFrame:
    """Per-chain and pooled summaries of every scalar trace.

    Pooled rows carry the split R-hat over the chains; chain rows carry the
    split R-hat of the chain alone.
    """
    rows = []
    chain_ids = draws.chain_ids
    for quantity, trace in scalar_traces(draws).items():
        per_chain = [trace[chain_ids == c] for c in draws.chains]
        for chain, values in zip(draws.chains, per_chain):
            rows.append(_row(quantity, str(chain), values, split_rhat([values])))
        rows.append(_row(quantity, "pooled", trace, split_rhat(per_chain)))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def summarize_file(path) -> pd.DataFrame:
    return summarize(PosteriorDraws.from_file(path))
