import numpy as np
from scipy.stats import chi2

from ivbart.models.variant import Variant, register
from ivbart.models.npivbart_h import NpivBartH


def calibrate_lambda(sigma_hat2: float, nu: float, q: float) -> float:
    """Scale of the scaled-inverse-chi2 prior putting mass q below sigma_hat2."""
    if not sigma_hat2 > 0:
        raise ValueError("sigma_hat2 must be positive")
    return sigma_hat2 * chi2.ppf(1.0 - q, nu) / nu


def draw_residual_variance(residuals: np.ndarray, nu: float, lam: float, rng: np.random.Generator) -> float:
    """Conjugate draw (nu lam + SSE) / chi2(nu + n)."""
    residuals = np.asarray(residuals, dtype=float)
    sse = float(residuals @ residuals)
    return (nu * lam + sse) / rng.chisquare(nu + residuals.size)


@register(Variant.PLAIN_BART)
class PlainBart(NpivBartH):
    """Single ensemble over (t, x) with independent homoscedastic errors.

    Instruments are ignored; the sampler feeds the outcome itself with its
    residual variance in place of the stage-2 pseudo-outcomes.
    """
