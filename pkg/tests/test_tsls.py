import math
import logging

import numpy as np
import pytest

from ivbart import tsls
from ivbart.exceptions import InputError, RankDeficiencyError


def test_noiseless_exact_identification(caplog):
    z = np.random.default_rng(0).normal(size=30)
    with caplog.at_level(logging.WARNING, logger="ivbart.tsls"):
        result = tsls.fit_2sls(2.0 * z, z, z[:, None])
    assert result.beta_hat == pytest.approx(2.0, abs=1e-12)
    assert result.perfect_first_stage
    assert math.isinf(result.first_stage_F)
    assert "first-stage F" in caplog.text


def test_confounded_data():
    rng = np.random.default_rng(1)
    n = 5000
    Z = rng.binomial(2, 0.3, size=(n, 3)).astype(float)
    X = rng.uniform(-1, 1, size=(n, 2))
    u = rng.normal(size=n)
    t = Z @ np.array([0.5, 0.3, 0.2]) + u + rng.normal(size=n)
    y = 1.0 + 1.5 * t + X @ np.array([0.7, -0.2]) + 2.0 * u + rng.normal(size=n)
    result = tsls.fit_2sls(y, t, Z, X)
    ols = np.linalg.lstsq(np.column_stack([np.ones(n), t, X]), y, rcond=None)[0]
    assert abs(result.beta_hat - 1.5) < 4 * result.se_beta
    assert ols[1] > 2.0
    assert result.coef_x == pytest.approx([0.7, -0.2], abs=0.2)
    assert result.first_stage_F > 50


def test_standard_error():
    rng = np.random.default_rng(2)
    n = 200
    z = rng.normal(size=n)
    t = z + rng.normal(size=n)
    y = 0.5 * t + rng.normal(size=n)
    result = tsls.fit_2sls(y, t, z)

    stage1 = np.column_stack([np.ones(n), z])
    t_hat = stage1 @ np.linalg.lstsq(stage1, t, rcond=None)[0]
    stage2 = np.column_stack([np.ones(n), t_hat])
    coef = np.linalg.lstsq(stage2, y, rcond=None)[0]
    residuals = y - coef[0] - coef[1] * t
    cov = residuals @ residuals / (n - 2) * np.linalg.inv(stage2.T @ stage2)
    assert result.beta_hat == pytest.approx(coef[1])
    assert result.intercept == pytest.approx(coef[0])
    assert result.se_beta == pytest.approx(math.sqrt(cov[1, 1]))


def test_first_stage_F_under_null():  # pylint: disable=invalid-name
    rng = np.random.default_rng(3)
    values = [tsls.first_stage_F(rng.normal(size=200), rng.normal(size=(200, 1))) for _ in range(300)]
    assert np.mean(values) == pytest.approx(1.0, abs=0.3)


def test_first_stage_F_by_hand():  # pylint: disable=invalid-name
    # group means 1 and 3: RSS 4 within groups, 14 around the grand mean 2
    z = np.repeat([0.0, 1.0], 5)
    t = np.array([0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 4.0, 3.0, 3.0])
    assert tsls.first_stage_F(t, z[:, None]) == pytest.approx((14.0 - 4.0) / (4.0 / 8.0), abs=1e-10)
    # a covariate equal to the instrument leaves nothing to explain
    with pytest.raises(RankDeficiencyError):
        tsls.first_stage_F(t, z[:, None], z[:, None])


def test_first_stage_F_perfect_fit_warns(caplog):  # pylint: disable=invalid-name
    z = np.repeat([0.0, 1.0], 5)
    with caplog.at_level(logging.WARNING, logger="ivbart.tsls"):
        value = tsls.first_stage_F(3.0 * z - 1.0, z[:, None])
    assert value == math.inf
    assert [r.levelname for r in caplog.records] == ["WARNING"]
    assert "+inf" in caplog.records[0].getMessage()


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(4)
    z = rng.normal(size=50)
    Z = np.column_stack([z, 2.0 * z])
    t = z + rng.normal(size=50)
    with pytest.raises(RankDeficiencyError, match="collinear columns: (snp_a|snp_b)"):
        tsls.fit_2sls(t, t, Z, names=["snp_a", "snp_b"])
    with pytest.raises(RankDeficiencyError, match="z[12]"):
        tsls.first_stage_F(t, Z)


def test_input_errors():
    with pytest.raises(InputError):
        tsls.fit_2sls(np.ones(3), np.ones(3), np.ones((3, 2)))
    with pytest.raises(InputError):
        tsls.fit_2sls(np.ones(4), np.ones(5), np.ones((5, 1)))
    with pytest.raises(InputError):
        tsls.fit_2sls(np.ones(5), np.ones(5), np.empty((5, 0)))


def test_partial_dependence():
    fit = tsls.TSLSFit(beta_hat=2.0, coef_x=np.array([1.0, -1.0]), se_beta=0.1, first_stage_F=10.0, intercept=0.5)
    background = np.array([[0.0, 1.0], [1.0, 3.0]])
    surface = fit.partial_dependence([0.0, 1.0], [{}, {0: 2.0}], background)
    # covariate offsets: -1.5 averaged over the rows, 0.0 with x1 fixed at 2
    assert surface[0] == pytest.approx([0.5 - 1.5, 2.5 - 1.5])
    assert surface[1] == pytest.approx([0.5 + 0.0, 2.5 + 0.0])
    assert fit.predict([1.0, 2.0], background) == pytest.approx([1.5, 2.5])
