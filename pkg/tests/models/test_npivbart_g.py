from functools import partial

import numpy as np
import pytest

from ivbart.models import F2Draw, NpivBartG, Stage2Design, Stage2Settings, model_type
from ivbart.treekit import CutpointGrid, TreePriorConfig


@pytest.fixture(name="npivbart_g_setup")
def fixture_npivbart_g_setup():
    rng = np.random.default_rng(32)
    t = rng.normal(size=150)
    X = rng.uniform(-1, 1, size=(150, 2))
    y = np.cos(t) + (X[:, 0] >= 0) - 0.5
    design = Stage2Design(t, X, float(np.ptp(y)), float(np.ptp(t)), y_center=1.0)
    settings = Stage2Settings(2.0, 10, TreePriorConfig(), partial(CutpointGrid.from_data, n_cutpoints=20))
    return NpivBartG(design, settings), y, rng


def test_registered():
    assert model_type("npivbart-g") is NpivBartG


def test_leaf_scale_spans_both_ensembles(npivbart_g_setup):
    model, y, _ = npivbart_g_setup
    expected = np.ptp(y) / (2 * 2.0 * np.sqrt(20))
    assert model.ensembles["f21"].leaf_scale == pytest.approx(expected)
    assert model.ensembles["f22"].leaf_scale == pytest.approx(expected)
    assert len(model.ensembles["f21"].grid) == 1
    assert len(model.ensembles["f22"].grid) == 2


def test_update_fits_additive_function(npivbart_g_setup):
    model, y, rng = npivbart_g_setup
    for _ in range(80):
        model.update(y, np.full(y.size, 0.01), rng)
    fitted = model.fitted()
    assert fitted == pytest.approx(model.ensembles["f21"].fitted() + model.ensembles["f22"].fitted())
    assert np.sqrt(np.mean((fitted - y) ** 2)) < 0.25


def test_additive_evaluation(npivbart_g_setup):
    model, y, rng = npivbart_g_setup
    for _ in range(5):
        model.update(y, np.ones(y.size), rng)
    draw = F2Draw.deserialize(model.snapshot().serialize())
    t = np.array([-1.0, 1.0])
    X = np.array([[0.3, 0.0], [0.3, 0.0]])
    other = np.array([[-0.7, 0.5], [-0.7, 0.5]])
    # differences in t do not depend on the covariates
    assert np.diff(draw.evaluate(t, X)) == pytest.approx(np.diff(draw.evaluate(t, other)))
    assert draw.evaluate(model.design.t, model.design.X) == pytest.approx(1.0 + model.fitted())
