import numpy as np
import pytest

from mocsurv.data import Cohort, FeatureSet, SurvivalRecord, SynthConfig, generate_synthetic
from mocsurv.predictors import ModelDims, init_params

SMALL_DIMS = ModelDims(d_p=5, d_g=4, attn_dim=3, path_hidden=(6, 4), gene_hidden=(5, 3))


def random_records(rng, n, censor_frac, tie_prob=0.0):
    times = rng.exponential(1.0, size=n) + 1e-3
    if tie_prob > 0:
        # snap a share of times onto a coarse grid to create ties
        snap = rng.random(n) < tie_prob
        times[snap] = np.round(times[snap], 1) + 0.1
    events = rng.random(n) >= censor_frac
    return [SurvivalRecord(f"r{i:03d}", float(t), bool(e)) for i, (t, e) in enumerate(zip(times, events))]


def random_cohort(rng, n, dims=SMALL_DIMS, censor_frac=0.3):
    recs = random_records(rng, n, censor_frac)
    feats = {
        r.id: FeatureSet(rng.normal(size=(int(rng.integers(1, 5)), dims.d_p)), rng.normal(size=dims.d_g))
        for r in recs
    }
    return Cohort(recs, feats)


@pytest.fixture
def small_dims():
    return SMALL_DIMS


@pytest.fixture
def small_params():
    # nonzero output layers so gradients reach every block
    rng = np.random.default_rng(7)
    ps = init_params(3, SMALL_DIMS)
    for name in ps.names():
        if ps[name].ndim and not ps[name].any():
            ps[name] = rng.normal(scale=0.5, size=ps[name].shape)
    return ps


@pytest.fixture(scope="session")
def tiny_synth():
    return generate_synthetic(SynthConfig(n=40, d_p=4, d_g=3, bag_mean=2, seed=5))


# acceptance lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
