import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from treepin.data import Feature, FeatureSchema
from treepin.model import PinConfig, init_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = PinConfig(d=3, d_hidden=4, d0=2, d1=5, d2=4)
ONE = PinConfig(d=1, d_hidden=1, d0=1, d1=2, d2=2)


def continuous_schema(q: int) -> FeatureSchema:
    return FeatureSchema(tuple(Feature(f"x{j + 1}", "continuous") for j in range(q)),
                         exposure="exposure", response="frequency", count="claims")


def mixed_schema() -> FeatureSchema:
    return FeatureSchema((Feature("age", "continuous"), Feature("brand", "categorical", ("A", "B", "C")),
                          Feature("power", "continuous"), Feature("region", "categorical", ("N", "S"))),
                         exposure="exposure", response="frequency", count="claims")


def random_model(schema, config=TINY, seed=0, scale=0.7, active=None):
    """Model with every parameter drawn at random (non-zero output weights)."""
    model = init_model(schema, config, seed, active=active)
    rng = np.random.default_rng(seed + 10_000)
    for name, p in model.params.items():
        p[...] = rng.normal(0.0, scale, p.shape)
    model.params["out.w"][~model.active] = 0.0
    return model


def random_X(schema, n, rng):
    cols = []
    for f in schema.features:
        if f.is_categorical:
            cols.append(rng.integers(1, f.n_levels + 1, n).astype(np.float64))
        else:
            cols.append(rng.uniform(-1, 1, n))
    return np.column_stack(cols)


def additive_unit_model(q=2):
    """Near-identity 1-d embeddings and a network computing ``x_j + x_k`` (tokens ignored)."""
    model = init_model(continuous_schema(q), ONE, 0)
    eps = 1e-4
    for j in range(q):
        model.params[f"f{j}.W1"][...] = eps
        model.params[f"f{j}.b1"][...] = 0.0
        model.params[f"f{j}.W2"][...] = 1.0 / eps
        model.params[f"f{j}.b2"][...] = 0.0
    model.params["net.W1"][...] = [[1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]]
    model.params["net.b1"][...] = 0.0
    model.params["net.W2"][...] = np.eye(2)
    model.params["net.b2"][...] = 0.0
    model.params["net.W3"][...] = [[1.0, -1.0]]
    model.params["net.b3"][...] = 0.0
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
