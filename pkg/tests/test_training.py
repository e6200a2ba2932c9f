import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treepin.data import Dataset, fit_apply_scalers, split
from treepin.losses import deviance_from_link, deviance_link_gradient, poisson_deviance
from treepin.model import PinConfig, SchemaMismatchError, init_model, link, pin_forward
from treepin.numeric import ContractError
from treepin.synth import GeneratorSpec, generate
from treepin.training import (TrainConfig, TrainHistory, TrainingError, ensemble_predict, evaluate, null_link,
                              optimize, train)

from conftest import continuous_schema, mixed_schema, random_model, random_X

SMALL = PinConfig(d=3, d_hidden=4, d0=2, d1=8, d2=4)


# ---------------------------------------------------------------- deviance

def test_deviance_examples():
    assert poisson_deviance([0.3, 2.0], [0.3, 2.0], [1.0, 0.5]) == 0.0
    assert poisson_deviance([0.1], [0.0], [1.0]) == pytest.approx(0.2, rel=1e-15)
    assert poisson_deviance([2.0], [1.0], [1.0]) == pytest.approx(2 * (2 - 1 - math.log(2)), rel=1e-15)
    assert poisson_deviance([2.0], [1.0], [1.0]) == pytest.approx(0.613706, abs=1e-6)


@pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
def test_deviance_needs_positive_predictions(bad):
    with pytest.raises(ValueError):
        poisson_deviance([bad], [1.0], [1.0])


@given(st.lists(st.tuples(st.floats(1e-3, 10), st.floats(0, 10), st.floats(0.01, 1)), min_size=1, max_size=20))
def test_deviance_non_negative(rows):
    f, y, v = map(np.array, zip(*rows))
    assert poisson_deviance(f, y, v) >= -1e-12


@given(st.floats(0.05, 5), st.floats(0.1, 3))
def test_deviance_decreases_towards_observation(y, gap):
    losses = [poisson_deviance([y + gap * t], [y], [1.0]) for t in (1.0, 0.5, 0.25, 0.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_link_gradient_matches_difference(rng):
    eta, Y, v = rng.normal(size=5), rng.uniform(0, 2, 5), rng.uniform(0.1, 1, 5)
    g = deviance_link_gradient(eta, Y, v)
    for i in range(5):
        e = np.zeros(5)
        e[i] = 1e-6
        fd = (deviance_from_link(eta + e, Y, v) - deviance_from_link(eta - e, Y, v)) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-6)


# ---------------------------------------------------------------- config and history

@pytest.mark.parametrize("kw", [{"batch_size": 0}, {"lr": 0.0}, {"validation_fraction": 1.0},
                                {"plateau_factor": 1.0}, {"max_epochs": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_history_csv(tmp_path):
    h = TrainHistory([1.0, 0.5], [1.1, 0.6], [1e-3, 1e-3], 2)
    h.to_csv(tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lr"]
    assert rows[2][0] == "2" and float(rows[2][2]) == 0.6


# ---------------------------------------------------------------- training loop

@pytest.fixture(scope="module")
def additive_data():
    spec = GeneratorSpec(n=3000, q=2, seed=5, intercept=math.log(0.5), effects=["linear", "quadratic"],
                         coefs=[0.6, 0.8], mc_rows=1000)
    data, _ = generate(spec)
    return fit_apply_scalers(data)


def _fresh(data, scalers, seed=1, active=None):
    return init_model(data.schema, SMALL, seed, scalers=scalers, base_rate=data.N.sum() / data.v.sum(),
                      active=active)


def test_training_beats_intercept(additive_data):
    data, scalers = additive_data
    tr, va = split(data, 0.2, seed=0)
    model, hist = train(tr, _fresh(tr, scalers), TrainConfig(max_epochs=12, early_stop_patience=5), seed=1,
                        validation=va)
    null = deviance_from_link(np.full(len(va), null_link(tr)), va.Y, va.v)
    assert evaluate(model, va) < null
    # restored weights are the best recorded epoch
    assert evaluate(model, va) == pytest.approx(min(hist.val_loss), rel=1e-12)
    assert hist.val_loss[hist.best_epoch - 1] == min(hist.val_loss)


def test_training_is_deterministic(additive_data):
    data, scalers = additive_data
    cfg = TrainConfig(max_epochs=3)
    m1, h1 = train(data, _fresh(data, scalers), cfg, seed=4)
    m2, h2 = train(data, _fresh(data, scalers), cfg, seed=4)
    assert h1.val_loss == h2.val_loss and h1.train_loss == h2.train_loss
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    m3, h3 = train(data, _fresh(data, scalers), cfg, seed=5)
    assert h3.val_loss != h1.val_loss
    assert m1.seeds["train"] == 4


def test_zero_epochs_returns_initial_model(additive_data):
    data, scalers = additive_data
    init = _fresh(data, scalers)
    model, hist = train(data, init, TrainConfig(max_epochs=0), seed=1)
    assert hist.val_loss == [] and hist.best_epoch is None
    for k in init.params:
        np.testing.assert_array_equal(model.params[k], init.params[k])


def test_training_does_not_mutate_skeleton(additive_data):
    data, scalers = additive_data
    init = _fresh(data, scalers)
    snapshot = {k: v.copy() for k, v in init.params.items()}
    train(data, init, TrainConfig(max_epochs=1), seed=1)
    for k in snapshot:
        np.testing.assert_array_equal(init.params[k], snapshot[k])


def test_frozen_mask_respected(additive_data):
    from treepin.model import diagonal_mask
    data, scalers = additive_data
    model, _ = train(data, _fresh(data, scalers, active=diagonal_mask(2)), TrainConfig(max_epochs=2), seed=1)
    assert model.params["out.w"][1] == 0.0


def test_plateau_schedule_in_loop():
    # validation loss never improves after epoch 1: lr steps down every 5 epochs
    params = {"w": np.zeros(2)}
    cfg = TrainConfig(max_epochs=16, early_stop_patience=100, lr=1.0)
    _, hist = optimize(params, lambda idx: (0.0, {"w": np.zeros(2)}), lambda: 1.0, 10, cfg,
                       np.random.default_rng(0))
    lrs = np.array(hist.lr)
    assert np.all(np.diff(lrs) <= 0)
    # lr used in each epoch: drops after epochs 6 and 11 (five flat epochs each)
    np.testing.assert_allclose(lrs[[0, 5, 6, 10, 11]], [1.0, 1.0, 0.9, 0.9, 0.81])
    assert hist.best_epoch == 1


def test_early_stopping_patience():
    params = {"w": np.zeros(1)}
    cfg = TrainConfig(max_epochs=100, early_stop_patience=4)
    _, hist = optimize(params, lambda idx: (0.0, {"w": np.zeros(1)}), lambda: 1.0, 5, cfg,
                       np.random.default_rng(0))
    assert len(hist.val_loss) == 5


def test_divergence_reports_epoch():
    calls = {"n": 0}

    def grad(idx):
        calls["n"] += 1
        return (math.nan if calls["n"] > 2 else 1.0), {"w": np.zeros(1)}

    with pytest.raises(TrainingError, match="epoch 2"):
        optimize({"w": np.zeros(1)}, grad, lambda: 1.0, 4, TrainConfig(batch_size=2), np.random.default_rng(0))


def test_empty_training_data():
    schema = continuous_schema(2)
    empty = Dataset(np.empty((0, 2)), np.empty(0), np.empty(0), schema, scaled=True)
    with pytest.raises(ContractError):
        train(empty, init_model(schema, SMALL, 0), TrainConfig())


# ---------------------------------------------------------------- ensembling and evaluation

def test_ensemble_examples(rng):
    schema = continuous_schema(2)
    a = init_model(schema, SMALL, 0, base_rate=0.06)
    b = init_model(schema, SMALL, 1, base_rate=0.10)
    X = rng.uniform(-1, 1, (5, 2))
    np.testing.assert_allclose(ensemble_predict([a, b], X), 0.08, rtol=1e-14)
    m = random_model(mixed_schema())
    Xm = random_X(m.schema, 10, rng)
    np.testing.assert_allclose(ensemble_predict([m], Xm), [pin_forward(x, m) for x in Xm], rtol=1e-12)
    np.testing.assert_array_equal(ensemble_predict([m, m.copy()], Xm), ensemble_predict([m], Xm))


def test_ensemble_schema_mismatch():
    with pytest.raises(SchemaMismatchError):
        ensemble_predict([random_model(continuous_schema(2)), random_model(continuous_schema(3))], np.zeros((1, 2)))
    with pytest.raises(ContractError):
        ensemble_predict([], np.zeros((1, 2)))


def test_evaluate_perfect_and_non_negative(rng):
    schema = mixed_schema()
    m = random_model(schema)
    X = random_X(schema, 50, rng)
    v = rng.uniform(0.2, 1.0, 50)
    perfect = Dataset(X, np.exp(link(m, X)) * v, v, schema, scaled=True)
    assert evaluate(m, perfect) == pytest.approx(0.0, abs=1e-14)
    noisy = Dataset(X, rng.poisson(1.0, 50).astype(float), v, schema, scaled=True)
    assert evaluate(m, noisy) >= 0
    assert evaluate([m, m], noisy) == pytest.approx(evaluate(m, noisy), rel=1e-14)
