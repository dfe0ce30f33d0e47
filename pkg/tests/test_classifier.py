import numpy as np
import pytest

from cnnforge.classifier import (
    FULL_SCALE_MAX_EPOCHS,
    MLPClassifier,
    TrainConfig,
    init_model,
    load_model,
    loss_and_grad,
    numerical_gradient_check,
    predict,
    save_model,
    train,
    train_arrays,
    zero_model,
)
from cnnforge.errors import ContractError, InputError
from cnnforge.imaging import FeatureMap


def separable(n, shape=(6, 6), seed=0, gap=0.4):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(0, 0.2, (n,) + shape) + np.where(y == 1, gap, -gap)[:, None, None]
    return np.clip(X, -1, 1), y.astype(float)


def test_published_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.momentum) == (10, 3e-4, 0.9)
    assert FULL_SCALE_MAX_EPOCHS == 900


def test_learns_separable_data():
    X, y = separable(80)
    model = train_arrays(X, y, TrainConfig(max_epochs=60))
    acc = np.mean((model.predict_proba(X) >= 0.5) == (y == 1))
    assert acc >= 0.99
    assert model.loss_curve[-1] < model.loss_curve[0]
    Xt, yt = separable(20, seed=1)
    held = predict(model, FeatureMap(Xt[1], "L", "t", 1.0))
    assert yt[1] == 1 and held.p_class1 > 0.5 and held.hard_label == "class1"


def test_zero_epochs_returns_initialization():
    X, y = separable(10)
    cfg = TrainConfig(max_epochs=0, rng_seed=4)
    model = train_arrays(X, y, cfg)
    assert model.loss_curve == []
    ref = init_model(X.shape[1:], cfg)
    assert all(np.array_equal(model.params()[k], ref.params()[k]) for k in model.PARAMS)


def test_deterministic_for_fixed_seed():
    X, y = separable(30)
    a = train_arrays(X, y, TrainConfig(max_epochs=5, rng_seed=3))
    b = train_arrays(X, y, TrainConfig(max_epochs=5, rng_seed=3))
    assert all(np.array_equal(a.params()[k], b.params()[k]) for k in a.PARAMS)


def test_single_class_is_degenerate():
    X, _ = separable(10)
    with pytest.raises(ContractError, match="degenerate training set"):
        train_arrays(X, np.ones(10))


def test_divergent_training_is_reported(monkeypatch):
    import cnnforge.classifier as clf

    real = clf.loss_and_grad

    def poisoned(model, X, y):
        _, grads = real(model, X, y)
        return float("nan"), grads

    monkeypatch.setattr(clf, "loss_and_grad", poisoned)
    X, y = separable(20)
    with pytest.raises(ContractError, match="training diverged at epoch 0"):
        train_arrays(X, y, TrainConfig(max_epochs=3))


def test_early_stopping_restores_best_validation_model():
    # labels carry no signal, so validation loss rises once the net memorizes
    rng = np.random.default_rng(8)
    X, y = rng.uniform(-1, 1, (40, 6, 6)), np.arange(40) % 2
    Xv, yv = rng.uniform(-1, 1, (20, 6, 6)), np.arange(20) % 2
    model = train_arrays(X, y, TrainConfig(max_epochs=400, early_stop_patience=5, learning_rate=3e-3), Xv, yv)
    assert len(model.val_curve) < 400
    best = min(model.val_curve)
    z = model.logits(Xv)
    assert np.mean(np.logaddexp(0, z) - yv * z) == pytest.approx(best)


def test_train_on_feature_maps():
    X, y = separable(20)
    samples = [(FeatureMap(x, f"L{i}", "t", 1.0), "class1" if t else "class2") for i, (x, t) in enumerate(zip(X, y))]
    model = train(samples, TrainConfig(max_epochs=40))
    assert model.input_shape == (6, 6)
    assert np.mean([predict(model, f).hard_label == lab for f, lab in samples]) >= 0.95


def test_zero_parameters_predict_one_half():
    c = predict(zero_model((4, 4)), FeatureMap(np.full((4, 4), 0.7), "L", "t", 1.0))
    assert c.p_class1 == 0.5
    assert c.hard_label == "class1"


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        predict(zero_model((4, 4)), FeatureMap(np.zeros((5, 4)), "L", "t", 1.0))


def test_gradient_check_random_init():
    model = init_model((5, 5), TrainConfig(hidden_units=8, rng_seed=1))
    x = np.random.default_rng(2).uniform(-1, 1, (5, 5))
    assert numerical_gradient_check(model, (x, "class1"), 1e-5) <= 1e-4


def test_zero_input_gives_zero_first_layer_gradient():
    model = init_model((3, 3), TrainConfig(hidden_units=4))
    _, grads = loss_and_grad(model, np.zeros((1, 3, 3)), np.array([1.0]))
    assert not grads["W1"].any()


def test_gradient_check_epsilon_consistency():
    model = init_model((4, 4), TrainConfig(hidden_units=6, rng_seed=3))
    x = (np.random.default_rng(4).uniform(-1, 1, (4, 4)), "class2")
    coarse = numerical_gradient_check(model, x, 1e-4)
    fine = numerical_gradient_check(model, x, 1e-6)
    # truncation error dominates at the coarse step, round-off at the fine one;
    # both must reach the same verdict
    assert coarse <= 1e-4 and fine <= 1e-4


def test_gradient_check_epsilon_bounds():
    with pytest.raises(ContractError):
        numerical_gradient_check(zero_model((2, 2)), (np.zeros((2, 2)), "class1"), 1e-2)


def test_model_round_trip(tmp_path):
    X, y = separable(20)
    model = train_arrays(X, y, TrainConfig(max_epochs=3))
    save_model(model, tmp_path / "m.npz")
    back = load_model(tmp_path / "m.npz")
    assert back.input_shape == model.input_shape and back.config == model.config
    assert all(np.array_equal(back.params()[k], model.params()[k]) for k in model.PARAMS)
    assert back.loss_curve == model.loss_curve


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "m.npz").write_bytes(b"not a model")
    with pytest.raises(InputError):
        load_model(tmp_path / "m.npz")


def test_adapter_requires_fit():
    with pytest.raises(ContractError):
        MLPClassifier().predict_proba(np.zeros((1, 2, 2)))


@pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": 0}, {"momentum": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ContractError):
        TrainConfig(**kw)
