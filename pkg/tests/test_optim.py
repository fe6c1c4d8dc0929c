import math

import numpy as np
import pytest

from oracles import scalar_adam
from xcnn import layers as L
from xcnn.data import Dataset, prepare
from xcnn.graph import ArchitectureSpec, SuperlayerSpec, build, build_preset
from xcnn.init import xavier_bound, xavier_init
from xcnn.optim import (
    AdamState, TrainConfig, TrainingError, adam_step, batches, regime_for, train, write_history,
)


def tiny_graph(seed=0, classes=10):
    stage = [L.conv(4, 3), L.RELU, L.pool(4), L.drop(0.25)]
    spec = ArchitectureSpec("tiny", [SuperlayerSpec("A", (0, 1, 2), [stage])], [],
                            [L.GLOBAL_MAXPOOL, L.FLATTEN, L.fc(classes), L.SOFTMAX], classes, 3, 32)
    return build(spec, seed)


@pytest.fixture(scope="module")
def prepared(tiny_cifar):
    train_ds, test_ds, _ = prepare(*tiny_cifar)
    return train_ds, test_ds


# initialization ------------------------------------------------------------------------


def test_xavier_bound_dense():
    assert xavier_bound((512, 10)) == pytest.approx(0.10721, abs=1e-5)
    assert xavier_bound((64, 3, 3, 3)) == pytest.approx(math.sqrt(6 / (27 + 576)))


def test_xavier_samples(rng):
    bound = xavier_bound((512, 10))
    draws = np.concatenate([xavier_init((512, 10), rng, np.float64).ravel() for _ in range(20)])
    assert draws.size >= 10 ** 5
    assert abs(draws.mean()) < 3 * bound / math.sqrt(3 * draws.size)
    assert np.all(np.abs(draws) < bound)


def test_xavier_rejects_odd_shapes(rng):
    with pytest.raises(ValueError):
        xavier_init((3,), rng)


# Adam --------------------------------------------------------------------------------------


def test_adam_zero_gradient_is_a_no_op(rng):
    p = {"w": rng.standard_normal(5)}
    before = p["w"].copy()
    state = AdamState()
    for _ in range(50):
        adam_step(p, {"w": np.zeros(5)}, state)
    np.testing.assert_array_equal(p["w"], before)
    assert state.t == 50


def test_adam_missing_gradient_counts_as_zero(rng):
    p = {"w": rng.standard_normal(3)}
    before = p["w"].copy()
    adam_step(p, {}, AdamState())
    np.testing.assert_array_equal(p["w"], before)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.02, 1e-3, -50.0])
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": g}, AdamState(lr=1e-3))
    np.testing.assert_allclose(p["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_matches_scalar_oracle():
    expected = scalar_adam(lambda x: 2 * x, 1.0, 100, 0.1)
    p = {"x": np.array([1.0])}
    state = AdamState(lr=0.1)
    got = []
    for _ in range(100):
        adam_step(p, {"x": 2 * p["x"]}, state)
        got.append(p["x"][0])
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-15)
    # the iterate falls monotonically until it first overshoots zero
    xs = np.array([1.0] + got)
    first = int(np.argmax(xs <= 0)) if (xs <= 0).any() else len(xs)
    assert np.all(np.diff(xs[:first]) < 0)
    assert abs(got[-1]) < 1.0


@pytest.mark.parametrize("c", [0.5, 2.0, 7.0, 1e4])
def test_adam_first_step_is_scale_invariant(c, rng):
    g = rng.uniform(1, 3, 6) * rng.choice([-1, 1], 6)
    a, b = {"w": np.zeros(6)}, {"w": np.zeros(6)}
    adam_step(a, {"w": g}, AdamState())
    adam_step(b, {"w": c * g}, AdamState())
    assert np.abs(a["w"] - b["w"]).max() <= 2 * 1e-8 * 1e-3


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, AdamState())


# configuration --------------------------------------------------------------------------


def test_regimes():
    assert regime_for("x-kerasnet") == {"epochs": 200, "batch_size": 32, "l2_lambda": 0.0}
    assert regime_for("fitnet4")["l2_lambda"] == 5e-4
    cfg = TrainConfig.for_preset("x-fitnet4", epochs=3, lr=None)
    assert (cfg.epochs, cfg.batch_size, cfg.lr) == (3, 128, 1e-3)
    with pytest.raises(ValueError):
        regime_for("vgg")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_batches_cover_everything_and_avoid_singletons():
    for n, bs in [(10, 3), (33, 32), (64, 32), (1, 8)]:
        parts = batches(n, bs, np.random.default_rng(0))
        assert sorted(np.concatenate(parts).tolist()) == list(range(n))
        assert n == 1 or min(len(p) for p in parts) >= 2


# training ------------------------------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters(prepared):
    train_ds, test_ds = prepared
    g = tiny_graph()
    before = {n: p.data.copy() for n, p in g.params.items()}
    cfg = TrainConfig(epochs=1, batch_size=4, lr=0.0, augment=True)
    train(g, train_ds.take(np.arange(10)), test_ds, cfg)
    for n, p in g.params.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_first_batch_loss_is_near_log_k(prepared):
    train_ds, _ = prepared
    g = build_preset("kerasnet")
    probs = g.forward(train_ds.images[:32], "train", np.random.default_rng(0))
    loss, _ = L.softmax_ce(probs, train_ds.labels[:32])
    assert 2.0 <= loss.item() <= 2.6


def test_loss_trends_down(prepared):
    train_ds, test_ds = prepared
    g = build_preset("kerasnet", rng=0)
    res = train(g, train_ds.take(np.arange(96)), test_ds,
                TrainConfig(epochs=5, batch_size=32, augment=False, eval_every=0, test_subset=50))
    losses = [h["train_loss"] for h in res.history]
    assert losses[4] < losses[0]
    assert math.isnan(res.history[0]["test_accuracy"])
    assert 0 <= res.final_accuracy <= 1


def test_training_is_deterministic(prepared, tmp_path):
    train_ds, test_ds = prepared
    cfg = TrainConfig(epochs=2, batch_size=16, augment=True, l2_lambda=5e-4, seed=3)
    outs = []
    for k in range(2):
        res = train(tiny_graph(1), train_ds.take(np.arange(64)), test_ds, cfg, tmp_path / str(k))
        outs.append(res)
    assert outs[0].checkpoint.read_bytes() == outs[1].checkpoint.read_bytes()
    assert outs[0].history == outs[1].history
    for name in ("history.csv", "history.png", "checkpoint.xcnn"):
        assert (tmp_path / "0" / name).stat().st_size > 0
    other = train(tiny_graph(1), train_ds.take(np.arange(64)), test_ds,
                  TrainConfig(epochs=2, batch_size=16, seed=4), tmp_path / "2")
    assert other.checkpoint.read_bytes() != outs[0].checkpoint.read_bytes()


def test_history_csv_columns(tmp_path):
    path = write_history(tmp_path / "h.csv", [{"epoch": 1, "train_loss": 2.3, "test_accuracy": 0.1}])
    assert path.read_text().splitlines() == ["epoch,train_loss,test_accuracy", "1,2.300000,0.100000"]


def test_empty_dataset_rejected(prepared):
    train_ds, test_ds = prepared
    with pytest.raises(TrainingError, match="empty"):
        train(tiny_graph(), train_ds.take(np.arange(0)), test_ds, TrainConfig(epochs=1))


def test_non_finite_loss_names_epoch_and_batch(prepared):
    train_ds, test_ds = prepared
    bad = train_ds.take(np.arange(8))
    images = bad.images.copy()
    images[5] = 3e38  # overflows float32 inside the first conv
    bad = Dataset(images, bad.labels, bad.colourspace)
    with pytest.raises(TrainingError, match=r"epoch 1, batch \d"):
        train(tiny_graph(), bad, test_ds, TrainConfig(epochs=1, batch_size=4, augment=False))
