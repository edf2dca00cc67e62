"""Optimizers, the training loop, and checkpoint persistence."""

import numpy as np
import pytest

from robustgrid.attacks import AttackSpec
from robustgrid.structures import LinearPixelModel, build_model, structure_from_preset
from robustgrid.tensor import Tensor
from robustgrid.training import (
    SGD,
    Adam,
    TrainConfig,
    Trainer,
    fit,
    load_checkpoint,
    save_checkpoint,
)

MICRO = dict(image=(1, 8, 8), patch=2, embed_dim=8, heads=2, mlp_ratio=2.0, classes=2)


def micro_model(seed=0, preset="(b)"):
    over = dict(MICRO)
    if preset == "(n)":
        over["stage_layers"] = (1, 1)
    return build_model(structure_from_preset(preset, "vit", **over), seed=seed)


def toy_batch(n=32, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 1, 8, 8))
    y = (x[:, 0, 0, 0] > 0.5).astype(np.int64)
    return x, y


# ---------------------------------------------------------------------------
# optimizer update rules


def test_sgd_single_step_on_quadratic():
    # f(w) = w^2 at w=1 with lr=0.1: gradient 2, momentum buffer v=2, w -> 0.8
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"w": w}, lr=0.1, momentum=0.9)
    w.grad = 2.0 * w.data
    opt.step()
    np.testing.assert_allclose(w.data, [0.8], atol=1e-15)
    # second step: v = 0.9*2 + g, with g = 2*0.8 = 1.6 -> v = 3.4, w = 0.8 - 0.34
    w.grad = 2.0 * w.data
    opt.step()
    np.testing.assert_allclose(w.data, [0.46], atol=1e-15)


def test_adam_first_step_is_signed_lr():
    # bias correction makes the first update lr * g / (|g| + eps) ~ lr * sign(g)
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    g = np.array([3.0, -0.5])
    w.grad = g.copy()
    opt.step()
    want = np.array([1.0, -2.0]) - 0.01 * g / (np.abs(g) + opt.eps)
    np.testing.assert_allclose(w.data, want, atol=1e-12)


def test_optimizer_skips_parameters_without_grad():
    w = Tensor(np.array([1.0]), requires_grad=True)
    frozen = Tensor(np.array([5.0]), requires_grad=True)
    opt = SGD({"w": w, "frozen": frozen}, lr=0.1)
    w.grad = np.array([1.0])
    opt.step()
    np.testing.assert_array_equal(frozen.data, [5.0])


# ---------------------------------------------------------------------------
# config validation


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(adversarial=AttackSpec(epsilon=0.03))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------------------
# the loop


def test_training_is_deterministic():
    x, y = toy_batch()
    runs = []
    for _ in range(2):
        model = micro_model(seed=4)
        cfg = TrainConfig(optimizer="adam", lr=1e-3, epochs=2, batch_size=8, seed=9)
        _, result = fit(model, x, y, cfg)
        runs.append((result.history, model.state_arrays()))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name])


def test_loss_decreases_on_learnable_data():
    x, y = toy_batch(n=64)
    model = micro_model(seed=1)
    cfg = TrainConfig(optimizer="adam", lr=3e-3, epochs=8, batch_size=16, seed=0)
    _, result = fit(model, x, y, cfg)
    assert not result.aborted
    first = np.mean(result.history[:4])
    last = np.mean(result.history[-4:])
    assert last < first


def test_zero_epsilon_adversarial_equals_natural():
    x, y = toy_batch()
    states = []
    for adv in (None, AttackSpec(epsilon=0.0)):
        model = micro_model(seed=2)
        cfg = TrainConfig(optimizer="sgd", lr=1e-2, epochs=1, batch_size=8,
                          seed=5, adversarial=adv)
        fit(model, x, y, cfg)
        states.append(model.state_arrays())
    for name in states[0]:
        np.testing.assert_array_equal(states[0][name], states[1][name])


def test_adversarial_training_differs_from_natural():
    x, y = toy_batch()
    states = []
    for adv in (None, AttackSpec(epsilon=0.05, steps=3, step_size=0.02)):
        model = micro_model(seed=2)
        cfg = TrainConfig(optimizer="sgd", lr=1e-2, epochs=1, batch_size=8,
                          seed=5, adversarial=adv)
        fit(model, x, y, cfg)
        states.append(model.state_arrays())
    assert any((states[0][n] != states[1][n]).any() for n in states[0])


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_nonfinite_loss_aborts_and_rolls_back():
    model = LinearPixelModel(seed=3)
    before = model.state_arrays()
    x = np.ones((8, 1, 4, 4))
    y = np.array([0, 1] * 4)
    cfg = TrainConfig(optimizer="sgd", lr=1e308, momentum=0.0, epochs=3,
                      batch_size=4, seed=0)
    trainer = Trainer(model, cfg)
    result = trainer.fit(x, y)
    assert result.aborted and "step" in result.reason
    assert result.completed_epochs == 0
    after = model.state_arrays()  # rolled back to the epoch boundary = init
    for name in before:
        np.testing.assert_array_equal(before[name], after[name])
    assert np.isfinite(model.forward(x[:2]).data).all()  # still usable


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_resume_is_bit_exact(tmp_path):
    x, y = toy_batch(n=48)

    model_a = micro_model(seed=6)
    cfg2 = TrainConfig(optimizer="adam", lr=1e-3, epochs=2, batch_size=8, seed=7)
    trainer_a = Trainer(model_a, cfg2)
    trainer_a.fit(x, y)

    model_b = micro_model(seed=6)
    cfg1 = TrainConfig(optimizer="adam", lr=1e-3, epochs=1, batch_size=8, seed=7)
    trainer_b = Trainer(model_b, cfg1)
    trainer_b.fit(x, y)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, model_b, trainer_b, extra={"note": "halfway"})

    model_c, trainer_c, extra = load_checkpoint(path)
    assert extra["note"] == "halfway"
    assert trainer_c.epoch == 1 and trainer_c.config == cfg1
    trainer_c.fit(x, y)  # one more epoch from the restored RNG/optimizer state

    sa, sc = model_a.state_arrays(), model_c.state_arrays()
    assert set(sa) == set(sc)
    for name in sa:
        np.testing.assert_array_equal(sa[name], sc[name])
    assert trainer_a.history == trainer_c.history


def test_checkpoint_preserves_normalization_and_structure(tmp_path):
    model = micro_model(seed=8, preset="(n)")
    model.set_normalization(np.array([0.3]), np.array([0.25]))
    trainer = Trainer(model, TrainConfig(epochs=1, batch_size=8, seed=1))
    x, y = toy_batch(n=16)
    trainer.fit(x, y)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, trainer)
    loaded, _, _ = load_checkpoint(path)
    assert loaded.spec == model.spec
    np.testing.assert_array_equal(loaded.normalization[0], model.normalization[0])
    np.testing.assert_array_equal(
        loaded.forward(x[:3]).data, model.forward(x[:3]).data)


def test_checkpoint_rejects_corrupt_files(tmp_path):
    model = micro_model(seed=0)
    path = tmp_path / "whole.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (tmp_path / "truncated.ckpt").write_bytes(raw[: len(raw) - 7])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "truncated.ckpt")
    (tmp_path / "notmagic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "notmagic.ckpt")
