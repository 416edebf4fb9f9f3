import math

import numpy as np
import pytest

from gradforge import autodiff as ad
from gradforge import data, training
from gradforge.autodiff import Tape
from gradforge.nn import LayerSpec, ModelConfig, Network, build_classifier, build_generator, forward
from gradforge.training import AdamState, TrainConfig

from oracles import ReferenceAdam

CFG8 = ModelConfig(8, 3, 3, 0.25, seed=0)


@pytest.fixture(scope="module")
def toy():
    ds = data.synth_dataset("gaussian_blobs", 144, 8, 3, 3, 0.15, seed=1)
    return ds.subset(np.arange(96)), ds.subset(np.arange(96, 144))


def const_net(probs_logits, hw=8, c=3):
    """Classifier whose output ignores the input: zero weights, bias = logits."""
    k = len(probs_logits)
    layers = [LayerSpec("conv1x1", k), LayerSpec("global_avg_pool"), LayerSpec("softmax")]
    return Network("classifier", ModelConfig(hw, c, k, 1.0), layers,
                   {"conv0.w": np.zeros((1, 1, c, k)), "conv0.b": np.asarray(probs_logits, float)})


def zero_generator(cfg=CFG8):
    G = build_generator(cfg)
    last = len(G.conv_layers) - 1
    G.params[f"conv{last}.w"] = np.zeros_like(G.params[f"conv{last}.w"])
    return G


def test_default_config_values():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.k, cfg.lr_f, cfg.lr_g) == (0.5, 1, 1e-3, 1e-6)
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert cfg.patience == 10


def test_config_validation():
    for bad in (dict(alpha=1.5), dict(c_g=0), dict(k=0), dict(variant="nope"), dict(epsilon=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_loss_J_examples():
    x = np.zeros((2, 8, 8, 3))
    assert training.loss_J(const_net([0.0] * 10), x, [3, 7]).item() == pytest.approx(math.log(10), abs=1e-12)
    confident = const_net([0.0, 800.0])
    assert training.loss_J(confident, x, [1, 1]).item() == 0.0


def test_loss_J_gradient_check():
    F = build_classifier(CFG8)
    x = np.random.default_rng(0).random((3, 8, 8, 3))
    err = ad.check_gradient(lambda xt: training.loss_J(F, xt, [0, 1, 2]), x)
    assert err < 1e-6


def test_loss_G_with_zero_generator_equals_label_probability():
    F = build_classifier(CFG8)
    x = np.random.default_rng(0).random((4, 8, 8, 3))
    y = np.array([0, 1, 2, 0])
    expect = forward(F, x).data[np.arange(4), y].mean()
    got = training.loss_G(F, zero_generator(), x, y, c_g=3.0).item()
    assert got == pytest.approx(expect, abs=1e-15)


def test_loss_G_arithmetic():
    # label probability 0.4 and squared norm 0.25 give 0.4 + 0.1 * 0.25
    F = const_net(np.log([0.4, 0.6]), hw=1, c=1)
    cfg = ModelConfig(1, 1, 2, 1.0)
    G = Network("generator", cfg, [LayerSpec("conv1x1", 1), LayerSpec("tanh")],
                {"conv0.w": np.zeros((1, 1, 1, 1)), "conv0.b": np.array([math.atanh(0.5)])})
    got = training.loss_G(F, G, np.zeros((3, 1, 1, 1)), [0, 0, 0], c_g=0.1).item()
    assert got == pytest.approx(0.425, abs=1e-12)


def test_loss_G_leaves_classifier_without_gradient():
    F, G = build_classifier(CFG8), build_generator(CFG8)
    tape = Tape()
    f_params = F.bind(tape)
    g_params = G.bind(tape)
    loss = training.loss_G(F, G, np.random.default_rng(0).random((2, 8, 8, 3)), [0, 1], 1.0, g_params)
    ad.backward(tape, loss)
    assert all(np.all(t.grad == 0) for t in f_params.values())
    assert any(np.any(t.grad != 0) for t in g_params.values())


def test_loss_F_gat_examples():
    F = build_classifier(CFG8)
    G = build_generator(CFG8)
    x = np.random.default_rng(1).random((4, 8, 8, 3))
    y = np.array([2, 1, 0, 1])
    base = training.loss_J(F, x, y).item()
    assert training.loss_F_gat(F, G, x, y, 1.0).item() == base
    for alpha in (0.0, 0.3, 0.5):
        assert training.loss_F_gat(F, zero_generator(), x, y, alpha).item() == pytest.approx(base, abs=1e-12)
    with pytest.raises(ValueError):
        training.loss_F_gat(F, G, x, y, 1.2)


def test_mix_arithmetic():
    out = training._mix(0.5, ad.Tensor(1.0), ad.Tensor(3.0))
    assert out.item() == 2.0


def test_loss_F_gat_leaves_generator_without_gradient():
    F, G = build_classifier(CFG8), build_generator(CFG8)
    tape = Tape()
    f_params = F.bind(tape)
    g_params = G.bind(tape)
    loss = training.loss_F_gat(F, G, np.random.default_rng(0).random((2, 8, 8, 3)), [0, 1], 0.5, f_params)
    ad.backward(tape, loss)
    assert all(np.all(t.grad == 0) for t in g_params.values())
    assert any(np.any(t.grad != 0) for t in f_params.values())


@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_loss_F_fg_examples(norm):
    F = build_classifier(CFG8)
    x = np.random.default_rng(2).random((4, 8, 8, 3))
    y = np.array([0, 1, 2, 2])
    base = training.loss_J(F, x, y).item()
    assert training.loss_F_fg(F, x, y, 0.5, 0.0, norm).item() == pytest.approx(base, abs=1e-12)
    assert training.loss_F_fg(F, x, y, 1.0, 0.3, norm).item() == base
    assert training.loss_F_fg(F, x, y, 0.5, 0.3, norm).item() >= 0.5 * base
    with pytest.raises(ValueError):
        training.loss_F_fg(F, x, y, 0.5, 0.3, "l1")


def test_adam_first_step_magnitude():
    params = {"w": np.array([1.0, -2.0])}
    training.adam_step(params, {"w": np.array([0.5, 0.5])}, AdamState(), lr=1e-3)
    delta = params["w"] - np.array([1.0, -2.0])
    assert np.all(delta < 0)
    assert np.all((np.abs(delta) >= 0.99e-3) & (np.abs(delta) <= 1e-3))


def test_adam_zero_gradient_is_fixed_point():
    start = np.array([0.3, -0.7, 2.0])
    params = {"w": start.copy()}
    state = AdamState()
    for _ in range(50):
        training.adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
    assert params["w"].tobytes() == start.tobytes()
    assert state.t == 50


def test_adam_matches_reference_implementation():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(3)
    params = {"w": theta.copy()}
    state = AdamState()
    ref = ReferenceAdam(lr=0.01)
    ref_theta = theta.copy()
    for step in range(10):
        g = rng.standard_normal(3)
        training.adam_step(params, {"w": g}, state, lr=0.01)
        ref_theta = ref.step(ref_theta, g)
        assert state.t == step + 1
        np.testing.assert_allclose(params["w"], ref_theta, rtol=0, atol=1e-12)


def test_adam_rejects_non_finite_gradient_by_name():
    params = {"conv3.b": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="conv3.b"):
        training.adam_step(params, {"conv3.b": np.array([0.0, np.nan])}, AdamState(), 1e-3)
    assert np.all(params["conv3.b"] == 0)


def test_baseline_fits_separable_two_class_set():
    ds = data.synth_dataset("gaussian_blobs", 64, 8, 3, 2, 0.0, seed=4)
    F = build_classifier(ModelConfig(8, 3, 2, 0.25, seed=1))
    cfg = TrainConfig(batch_size=16, epochs=50, patience=50, lr_f=3e-3, seed=0)
    F, hist = training.train_supervised(F, ds, ds, cfg)
    assert len(hist) <= 50
    _, acc = training.evaluate(F, ds)
    assert acc == 1.0


def test_history_records_and_determinism(toy):
    train, val = toy
    cfg = TrainConfig(batch_size=16, epochs=3, seed=5)
    F0 = build_classifier(CFG8)
    Fa, ha = training.train_supervised(F0, train, val, cfg)
    Fb, hb = training.train_supervised(F0, train, val, cfg)
    assert len(ha) == 3 and [r.epoch for r in ha.records] == [0, 1, 2]
    assert ha.rows() == hb.rows()
    assert Fa.get_flat().tobytes() == Fb.get_flat().tobytes()


def test_first_epoch_reduces_gat_objective():
    ds = data.synth_dataset("gaussian_blobs", 144, 8, 3, 3, 0.0, seed=1)
    train, val = ds.subset(np.arange(96)), ds.subset(np.arange(96, 144))
    F0, G0 = build_classifier(CFG8), build_generator(CFG8)
    cfg = TrainConfig(variant="gat", batch_size=8, epochs=1, lr_f=3e-3, lr_g=1e-3, c_g=0.1)
    init = training.loss_F_gat(F0, G0, train.images, train.labels, cfg.alpha).item()
    _, _, hist = training.train_gat(F0, G0, train, val, cfg)
    assert hist.records[0].train_loss < init


def test_fg_l2_with_zero_eps_matches_baseline(toy):
    train, val = toy
    cfg = TrainConfig(batch_size=16, epochs=2, seed=2)
    F0 = build_classifier(CFG8)
    Fa, ha = training.train_supervised(F0, train, val, cfg)
    Fb, hb = training.train_supervised(F0, train, val, cfg.replace(variant="fg_l2", epsilon=0.0))
    assert ha.rows() == hb.rows()
    np.testing.assert_allclose(Fa.get_flat(), Fb.get_flat(), rtol=0, atol=1e-12)


def test_early_stopping_returns_best_checkpoint(toy):
    train, val = toy
    # a large learning rate makes validation loss bounce around
    cfg = TrainConfig(batch_size=16, epochs=8, patience=3, lr_f=2e-2, seed=1)
    F, hist = training.train_supervised(build_classifier(CFG8), train, val, cfg)
    best = min(r.val_loss for r in hist.records)
    assert hist.records[hist.best_epoch].val_loss == best
    assert training.evaluate(F, val)[0] == pytest.approx(best, abs=1e-12)
    assert all(best <= r.val_loss for r in hist.records[hist.best_epoch:])
    assert len(hist) <= hist.best_epoch + 1 + cfg.patience


def test_train_supervised_rejects_gat_variant(toy):
    train, val = toy
    with pytest.raises(ValueError):
        training.train_supervised(build_classifier(CFG8), train, val, TrainConfig(variant="gat"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_history(toy):
    train, val = toy
    F = build_classifier(CFG8)
    F.params["conv0.w"] = F.params["conv0.w"] * np.inf
    with pytest.raises(training.TrainingDiverged) as info:
        training.train_supervised(F, train, val, TrainConfig(batch_size=16, epochs=2))
    assert isinstance(info.value.history, training.TrainHistory)


def test_gat_freezing_contract(toy):
    train, val = toy
    F0, G0 = build_classifier(CFG8), build_generator(CFG8)
    seen = {"generator": 0, "classifier": 0}
    prev = {"F": F0.get_flat(), "G": G0.get_flat()}

    def watch(phase, epoch, step, F, G):
        f, g = F.get_flat(), G.get_flat()
        if phase == "generator":
            assert f.tobytes() == prev["F"].tobytes()
            assert g.tobytes() != prev["G"].tobytes()
        else:
            assert g.tobytes() == prev["G"].tobytes()
            assert f.tobytes() != prev["F"].tobytes()
        seen[phase] += 1
        prev["F"], prev["G"] = f, g

    cfg = TrainConfig(variant="gat", batch_size=32, epochs=1, k=2, lr_g=1e-3, c_g=0.1)
    training.train_gat(F0, G0, train, val, cfg, callback=watch)
    assert seen == {"generator": 6, "classifier": 3}


def test_gat_alpha_one_reproduces_baseline_updates(toy):
    train, val = toy
    F0, G0 = build_classifier(CFG8), build_generator(CFG8)
    base_cfg = TrainConfig(batch_size=16, epochs=2, seed=3)
    Fb, hb = training.train_supervised(F0, train, val, base_cfg)
    Fg, _, hg = training.train_gat(F0, G0, train, val,
                                   base_cfg.replace(variant="gat", alpha=1.0, lr_g=1e-3))
    assert Fg.get_flat().tobytes() == Fb.get_flat().tobytes()
    assert [r[:4] for r in hg.rows()] == [r[:4] for r in hb.rows()]


def test_gat_alpha_one_bitwise_per_step(toy):
    train, val = toy
    F0, G0 = build_classifier(CFG8), build_generator(CFG8)
    cfg = TrainConfig(batch_size=32, epochs=1, seed=4)
    base_steps, gat_steps = [], []
    training.train_supervised(F0, train, val, cfg,
                              callback=lambda ph, e, s, F, G: base_steps.append(F.get_flat()))
    training.train_gat(F0, G0, train, val, cfg.replace(variant="gat", alpha=1.0, lr_g=1e-3),
                       callback=lambda ph, e, s, F, G: ph == "classifier" and gat_steps.append(F.get_flat()))
    assert len(base_steps) == len(gat_steps) == 3
    for a, b in zip(base_steps, gat_steps):
        assert a.tobytes() == b.tobytes()


def test_gat_determinism(toy):
    train, val = toy
    F0, G0 = build_classifier(CFG8), build_generator(CFG8)
    cfg = TrainConfig(variant="gat", batch_size=32, epochs=2, lr_g=1e-3, c_g=0.1, seed=9)
    Fa, Ga, ha = training.train_gat(F0, G0, train, val, cfg)
    Fb, Gb, hb = training.train_gat(F0, G0, train, val, cfg)
    assert ha.rows() == hb.rows()
    assert Fa.get_flat().tobytes() == Fb.get_flat().tobytes()
    assert Ga.get_flat().tobytes() == Gb.get_flat().tobytes()
    assert all(r.mean_power > 0 for r in ha.records)


@pytest.fixture(scope="module")
def frozen_classifier(toy):
    train, val = toy
    F, _ = training.train_supervised(build_classifier(CFG8), train, val,
                                     TrainConfig(batch_size=16, epochs=15, lr_f=3e-3))
    return F


def test_generator_only_weakens_frozen_classifier(toy, frozen_classifier):
    train, val = toy
    F = frozen_classifier
    before = F.get_flat()
    cfg = TrainConfig(variant="gat", batch_size=16, epochs=6, lr_g=1e-3, c_g=0.05, patience=6)
    G0 = build_generator(CFG8)
    init_loss = training.mean_loss_G(F, G0, val, cfg.c_g)
    G, hist = training.train_generator_only(G0, F, train, val, cfg)
    assert F.get_flat().tobytes() == before.tobytes()
    clean = forward(F, val.images).data[np.arange(len(val)), val.labels].mean()
    delta = np.concatenate([training.perturb.input_gradient_prob(F, val.images, val.labels)])
    adv_in = val.images + forward(G, delta).data
    adv = forward(F, adv_in).data[np.arange(len(val)), val.labels].mean()
    assert adv < clean
    assert training.mean_loss_G(F, G, val, cfg.c_g) <= init_loss


def test_power_shrinks_as_c_g_grows(toy, frozen_classifier):
    train, val = toy
    powers = []
    for c_g in (0.01, 0.1, 1.0):
        cfg = TrainConfig(variant="gat", batch_size=16, epochs=4, lr_g=1e-3, c_g=c_g, patience=4)
        G, _ = training.train_generator_only(build_generator(CFG8), frozen_classifier, train, val, cfg)
        powers.append(training.mean_gat_power(G, frozen_classifier, val))
    assert powers[0] >= powers[1] >= powers[2]
