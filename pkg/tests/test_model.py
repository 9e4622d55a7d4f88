import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implantgen.nn import model as M
from implantgen.nn.layers import dice_loss
from implantgen.nn.model import (ACT, CONV, DOWN, UP, LayerSpec, Model, NetworkConfig,
                                 encoder_decoder, param_count)
from implantgen.nn.train import TrainConfig, TrainingDiverged, case_order, train
from implantgen.pipeline import init_model, output_prior
from implantgen.skull import DatasetConfig, make_dataset

from oracles import central_difference, max_relative_error


def tiny_config(dims=(4, 4, 4), channels=(2, 3), kernel=3):
    return encoder_decoder(dims, channels, kernel)


# --- configs and budgets ----------------------------------------------------------


def test_param_count_examples():
    assert param_count(NetworkConfig((LayerSpec(CONV, 3, 1, 8),))) == 224
    assert param_count(NetworkConfig(())) == 0


def recount(config):
    """Independent per-layer tally: weight tensor size plus one bias per output."""
    total = 0
    for layer in config.layers:
        if layer.kind == ACT:
            continue
        weights = 1
        for n in (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel,
                  layer.kernel):
            weights *= n
        total += weights + layer.out_channels
    return total


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 64), min_size=1, max_size=5), st.sampled_from([1, 3, 5, 7]))
def test_param_count_rederived(channels, kernel):
    cfg = encoder_decoder(None if False else (32, 32, 32), channels, kernel)
    assert param_count(cfg) == recount(cfg)
    model = Model.init(cfg)
    assert sum(p.size for p in model.parameters()) == param_count(cfg)
    for spec, w, b in zip(cfg.layers, model.weights, model.biases):
        if spec.kind == ACT:
            assert w is None and b is None
        else:
            assert w.shape == (spec.out_channels, spec.in_channels) + (spec.kernel,) * 3
            assert b.shape == (spec.out_channels,)


def test_kernel5_ladder_dwarfs_kernel3_reduced():
    n1 = encoder_decoder((16, 16, 16), (32, 64, 128), 5)
    n2 = encoder_decoder((16, 16, 16), (8, 16, 32), 3)
    assert param_count(n1) > 50 * param_count(n2)


@pytest.mark.parametrize("bad", [
    lambda: LayerSpec(CONV, 4, 1, 1),
    lambda: LayerSpec(CONV, 3, 0, 1),
    lambda: LayerSpec("pool", 3, 1, 1),
    lambda: NetworkConfig((LayerSpec(CONV, 3, 1, 2), LayerSpec(CONV, 3, 3, 1))),
    lambda: NetworkConfig((LayerSpec(DOWN, 3, 1, 1),)),
    lambda: NetworkConfig((LayerSpec(DOWN, 3, 1, 1), LayerSpec(UP, 3, 1, 1)), (5, 4, 4)),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValueError):
        bad()


def test_config_json_round_trip():
    cfg = tiny_config()
    assert NetworkConfig.from_json(cfg.to_json()) == cfg


# --- forward -------------------------------------------------------------------------


def test_zero_model_outputs_half():
    y = M.predict(Model.zeros(tiny_config()), np.ones((4, 4, 4)))
    assert np.array_equal(y, np.full((4, 4, 4), 0.5))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 4), min_size=1, max_size=3),
       st.sampled_from([1, 3]), st.integers(0, 1000))
def test_forward_preserves_shape(base, channels, kernel, seed):
    depth = len(channels) - 1
    dims = tuple(base * 2 ** depth * f for f in (1, 2, 1))
    model = Model.init(encoder_decoder(dims, channels, kernel), seed)
    x = np.random.default_rng(seed).random(dims)
    y = M.predict(model, x)
    assert y.shape == dims and np.all((y >= 0) & (y <= 1))
    assert np.array_equal(y, M.predict(model, x))


def test_forward_rejects_wrong_dims():
    with pytest.raises(ValueError):
        M.predict(Model.init(tiny_config()), np.zeros((4, 4, 8)))


def test_model_gradient_matches_finite_differences():
    cfg = tiny_config((4, 4, 2), (2, 3), 3)
    model = Model.init(cfg, 3)
    rng = np.random.default_rng(3)
    for b in model.biases:
        if b is not None:
            b[:] = rng.normal(size=b.shape) * 0.1
    x = rng.random((1, 4, 4, 2))
    g = (rng.random((1, 4, 4, 2)) < 0.5).astype(float)

    def loss():
        return dice_loss(M.forward(model, x), g)[0]

    y, cache = M.forward(model, x, keep=True)
    gws, gbs = M.backward(model, cache, y, dice_loss(y, g)[1])
    for i, w in enumerate(model.weights):
        if w is None:
            continue
        assert max_relative_error(gws[i], central_difference(loss, w)) <= 1e-5
        assert max_relative_error(gbs[i], central_difference(loss, model.biases[i])) <= 1e-5


# --- checkpoints -----------------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_checkpoint_round_trip(dtype, tmp_path):
    model = Model.init(tiny_config(), 9).copy(dtype)
    model.meta["note"] = "x"
    back = M.load_bytes(M.save_bytes(model))
    assert back == model and back.meta == model.meta
    assert back.weights[0].dtype == dtype
    M.save(tmp_path / "m.bin", model)
    assert M.load(tmp_path / "m.bin") == model
    assert M.save_bytes(back) == M.save_bytes(model)


def test_checkpoint_rejects_garbage():
    blob = M.save_bytes(Model.init(tiny_config()))
    with pytest.raises(ValueError):
        M.load_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(ValueError):
        M.load_bytes(blob[:-8])


def test_init_is_seeded():
    assert Model.init(tiny_config(), 1) == Model.init(tiny_config(), 1)
    assert Model.init(tiny_config(), 1) != Model.init(tiny_config(), 2)


# --- training --------------------------------------------------------------------------


def toy_pairs(n=3, dims=(4, 4, 4)):
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(n):
        x = (rng.random(dims) < 0.5).astype(float)[None]
        pairs.append((x, (rng.random(dims) < 0.3).astype(float)))
    return pairs


def test_zero_learning_rate_keeps_parameters():
    model = Model.init(tiny_config(), 0)
    trained, curve = train(model, toy_pairs(), TrainConfig(steps=1, lr=0.0))
    assert trained == model
    assert len(curve) == 1


def test_training_is_deterministic():
    model = Model.init(tiny_config(), 0)
    tc = TrainConfig(steps=12, lr=1e-2, seed=4, log_every=3)
    a, ca = train(model, toy_pairs(), tc)
    b, cb = train(model, toy_pairs(), tc)
    assert ca == cb and a == b
    assert [s for s, _ in ca] == [3, 6, 9, 12]
    # the input model is left alone
    assert model == Model.init(tiny_config(), 0)


def test_case_order_covers_every_case_each_epoch():
    order = case_order(5, 12, 1)
    assert len(order) == 12
    assert sorted(order[:5]) == list(range(5)) and sorted(order[5:10]) == list(range(5))


def test_divergence_guard():
    model = Model.init(tiny_config(), 0)
    model.weights[0][:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(model, toy_pairs(), TrainConfig(steps=2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        train(Model.init(tiny_config()), [], TrainConfig())


@pytest.mark.slow
def test_overfits_single_small_case():
    cfg = DatasetConfig(dims=(16, 16, 16), radii=(6.0, 6.5, 5.5), thickness=2.0,
                        sphere_radius=(3.0, 4.0))
    case = make_dataset(1, config=cfg, seed=0)[0]
    target = case.implant.data.astype(float)
    # at 16^3 a 3x3x3 ladder sees too little context to place the defect;
    # the kernel-5 N1 shape does
    net = encoder_decoder((16, 16, 16), (16, 32, 64), 5)
    model = init_model(net, 0, output_prior([target]))
    trained, curve = train(model, [(case.defective.data[None], target)],
                           TrainConfig(steps=500, lr=1e-3, log_every=50))
    final = dice_loss(M.forward(trained, case.defective.data[None]), target[None])[0]
    assert final <= 0.05, curve
