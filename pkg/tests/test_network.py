import numpy as np
import pytest

from posedesc import network
from posedesc.autodiff import ShapeError
from posedesc.network import ConfigError

SMALL = dict(coarse_dim=8, fine_dim=8, widths=(4, 6, 8, 8), fine_hidden=4)


def test_map_shapes_and_strides():
    net = network.build(network.NetConfig(**SMALL), seed=0)
    maps = net(np.random.default_rng(0).random((32, 48)))
    assert maps.coarse.shape == (8, 4, 6)
    assert maps.fine.shape == (8, 16, 24)
    assert (maps.coarse_stride, maps.fine_stride, maps.image_size) == (8, 2, (32, 48))


def test_same_seed_same_weights_and_output():
    img = np.random.default_rng(1).random((16, 16))
    a = network.build(network.NetConfig(**SMALL), seed=3)
    b = network.build(network.NetConfig(**SMALL), seed=3)
    np.testing.assert_array_equal(a(img).fine.data, b(img).fine.data)
    c = network.build(network.NetConfig(**SMALL), seed=4)
    assert not np.allclose(a(img).fine.data, c(img).fine.data)


def test_context_layers_add_parameters_and_change_fingerprint():
    one = network.build(network.NetConfig(**SMALL))
    three = network.build(network.NetConfig(**SMALL, context_layers=3))
    assert three.n_params - one.n_params == 2 * (8 * 8 * 9 + 8)
    assert one.fingerprint() != three.fingerprint()
    assert three(np.zeros((16, 16))).coarse.shape == (8, 2, 2)


@pytest.mark.parametrize("kw", [
    dict(in_channels=2), dict(coarse_stride=6), dict(coarse_stride=2, fine_stride=2),
    dict(coarse_dim=4), dict(widths=(4, 6, 8)), dict(window_fraction=0.0),
    dict(temperature=0.0), dict(context_layers=0),
])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        network.build(network.NetConfig(**{**SMALL, **kw}))


def test_bad_image_shape():
    net = network.build(network.NetConfig(**SMALL))
    with pytest.raises(ShapeError):
        net(np.zeros((20, 16)))
    with pytest.raises(ShapeError):
        net(np.zeros((3, 16, 16)))


def test_state_dict_round_trip_and_mismatch():
    a = network.build(network.NetConfig(**SMALL), seed=0)
    b = network.build(network.NetConfig(**SMALL), seed=1)
    b.load_state_dict(a.state_dict())
    img = np.random.default_rng(2).random((16, 16))
    np.testing.assert_array_equal(a(img).coarse.data, b(img).coarse.data)
    state = a.state_dict()
    state.pop("fine_head.bias")
    with pytest.raises(ConfigError):
        b.load_state_dict(state)


def test_config_dict_round_trip():
    cfg = network.NetConfig(**SMALL, context_layers=2, temperature=0.5)
    assert network.NetConfig.from_dict(cfg.to_dict()) == cfg


def test_descriptor_norms():
    net = network.build(network.NetConfig(**SMALL))
    maps = net(np.random.default_rng(5).random((32, 32)))
    kp = np.array([[0.0, 0.0], [10.5, 3.25], [31.0, 31.0]])
    d = network.extract_descriptors(maps, kp)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), np.sqrt(2))
    f = network.extract_descriptors(maps, kp, use_coarse=False)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0)
    np.testing.assert_allclose(network.extract_descriptor(maps, kp[1]), d[1])
    with pytest.raises(ValueError):
        network.extract_descriptors(maps, [[32.0, 0.0]])
