import struct
from dataclasses import replace

import numpy as np
import pytest

from src.model import (AutoencoderConfig, NetworkConfig, ReceptiveField, ae_scores, backward, bn, build_autoencoder,
                       build_network, conv, default_autoencoder_config, desk_config, forward, load_checkpoint, lrelu,
                       paper_config, pool, receptive_field, save_checkpoint)


def test_desk_and_paper_feature_shapes():
    assert build_network(desk_config()).output_shape == (1, 16, 16)
    assert build_network(paper_config()).output_shape == (1, 56, 56)


@pytest.mark.parametrize("layers,expected", [
    ((conv(1),), ReceptiveField(1, 0.0, 3)),
    ((conv(1), pool()), ReceptiveField(2, 0.5, 4)),
])
def test_receptive_field_small_stacks(layers, expected):
    assert receptive_field(layers) == expected


def test_receptive_field_desk():
    rf = receptive_field(desk_config())
    assert (rf.stride, rf.size, rf.offset) == (4, 18, 1.5)
    assert rf.centre(2) == 9.5


def test_build_rejects_multichannel_head():
    cfg = NetworkConfig(layers=(conv(4), lrelu(), conv(2, kernel=1)), input_shape=(1, 8, 8))
    with pytest.raises(ValueError, match="1 output channel"):
        build_network(cfg)


def test_build_names_failing_layer():
    cfg = NetworkConfig(layers=(conv(4), pool(), conv(1, kernel=1)), input_shape=(1, 7, 7))
    with pytest.raises(ValueError, match="layer 1"):
        build_network(cfg)


def test_same_seed_same_weights():
    a = build_network(desk_config(seed=3))
    b = build_network(desk_config(seed=3))
    for x, y in zip(a.state_arrays(), b.state_arrays()):
        np.testing.assert_array_equal(x, y)
    assert a.centre == 0.0


def test_zero_head_weights_give_constant_centre(tiny_netcfg, rng):
    net = build_network(tiny_netcfg)
    net.layers[-1].weights[:] = 0.0
    net.layers[-1].bias[:] = 0.3
    z, _ = forward(net, rng.standard_normal((2, 3, 16, 16)))
    assert z.shape == (2, 1, 4, 4)
    assert np.all(z == 0.3)


def test_forward_rejects_wrong_input_shape(tiny_netcfg):
    net = build_network(tiny_netcfg)
    with pytest.raises(ValueError, match="does not match"):
        forward(net, np.zeros((1, 3, 8, 8)))


def test_centre_bias_gradient_is_sum_of_feature_gradients(tiny_netcfg, rng):
    net = build_network(tiny_netcfg)
    z, cache = forward(net, rng.standard_normal((3, 3, 16, 16)), "train")
    g = rng.standard_normal(z.shape)
    grads = backward(net, cache, g)
    last = len(net.layers) - 1
    assert grads[f"{last}.conv.bias"][0] == pytest.approx(g.sum())
    assert cache.grad_input.shape == (3, 3, 16, 16)


def test_frozen_centre_is_not_a_parameter(tiny_netcfg):
    from dataclasses import replace
    net = build_network(replace(tiny_netcfg, train_centre=False))
    last = len(net.layers) - 1
    names = [p.name for p in net.parameters()]
    assert f"{last}.conv.bias" not in names
    assert f"{last}.conv.weight" in names


def test_decay_flags(tiny_netcfg):
    params = {p.name: p.decay for p in build_network(tiny_netcfg).parameters()}
    assert params["0.conv.weight"] and params["0.conv.bias"]
    assert not params["1.bn.scale"] and not params["1.bn.shift"]
    assert not params["8.conv.bias"]


def test_backward_rejects_foreign_cache(tiny_netcfg, rng):
    a = build_network(tiny_netcfg)
    b = build_network(tiny_netcfg)
    _, cache = forward(a, rng.standard_normal((2, 3, 16, 16)), "train")
    with pytest.raises(ValueError, match="different network"):
        backward(b, cache, np.zeros((2, 1, 4, 4)))
    with pytest.raises(ValueError):
        backward(a, None, np.zeros((2, 1, 4, 4)))


def test_checkpoint_round_trip(tiny_netcfg, rng, tmp_path):
    net = build_network(tiny_netcfg)
    x = rng.standard_normal((4, 3, 16, 16))
    forward(net, x, "train")  # moves the running statistics
    net.layers[-1].bias[:] = 0.25
    path = str(tmp_path / "net.occm")
    save_checkpoint(path, net, {"mode": "ss_modified", "sigma": 2.5})

    loaded, extra = load_checkpoint(path)
    assert extra == {"mode": "ss_modified", "sigma": 2.5}
    assert loaded.config == net.config
    for a, b in zip(net.state_arrays(), loaded.state_arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(forward(net, x)[0], forward(loaded, x)[0])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.occm"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(str(path))


def _header_end(blob):
    return 12 + struct.unpack_from("<I", blob, 8)[0]


def test_checkpoint_rejects_truncated_file(tiny_netcfg, tmp_path):
    path = tmp_path / "net.occm"
    save_checkpoint(str(path), build_network(tiny_netcfg))
    blob = path.read_bytes()
    for cut in (10, _header_end(blob) - 3, _header_end(blob) + 2, len(blob) - 8):
        path.write_bytes(blob[:cut])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(str(path))
    path.write_bytes(blob + bytes(8))
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(str(path))


def test_checkpoint_rejects_tensors_of_another_shape(tiny_netcfg, tmp_path):
    wider = replace(tiny_netcfg, layers=(conv(5),) + tuple(tiny_netcfg.layers[1:]))
    save_checkpoint(str(tmp_path / "a.occm"), build_network(tiny_netcfg))
    save_checkpoint(str(tmp_path / "b.occm"), build_network(wider))
    a, b = (tmp_path / "a.occm").read_bytes(), (tmp_path / "b.occm").read_bytes()
    path = tmp_path / "spliced.occm"
    path.write_bytes(b[:_header_end(b)] + a[_header_end(a):])
    with pytest.raises(ValueError, match=r"tensor 0 has shape \(4, 3, 3, 3\), the network expects \(5, 3, 3, 3\)"):
        load_checkpoint(str(path))


def test_autoencoder_reconstructs_input_shape(rng):
    ae = build_autoencoder(default_autoencoder_config((3, 16, 16)))
    scores = ae_scores(ae, rng.standard_normal((3, 3, 16, 16)))
    assert scores.shape == (3,)
    assert np.all(scores >= 0)


def test_autoencoder_rejects_mismatched_decoder():
    cfg = AutoencoderConfig(encoder=(conv(4), bn(), lrelu(), pool()), decoder=(conv(3),), input_shape=(3, 8, 8))
    with pytest.raises(ValueError, match="reconstruction shape"):
        build_autoencoder(cfg)


def test_autoencoder_checkpoint_round_trip(rng, tmp_path):
    ae = build_autoencoder(default_autoencoder_config((1, 8, 8), seed=2))
    path = str(tmp_path / "ae.occm")
    save_checkpoint(path, ae, {"mode": "autoencoder"})
    loaded, extra = load_checkpoint(path)
    x = rng.standard_normal((2, 1, 8, 8))
    np.testing.assert_array_equal(ae_scores(ae, x), ae_scores(loaded, x))
    assert extra["mode"] == "autoencoder"
