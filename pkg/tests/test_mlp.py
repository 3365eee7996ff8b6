import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difflab.errors import ConfigError
from difflab.mlp import Adam, Mlp, load_checkpoint, save_checkpoint, time_features
from difflab.rng import RngStream
from difflab.verify import gradient_check


def test_zero_network_outputs_zero():
    net = Mlp([3, 8, 8, 2], zero=True)
    assert np.array_equal(net(np.ones((4, 2)), 0.3), np.zeros((4, 2)))


def test_identity_rigged_network():
    # one hidden layer: h = relu(x), out = h
    net = Mlp([2, 1, 1], zero=True)
    net.weights[0][0, 0] = 1.0
    net.weights[1][0, 0] = 1.0
    x = np.array([[0.5], [2.0], [7.25]])
    assert np.array_equal(net(x, 0.9), x)


def test_time_features():
    f = time_features(0.25, 3, fourier=True)
    assert f.shape == (3, 17)
    assert f[0, 0] == 0.25
    assert np.allclose(f[0, 1:9], np.sin(np.pi * np.arange(1, 9) * 0.25))
    assert np.array_equal(time_features(np.array([0.1, 0.2]), 2), [[0.1], [0.2]])


def test_input_width_checked():
    with pytest.raises(ConfigError):
        Mlp([3, 4, 2])(np.zeros((1, 3)), 0.5)
    with pytest.raises(ConfigError):
        Mlp([3])


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), depth=st.integers(1, 3), width=st.integers(2, 32), d=st.integers(1, 2),
       fourier=st.booleans())
def test_backprop_matches_finite_differences(seed, depth, width, d, fourier):
    rng = RngStream(seed)
    n_in = d + 1 + (16 if fourier else 0)
    net = Mlp([n_in] + [width] * depth + [d], seed=seed, fourier=fourier)
    for b in net.biases:
        b += 0.1 * rng.normal(b.shape)
    x, t, y = rng.normal((6, d)), rng.uniform(6), rng.normal((6, d))
    assert gradient_check(net, x, t, y) <= 1e-4


def test_flat_roundtrip_and_copy():
    net = Mlp.for_dim(2, hidden=(5, 4), seed=3)
    flat = net.get_flat()
    assert flat.size == net.n_params == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2
    other = net.copy()
    assert np.array_equal(other.get_flat(), flat)
    with pytest.raises(ConfigError):
        net.set_flat(flat[:-1])


def test_adam_first_step_is_signed_lr():
    opt = Adam(3, lr=0.01)
    p = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
    assert np.allclose(p, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_minimises_quadratic():
    opt = Adam(2, lr=0.05)
    p = np.array([3.0, -2.0])
    for _ in range(2000):
        p = opt.step(p, 2 * p)
    assert np.abs(p).max() < 1e-3


def test_adam_save_load(tmp_path):
    opt = Adam(4, lr=0.02)
    opt.step(np.zeros(4), np.ones(4))
    opt.save(tmp_path / "adam.npz")
    back = Adam.load(tmp_path / "adam.npz")
    assert back.step_count == 1 and back.lr == 0.02
    assert np.array_equal(back.m, opt.m) and np.array_equal(back.v, opt.v)


def test_checkpoint_roundtrip(tmp_path):
    net = Mlp.for_dim(2, hidden=(6, 6), seed=4, fourier=True)
    path = tmp_path / "m.dlab"
    save_checkpoint(path, net, {"mode": "x0", "lr": 1e-3})
    back, meta = load_checkpoint(path)
    assert back.widths == net.widths and back.fourier
    assert np.array_equal(back.get_flat(), net.get_flat())
    assert meta["mode"] == "x0"
    x = np.ones((2, 2))
    assert np.array_equal(back(x, 0.5), net(x, 0.5))
    raw = path.read_bytes()
    assert raw[:4] == b"DLAB" and struct.unpack_from("<I", raw, 4)[0] == 1


def test_checkpoint_rejections(tmp_path):
    net = Mlp([2, 3, 1])
    path = tmp_path / "m.dlab"
    save_checkpoint(path, net)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.dlab"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ConfigError, match="magic"):
        load_checkpoint(bad)
    raw[4:8] = struct.pack("<I", 99)
    bad.write_bytes(bytes(raw))
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:30])
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
