import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difflab.core import (BaseDistribution, DiracMixture, forward_chain, forward_sample, make_dataset,
                          read_dataset, spiral_distance, spiral_point, write_dataset)
from difflab.errors import ConfigError
from difflab.rng import RngStream, as_stream
from difflab.schedule import Schedule


def test_rng_is_reproducible():
    a, b = RngStream(7), RngStream(7)
    assert np.array_equal(a.normal((3, 4)), b.normal((3, 4)))
    assert a.counter == b.counter == 12
    assert not np.array_equal(RngStream(8).uniform(5), RngStream(7).uniform(5))


def test_rng_normal_moments():
    z = RngStream(1).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01
    # fourth moment of a standard normal is 3
    assert abs((z**4).mean() - 3.0) < 0.05


def test_rng_spawn_children_differ():
    kids = RngStream(3).spawn(3)
    draws = [k.uniform(4) for k in kids]
    assert not np.array_equal(draws[0], draws[1])
    again = [k.uniform(4) for k in RngStream(3).spawn(3)]
    assert all(np.array_equal(a, b) for a, b in zip(draws, again))


def test_as_stream():
    s = RngStream(2)
    assert as_stream(s) is s
    assert as_stream(None).seed == 0
    assert as_stream(5).seed == 5


def test_mixture_validation():
    with pytest.raises(ConfigError):
        DiracMixture(np.zeros((2, 1)), np.array([0.7, 0.7]))
    with pytest.raises(ConfigError):
        DiracMixture(np.zeros((2, 1)), np.array([1.5, -0.5]))
    with pytest.raises(ConfigError):
        DiracMixture(np.array([[np.nan]]), np.ones(1))
    with pytest.raises(ConfigError):
        DiracMixture(np.zeros((2, 1)), np.ones(3) / 3)


def test_mixture_sample_frequencies():
    mix = DiracMixture(np.array([[0.0], [1.0], [2.0]]), np.array([0.2, 0.3, 0.5]))
    x = mix.sample(100_000, RngStream(0))
    freq = np.bincount(mix.nearest_index(x), minlength=3) / len(x)
    # binomial sd is at most 0.0016
    assert np.allclose(freq, [0.2, 0.3, 0.5], atol=0.008)


def test_mixture_is_immutable():
    mix = make_dataset("two-point", 2)
    with pytest.raises(ValueError):
        mix.atoms[0, 0] = 5.0


def test_dataset_roundtrip(tmp_path):
    mix = make_dataset("spiral", 7, seed=3)
    path = tmp_path / "atoms.ndjson"
    write_dataset(path, mix)
    back = read_dataset(path)
    assert np.array_equal(back.atoms, mix.atoms)
    assert np.array_equal(back.weights, mix.weights)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"w", "a"}


@pytest.mark.parametrize("text", ['{"w": 1.0}\n', "not json\n", '{"w": 0.3, "a": [1]}\n'])
def test_dataset_malformed(tmp_path, text):
    path = tmp_path / "bad.ndjson"
    path.write_text(text)
    with pytest.raises(ConfigError):
        read_dataset(path)


def test_spiral_atoms_lie_on_curve():
    mix = make_dataset("spiral", 40, seed=0)
    assert spiral_distance(mix.atoms).max() < 1e-4
    r = np.linalg.norm(mix.atoms, axis=1)
    assert r.min() >= 1 / 6 - 1e-12 and r.max() <= 1.0 + 1e-12


def test_spiral_point_endpoints():
    assert np.allclose(spiral_point(np.pi / 2), [0.0, 1 / 6])
    assert np.allclose(spiral_point(3 * np.pi), [-1.0, 0.0])


def test_make_dataset_errors():
    with pytest.raises(ConfigError):
        make_dataset("two-point", 3)
    with pytest.raises(ConfigError):
        make_dataset("nope", 3)
    with pytest.raises(ConfigError):
        make_dataset("custom-atoms", 2)


def test_annulus_base():
    base = BaseDistribution("annulus")
    x = base.sample(50_000, 2, RngStream(0))
    r = np.linalg.norm(x, axis=1)
    assert r.min() >= 1.5 and r.max() <= 2.0
    # uniform in area: P(r < sqrt((1.5^2 + 2^2)/2)) = 1/2
    assert abs((r**2 < (1.5**2 + 4.0) / 2).mean() - 0.5) < 0.01
    assert np.isneginf(base.log_density(np.zeros((1, 2))))[0]
    assert np.isclose(base.log_density(np.array([[1.75, 0.0]]))[0], -math.log(np.pi * (4.0 - 2.25)))


def test_gaussian_base_log_density():
    base = BaseDistribution("gaussian", variance=4.0)
    x = np.array([[1.0, -2.0]])
    want = -0.5 * 5.0 / 4.0 - math.log(2 * math.pi * 4.0)
    assert np.isclose(base.log_density(x)[0], want)


def test_forward_chain_statistics():
    sched = Schedule("ve", sigma_q=2.0, steps=50)
    x0 = np.full((20_000, 1), 3.0)
    ch = forward_chain(x0, 50, sched, RngStream(0))
    assert ch.states.shape == (51, 20_000, 1)
    assert np.array_equal(ch.states[0], x0)
    assert np.allclose(ch.states[1:] - ch.states[:-1], ch.increments)
    assert abs(ch.increments.var() - 4.0 / 50) < 0.002
    assert abs(ch.states[-1].var() - 4.0) < 0.1


def test_forward_chain_rejects_vp():
    with pytest.raises(ConfigError):
        forward_chain(np.zeros((1, 1)), 10, Schedule("vp"), RngStream(0))


@settings(max_examples=20, deadline=None)
@given(t=st.floats(0.05, 1.0), kind=st.sampled_from(["ve", "vp", "karras"]))
def test_forward_sample_moments(t, kind):
    sched = Schedule(kind, sigma_q=1.5)
    x = forward_sample(np.full((20_000, 1), 2.0), t, sched, RngStream(1))
    s, sig = sched.s(t), sched.sigma(t)
    assert abs(x.mean() - 2.0 * s) < 5 * s * sig / math.sqrt(20_000)
    assert abs(x.std() / (s * sig) - 1.0) < 0.03


def test_spiral_seed_determinism_and_exact_curve():
    a, b = make_dataset("spiral", 10, seed=7), make_dataset("spiral", 10, seed=7)
    assert np.array_equal(a.atoms, b.atoms)
    mix = make_dataset("spiral", 40, seed=0)
    r = np.linalg.norm(mix.atoms, axis=1)
    theta = 3 * np.pi * r
    assert np.abs(np.stack([r * np.cos(theta), r * np.sin(theta)], 1) - mix.atoms).max() < 1e-12


def test_two_point_dataset():
    mix = make_dataset("two-point", 2, a=-1.0, b=1.0)
    assert np.array_equal(mix.atoms[:, 0], [-1.0, 1.0]) and np.array_equal(mix.weights, [0.5, 0.5])


@pytest.mark.parametrize("kind", ["ve", "vp", "karras"])
def test_forward_sample_at_zero_is_identity(kind):
    x0 = np.array([[0.3, -1.0]])
    assert np.array_equal(forward_sample(x0, 0.0, Schedule(kind), RngStream(0)), x0)


def test_forward_sample_ve_moments():
    x = forward_sample(np.zeros((100_000, 1)), 0.25, Schedule("ve"), RngStream(2))
    assert 0.2425 <= x.var() <= 0.2575
    x = forward_sample(np.zeros((100_000, 1)), 1.0, Schedule("ve", sigma_q=2.0), RngStream(3))
    assert abs(x.mean()) <= 0.02


def test_forward_chain_laws():
    from scipy.stats import ks_2samp
    sched = Schedule("ve", sigma_q=1.0)
    x0 = np.zeros((10_000, 1))
    one = forward_chain(x0, 1, sched, RngStream(1))
    assert one.increments.shape == (1, 10_000, 1)
    direct = forward_sample(x0, 1.0, sched, RngStream(2))
    assert ks_2samp(one.states[-1, :, 0], direct[:, 0]).statistic < 0.02
    four = forward_chain(x0, 4, sched, RngStream(3)).states[-1, :, 0]
    sixteen = forward_chain(x0, 16, sched, RngStream(4))
    assert ks_2samp(four, sixteen.states[-1, :, 0]).statistic < 0.02
    assert np.allclose(sixteen.increments.sum(0), sixteen.states[-1] - x0, atol=1e-12, rtol=0)
