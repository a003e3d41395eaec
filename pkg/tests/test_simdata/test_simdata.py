from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from igpode import diffmath as dm
from igpode.errors import ConfigError
from igpode.errors import FormatError
from igpode.errors import SimulationError
from igpode.simdata import BallsConfig
from igpode.simdata import BallsSimulator
from igpode.simdata import ChargesConfig
from igpode.simdata import ChargesSimulator
from igpode.simdata import Dataset
from igpode.simdata import NoiseLevel
from igpode.simdata import Split
from igpode.simdata import read_dataset
from igpode.simdata import simulate_balls
from igpode.simdata import simulate_charges
from igpode.simdata import write_dataset

SMALL_BALLS = BallsConfig(num_train=3, num_test=2, num_steps=20, inner_steps=10)
SMALL_CHARGES = ChargesConfig(
    num_objects=3,
    num_train=2,
    num_test=2,
    num_steps=10,
    inner_steps=10,
)


# --------------------------------------------------------------------------------
# Bouncing balls
# --------------------------------------------------------------------------------


def test_ball_free_flight():
    sim = BallsSimulator(BallsConfig(num_objects=1))
    s, v = sim.run(np.zeros((1, 2)), np.array([[0.1, 0.05]]), num_steps=5)
    times = 0.5 * np.arange(5)
    np.testing.assert_allclose(s[:, 0], times[:, None] * [0.1, 0.05], atol=1e-12)
    np.testing.assert_array_equal(v[:, 0], np.tile([0.1, 0.05], (5, 1)))


def test_head_on_collision_swaps_velocities():
    sim = BallsSimulator(BallsConfig(num_objects=2))
    s, v = sim.run(
        np.array([[-1.0, 0.0], [1.0, 0.0]]),
        np.array([[0.4, 0.0], [-0.4, 0.0]]),
        num_steps=10,
    )
    np.testing.assert_allclose(v[-1], [[-0.4, 0.0], [0.4, 0.0]], atol=1e-12)
    assert s[-1, 0, 0] < s[-1, 1, 0]


def test_balls_conserve_energy_and_stay_in_box():
    config = BallsConfig(num_objects=3, num_steps=100)
    sim = BallsSimulator(config)
    s, v = sim.run(*sim.place(dm.make_rng(2)))
    energy = 0.5 * (v**2).sum(axis=(1, 2))
    np.testing.assert_allclose(energy, energy[0], rtol=1e-10)
    assert np.all(np.abs(s) <= config.half_width - config.radius + 1e-12)


def test_ball_placement_respects_limits():
    config = BallsConfig(num_objects=5)
    pos, vel = BallsSimulator(config).place(dm.make_rng(0))
    speed = np.linalg.norm(vel, axis=1)
    assert np.all(speed <= config.max_speed + 1e-12)
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(pos[i] - pos[j]) >= 2.0 * config.radius


def test_ball_placement_gives_up():
    config = BallsConfig(num_objects=50, half_width=1.0, placement_retries=5)
    with pytest.raises(SimulationError):
        BallsSimulator(config).place(dm.make_rng(0))


def test_simulate_balls_deterministic():
    first = simulate_balls(SMALL_BALLS, seed=7, split=Split.TRAIN)
    second = simulate_balls(SMALL_BALLS, seed=7, split=Split.TRAIN)
    other = simulate_balls(SMALL_BALLS, seed=7, split=Split.TEST)
    assert first.observations.shape == (3, 20, 3, 4)
    np.testing.assert_array_equal(first.observations, second.observations)
    assert not np.array_equal(first.observations[:2], other.observations)


def test_balls_noise_and_missing_velocity():
    noisy = simulate_balls(
        BallsConfig(
            num_train=2,
            num_steps=5,
            inner_steps=5,
            noise=NoiseLevel.LOW,
            missing_velocity=True,
        ),
        seed=1,
    )
    clean = simulate_balls(BallsConfig(num_train=2, num_steps=5, inner_steps=5), seed=1)
    assert noisy.obs_dim == 2
    assert noisy.noise == (0.15, 0.02)
    np.testing.assert_array_equal(noisy.clean, clean.observations[..., :2])
    assert not np.array_equal(noisy.observations, noisy.clean)


def test_balls_config_validation():
    with pytest.raises(ConfigError):
        BallsConfig(half_width=0.2, radius=0.3)
    with pytest.raises(ConfigError):
        BallsConfig(num_steps=0)


# --------------------------------------------------------------------------------
# Charged particles
# --------------------------------------------------------------------------------


def pair_distance(s):
    return np.linalg.norm(s[:, 0] - s[:, 1], axis=-1)


def test_like_charges_repel():
    sim = ChargesSimulator(ChargesConfig(num_objects=2))
    start = np.array([[-0.5, 0.0], [0.5, 0.0]])
    s, _ = sim.run(start, np.zeros((2, 2)), [1.0, 1.0], 5)
    assert np.all(np.diff(pair_distance(s)) > 0.0)


def test_opposite_charges_attract():
    sim = ChargesSimulator(ChargesConfig(num_objects=2))
    start = np.array([[-1.0, 0.0], [1.0, 0.0]])
    s, _ = sim.run(start, np.zeros((2, 2)), [1.0, -1.0], 5)
    assert np.all(np.diff(pair_distance(s)) < 0.0)


def test_like_charges_turn_around():
    sim = ChargesSimulator(ChargesConfig(num_objects=2))
    _, v = sim.run(
        np.array([[-1.0, 0.0], [1.0, 0.0]]),
        np.array([[0.5, 0.0], [-0.5, 0.0]]),
        [-1.0, -1.0],
        100,
    )
    assert v[-1, 0, 0] < 0.0 < v[-1, 1, 0]


def test_forces_are_equal_and_opposite():
    sim = ChargesSimulator(ChargesConfig(num_objects=5))
    pos, _, charges = sim.place(dm.make_rng(4))
    np.testing.assert_allclose(sim.forces(pos, charges).sum(axis=0), 0.0, atol=1e-10)


def test_charges_conserve_momentum_away_from_walls():
    sim = ChargesSimulator(ChargesConfig(num_objects=4, half_width=1e3))
    pos, vel, charges = sim.place(dm.make_rng(5))
    _, v = sim.run(pos, vel, charges, 40)
    momentum = v.sum(axis=1)
    np.testing.assert_allclose(momentum, momentum[:1].repeat(40, axis=0), atol=1e-9)


def test_simulate_charges_globals():
    data = simulate_charges(SMALL_CHARGES, seed=0)
    assert data.observations.shape == (2, 10, 3, 4)
    assert data.globals.shape == (2, 3, 1)
    assert set(np.unique(data.globals)) <= {-1.0, 1.0}


# --------------------------------------------------------------------------------
# Dataset file
# --------------------------------------------------------------------------------


def test_dataset_file_round_trip(tmp_path):
    data = simulate_charges(replace(SMALL_CHARGES, noise=NoiseLevel.HIGH), seed=2)
    path = tmp_path / "charges.bin"
    write_dataset(data, path)
    loaded = read_dataset(path)
    np.testing.assert_array_equal(loaded.observations, data.observations)
    np.testing.assert_array_equal(loaded.clean, data.clean)
    np.testing.assert_array_equal(loaded.globals, data.globals)
    assert loaded.dt == data.dt
    assert loaded.noise == (0.30, 0.04)


def test_empty_dataset_round_trip(tmp_path):
    data = Dataset(np.zeros((0, 7, 3, 4)), dt=0.5)
    path = tmp_path / "empty.bin"
    write_dataset(data, path)
    loaded = read_dataset(path)
    assert loaded.observations.shape == (0, 7, 3, 4)
    assert loaded.globals is None
    assert loaded.clean is None


def test_dataset_file_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    write_dataset(Dataset(np.ones((1, 5, 1, 2)), dt=0.1), path)
    data = bytearray(path.read_bytes())
    data[0:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as e:
        read_dataset(path)
    assert e.value.offset == 0


def test_dataset_file_truncated(tmp_path):
    path = tmp_path / "short.bin"
    write_dataset(Dataset(np.ones((2, 5, 1, 2)), dt=0.1), path)
    data = path.read_bytes()
    for cut in (10, len(data) - 8):
        path.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            read_dataset(path)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.ones((2, 5, 4)), dt=0.1)
    with pytest.raises(ConfigError):
        Dataset(np.ones((2, 5, 3, 4)), dt=0.0)
    with pytest.raises(ConfigError):
        Dataset(np.ones((2, 5, 3, 4)), dt=0.1, globals=np.ones((2, 2, 1)))


def test_dataset_subset_and_positions():
    data = simulate_charges(SMALL_CHARGES, seed=0)
    sub = data.subset([1])
    np.testing.assert_array_equal(sub.observations[0], data.observations[1])
    np.testing.assert_array_equal(sub.globals[0], data.globals[1])
    assert data.positions_only().obs_dim == 2
