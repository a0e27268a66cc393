import numpy as np
import pytest

from lle2c.dataset import (
    Dataset, control_schedule, generate_dataset, read_manifest, simulate_sample, split_indices,
)
from lle2c.errors import ConfigError, SimulationError
from lle2c.sectors import GridDims
from lle2c.sim import ReservoirConfig, WellSpec, initial_state, step


def small_config(n=8):
    perm = np.random.default_rng(0).lognormal(np.log(100), 0.5, (n, n))
    wells = [WellSpec(1, 1, "injector", 5.0), WellSpec(n - 2, n - 2, "producer", 2000.0)]
    return ReservoirConfig(GridDims(n, n), perm, wells, dx=5.0, dy=5.0, dz=5.0)


def test_split_three_to_one():
    assert split_indices(4) == ([0, 1, 2], [3])
    train, test = split_indices(400)
    assert (len(train), len(test)) == (300, 100)
    assert not set(train) & set(test)


def test_control_schedule_piecewise_constant_and_bounded():
    u = control_schedule(3, 10, seed=5, sample=2, interval=4)
    assert u.shape == (10, 3)
    assert np.all((u >= 0.2) & (u <= 1.0))
    assert (u[0] == u[3]).all() and (u[4] == u[7]).all() and (u[8] == u[9]).all()
    assert not (u[3] == u[4]).all()
    np.testing.assert_array_equal(u, control_schedule(3, 10, seed=5, sample=2, interval=4))


def test_simulate_sample_matches_stepping():
    c = small_config()
    sched = control_schedule(c.d_u, 4, 1, 0)
    p, sw, y = simulate_sample(c, sched, 30.0)
    s = initial_state(c)
    for t in range(4):
        assert (p[t] == s.p).all() and (sw[t] == s.sw).all()
        s, out = step(s, sched[t], 30.0, c)
        np.testing.assert_array_equal(y[t], out.as_vector())


def test_round_trip_and_manifest(tmp_path):
    c = small_config()
    ds = generate_dataset(c, 4, 3, seed=2, out_dir=tmp_path / "d")
    kv = read_manifest(tmp_path / "d" / "manifest.txt")
    assert kv["split.train"] == "0,1,2" and kv["split.test"] == "3"
    assert kv["dims"] == "8 8" and kv["T"] == "3"
    back = Dataset.load(tmp_path / "d")
    for name in ("p", "sw", "u", "y"):
        np.testing.assert_array_equal(getattr(back, name), getattr(ds, name))
    assert back.train == [0, 1, 2] and back.test == [3]
    np.testing.assert_array_equal(back.config.perm, c.perm)
    assert back.config.wells == c.wells


def test_same_seed_is_byte_identical(tmp_path):
    c = small_config()
    generate_dataset(c, 4, 3, seed=9, out_dir=tmp_path / "a")
    generate_dataset(c, 4, 3, seed=9, out_dir=tmp_path / "b")
    for name in ("manifest.txt", "trajectories.bin", "permeability.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_too_few_samples():
    with pytest.raises(ConfigError):
        generate_dataset(small_config(), 3, 3, seed=0)


def test_bad_magic(tmp_path):
    generate_dataset(small_config(), 4, 2, seed=0, out_dir=tmp_path)
    raw = (tmp_path / "trajectories.bin").read_bytes()
    (tmp_path / "trajectories.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ConfigError):
        Dataset.load(tmp_path)


def test_truncated_body(tmp_path):
    generate_dataset(small_config(), 4, 2, seed=0, out_dir=tmp_path)
    raw = (tmp_path / "trajectories.bin").read_bytes()
    (tmp_path / "trajectories.bin").write_bytes(raw[:-4])
    with pytest.raises(ConfigError):
        Dataset.load(tmp_path)


def test_failing_sample_names_index(monkeypatch):
    import lle2c.dataset as D

    def boom(config, schedule, dt_days):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(D, "simulate_sample", boom)
    with pytest.raises(SimulationError) as err:
        generate_dataset(small_config(), 4, 2, seed=0)
    assert err.value.sample == 0
