import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lle2c.errors import ConfigError, CoverageError
from lle2c.sectors import (
    GridDims, SectorSpec, crop_core, expand_with_halo, extract, inference_specs,
    partition, sample_sectors, stitch, valid_origins,
)

G60 = GridDims(60, 60)


def test_partition_60_by_20():
    specs = partition(G60, (20, 20))
    assert len(specs) == 9
    assert {(s.ox, s.oy) for s in specs} == {(x, y) for x in (0, 20, 40) for y in (0, 20, 40)}


def test_partition_degenerate_full_grid():
    assert partition(G60, (60, 60)) == [SectorSpec(0, 0, 60, 60)]


def test_partition_clamped_fallback():
    grid = GridDims(50, 60)
    with pytest.raises(ConfigError):
        partition(grid, (20, 20))
    specs = partition(grid, (20, 20), allow_clamp=True)
    assert sorted({s.ox for s in specs}) == [0, 20, 30]
    assert all(s.clamped == (s.ox == 30) for s in specs)


@settings(max_examples=60, deadline=None)
@given(nx=st.integers(1, 40), ny=st.integers(1, 40), sx=st.integers(1, 40), sy=st.integers(1, 40))
def test_partition_cell_ownership_counts(nx, ny, sx, sy):
    grid = GridDims(nx, ny)
    if sx > nx or sy > ny:
        return
    divisible = nx % sx == 0 and ny % sy == 0
    specs = partition(grid, (sx, sy), allow_clamp=not divisible)
    count = np.zeros(grid.shape, dtype=int)
    for s in specs:
        count[s.ox:s.ox + s.sx, s.oy:s.oy + s.sy] += 1
    if divisible:
        assert (count == 1).all()
    else:
        assert (count >= 1).all()


def test_expand_corner_interior_mixed():
    corner = expand_with_halo(SectorSpec(0, 0, 20, 20), 4, G60)
    assert (corner.ex, corner.ey, corner.wx, corner.wy) == (0, 0, 24, 24)
    assert corner.core_offset == (0, 0)
    assert corner.edges == (True, False, True, False)
    mid = expand_with_halo(SectorSpec(20, 20, 20, 20), 4, G60)
    assert (mid.ex, mid.ey) == (18, 18) and mid.edges == (False,) * 4
    mixed = expand_with_halo(SectorSpec(40, 20, 20, 20), 4, G60)
    assert (mixed.ex, mixed.ey) == (36, 18)
    assert mixed.edges == (False, True, False, False)


def test_expand_errors():
    with pytest.raises(ConfigError):
        expand_with_halo(SectorSpec(0, 0, 20, 20), 3, G60)
    with pytest.raises(ConfigError):
        expand_with_halo(SectorSpec(0, 0, 58, 20), 4, G60)
    with pytest.raises(ConfigError):
        expand_with_halo(SectorSpec(1, 20, 20, 20), 4, G60)


def test_boundary_alignment_exhaustive():
    for ox in valid_origins(60, 20, 4):
        for oy in valid_origins(60, 20, 4):
            e = expand_with_halo(SectorSpec(int(ox), int(oy), 20, 20), 4, G60)
            for o, eo, w in ((ox, e.ex, e.wx), (oy, e.ey, e.wy)):
                assert w == 24 and 0 <= eo and eo + w <= 60
                if o == 0:
                    assert eo == 0
                elif o + 20 == 60:
                    assert eo + w == 60
                else:
                    assert o - eo == 2 and (eo + w) - (o + 20) == 2


def test_extract_and_crop():
    rng = np.random.default_rng(0)
    field = rng.standard_normal((2, 60, 60))
    spec = expand_with_halo(SectorSpec(20, 40, 20, 20), 4, G60)
    sec = extract(field, spec)
    assert sec.shape == (2, 24, 24)
    for c in range(2):
        for i in range(24):
            for j in range(24):
                assert sec[c, i, j] == field[c, spec.ex + i, spec.ey + j]
    assert (extract(np.full((60, 60), 1.5), spec) == 1.5).all()
    full = expand_with_halo(SectorSpec(0, 0, 60, 60), 0, G60)
    np.testing.assert_array_equal(extract(field, full), field)
    np.testing.assert_array_equal(crop_core(field, full), field)


def test_crop_placements():
    pred = np.arange(24 * 24.0).reshape(24, 24)
    corner = expand_with_halo(SectorSpec(0, 0, 20, 20), 4, G60)
    np.testing.assert_array_equal(crop_core(pred, corner), pred[:20, :20])
    mid = expand_with_halo(SectorSpec(20, 20, 20, 20), 4, G60)
    np.testing.assert_array_equal(crop_core(pred, mid), pred[2:22, 2:22])


def test_stitch_round_trip_and_blocks():
    rng = np.random.default_rng(1)
    field = rng.standard_normal((60, 60))
    cores = partition(G60, (20, 20))
    back = stitch([(c, field[c.ox:c.ox + 20, c.oy:c.oy + 20]) for c in cores], G60)
    assert back.tobytes() == field.tobytes()
    blocks = stitch([(c, np.full((20, 20), i + 1.0)) for i, c in enumerate(cores)], G60)
    for i, c in enumerate(cores):
        assert (blocks[c.ox:c.ox + 20, c.oy:c.oy + 20] == i + 1).all()


def test_stitch_missing_sector():
    cores = partition(G60, (20, 20))
    with pytest.raises(CoverageError) as err:
        stitch([(c, np.zeros((20, 20))) for c in cores[1:]], G60)
    assert len(err.value.cells) == 400
    assert "400" in str(err.value)


def test_stitch_rejects_unclamped_overlap():
    a, b = SectorSpec(0, 0, 20, 20), SectorSpec(10, 0, 20, 20)
    with pytest.raises(CoverageError):
        stitch([(a, np.zeros((20, 20))), (b, np.ones((20, 20)))], GridDims(30, 20))


def test_stitch_clamped_sector_wins():
    grid = GridDims(50, 20)
    cores = partition(grid, (20, 20), allow_clamp=True)
    out = stitch([(c, np.full((20, 20), float(c.ox))) for c in cores], grid)
    assert (out[30:50] == 30).all() and (out[20:30] == 20).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1),
       geom=st.sampled_from([(60, 60, 20, 20, 4), (50, 60, 20, 20, 4), (24, 16, 8, 8, 2), (30, 30, 30, 30, 0)]))
def test_round_trip_through_halo(seed, geom):
    nx, ny, sx, sy, halo = geom
    grid = GridDims(nx, ny)
    field = np.random.default_rng(seed).standard_normal((2, nx, ny))
    specs = inference_specs(grid, (sx, sy), halo, allow_clamp=True)
    out = stitch([(s.core, crop_core(extract(field, s), s)) for s in specs], grid)
    assert out.tobytes() == field.tobytes()


def test_sample_sectors_deterministic_and_valid():
    a = sample_sectors(G60, (20, 20), 4, 50, seed=3)
    assert a == sample_sectors(G60, (20, 20), 4, 50, seed=3)
    assert sample_sectors(G60, (60, 60), 0, 5, seed=1) == [expand_with_halo(SectorSpec(0, 0, 60, 60), 0, G60)] * 5
    with pytest.raises(ConfigError):
        sample_sectors(G60, (20, 20), 4, 0, seed=1)
    with pytest.raises(ConfigError):
        sample_sectors(G60, (58, 20), 4, 1, seed=1)


def test_sample_sectors_10k_draws_satisfy_halo_rules():
    draws = sample_sectors(G60, (20, 20), 4, 10_000, seed=11)
    for e in draws:
        assert e == expand_with_halo(e.core, 4, G60)
        assert e.wx == e.wy == 24
        assert e.ex <= e.core.ox and e.core.ox + 20 <= e.ex + 24
        assert e.ey <= e.core.oy and e.core.oy + 20 <= e.ey + 24
    origins = {e.core.ox for e in draws}
    assert origins == set(valid_origins(60, 20, 4).tolist())
