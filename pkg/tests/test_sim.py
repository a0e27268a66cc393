import numpy as np
import pytest

from lle2c.errors import ConfigError, TimeStepError
from lle2c import sim
from lle2c.sim import (
    DAY, PSI, RelPerm, ReservoirConfig, SimState, WellSpec, assemble_pressure,
    face_transmissibility, initial_state, relative_permeability, solve_pressure,
    step, update_saturation, water_volume,
)
from lle2c.sectors import GridDims


def _config(nx=12, ny=10, wells=None, perm=None, **kw):
    g = GridDims(nx, ny)
    if perm is None:
        perm = np.random.default_rng(0).lognormal(np.log(100), 0.5, (nx, ny))
    if wells is None:
        wells = [WellSpec(0, 0, "injector", 20.0), WellSpec(nx - 1, ny - 1, "producer", 1500.0)]
    return ReservoirConfig(g, perm, wells, **kw)


def test_harmonic_face_transmissibility():
    tx, ty = face_transmissibility(np.array([[100.0, 100.0], [100.0, 100.0]]))
    np.testing.assert_allclose(tx, 100.0)
    tx, _ = face_transmissibility(np.array([[100.0], [300.0]]))
    np.testing.assert_allclose(tx, 150.0)


def test_series_conductance_three_cells():
    # three cells in a column: the two faces in series equal the analytic resistor chain
    k = np.array([[50.0], [200.0], [80.0]])
    dx, dy, dz = 4.0, 3.0, 2.0
    tx, _ = face_transmissibility(k, dx, dy, dz)
    series = 1.0 / (1.0 / tx[0, 0] + 1.0 / tx[1, 0])
    area = dy * dz
    # half-cell resistances dx/2/(k A) summed from the centre of cell 0 to the centre of cell 2
    resist = (dx / 2) / (k[0, 0] * area) + dx / (k[1, 0] * area) + (dx / 2) / (k[2, 0] * area)
    np.testing.assert_allclose(series, 1.0 / resist, rtol=1e-14)


def test_relperm_endpoints_and_midpoint():
    m = RelPerm(2, 2, 0.1, 0.1)
    np.testing.assert_allclose(relative_permeability(0.1, m), (0.0, 1.0))
    np.testing.assert_allclose(relative_permeability(0.9, m), (1.0, 0.0))
    np.testing.assert_allclose(relative_permeability(0.5, m), (0.25, 0.25))
    krw, kro = relative_permeability(np.array([-1.0, 2.0]), m)
    assert np.all((0 <= krw) & (krw <= 1) & (0 <= kro) & (kro <= 1))


def test_config_invariants():
    with pytest.raises(ConfigError):
        RelPerm(swc=0.6, sor=0.5)
    with pytest.raises(ConfigError):
        _config(perm=np.zeros((12, 10)))
    with pytest.raises(ConfigError):
        _config(porosity=0.0)
    with pytest.raises(ConfigError):
        _config(wells=[WellSpec(1, 1, "producer", 4000.0)])
    with pytest.raises(ConfigError):
        _config(wells=[WellSpec(1, 1, "producer", 100.0), WellSpec(1, 1, "injector", 1.0)])
    with pytest.raises(ConfigError):
        WellSpec(0, 0, "injector", -1.0)


def test_no_wells_uniform_pressure_unchanged():
    c = _config(wells=[], reference_cell=(0, 0))
    s = initial_state(c)
    sol = solve_pressure(s, [], c)
    np.testing.assert_allclose(sol.p / PSI, c.p0, rtol=1e-12)


def test_unanchored_system_is_config_error():
    c = _config(wells=[WellSpec(0, 0, "injector", 5.0)])
    with pytest.raises(ConfigError):
        solve_pressure(initial_state(c), [1.0], c)


def test_two_cell_pressure_drop_is_q_over_t():
    perm = np.array([[150.0, 150.0]])
    c = ReservoirConfig(GridDims(1, 2), perm,
                        [WellSpec(0, 0, "injector", 30.0), WellSpec(0, 1, "producer", 1000.0)],
                        mu_w=1.0, mu_o=1.0, relperm=RelPerm(1, 1, 0.0, 0.0), s0=0.0)
    # s = 0 gives krw = 0, kro = 1; unit total mobility in SI needs mu = 1 Pa s
    c.mu_w = c.mu_o = 1000.0
    sol = solve_pressure(initial_state(c), [1.0, 1.0], c)
    _, ty = face_transmissibility(c)
    q = 30.0 / DAY
    np.testing.assert_allclose(sol.p[0, 0] - sol.p[0, 1], q / ty[0, 0], rtol=1e-10)


def test_assembled_matrix_is_spd():
    c = _config(5, 4)
    st = SimState(np.random.default_rng(1).uniform(1000, 3000, (5, 4)), np.random.default_rng(2).uniform(0.1, 0.9, (5, 4)))
    A = assemble_pressure(st, [0.7, 0.4], c)[0].toarray()
    np.testing.assert_allclose(A, A.T, rtol=1e-14, atol=0)
    assert np.linalg.eigvalsh(A).min() > 0


def test_random_system_residual_and_cg_agree():
    c = _config(15, 9)
    st = SimState(np.full((15, 9), 3000.0), np.random.default_rng(3).uniform(0.1, 0.9, (15, 9)))
    direct = solve_pressure(st, [0.8, 0.5], c)
    assert direct.residual < 1e-8
    c.solver = "cg"
    cg = solve_pressure(st, [0.8, 0.5], c)
    assert cg.residual < 1e-8
    np.testing.assert_allclose(cg.p, direct.p, rtol=1e-7)


def test_zero_gradient_no_wells_saturation_unchanged():
    c = _config(wells=[], reference_cell=(0, 0))
    st = SimState(np.full((12, 10), 2000.0), np.random.default_rng(4).uniform(0.1, 0.9, (12, 10)))
    sol = sim.PressureSolution(st.p * PSI, np.zeros((11, 10)), np.zeros((12, 9)), [], [], 0.0)
    tr = update_saturation(st, sol, 30 * DAY, c)
    np.testing.assert_array_equal(tr.sw, st.sw)
    assert tr.substeps == 1


def test_closed_domain_conserves_water():
    c = _config(wells=[], reference_cell=(0, 0))
    rng = np.random.default_rng(5)
    st = SimState(np.full((12, 10), 2000.0), rng.uniform(0.3, 0.7, (12, 10)))
    sol = solve_pressure(st, [], c)
    # impose an arbitrary circulation: fluxes from a random potential, no sources
    sol.flux_x = rng.standard_normal(sol.flux_x.shape) * 1e-6
    sol.flux_y = rng.standard_normal(sol.flux_y.shape) * 1e-6
    v0 = water_volume(st.sw, c)
    tr = update_saturation(st, sol, 0.1 * DAY, c)
    assert tr.clamped_volume == 0.0
    assert abs(water_volume(tr.sw, c) - v0) / v0 < 1e-12


def test_injector_producer_mass_balance_each_step():
    c = _config(20, 20)
    s = initial_state(c)
    for _ in range(8):
        v0 = water_volume(s.sw, c)
        s, out, rep = step(s, [1.0, 1.0], 30, c, report=True)
        dv = water_volume(s.sw, c) - v0
        assert abs(dv - (rep.injected - rep.produced_water)) / max(water_volume(s.sw, c), 1) < 1e-8
        assert np.all(s.sw >= c.relperm.s_min) and np.all(s.sw <= c.relperm.s_max)
        assert np.all(out.oil >= 0) and np.all(out.water >= 0)


def test_zero_controls_leave_state_unchanged():
    c = _config()
    s0 = initial_state(c)
    s1, out = step(s0, [0.0, 0.0], 30, c)
    np.testing.assert_allclose(s1.p, s0.p, rtol=1e-12)
    np.testing.assert_array_equal(s1.sw, s0.sw)
    np.testing.assert_allclose(out.oil, 0.0, atol=1e-9)


def test_step_is_deterministic():
    c = _config()
    a = step(initial_state(c), [0.6, 0.3], 30, c)
    b = step(initial_state(c), [0.6, 0.3], 30, c)
    assert a[0].p.tobytes() == b[0].p.tobytes() and a[0].sw.tobytes() == b[0].sw.tobytes()
    assert a[1].as_vector().tobytes() == b[1].as_vector().tobytes()


def test_bad_controls_rejected():
    c = _config()
    with pytest.raises(ConfigError):
        step(initial_state(c), [1.2, 0.5], 30, c)
    with pytest.raises(ConfigError):
        step(initial_state(c), [0.5], 30, c)


def test_substep_limit_raises(monkeypatch):
    c = _config()
    monkeypatch.setattr(sim, "MAX_SUBSTEPS", 2)
    with pytest.raises(TimeStepError):
        step(initial_state(c), [1.0, 1.0], 30, c)


def _front(sw, thresh=0.3):
    wet = np.nonzero(sw > thresh)[0]
    return int(wet.max()) if len(wet) else -1


def test_quarter_five_spot_front_and_breakthrough():
    g = GridDims(60, 60)
    perm = np.full((60, 60), 100.0)
    c = ReservoirConfig(g, perm, [WellSpec(0, 0, "injector", 40.0), WellSpec(59, 59, "producer", 1000.0)],
                        dx=5.0, dy=5.0, dz=5.0)
    s = initial_state(c)
    diag, water, prod_sw = [], [], []
    for _ in range(24):
        s, out = step(s, [1.0, 1.0], 30, c)
        diag.append(_front(np.diagonal(s.sw)))
        water.append(out.water[0])
        prod_sw.append(s.sw[59, 59])
    assert all(b >= a for a, b in zip(diag, diag[1:]))
    assert diag[-1] > diag[0]
    dry = [k for k, v in enumerate(prod_sw) if v == c.relperm.s_min]
    assert dry, "front reached the producer in the first step"
    # water is immobile at connate saturation: no produced water before breakthrough
    assert all(water[k] == 0.0 for k in dry)


def test_halving_dt_moves_1d_front_less_than_front_width():
    g = GridDims(100, 1)
    c = ReservoirConfig(g, np.full((100, 1), 100.0),
                        [WellSpec(0, 0, "injector", 2.0), WellSpec(99, 0, "producer", 1000.0)],
                        dx=5.0, dy=5.0, dz=5.0)

    def run(dt, n):
        s = initial_state(c)
        for _ in range(n):
            s, _ = step(s, [1.0, 1.0], dt, c)
        return s.sw[:, 0]

    coarse, fine = run(30.0, 8), run(15.0, 16)
    width = np.count_nonzero((coarse > c.relperm.s_min + 0.02) & (coarse < 0.6))
    assert abs(_front(coarse) - _front(fine)) < max(width, 1)
