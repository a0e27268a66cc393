"""Two-phase (water/oil) incompressible Darcy flow on a 2D Cartesian grid.

IMPES scheme: a 5-point finite-volume pressure equation with upwinded total
mobility, then explicit first-order upwind transport of water saturation with
CFL-limited sub-steps. Rate-controlled water injectors and BHP-controlled
producers with a Peaceman well index. No gravity, no compressibility, B = 1.

Public quantities are in field-ish units (psi, mD, cP, m, m^3/day); the
solver works in SI internally.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericError, TimeStepError
from .sectors import GridDims

log = logging.getLogger(__name__)

PSI = 6894.757293168
MILLIDARCY = 9.869233e-16
CENTIPOISE = 1e-3
DAY = 86400.0

PRESSURE_TOL = 1e-8
CFL = 0.9
MAX_SUBSTEPS = 100_000


@dataclass(frozen=True)
class RelPerm:
    """Corey relative permeability on normalized saturation."""
    a: float = 2.0
    b: float = 2.0
    swc: float = 0.1
    sor: float = 0.1

    def __post_init__(self):
        if not (0 <= self.swc and 0 <= self.sor and self.swc + self.sor < 1):
            raise ConfigError(f"residual saturations swc={self.swc}, sor={self.sor} must satisfy 0 <= swc + sor < 1")

    @property
    def s_min(self):
        return self.swc

    @property
    def s_max(self):
        return 1.0 - self.sor


def relative_permeability(sw, model: RelPerm):
    """``(k_rw, k_ro)`` for water saturation ``sw``."""
    s = np.clip((np.asarray(sw, dtype=np.float64) - model.swc) / (1.0 - model.swc - model.sor), 0.0, 1.0)
    return np.clip(s ** model.a, 0.0, 1.0), np.clip((1.0 - s) ** model.b, 0.0, 1.0)


@dataclass(frozen=True)
class WellSpec:
    i: int
    j: int
    kind: str  # "injector" (rate, m^3/day) or "producer" (BHP, psi)
    value: float
    rw: float = 0.1

    def __post_init__(self):
        if self.kind not in ("injector", "producer"):
            raise ConfigError(f"unknown well kind {self.kind!r}")
        if self.kind == "injector" and self.value < 0:
            raise ConfigError(f"injector rate must be >= 0, got {self.value}")
        if self.rw <= 0:
            raise ConfigError("well-bore radius must be positive")

    @property
    def is_producer(self):
        return self.kind == "producer"


@dataclass
class ReservoirConfig:
    dims: GridDims
    perm: np.ndarray  # mD, shape (nx, ny)
    wells: list = field(default_factory=list)
    dx: float = 10.0
    dy: float = 10.0
    dz: float = 10.0
    porosity: float = 0.2
    mu_w: float = 1.0
    mu_o: float = 5.0
    relperm: RelPerm = field(default_factory=RelPerm)
    p0: float = 3000.0
    s0: float = 0.1
    reference_cell: tuple | None = None
    solver: str = "direct"

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.float64)
        if self.perm.shape != self.dims.shape:
            raise ConfigError(f"permeability shape {self.perm.shape} does not match grid {self.dims.shape}")
        if not np.all(self.perm > 0) or not np.all(np.isfinite(self.perm)):
            raise ConfigError("permeability must be finite and positive everywhere")
        if not 0 < self.porosity <= 1:
            raise ConfigError(f"porosity {self.porosity} outside (0, 1]")
        if min(self.dx, self.dy, self.dz, self.mu_w, self.mu_o) <= 0:
            raise ConfigError("cell sizes and viscosities must be positive")
        cells = [(w.i, w.j) for w in self.wells]
        if len(set(cells)) != len(cells):
            raise ConfigError("wells must occupy distinct cells")
        for w in self.wells:
            if not (0 <= w.i < self.dims.nx and 0 <= w.j < self.dims.ny):
                raise ConfigError(f"well at {(w.i, w.j)} outside grid")
            if w.is_producer and w.value >= self.p0:
                raise ConfigError(f"producer BHP {w.value} psi must be below initial pressure {self.p0} psi")
        if not self.relperm.s_min <= self.s0 <= self.relperm.s_max:
            raise ConfigError(f"initial saturation {self.s0} outside [{self.relperm.s_min}, {self.relperm.s_max}]")
        if self.solver not in ("direct", "cg"):
            raise ConfigError(f"unknown linear solver {self.solver!r}")

    @property
    def d_u(self):
        return len(self.wells)

    @property
    def producers(self):
        return [w for w in self.wells if w.is_producer]

    @property
    def d_y(self):
        return 2 * len(self.producers)

    @property
    def cell_volume(self):
        return self.dx * self.dy * self.dz

    @property
    def pore_volume(self):
        return self.porosity * self.cell_volume


@dataclass
class SimState:
    p: np.ndarray  # psi
    sw: np.ndarray
    step: int = 0


@dataclass
class WellOutput:
    oil: np.ndarray  # m^3/day per producer
    water: np.ndarray

    def as_vector(self):
        """Interleaved (oil, water) per producer, the layout used in datasets."""
        return np.stack([self.oil, self.water], axis=-1).reshape(-1)


def initial_state(config: ReservoirConfig):
    return SimState(np.full(config.dims.shape, config.p0), np.full(config.dims.shape, config.s0), 0)


def harmonic_mean(a, b):
    return 2.0 * a * b / (a + b)


def face_transmissibility(config_or_perm, dx=1.0, dy=1.0, dz=1.0):
    """Geometric transmissibilities ``(Tx, Ty)`` of shapes ``(nx-1, ny)`` and ``(nx, ny-1)``.

    Given a config, permeability is converted to m^2 and the result is in m^3.
    Given a bare permeability array, units pass through unchanged.
    """
    if isinstance(config_or_perm, ReservoirConfig):
        c = config_or_perm
        k, dx, dy, dz = c.perm * MILLIDARCY, c.dx, c.dy, c.dz
    else:
        k = np.asarray(config_or_perm, dtype=np.float64)
    tx = harmonic_mean(k[:-1, :], k[1:, :]) * (dy * dz) / dx
    ty = harmonic_mean(k[:, :-1], k[:, 1:]) * (dx * dz) / dy
    return tx, ty


def well_index(config: ReservoirConfig, well: WellSpec):
    """Peaceman index ``2 pi k dz / ln(r_o / r_w)`` with ``r_o = 0.2 dx`` (m^3)."""
    ro = 0.2 * config.dx
    if ro <= well.rw:
        raise ConfigError(f"equivalent radius {ro} m must exceed well-bore radius {well.rw} m")
    return 2.0 * math.pi * config.perm[well.i, well.j] * MILLIDARCY * config.dz / math.log(ro / well.rw)


def _mobilities(sw, config):
    krw, kro = relative_permeability(sw, config.relperm)
    return krw / (config.mu_w * CENTIPOISE), kro / (config.mu_o * CENTIPOISE)


def _upwind(lam, dp, axis):
    """Face values of a cell field, upwinded on pressure drop ``dp`` (low minus high index)."""
    lo = lam[:-1, :] if axis == 0 else lam[:, :-1]
    hi = lam[1:, :] if axis == 0 else lam[:, 1:]
    return np.where(dp > 0, lo, np.where(dp < 0, hi, 0.5 * (lo + hi)))


def _well_terms(config, controls):
    """Injection rates (m^3/s) and producer BHPs (Pa) for control multipliers."""
    u = np.asarray(controls, dtype=np.float64)
    if u.shape != (config.d_u,):
        raise ConfigError(f"expected {config.d_u} controls, got shape {u.shape}")
    if np.any(u < 0) or np.any(u > 1):
        raise ConfigError("control multipliers must lie in [0, 1]")
    rates, bhps = [], []
    for w, uk in zip(config.wells, u):
        if w.is_producer:
            bhps.append((w, (config.p0 - uk * (config.p0 - w.value)) * PSI))
        else:
            rates.append((w, uk * w.value / DAY))
    return rates, bhps


@dataclass
class PressureSolution:
    p: np.ndarray  # Pa
    flux_x: np.ndarray  # m^3/s, positive toward higher i
    flux_y: np.ndarray
    producer_rates: list  # (well, total outflow m^3/s)
    injector_rates: list  # (well, inflow m^3/s)
    residual: float
    matrix: sp.csr_matrix | None = None


def assemble_pressure(state: SimState, controls, config: ReservoirConfig):
    """Sparse system ``A p = b`` (SI) plus the face mobilities used to build it."""
    nx, ny = config.dims.shape
    n = nx * ny
    lw, lo = _mobilities(state.sw, config)
    lam = lw + lo
    p_prev = np.asarray(state.p, dtype=np.float64)
    tx, ty = face_transmissibility(config)
    cx = tx * _upwind(lam, p_prev[:-1, :] - p_prev[1:, :], 0)
    cy = ty * _upwind(lam, p_prev[:, :-1] - p_prev[:, 1:], 1)
    idx = np.arange(n).reshape(nx, ny)
    diag = np.zeros((nx, ny))
    diag[:-1, :] += cx
    diag[1:, :] += cx
    diag[:, :-1] += cy
    diag[:, 1:] += cy
    b = np.zeros((nx, ny))
    rates, bhps = _well_terms(config, controls)
    for w, q in rates:
        b[w.i, w.j] += q
    prod = []
    for w, pw in bhps:
        c = well_index(config, w) * lam[w.i, w.j]
        diag[w.i, w.j] += c
        b[w.i, w.j] += c * pw
        prod.append((w, c, pw))
    rows = np.concatenate([idx[:-1, :].ravel(), idx[1:, :].ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    cols = np.concatenate([idx[1:, :].ravel(), idx[:-1, :].ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel()])
    vals = -np.concatenate([cx.ravel(), cx.ravel(), cy.ravel(), cy.ravel()])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n)) + sp.diags(diag.ravel())
    A = A.tocsr()
    bv = b.ravel()
    anchored = bool(bhps)
    if not anchored and config.reference_cell is not None:
        r = idx[config.reference_cell]
        pref = p_prev.ravel()[r] * PSI
        # Dirichlet elimination that keeps A symmetric.
        col = A[:, [r]].toarray().ravel()
        bv = bv - col * pref
        A = A.tolil()
        A[r, :] = 0
        A[:, r] = 0
        A[r, r] = 1.0
        A = A.tocsr()
        bv[r] = pref
        anchored = True
    if not anchored:
        raise ConfigError("pressure system has no anchor: add a BHP producer or set reference_cell")
    return A, bv, cx, cy, prod, rates


def solve_pressure(state: SimState, controls, config: ReservoirConfig, keep_matrix=False):
    """Pressure (SI) and the conservative face fluxes it implies."""
    nx, ny = config.dims.shape
    A, b, cx, cy, prod, rates = assemble_pressure(state, controls, config)
    if config.solver == "cg":
        d = A.diagonal()
        M = sp.diags(1.0 / d)
        x0 = np.asarray(state.p, dtype=np.float64).ravel() * PSI
        p, info = spla.cg(A, b, x0=x0, M=M, rtol=PRESSURE_TOL * 1e-2, atol=0.0, maxiter=20 * A.shape[0])
        if info != 0:
            res = np.linalg.norm(A @ p - b) / max(np.linalg.norm(b), 1e-300)
            raise NumericError(f"conjugate gradient did not converge (info={info}, residual={res:.3e})")
    else:
        p = spla.spsolve(A.tocsc(), b)
    bn = np.linalg.norm(b)
    res = np.linalg.norm(A @ p - b) / bn if bn > 0 else np.linalg.norm(A @ p - b)
    if not np.isfinite(res) or res >= PRESSURE_TOL:
        raise NumericError(f"pressure residual {res:.3e} exceeds {PRESSURE_TOL:g}")
    p = p.reshape(nx, ny)
    fx = cx * (p[:-1, :] - p[1:, :])
    fy = cy * (p[:, :-1] - p[:, 1:])
    producers = [(w, c * (p[w.i, w.j] - pw)) for w, c, pw in prod]
    return PressureSolution(p, fx, fy, producers, rates, float(res), A if keep_matrix else None)


def _max_dfds(config):
    s = np.linspace(config.relperm.s_min, config.relperm.s_max, 4001)
    lw, lo = _mobilities(s, config)
    f = lw / np.maximum(lw + lo, 1e-300)
    return float(np.max(np.abs(np.diff(f) / np.diff(s)))) * 1.02


def fractional_flow(sw, config):
    lw, lo = _mobilities(sw, config)
    return lw / np.maximum(lw + lo, 1e-300)


@dataclass
class TransportResult:
    sw: np.ndarray
    oil: np.ndarray  # step-averaged producer rates, m^3/day
    water: np.ndarray
    substeps: int
    clamped_volume: float  # water volume (m^3) removed or added by clamping


def update_saturation(state: SimState, sol: PressureSolution, dt, config: ReservoirConfig):
    """Explicit upwind transport over ``dt`` seconds at fixed total fluxes."""
    if dt <= 0:
        raise ConfigError(f"time step must be positive, got {dt}")
    nx, ny = config.dims.shape
    pv = config.pore_volume
    fx, fy = sol.flux_x, sol.flux_y
    src = np.zeros((nx, ny))  # water injection, m^3/s
    for w, q in sol.injector_rates:
        src[w.i, w.j] += q
    qprod = np.zeros((nx, ny))
    for w, q in sol.producer_rates:
        qprod[w.i, w.j] += q
    # throughput per cell bounds the stable sub-step
    inflow = src + np.where(qprod < 0, -qprod, 0.0)
    outflow = np.where(qprod > 0, qprod, 0.0)
    inflow[1:, :] += np.maximum(fx, 0.0)
    outflow[:-1, :] += np.maximum(fx, 0.0)
    inflow[:-1, :] += np.maximum(-fx, 0.0)
    outflow[1:, :] += np.maximum(-fx, 0.0)
    inflow[:, 1:] += np.maximum(fy, 0.0)
    outflow[:, :-1] += np.maximum(fy, 0.0)
    inflow[:, :-1] += np.maximum(-fy, 0.0)
    outflow[:, 1:] += np.maximum(-fy, 0.0)
    through = np.max(np.maximum(inflow, outflow))
    fmax = _max_dfds(config)
    if through > 0:
        n_sub = max(1, math.ceil(dt * fmax * through / (CFL * pv)))
    else:
        n_sub = 1
    if n_sub > MAX_SUBSTEPS:
        raise TimeStepError(f"transport needs {n_sub} sub-steps (> {MAX_SUBSTEPS})")
    h = dt / n_sub
    fx_pos, fy_pos = fx > 0, fy > 0
    s = np.array(state.sw, dtype=np.float64)
    smin, smax = config.relperm.s_min, config.relperm.s_max
    prod_cells = [(w, q) for w, q in sol.producer_rates]
    oil = np.zeros(len(prod_cells))
    water = np.zeros(len(prod_cells))
    clamped = 0.0
    for _ in range(n_sub):
        f = fractional_flow(s, config)
        wx = fx * np.where(fx_pos, f[:-1, :], f[1:, :])
        wy = fy * np.where(fy_pos, f[:, :-1], f[:, 1:])
        div = src.copy()
        div[:-1, :] -= wx
        div[1:, :] += wx
        div[:, :-1] -= wy
        div[:, 1:] += wy
        for k, (w, q) in enumerate(prod_cells):
            fw = f[w.i, w.j] if q > 0 else 1.0
            div[w.i, w.j] -= q * fw
            water[k] += q * fw * h
            oil[k] += q * (1.0 - fw) * h
        s += (h / pv) * div
        lo_mask, hi_mask = s < smin, s > smax
        if lo_mask.any() or hi_mask.any():
            clamped += float(np.sum(np.clip(s, smin, smax) - s)) * pv
            np.clip(s, smin, smax, out=s)
    if clamped:
        log.debug("saturation clamp moved %.3e m^3 of water", clamped)
    return TransportResult(s, oil / dt * DAY, water / dt * DAY, n_sub, clamped)


def water_volume(sw, config):
    return float(np.sum(sw)) * config.pore_volume


@dataclass
class StepReport:
    """Diagnostics of one simulator step."""
    residual: float
    substeps: int
    injected: float  # m^3 of water over the step
    produced_water: float
    clamped_volume: float


def step(state: SimState, controls, dt_days, config: ReservoirConfig, report=False):
    """Advance one step: pressure solve, then saturation transport.

    Returns ``(next_state, WellOutput)`` or, with ``report``, also a StepReport.
    The pressure in the returned state is the one solved for this step.
    """
    dt = dt_days * DAY
    sol = solve_pressure(state, controls, config)
    tr = update_saturation(state, sol, dt, config)
    nxt = SimState(sol.p / PSI, tr.sw, state.step + 1)
    out = WellOutput(np.maximum(tr.oil, 0.0), np.maximum(tr.water, 0.0))
    if not report:
        return nxt, out
    injected = sum(q for _, q in sol.injector_rates) * dt
    rep = StepReport(sol.residual, tr.substeps, injected, float(np.sum(tr.water)) * dt / DAY, tr.clamped_volume)
    return nxt, out, rep


def gaussian_log_permeability(dims: GridDims, seed, mean_md=100.0, sigma_ln=1.0, corr_len=10.0):
    """Log-normal field: ln k Gaussian with exponential covariance, arithmetic mean ``mean_md``."""
    nx, ny = dims.shape
    xi, yi = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    pts = np.column_stack([xi.ravel(), yi.ravel()]).astype(np.float64)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    cov = np.exp(-d / corr_len)
    cov[np.diag_indices_from(cov)] += 1e-10
    L = np.linalg.cholesky(cov)
    g = L @ np.random.default_rng(seed).standard_normal(len(pts))
    mu = math.log(mean_md) - 0.5 * sigma_ln ** 2
    return np.exp(mu + sigma_ln * g).reshape(nx, ny)
