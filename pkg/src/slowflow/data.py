"""Synthetic slow-changing ocean analogue and its preprocessing.

The generator integrates tracer layers by explicit Euler advection-diffusion
on the lat-lon index grid, driven by a slowly rotating gyre plus a
wind-driven component, and relaxed toward seasonally varying atmospheric
forcing. Preprocessing runs in a fixed order: climatology subtraction
(periodic channels only), per-channel normalisation, then zero-fill of land.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import GridSpec

TRACER_A = ("tracer_a_0", "tracer_a_1", "tracer_a_2")
TRACER_B = ("tracer_b_0", "tracer_b_1", "tracer_b_2")
PROGNOSTIC = TRACER_A + TRACER_B + ("u_vel", "v_vel", "height")
FORCING = ("wind_u", "wind_v", "air_temp", "pressure")
CHANNELS = PROGNOSTIC + FORCING
PERIODIC = TRACER_A + TRACER_B + ("height",)

N_PROG = len(PROGNOSTIC)
N_FORCE = len(FORCING)


class DataError(ValueError):
    pass


class CFLError(DataError):
    def __init__(self, courant: float, substeps: int, suggested: int):
        super().__init__(
            f"explicit integrator unstable: Courant number {courant:.3f} with {substeps} substeps; "
            f"use at least {suggested} substeps per day"
        )
        self.suggested = suggested


@dataclass
class FieldState:
    day: int
    channels: tuple[str, ...]
    values: np.ndarray  # (C, n_lat, n_lon) float32
    land_mask: np.ndarray  # (n_lat, n_lon) bool

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.values[self.channels.index(name)]
        except ValueError:
            raise KeyError(f"unknown channel {name!r}; available: {', '.join(self.channels)}") from None

    def with_values(self, values: np.ndarray) -> "FieldState":
        return replace(self, values=np.asarray(values, dtype=np.float32))


def stack_values(seq: list[FieldState]) -> np.ndarray:
    return np.stack([s.values for s in seq]) if seq else np.zeros((0,), np.float32)


# ---------------------------------------------------------------- land mask


def smooth_noise(rng: np.random.Generator, n_lat: int, n_lon: int, n_modes: int = 4) -> np.ndarray:
    """Random smooth field from a handful of low-order Fourier modes, unit std."""
    y = (np.arange(n_lat) + 0.5) / n_lat * np.pi
    x = (np.arange(n_lon) + 0.5) / n_lon * 2.0 * np.pi
    out = np.zeros((n_lat, n_lon))
    for m in range(n_modes):
        for n in range(1, n_modes + 1):
            a, b = rng.normal(size=2) / (1.0 + m + n)
            out += np.outer(np.sin(n * y), a * np.cos(m * x) + b * np.sin(m * x))
    return out / (out.std() + 1e-12)


def make_land_mask(n_lat: int, n_lon: int, seed: int = 7, fraction: float = 0.25) -> np.ndarray:
    """Procedural continents: the top ``fraction`` of a smooth random field."""
    if fraction <= 0:
        return np.zeros((n_lat, n_lon), dtype=bool)
    field_ = smooth_noise(np.random.default_rng(seed), n_lat, n_lon, n_modes=3)
    return field_ >= np.quantile(field_, 1.0 - fraction)


# ---------------------------------------------------------------- generator


@dataclass
class PhysicsParams:
    period: int = 64  # days per seasonal cycle
    substeps: int = 4
    diffusivity: float = 0.05  # cells^2 / day
    gyre_strength: float = 1.2  # streamfunction amplitude, cells^2 / day
    wind_coupling: float = 0.5
    rotation_days: float = 512.0  # period of the slow gyre rotation
    forcing: float = 1.0  # scales all sources and seasonal signals; 0 disables them
    relax_rate: float = 0.08  # 1/day, surface relaxation toward atmosphere
    mixing_rate: float = 0.04  # 1/day, exchange between tracer layers
    noise: float = 0.3  # amplitude of weather noise in the forcing
    noise_memory: float = 6.0  # days, AR(1) decorrelation time
    boundary: str = "closed"  # closed | periodic (latitude direction)
    spinup_days: int = 64


def _streamfunction_corners(psi_centres: np.ndarray, land: np.ndarray, boundary: str) -> np.ndarray:
    """Average a cell-centred streamfunction onto cell corners (n_lat+1, n_lon).

    Corners touching land, and the polar boundary rows when closed, are set
    to zero so no flux crosses coasts or walls and the flow stays
    divergence-free.
    """
    h, w = psi_centres.shape
    ext = np.vstack([psi_centres[-1:], psi_centres, psi_centres[:1]]) if boundary == "periodic" else np.vstack(
        [psi_centres[:1], psi_centres, psi_centres[-1:]]
    )
    # corner (a, b) is the north-west corner of cell (a, b)
    c = 0.25 * (ext[:-1] + ext[1:] + np.roll(ext[:-1], 1, axis=1) + np.roll(ext[1:], 1, axis=1))
    touch = np.zeros((h + 1, w), dtype=bool)
    for da in (0, 1):
        for db in (0, 1):
            t = np.zeros((h + 1, w), dtype=bool)
            t[da:da + h] |= np.roll(land, db, axis=1)
            touch |= t
    if boundary == "periodic":
        touch[0] |= touch[h]
        touch[h] = touch[0]
        c[h] = c[0]
    else:
        c[0] = 0.0
        c[h] = 0.0
    c[touch] = 0.0
    return c


def face_fluxes(psi_c: np.ndarray):
    """East-face (n_lat, n_lon) and north-face (n_lat+1, n_lon) volume fluxes.

    The east face of cell (i, j) spans corners (i, j+1)-(i+1, j+1); the north
    face spans (i, j)-(i, j+1). Differencing one streamfunction makes the
    discrete divergence vanish identically.
    """
    east = np.roll(psi_c[:-1], -1, axis=1) - np.roll(psi_c[1:], -1, axis=1)
    north = psi_c - np.roll(psi_c, -1, axis=1)
    return east, north


class _Integrator:
    def __init__(self, land: np.ndarray, p: PhysicsParams):
        self.land = land
        self.ocean = ~land
        self.p = p
        h, w = land.shape
        # Diffusive conductance of each face; zero across coasts and closed walls.
        self.k_east = (self.ocean & np.roll(self.ocean, -1, axis=1)).astype(float) * p.diffusivity
        kn = np.zeros((h + 1, w))
        kn[1:h] = (self.ocean[:-1] & self.ocean[1:]).astype(float) * p.diffusivity
        if p.boundary == "periodic":
            kn[0] = kn[h] = (self.ocean[-1] & self.ocean[0]).astype(float) * p.diffusivity
        self.k_north = kn

    def courant(self, east, north, dt):
        out_e = np.maximum(east, 0) + np.maximum(-np.roll(east, 1, axis=1), 0)
        out_n = np.maximum(north[:-1], 0) + np.maximum(-north[1:], 0)
        return float(((out_e + out_n) * dt).max() + 4 * self.p.diffusivity * dt)

    def step(self, c: np.ndarray, east: np.ndarray, north: np.ndarray, dt: float) -> np.ndarray:
        """One flux-form upwind advection-diffusion step; ``c`` is (..., n_lat, n_lon)."""
        h = c.shape[-2]
        c_e = np.roll(c, -1, axis=-1)
        f_e = np.where(east > 0, east * c, east * c_e) - self.k_east * (c_e - c)
        # north face of row a separates row a-1 (north) and row a (south)
        if self.p.boundary == "periodic":
            above = np.roll(c, 1, axis=-2)
        else:
            above = np.concatenate([c[..., :1, :], c[..., :-1, :]], axis=-2)
        vn = north[:h]
        f_n = np.where(vn > 0, vn * c, vn * above) - self.k_north[:h] * (above - c)
        if self.p.boundary == "periodic":
            f_s = np.roll(f_n, -1, axis=-2)
        else:
            f_s = np.concatenate([f_n[..., 1:, :], np.zeros_like(f_n[..., :1, :])], axis=-2)
        div = f_e - np.roll(f_e, 1, axis=-1) + f_n - f_s
        return c - dt * div


def _forcing_fields(t: float, grid: GridSpec, p: PhysicsParams, noise: np.ndarray) -> np.ndarray:
    lat = np.radians(grid.lat)[:, None] * np.ones((1, grid.n_lon))
    lon = np.radians(grid.lon)[None, :] * np.ones((grid.n_lat, 1))
    season = math.sin(2.0 * math.pi * t / p.period)
    f = p.forcing
    wind_u = -np.cos(3.0 * lat) * (1.0 + 0.3 * f * season) + 0.5 * p.noise * noise[0]
    wind_v = 0.3 * np.sin(2.0 * lon) * np.cos(lat) + 0.5 * p.noise * noise[1]
    air_temp = 20.0 * np.cos(lat) ** 2 - 4.0 + f * 8.0 * np.sin(lat) * season + 1.5 * p.noise * noise[2]
    pressure = 1012.0 + 6.0 * np.sin(2.0 * lat) * f * season + 4.0 * p.noise * noise[3]
    return np.stack([wind_u, wind_v, air_temp, pressure])


def generate_synthetic(seed: int, n_days: int, grid: GridSpec, physics: PhysicsParams | None = None) -> list[FieldState]:
    """Daily states ``0 .. n_days-1`` from one integration after spin-up."""
    p = physics or PhysicsParams()
    if n_days < 2 * p.period:
        raise DataError(f"need at least two seasonal cycles ({2 * p.period} days), got {n_days}")
    if p.boundary not in ("closed", "periodic"):
        raise DataError(f"unknown boundary {p.boundary!r}")
    rng = np.random.default_rng(seed)
    land = grid.land_mask
    ocean = ~land
    h, w = land.shape
    integ = _Integrator(land, p)
    dt = 1.0 / p.substeps

    lat = np.radians(grid.lat)[:, None] * np.ones((1, w))
    lon_idx = np.arange(w)[None, :] * np.ones((h, 1))
    gyre_shape = np.sin(np.pi * (np.arange(h)[:, None] + 0.5) / h) ** 2 * np.ones((1, w))
    salinity_pattern = smooth_noise(rng, h, w, n_modes=3)

    # Weather noise: AR(1) in time, smooth in space.
    n_noise = 5
    bases = [[smooth_noise(rng, h, w) for _ in range(3)] for _ in range(n_noise)]
    coef = rng.normal(size=(n_noise, 3))
    rho = math.exp(-1.0 / p.noise_memory)

    def noise_fields(cf):
        return np.stack([sum(cf[i, j] * bases[i][j] for j in range(3)) / math.sqrt(3) for i in range(4)] +
                        [sum(cf[4, j] * bases[4][j] for j in range(3)) / math.sqrt(3)])

    def velocity(t, cf):
        nz = noise_fields(cf)
        theta = 2.0 * math.pi * t / p.rotation_days
        ns = 1.0 + 0.25 * p.forcing * math.sin(2.0 * math.pi * t / p.period)
        psi = p.gyre_strength * ns * gyre_shape * np.cos(2.0 * np.pi * 2.0 * lon_idx / w + theta)
        psi = psi * np.sin(2.0 * lat + 0.3) + p.wind_coupling * p.noise * nz[0] * gyre_shape
        return face_fluxes(_streamfunction_corners(psi, land, p.boundary))

    def tendencies(c, forcing):
        """Source terms for the 6 tracer layers and the relaxation target of height."""
        air = forcing[2]
        wind_speed = np.hypot(forcing[0], forcing[1])
        src = np.zeros_like(c)
        f = p.forcing
        if f == 0.0:
            return src
        a, b = c[:3], c[3:6]
        target_b = 35.0 + 0.8 * salinity_pattern + 0.05 * (air - 12.0) + 0.2 * wind_speed
        src[0] = p.relax_rate * (air - a[0])
        src[3] = 0.5 * p.relax_rate * (target_b - b[0])
        for k in (1, 2):
            src[k] = p.mixing_rate * (a[k - 1] - a[k])
            src[3 + k] = p.mixing_rate * (b[k - 1] - b[k])
        return src * f

    t0 = -float(p.spinup_days)
    nz = coef.copy()
    forcing = _forcing_fields(t0, grid, p, noise_fields(nz))
    c = np.zeros((6, h, w))
    c[0:3] = forcing[2]
    c[3:6] = 35.0 + (0.8 * salinity_pattern if p.forcing else 0.0)
    eta = np.zeros((h, w))
    c[:, land] = 0.0
    east, north = velocity(t0, nz)
    max_cfl = integ.courant(east, north, dt)

    states: list[FieldState] = []
    total = p.spinup_days + n_days
    for step in range(total):
        t = t0 + step
        day = step - p.spinup_days
        if day >= 0:
            u_c = 0.5 * (east + np.roll(east, 1, axis=1))
            v_c = 0.5 * (north[:h] + north[1:h + 1])
            vals = np.concatenate([c, u_c[None], v_c[None], eta[None], forcing]).astype(np.float32)
            vals[:, land] = 0.0
            states.append(FieldState(day, CHANNELS, vals, land.copy()))
        if step == total - 1:
            break
        nz_next = rho * nz + math.sqrt(1.0 - rho * rho) * rng.normal(size=nz.shape)
        forcing_next = _forcing_fields(t + 1, grid, p, noise_fields(nz_next))
        for k in range(p.substeps):
            frac = (k + 0.5) / p.substeps
            fz = (1 - frac) * nz + frac * nz_next
            east, north = velocity(t + frac, fz)
            cfl = integ.courant(east, north, dt)
            max_cfl = max(max_cfl, cfl)
            if cfl > 1.0:
                raise CFLError(cfl, p.substeps, int(math.ceil(p.substeps * cfl)) + 1)
            fmix = (1 - frac) * forcing + frac * forcing_next
            c = integ.step(c, east, north, dt) + dt * tendencies(c, fmix)
            c[:, land] = 0.0
        # Height: steric response plus inverse barometer, relaxed over ~10 days.
        a_mean = c[:3].mean(axis=0)
        eta_eq = 0.04 * (a_mean - 12.0) - 0.08 * (c[3] - 35.0) - 0.01 * (forcing_next[3] - 1012.0)
        eta = eta + (eta_eq * p.forcing - eta) / 10.0
        eta[land] = 0.0
        forcing, nz = forcing_next, nz_next
    return states


def relative_change(seq: list[FieldState]) -> float:
    """Mean of |O_{t+1} - O_t| / |O_t| over the prognostic channels."""
    vals = stack_values(seq)[:, :N_PROG].astype(np.float64)
    diff = np.linalg.norm((vals[1:] - vals[:-1]).reshape(len(vals) - 1, -1), axis=1)
    base = np.linalg.norm(vals[:-1].reshape(len(vals) - 1, -1), axis=1)
    return float(np.mean(diff / base))


# ---------------------------------------------------------------- climatology


@dataclass
class ClimatologyTable:
    period: int
    channels: tuple[str, ...]
    values: np.ndarray  # (period, len(channels), n_lat, n_lon)

    def for_day(self, day: int) -> np.ndarray:
        return self.values[day % self.period]

    def subset(self, channels) -> "ClimatologyTable":
        idx = [self.channels.index(c) for c in channels]
        return ClimatologyTable(self.period, tuple(channels), self.values[:, idx].copy())


def compute_climatology(train: list[FieldState], period: int = 64, periodic_channels=PERIODIC) -> ClimatologyTable:
    if len(train) < 2 * period:
        raise DataError(f"climatology needs at least two cycles ({2 * period} days), got {len(train)}")
    names = train[0].channels
    idx = [names.index(c) for c in periodic_channels]
    shape = (period, len(idx)) + train[0].values.shape[1:]
    acc = np.zeros(shape)
    count = np.zeros(period)
    for s in train:
        d = s.day % period
        acc[d] += s.values[idx]
        count[d] += 1
    if np.any(count == 0):
        raise DataError(f"no training samples for day-of-cycle {int(np.flatnonzero(count == 0)[0])}")
    acc /= count[:, None, None, None]
    return ClimatologyTable(period, tuple(periodic_channels), acc.astype(np.float32))


def _clim_slots(state: FieldState, clim: ClimatologyTable) -> list[int]:
    return [state.channels.index(c) for c in clim.channels if c in state.channels]


def to_anomaly(state: FieldState, clim: ClimatologyTable) -> FieldState:
    vals = state.values.copy()
    table = clim.for_day(state.day)
    for j, name in enumerate(clim.channels):
        if name in state.channels:
            i = state.channels.index(name)
            vals[i] = vals[i] - table[j]
    return state.with_values(vals)


def from_anomaly(state: FieldState, clim: ClimatologyTable) -> FieldState:
    vals = state.values.copy()
    table = clim.for_day(state.day)
    for j, name in enumerate(clim.channels):
        if name in state.channels:
            i = state.channels.index(name)
            vals[i] = vals[i] + table[j]
    return state.with_values(vals)


# ---------------------------------------------------------------- normalisation


@dataclass
class NormStats:
    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        bad = np.flatnonzero(~(self.std > 0))
        if bad.size:
            raise DataError(f"zero standard deviation for channel {self.channels[bad[0]]!r}")

    @classmethod
    def from_states(cls, train: list[FieldState]) -> "NormStats":
        vals = stack_values(train).astype(np.float64)
        ocean = ~train[0].land_mask
        sel = vals[:, :, ocean]  # (T, C, n_ocean)
        return cls(train[0].channels, sel.mean(axis=(0, 2)), sel.std(axis=(0, 2)))

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["channels"]), np.array(d["mean"]), np.array(d["std"]))

    def index(self, channels) -> np.ndarray:
        return np.array([self.channels.index(c) for c in channels])


def normalize(state: FieldState, stats: NormStats) -> FieldState:
    i = stats.index(state.channels)
    v = (state.values - stats.mean[i, None, None]) / stats.std[i, None, None]
    return state.with_values(v)


def denormalize(state: FieldState, stats: NormStats) -> FieldState:
    i = stats.index(state.channels)
    v = state.values.astype(np.float64) * stats.std[i, None, None] + stats.mean[i, None, None]
    return state.with_values(v)


def fill_land(state: FieldState) -> FieldState:
    vals = state.values.copy()
    vals[:, state.land_mask] = 0.0
    return state.with_values(vals)


# ---------------------------------------------------------------- prepared arrays


@dataclass
class Splits:
    train: list[FieldState]
    valid: list[FieldState]
    test: list[FieldState]

    def check_disjoint(self) -> None:
        spans = [(s[0].day, s[-1].day) for s in (self.train, self.valid, self.test) if s]
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if not a1 < b0:
                raise DataError(f"splits overlap: days {a0}-{a1} and {b0}-{b1}")


def split_days(states: list[FieldState], n_train: int, n_valid: int, n_test: int) -> Splits:
    if len(states) < n_train + n_valid + n_test:
        raise DataError(f"need {n_train + n_valid + n_test} days, have {len(states)}")
    s = Splits(states[:n_train], states[n_train:n_train + n_valid], states[n_train + n_valid:n_train + n_valid + n_test])
    s.check_disjoint()
    return s


@dataclass
class Preprocessor:
    """Fitted pipeline: anomaly (optional) -> normalise -> land fill."""

    stats: NormStats
    clim: ClimatologyTable | None
    land_mask: np.ndarray

    @classmethod
    def fit(cls, train: list[FieldState], period: int = 64, climatology: bool = True) -> "Preprocessor":
        clim = compute_climatology(train, period) if climatology else None
        base = [to_anomaly(s, clim) for s in train] if clim is not None else train
        return cls(NormStats.from_states(base), clim, train[0].land_mask.copy())

    def forward(self, state: FieldState) -> FieldState:
        if self.clim is not None:
            state = to_anomaly(state, self.clim)
        return fill_land(normalize(state, self.stats))

    def inverse(self, state: FieldState) -> FieldState:
        out = denormalize(state, self.stats)
        if self.clim is not None:
            out = from_anomaly(out, self.clim)
        return fill_land(out)

    def arrays(self, seq: list[FieldState]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Model-space arrays: prognostic (T, N, C_p), forcing (T, N, C_f), days (T,)."""
        vals = stack_values([self.forward(s) for s in seq])
        t, c, h, w = vals.shape
        flat = vals.reshape(t, c, h * w).transpose(0, 2, 1)
        names = seq[0].channels
        pi = [names.index(n) for n in PROGNOSTIC]
        fi = [names.index(n) for n in FORCING]
        days = np.array([s.day for s in seq])
        return (np.ascontiguousarray(flat[:, :, pi]), np.ascontiguousarray(flat[:, :, fi]), days)

    def physical_prognostic(self, pred: np.ndarray, days: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
        """Map model-space prognostic arrays (T, N, C_p) back to physical (T, C_p, n_lat, n_lon)."""
        h, w = grid_shape
        t = pred.shape[0]
        vals = pred.transpose(0, 2, 1).reshape(t, N_PROG, h, w).astype(np.float64)
        i = self.stats.index(PROGNOSTIC)
        vals = vals * self.stats.std[i][None, :, None, None] + self.stats.mean[i][None, :, None, None]
        if self.clim is not None:
            slots = [(PROGNOSTIC.index(c), j) for j, c in enumerate(self.clim.channels) if c in PROGNOSTIC]
            for k, d in enumerate(days):
                table = self.clim.for_day(int(d))
                for pi, j in slots:
                    vals[k, pi] += table[j]
        vals[:, :, self.land_mask] = 0.0
        return vals
