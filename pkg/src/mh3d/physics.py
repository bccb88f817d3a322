"""Langevin magnetization model, scan geometry, and the MPI PSF tensor.

Conventions used throughout the package:

* SI units everywhere (meters, seconds, Hz, Tesla).
* The drive coil excites along ``z``; the slow focus field rasters a
  serpentine pattern in the ``xy`` plane at a fixed slab position ``z_j``.
* Image arrays are indexed ``[ix, iy, iz]``.
* The saturation argument of the Langevin function is ``beta * |H|`` with
  ``H`` in Tesla, i.e. the tensor below is evaluated with ``H_sat = 1/beta``
  so that its arguments agree with the ``beta * |H|`` form of the signal
  equation.

All functions here are pure; they are safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SERIES_SWITCH",
    "MAX_DERIVATIVE_ORDER",
    "ConfigError",
    "Mesh",
    "Phantom",
    "ScannerConfig",
    "coth_derivative_polynomial",
    "default_scanner_config",
    "ffp_position",
    "ffp_velocity",
    "langevin",
    "langevin_derivative",
    "langevin_series_coefficients",
    "mpi_response",
    "psf_tensor",
    "raster_grid",
]

# Below this |x| the Taylor series is used instead of the coth/1/x closed
# forms.  The closed form loses k!/x^(k+1)-sized cancellation as x shrinks
# (2e-4 relative already at order 8, x = 0.15), while the series converges
# inside |x| < pi; at 1.25 both branches agree to ~1e-11 for orders <= 8.
SERIES_SWITCH = 1.25

# The closed-form branch represents L^(k) as P_k(coth x) - (-1)^k k!/x^(k+1);
# the two parts cancel increasingly at high order.  Order 12 keeps the
# worst-case relative error below ~1e-9 on |x| >= SERIES_SWITCH.
MAX_DERIVATIVE_ORDER = 12

_GRADIENT_EPS_T = 1e-9  # |G x| below this is treated as the mesh-center limit


class ConfigError(ValueError):
    """Raised when a scanner configuration violates its invariants."""


# ---------------------------------------------------------------------------
# Langevin function and derivatives
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bernoulli_numbers(n_max: int) -> tuple[Fraction, ...]:
    b = [Fraction(0)] * (n_max + 1)
    b[0] = Fraction(1)
    for m in range(1, n_max + 1):
        acc = Fraction(0)
        for j in range(m):
            acc += math.comb(m + 1, j) * b[j]
        b[m] = -acc / (m + 1)
    return tuple(b)


@lru_cache(maxsize=None)
def langevin_series_coefficients(n_terms: int) -> tuple[Fraction, ...]:
    """Exact coefficients a_n of L(x) = sum_{n>=1} a_n x^(2n-1).

    a_n = 4^n B_{2n} / (2n)! with B the Bernoulli numbers; the leading terms
    are 1/3, -1/45, 2/945, ...
    """
    bern = _bernoulli_numbers(2 * n_terms)
    return tuple(
        Fraction(4**n) * bern[2 * n] / math.factorial(2 * n)
        for n in range(1, n_terms + 1)
    )


@lru_cache(maxsize=None)
def coth_derivative_polynomial(order: int) -> tuple[int, ...]:
    """Integer coefficients (ascending in u) of P_k with coth^(k)(x) = P_k(coth x).

    Generated once by the recursion P_0 = u, P_{k+1} = P_k'(u) (1 - u^2);
    exposed so tests can re-evaluate the same polynomials at arbitrary
    precision.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    if order == 0:
        return (0, 1)
    prev = coth_derivative_polynomial(order - 1)
    deriv = [i * c for i, c in enumerate(prev)][1:]
    out = [0] * (len(deriv) + 2)
    for i, c in enumerate(deriv):
        out[i] += c
        out[i + 2] -= c
    return tuple(out)


@lru_cache(maxsize=None)
def _series_derivative_coefficients(order: int) -> tuple[np.ndarray, np.ndarray]:
    """(exponents, float coefficients) of the k-th derivative of the L series."""
    # enough terms for full double precision at |x| = SERIES_SWITCH, where
    # the term ratio is (x/pi)^2 ~ 0.16 against (2n)^order growth
    n_terms = order // 2 + 60
    a = langevin_series_coefficients(n_terms)
    exps, coefs = [], []
    for n in range(1, n_terms + 1):
        p = 2 * n - 1
        if p < order:
            continue
        c = a[n - 1] * Fraction(math.factorial(p), math.factorial(p - order))
        exps.append(p - order)
        coefs.append(float(c))
    return np.asarray(exps), np.asarray(coefs)


def _series_eval(x: np.ndarray, order: int) -> np.ndarray:
    exps, coefs = _series_derivative_coefficients(order)
    x2 = x * x
    # exponents step by 2 from exps[0]; Horner in x^2
    acc = np.zeros_like(x)
    for c in coefs[::-1]:
        acc = acc * x2 + c
    if exps[0] == 1:
        acc = acc * x
    return acc


def langevin(x):
    """Langevin function coth(x) - 1/x, continued by 0 at the origin.

    Accepts scalars or arrays, real or complex; near the origin a truncated
    Taylor series avoids the cancellation between coth and 1/x.
    """
    x = np.asarray(x)
    small = np.abs(x) < SERIES_SWITCH
    safe = np.where(small, 1.0, x)
    closed = 1.0 / np.tanh(safe) - 1.0 / safe
    series = _series_eval(np.where(small, x, 0.0), 0)
    out = np.where(small, series, closed)
    return out if out.ndim else out[()]


def langevin_derivative(x, order: int):
    """order-th derivative of the Langevin function.

    Closed forms in coth away from the origin, differentiated series inside
    |x| < SERIES_SWITCH.  Supported orders are 1..MAX_DERIVATIVE_ORDER.
    """
    if not 1 <= order <= MAX_DERIVATIVE_ORDER:
        raise ValueError(
            f"derivative order {order} outside supported range "
            f"1..{MAX_DERIVATIVE_ORDER}"
        )
    x = np.asarray(x)
    small = np.abs(x) < SERIES_SWITCH
    safe = np.where(small, 1.0, x)
    poly = np.asarray(coth_derivative_polynomial(order)[::-1], dtype=float)
    sign = -1.0 if order % 2 else 1.0
    closed = np.polyval(poly, 1.0 / np.tanh(safe))
    closed = closed - sign * math.factorial(order) / safe ** (order + 1)
    series = _series_eval(np.where(small, x, 0.0), order)
    out = np.where(small, series, closed)
    return out if out.ndim else out[()]


# ---------------------------------------------------------------------------
# Geometry containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Mesh:
    """Regular voxel grid. ``origin`` is the center of voxel [0, 0, 0]."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if any(n < 1 for n in self.shape):
            raise ValueError(f"mesh shape must be >= 1 per axis, got {self.shape}")
        if any(d <= 0 for d in self.spacing):
            raise ValueError(f"mesh spacing must be positive, got {self.spacing}")

    @classmethod
    def centered(cls, shape: Sequence[int], spacing: Sequence[float]) -> "Mesh":
        shape = tuple(int(n) for n in shape)
        spacing = tuple(float(d) for d in spacing)
        origin = tuple(-(n - 1) / 2.0 * d for n, d in zip(shape, spacing))
        return cls(shape, spacing, origin)

    def axis(self, i: int) -> np.ndarray:
        return self.origin[i] + self.spacing[i] * np.arange(self.shape[i])

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.axis(0), self.axis(1), self.axis(2), indexing="ij")


def _uniform_b1(vec: Sequence[float]) -> Callable[[np.ndarray], np.ndarray]:
    v = np.asarray(vec, dtype=float)

    def b1(points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(v, points.shape[:-1] + (3,))

    return b1


@dataclass(frozen=True, eq=False)
class Phantom:
    """SPION density: weighted point sources and/or a voxel grid.

    ``sensitivity`` is the receive-coil vector field b1, either a constant
    3-vector or a callable mapping (..., 3) positions to (..., 3) values.
    """

    point_sources: tuple[tuple[tuple[float, float, float], float], ...] = ()
    voxel_grid: np.ndarray | None = None
    mesh: Mesh | None = None
    sensitivity: Sequence[float] | Callable = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.voxel_grid is not None and self.mesh is None:
            raise ValueError("voxel phantom requires a mesh")
        for _, w in self.point_sources:
            if w < 0:
                raise ValueError("point source weights must be >= 0")
        if self.voxel_grid is not None and np.any(np.asarray(self.voxel_grid) < 0):
            raise ValueError("voxel values must be >= 0")

    @classmethod
    def from_points(cls, sources, sensitivity=(0.0, 0.0, 1.0)) -> "Phantom":
        pts = tuple((tuple(float(c) for c in pos), float(w)) for pos, w in sources)
        return cls(point_sources=pts, sensitivity=sensitivity)

    @classmethod
    def from_grid(cls, values, mesh: Mesh, sensitivity=(0.0, 0.0, 1.0)) -> "Phantom":
        return cls(voxel_grid=np.asarray(values, dtype=float), mesh=mesh,
                   sensitivity=sensitivity)

    def b1(self, points: np.ndarray) -> np.ndarray:
        if callable(self.sensitivity):
            return np.asarray(self.sensitivity(points), dtype=float)
        return _uniform_b1(self.sensitivity)(points)

    def as_sources(self) -> tuple[np.ndarray, np.ndarray]:
        """All sources as (positions (N,3), weights (N,)).

        Voxel phantoms contribute their nonzero voxels with midpoint
        quadrature weight value * dV.
        """
        pos, w = [], []
        for p, weight in self.point_sources:
            pos.append(p)
            w.append(weight)
        if self.voxel_grid is not None:
            values = np.asarray(self.voxel_grid, dtype=float)
            idx = np.argwhere(values != 0.0)
            if idx.size:
                xyz = np.stack(
                    [self.mesh.origin[i] + self.mesh.spacing[i] * idx[:, i]
                     for i in range(3)], axis=-1)
                pos.extend(xyz.tolist())
                w.extend((values[tuple(idx.T)] * self.mesh.voxel_volume).tolist())
        if not pos:
            return np.zeros((0, 3)), np.zeros((0,))
        return np.asarray(pos, dtype=float), np.asarray(w, dtype=float)


# ---------------------------------------------------------------------------
# Scanner configuration
# ---------------------------------------------------------------------------

G0_DEFAULT = 0.554  # T/m, reference gradient strength of the default preset


@dataclass(frozen=True, eq=False)
class ScannerConfig:
    """Scan parameters for the FFP scanner with z-axis drive.

    ``shift_rate`` is the serpentine line speed along x; one portrait pixel
    is traversed per drive period, so the portrait pixel size equals
    ``shift_rate / drive_frequency``.  ``raster_lines``/``line_periods`` can
    override the raster shape otherwise derived from the field of view.
    """

    gradient_matrix: np.ndarray              # (3, 3), T/m
    drive_frequency: float                   # f0, Hz
    drive_amplitude: float                   # B_ex, T
    beta: float                              # 1/T
    magnetic_moment: float                   # A m^2
    sample_rate: float                       # Hz
    shift_rate: float                        # m/s
    z_slab_positions: tuple[float, ...]      # m
    fov: tuple[float, float, float]          # m
    max_harmonic: int = 8
    sample_phase: float = 0.0                # rad; gridding instant in the period
    raster_lines: int | None = None
    line_periods: int | None = None
    # guard periods appended to both ends of every raster line, scanned but
    # not gridded; they keep band-filter retrace transients out of the
    # portrait pixels
    overscan_periods: int = 4

    def __post_init__(self):
        g = np.array(self.gradient_matrix, dtype=float)
        if g.shape != (3, 3):
            raise ConfigError(f"gradient_matrix must be 3x3, got {g.shape}")
        object.__setattr__(self, "gradient_matrix", g)
        object.__setattr__(self, "z_slab_positions",
                           tuple(float(z) for z in self.z_slab_positions))
        object.__setattr__(self, "fov", tuple(float(v) for v in self.fov))
        self.validate()

    def validate(self) -> None:
        if self.drive_frequency <= 0:
            raise ConfigError("drive_frequency must be positive")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.gradient_matrix[2, 2] <= 0:
            raise ConfigError("drive-axis gradient G_zz must be positive")
        spp = self.sample_rate / self.drive_frequency
        if abs(spp - round(spp)) > 1e-9 or round(spp) < 2:
            raise ConfigError(
                "sample_rate must be an integer multiple (>= 2) of "
                f"drive_frequency; got ratio {spp}")
        if self.sample_rate <= 2 * self.max_harmonic * self.drive_frequency:
            raise ConfigError(
                f"sample_rate {self.sample_rate} violates Nyquist for harmonic "
                f"{self.max_harmonic} of f0={self.drive_frequency}")
        zs = self.z_slab_positions
        if len(zs) > 1:
            dz = np.diff(zs)
            if np.any(dz <= 0):
                raise ConfigError("z_slab_positions must be strictly increasing")
            if not np.allclose(dz, dz[0], rtol=1e-9, atol=1e-12):
                raise ConfigError("z_slab_positions must be equally spaced")
            if dz[0] >= 2 * self.excursion:
                raise ConfigError(
                    f"slab spacing {dz[0]} must be < 2 * excursion "
                    f"({2 * self.excursion}) so neighboring trajectories overlap")
        if self.shift_rate == 0 and (self.raster_lines is None
                                     or self.line_periods is None):
            raise ConfigError(
                "zero shift_rate requires explicit raster_lines and line_periods")
        if self.shift_rate < 0:
            raise ConfigError("shift_rate must be >= 0")

    # -- derived quantities ------------------------------------------------

    @property
    def excursion(self) -> float:
        """Drive-field position excursion A = B_ex / G_zz."""
        return self.drive_amplitude / self.gradient_matrix[2, 2]

    @property
    def gamma(self) -> float:
        """Composite constant beta * G along the drive axis (1/m)."""
        return self.beta * self.gradient_matrix[2, 2]

    @property
    def gamma_a(self) -> float:
        """Dimensionless drive strength gamma * A = beta * B_ex."""
        return self.beta * self.drive_amplitude

    @property
    def samples_per_period(self) -> int:
        return int(round(self.sample_rate / self.drive_frequency))

    @property
    def portrait_pixel(self) -> float:
        """Raster advance per drive period (m)."""
        return self.shift_rate / self.drive_frequency

    @property
    def slab_spacing(self) -> float:
        zs = self.z_slab_positions
        if len(zs) < 2:
            return 0.0
        return zs[1] - zs[0]


def raster_grid(cfg: ScannerConfig) -> tuple[int, int, float, float, float]:
    """Portrait grid of the serpentine raster: (nx, ny, dx, x0, y0).

    nx gridded drive periods per line, ny lines; pixel pitch dx along both
    x and y; (x0, y0) is the first pixel center.  Derived from the field of
    view unless the config overrides the line counts.  Each scanned line
    additionally has ``overscan_periods`` guard periods beyond both ends.
    """
    dx = cfg.portrait_pixel
    if cfg.line_periods is not None:
        nx = int(cfg.line_periods)
    else:
        if dx <= 0:
            raise ConfigError("cannot derive raster from fov with zero shift_rate")
        nx = int(math.floor(cfg.fov[0] / dx + 1e-9)) + 1
    if cfg.raster_lines is not None:
        ny = int(cfg.raster_lines)
    else:
        if dx <= 0:
            raise ConfigError("cannot derive raster from fov with zero shift_rate")
        ny = int(math.floor(cfg.fov[1] / dx + 1e-9)) + 1
    if nx < 1 or ny < 1:
        raise ConfigError(f"degenerate raster {nx} x {ny}")
    x0 = -(nx - 1) / 2.0 * dx
    y0 = -(ny - 1) / 2.0 * dx
    return nx, ny, dx, x0, y0


def line_period_count(cfg: ScannerConfig) -> int:
    """Total drive periods per scanned line, overscan included."""
    nx, _, _, _, _ = raster_grid(cfg)
    return nx + 2 * cfg.overscan_periods


def slab_duration(cfg: ScannerConfig) -> float:
    _, ny, _, _, _ = raster_grid(cfg)
    return line_period_count(cfg) * ny / cfg.drive_frequency


def ffp_position(t, cfg: ScannerConfig, slab_index: int) -> np.ndarray:
    """FFP location at times ``t`` for one z-slab, shape (..., 3).

    Serpentine focus-field raster in xy (constant line speed, one y-row per
    line, instantaneous retrace) plus the drive excursion A sin(2 pi f0 t)
    along z around the slab plane.  Time maps to a unique (x, y) within a
    slab whenever the shift rate is nonzero.
    """
    zs = cfg.z_slab_positions
    if not 0 <= slab_index < len(zs):
        raise IndexError(f"slab_index {slab_index} out of range 0..{len(zs) - 1}")
    return _ffp_position_at(t, cfg, zs[slab_index])


def _raster_line_and_phase(t, cfg: ScannerConfig, n_line: int, ny: int):
    # work in drive periods; the epsilon keeps exact line-boundary times in
    # the line they start (floating-point division can land a hair short)
    periods = np.asarray(t, dtype=float) * cfg.drive_frequency
    line = np.clip(np.floor(periods / n_line + 1e-9).astype(int), 0, ny - 1)
    tau_periods = np.maximum(periods - line * n_line, 0.0)
    return line, tau_periods


def _ffp_position_at(t, cfg: ScannerConfig, z_slab: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    nx, ny, dx, x0, y0 = raster_grid(cfg)
    ov = cfg.overscan_periods
    n_line = nx + 2 * ov
    f0 = cfg.drive_frequency
    line, tau_p = _raster_line_and_phase(t, cfg, n_line, ny)
    fwd = line % 2 == 0
    x_lo = x0 - ov * dx
    x_hi = x0 + (nx - 1 + ov) * dx
    x = np.where(fwd, x_lo + dx * tau_p, x_hi - dx * tau_p)
    y = y0 + line * dx
    z = z_slab + cfg.excursion * np.sin(2 * np.pi * f0 * t)
    return np.stack([x, y, z], axis=-1)


def ffp_velocity(t, cfg: ScannerConfig, slab_index: int) -> np.ndarray:
    """Analytic time derivative of ffp_position, shape (..., 3)."""
    zs = cfg.z_slab_positions
    if not 0 <= slab_index < len(zs):
        raise IndexError(f"slab_index {slab_index} out of range 0..{len(zs) - 1}")
    return _ffp_velocity_at(t, cfg)


def _ffp_velocity_at(t, cfg: ScannerConfig) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    nx, ny, _, _, _ = raster_grid(cfg)
    f0 = cfg.drive_frequency
    line, _ = _raster_line_and_phase(t, cfg, nx + 2 * cfg.overscan_periods, ny)
    fwd = line % 2 == 0
    vx = np.where(fwd, cfg.shift_rate, -cfg.shift_rate)
    vy = np.zeros_like(vx)
    vz = 2 * np.pi * f0 * cfg.excursion * np.cos(2 * np.pi * f0 * t)
    return np.stack([vx, vy, vz], axis=-1)


# ---------------------------------------------------------------------------
# MPI PSF tensor
# ---------------------------------------------------------------------------

def _tensor_coefficients(r: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Scalar factors (c1, c2) of the PSF tensor as functions of r = |Gx|.

    c1 = beta L'(beta r)/r^2 - L(beta r)/r^3 (coefficient of (Gx)(Gx)^T G)
    and c2 = L(beta r)/r; both are finite at r = 0 and evaluated by series
    for beta r < 0.05 where the direct difference cancels.
    """
    small = beta * r < 0.05
    r_safe = np.where(small, 1.0 / beta, r)
    z = beta * r_safe
    c1 = beta * langevin_derivative(z, 1) / r_safe**2 - langevin(z) / r_safe**3
    c2 = langevin(z) / r_safe
    if np.any(small):
        zs = beta * np.where(small, r, 0.0)
        z2 = zs * zs
        c1s = beta**3 * (-2.0 / 45.0 + 8.0 * z2 / 945.0 - 2.0 * z2 * z2 / 1575.0)
        c2s = beta * (1.0 / 3.0 - z2 / 45.0 + 2.0 * z2 * z2 / 945.0)
        c1 = np.where(small, c1s, c1)
        c2 = np.where(small, c2s, c2)
    return c1, c2


def psf_tensor(x, cfg: ScannerConfig) -> np.ndarray:
    """3x3 MPI PSF tensor at offsets ``x`` (..., 3) -> (..., 3, 3).

        h(x) = [ L'(b r) (Gx)(Gx)^T G b / r^2
                 + L(b r) / r (I - (Gx)(Gx)^T / r^2) G ]        r = |Gx|, b = beta

    which is the Jacobian of the magnetization direction field
    G x L(beta |Gx|)/|Gx|.  The singularity at |Gx| -> 0 is removable with
    direction-independent limit (beta/3) G; offsets with |Gx| below 1e-9 T
    return that limit.
    """
    x = np.asarray(x, dtype=float)
    g = cfg.gradient_matrix
    beta = cfg.beta
    w = x @ g.T                                  # (..., 3) = G x
    r = np.linalg.norm(w, axis=-1)               # |G x|
    c1, c2 = _tensor_coefficients(r, beta)

    ww = w[..., :, None] * w[..., None, :]       # (Gx)(Gx)^T
    eye = np.eye(3)
    tensor = (c1[..., None, None] * ww + c2[..., None, None] * eye) @ g

    singular = r < _GRADIENT_EPS_T
    if np.any(singular):
        tensor = np.where(singular[..., None, None], (beta / 3.0) * g, tensor)
    return tensor


def mpi_response(u, v, b, cfg: ScannerConfig) -> np.ndarray:
    """Scalar contraction v^T h(u) b without materializing the tensor.

    ``u``: FFP-to-source offsets (..., 3); ``v``: FFP velocity (..., 3);
    ``b``: receive sensitivity vector(s) (3,) or (..., 3).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    b = np.asarray(b, dtype=float)
    g = cfg.gradient_matrix
    beta = cfg.beta
    w = u @ g.T
    gb = b @ g.T
    r = np.linalg.norm(w, axis=-1)
    c1, c2 = _tensor_coefficients(r, beta)

    vw = np.sum(v * w, axis=-1)
    wgb = np.sum(w * gb, axis=-1)
    vgb = np.sum(v * gb, axis=-1)
    return c1 * vw * wgb + c2 * vgb


def default_scanner_config(**overrides) -> ScannerConfig:
    """Reference scanner preset: gradient G0 diag(1/2, 1/2, 1).

    The gradient strength is the documented reference value; drive
    frequency, amplitude, and the SPION constant beta are package defaults
    chosen for desk-scale simulation and should be overridden to match real
    hardware.
    """
    params = dict(
        gradient_matrix=G0_DEFAULT * np.diag([0.5, 0.5, 1.0]),
        drive_frequency=25_000.0,
        drive_amplitude=1.55e-3,
        beta=200.0,
        magnetic_moment=5e-18,
        sample_rate=25_000.0 * 32,
        shift_rate=25.0,
        z_slab_positions=tuple(np.arange(-15e-3, 15.1e-3, 5e-3)),
        fov=(32e-3, 32e-3, 40e-3),
        max_harmonic=8,
    )
    params.update(overrides)
    return ScannerConfig(**params)
