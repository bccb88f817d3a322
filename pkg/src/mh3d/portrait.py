"""Harmonic band filtering, portrait gridding, and phase calibration.

A harmonic portrait is the k-th harmonic band of the receive signal,
demodulated to baseband and gridded back onto the focus-field raster
positions, one sample per drive period.  Portraits are complex until a
constant per-harmonic phase is estimated and removed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as sfft

from . import physics
from .parallel import fft_workers
from .physics import ScannerConfig
from .simulate import TimeSignal

__all__ = [
    "PortraitGrid",
    "PortraitStack",
    "WindowSpec",
    "apply_phase_correction",
    "build_portrait_stack",
    "correct_stack_phase",
    "estimate_phase",
    "grid_to_portrait",
    "harmonic_filter",
    "portrait_to_signal",
    "resolve_sign_ambiguity",
]


@dataclass(frozen=True)
class WindowSpec:
    """Frequency-domain band window around a harmonic: hann or tophat."""

    kind: str = "hann"
    half_bandwidth: float = 0.0   # Hz; 0 means "use f0/2 at filter time"

    def __post_init__(self):
        if self.kind not in ("hann", "tophat"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.half_bandwidth < 0:
            raise ValueError("half_bandwidth must be >= 0")

    def resolved(self, cfg: ScannerConfig) -> "WindowSpec":
        hb = self.half_bandwidth or cfg.drive_frequency / 2.0
        if not 0 < hb <= cfg.drive_frequency / 2.0:
            raise ValueError(
                f"half_bandwidth {hb} outside (0, f0/2] for f0="
                f"{cfg.drive_frequency}")
        return replace(self, half_bandwidth=hb)

    def gain(self, freqs: np.ndarray) -> np.ndarray:
        """Baseband gain at frequencies ``freqs`` (unit at band center)."""
        hb = self.half_bandwidth
        inside = np.abs(freqs) <= hb
        if self.kind == "tophat":
            return inside.astype(float)
        return np.where(inside, np.cos(np.pi * freqs / (2 * hb)) ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class PortraitGrid:
    """Regular xy grid shared by every slab portrait."""

    nx: int
    ny: int
    dx: float
    x0: float
    y0: float

    @classmethod
    def from_config(cls, cfg: ScannerConfig) -> "PortraitGrid":
        nx, ny, dx, x0, y0 = physics.raster_grid(cfg)
        return cls(nx, ny, dx, x0, y0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)


@dataclass(eq=False)
class PortraitStack:
    """Per-harmonic portraits d_k on (nx, ny, n_slabs).

    ``data`` maps harmonic number to its 3D array; complex before phase
    correction, real after.  ``phase_angles`` records the correction applied
    per harmonic, so the original complex portraits can be re-synthesized.
    """

    data: dict[int, np.ndarray]
    harmonics: tuple[int, ...]
    grid: PortraitGrid
    z_positions: tuple[float, ...]
    window: WindowSpec
    validity: np.ndarray | None = None
    phase_angles: dict[int, float] | None = None
    imag_residuals: dict[int, float] | None = None

    def __post_init__(self):
        shapes = {a.shape for a in self.data.values()}
        if len(shapes) > 1:
            raise ValueError(f"portraits must share one shape, got {shapes}")
        if any(k < 2 for k in self.harmonics):
            raise ValueError("harmonics below 2 are filtered out in hardware")

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.data.values())).shape

    def copy(self) -> "PortraitStack":
        return PortraitStack(
            data={k: v.copy() for k, v in self.data.items()},
            harmonics=self.harmonics, grid=self.grid,
            z_positions=self.z_positions, window=self.window,
            validity=None if self.validity is None else self.validity.copy(),
            phase_angles=dict(self.phase_angles or {}) or None,
            imag_residuals=dict(self.imag_residuals or {}) or None)


def harmonic_filter(signal: TimeSignal, k: int, window: WindowSpec,
                    cfg: ScannerConfig) -> TimeSignal:
    """k-th harmonic band of the signal, demodulated to complex baseband.

    Implements s_k(t) = int s0(tau) exp(-2 pi i k f0 tau) g(t - tau) dtau
    discretely: demodulate, transform, apply the baseband window gain,
    transform back.
    """
    if k < 2:
        raise ValueError("harmonics below 2 are rejected (the fundamental is "
                         "removed by the receive chain)")
    win = window.resolved(cfg)
    f0 = cfg.drive_frequency
    fs = signal.sample_rate
    if k * f0 + win.half_bandwidth >= fs / 2.0:
        raise ValueError(
            f"harmonic {k} at {k * f0} Hz plus bandwidth exceeds Nyquist "
            f"{fs / 2.0} Hz")
    t = signal.times()
    demod = signal.samples * np.exp(-2j * np.pi * k * f0 * t)
    spec = sfft.fft(demod, workers=fft_workers())
    freqs = sfft.fftfreq(len(demod), d=1.0 / fs)
    spec *= win.gain(freqs)
    out = sfft.ifft(spec, workers=fft_workers())
    return TimeSignal(out, fs, signal.slab_index, signal.duration)


def _grid_sample_indices(cfg: ScannerConfig, n_samples: int) -> np.ndarray:
    """Per-period sampling instants as sample indices.

    One sample per drive period at the configured phase within the period;
    the default phase 0 is the positive-going zero crossing of the drive,
    where the FFP sits on the slab plane.
    """
    spp = cfg.samples_per_period
    n_periods = n_samples // spp
    offset = int(round(cfg.sample_phase / (2 * np.pi) * spp)) % spp
    return np.arange(n_periods) * spp + offset


def grid_to_portrait(filtered: TimeSignal, cfg: ScannerConfig, slab_index: int,
                     grid: PortraitGrid | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Grid a baseband harmonic signal onto the slab's xy mesh.

    Returns (portrait, validity): the bilinear scatter of one sample per
    drive period onto the grid, weight-normalized, and the mask of pixels
    that received any coverage.
    """
    if grid is None:
        grid = PortraitGrid.from_config(cfg)
    # the given grid must cover the portrait part of the raster; samples in
    # the overscan guard bands are scanned but dropped
    rnx, rny, rdx, rx0, ry0 = physics.raster_grid(cfg)
    if (grid.x0 > rx0 + 0.5 * rdx or grid.y0 > ry0 + 0.5 * rdx
            or grid.x0 + (grid.nx - 1) * grid.dx < rx0 + (rnx - 1) * rdx - 0.5 * rdx
            or grid.y0 + (grid.ny - 1) * grid.dx < ry0 + (rny - 1) * rdx - 0.5 * rdx):
        raise ValueError("portrait grid does not cover the raster trajectory")
    idx = _grid_sample_indices(cfg, len(filtered.samples))
    t = idx / filtered.sample_rate
    pos = physics._ffp_position_at(t, cfg, 0.0)
    values = filtered.samples[idx]
    return _bilinear_scatter(pos[:, 0], pos[:, 1], values, grid)


def _bilinear_scatter(x, y, values, grid: PortraitGrid):
    fx = (x - grid.x0) / grid.dx
    fy = (y - grid.y0) / grid.dx
    keep = ((fx >= -0.501) & (fx <= grid.nx - 0.499)
            & (fy >= -0.501) & (fy <= grid.ny - 0.499))
    fx, fy, values = fx[keep], fy[keep], values[keep]
    fx = np.clip(fx, 0.0, grid.nx - 1.0)
    fy = np.clip(fy, 0.0, grid.ny - 1.0)
    ix = np.minimum(fx.astype(int), grid.nx - 2) if grid.nx > 1 else \
        np.zeros_like(fx, dtype=int)
    iy = np.minimum(fy.astype(int), grid.ny - 2) if grid.ny > 1 else \
        np.zeros_like(fy, dtype=int)
    wx = fx - ix
    wy = fy - iy

    acc = np.zeros((grid.nx, grid.ny), dtype=complex)
    wacc = np.zeros((grid.nx, grid.ny))
    for dx_i, dy_i, w in (
        (0, 0, (1 - wx) * (1 - wy)),
        (1, 0, wx * (1 - wy)) if grid.nx > 1 else None,
        (0, 1, (1 - wx) * wy) if grid.ny > 1 else None,
        (1, 1, wx * wy) if grid.nx > 1 and grid.ny > 1 else None,
    ):
        if w is None:
            continue
        np.add.at(acc, (np.minimum(ix + dx_i, grid.nx - 1),
                        np.minimum(iy + dy_i, grid.ny - 1)), w * values)
        np.add.at(wacc, (np.minimum(ix + dx_i, grid.nx - 1),
                         np.minimum(iy + dy_i, grid.ny - 1)), w)
    validity = wacc > 1e-12
    portrait = np.zeros_like(acc)
    portrait[validity] = acc[validity] / wacc[validity]
    return portrait, validity


def _bilinear_gather(portrait: np.ndarray, x, y, grid: PortraitGrid):
    fx = np.clip((x - grid.x0) / grid.dx, 0.0, grid.nx - 1.0)
    fy = np.clip((y - grid.y0) / grid.dx, 0.0, grid.ny - 1.0)
    ix = np.minimum(fx.astype(int), max(grid.nx - 2, 0))
    iy = np.minimum(fy.astype(int), max(grid.ny - 2, 0))
    wx = fx - ix
    wy = fy - iy
    ix1 = np.minimum(ix + 1, grid.nx - 1)
    iy1 = np.minimum(iy + 1, grid.ny - 1)
    return (portrait[ix, iy] * (1 - wx) * (1 - wy)
            + portrait[ix1, iy] * wx * (1 - wy)
            + portrait[ix, iy1] * (1 - wx) * wy
            + portrait[ix1, iy1] * wx * wy)


def build_portrait_stack(signals: list[TimeSignal], cfg: ScannerConfig,
                         harmonics, window: WindowSpec | None = None
                         ) -> PortraitStack:
    """Filter and grid every (harmonic, slab) pair into a complex stack."""
    window = (window or WindowSpec()).resolved(cfg)
    harmonics = tuple(int(k) for k in harmonics)
    grid = PortraitGrid.from_config(cfg)
    n_slabs = len(signals)
    data = {k: np.zeros((grid.nx, grid.ny, n_slabs), dtype=complex)
            for k in harmonics}
    validity = np.zeros((grid.nx, grid.ny, n_slabs), dtype=bool)
    for j, sig in enumerate(signals):
        for k in harmonics:
            filtered = harmonic_filter(sig, k, window, cfg)
            portrait, valid = grid_to_portrait(filtered, cfg, j, grid)
            data[k][:, :, j] = portrait
            validity[:, :, j] = valid
    zs = tuple(cfg.z_slab_positions[s.slab_index] if s.slab_index >= 0 else 0.0
               for s in signals)
    return PortraitStack(data=data, harmonics=harmonics, grid=grid,
                         z_positions=zs, window=window, validity=validity)


def portrait_to_signal(stack: PortraitStack, cfg: ScannerConfig
                       ) -> list[TimeSignal]:
    """Re-synthesize per-slab time signals from a portrait stack.

    Each portrait is interpolated along the raster, remodulated to its
    harmonic band, and summed together with the conjugate band so the
    output is real.
    """
    if not stack.harmonics:
        raise ValueError("portrait stack has no harmonics")
    grid = stack.grid
    duration = physics.slab_duration(cfg)
    n = int(round(duration * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    pos = physics._ffp_position_at(t, cfg, 0.0)
    out = []
    for j in range(stack.shape[2]):
        total = np.zeros(n, dtype=complex)
        for k in stack.harmonics:
            portrait = stack.data[k][:, :, j]
            if not np.iscomplexobj(portrait):
                if not stack.phase_angles or k not in stack.phase_angles:
                    raise ValueError(
                        f"real portrait for harmonic {k} without a recorded "
                        "phase angle")
                portrait = portrait * np.exp(1j * stack.phase_angles[k])
            env = _bilinear_gather(portrait, pos[:, 0], pos[:, 1], grid)
            total += env * np.exp(2j * np.pi * k * cfg.drive_frequency * t)
        out.append(TimeSignal(2.0 * total.real, cfg.sample_rate, j, duration))
    return out


def estimate_phase(portrait: np.ndarray, roi: np.ndarray | None = None,
                   roi_fraction: float = 0.01) -> float:
    """Constant phase of a complex portrait from its high-SNR voxels.

    Angle of the magnitude-weighted mean over the ROI; the default ROI is
    the top ``roi_fraction`` of voxels by magnitude.
    """
    mag = np.abs(portrait)
    if roi is None:
        floor = np.quantile(mag, 1.0 - roi_fraction)
        roi = mag >= floor
    if not np.any(roi):
        raise ValueError("empty ROI")
    if np.mean(mag[roi]) <= 0.0:
        raise ValueError("ROI magnitude is zero; cannot estimate phase")
    weighted = np.sum(mag[roi] * portrait[roi])
    return float(np.angle(weighted))


def estimate_phase_mod_pi(portrait: np.ndarray,
                          roi: np.ndarray | None = None,
                          roi_fraction: float = 0.01) -> float:
    """Constant phase modulo pi, robust to sign-symmetric portraits.

    The weighted mean of estimate_phase cancels when a portrait has
    balanced positive and negative lobes (even harmonics are odd along z),
    so this variant averages the squared values: half the angle of
    sum |d|^2 d^2.  The remaining pi ambiguity is resolved against a
    forward model by resolve_sign_ambiguity.
    """
    mag = np.abs(portrait)
    if roi is None:
        floor = np.quantile(mag, 1.0 - roi_fraction)
        roi = mag >= floor
    if not np.any(roi) or np.mean(mag[roi]) <= 0.0:
        raise ValueError("empty or zero-magnitude ROI")
    doubled = np.sum((mag[roi] ** 2) * np.exp(2j * np.angle(portrait[roi])))
    return float(np.angle(doubled) / 2.0)


def apply_phase_correction(portrait: np.ndarray, theta: float
                           ) -> tuple[np.ndarray, float]:
    """Rotate by -theta and take the real part.

    Returns (real portrait, residual imaginary energy fraction).
    """
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    rotated = portrait * np.exp(-1j * theta)
    total = float(np.sum(np.abs(portrait) ** 2))
    residual = float(np.sum(rotated.imag ** 2) / total) if total > 0 else 0.0
    return np.ascontiguousarray(rotated.real), residual


def correct_stack_phase(stack: PortraitStack, roi: np.ndarray | None = None,
                        mod_pi: bool = True) -> PortraitStack:
    """Estimate and remove the per-harmonic constant phase of a stack.

    By default the mod-pi estimator is used (portraits carry both signs);
    pass mod_pi=False to use the plain weighted-mean angle on a
    consistent-sign ROI.
    """
    estimator = estimate_phase_mod_pi if mod_pi else estimate_phase
    data, angles, residuals = {}, {}, {}
    for k in stack.harmonics:
        theta = estimator(stack.data[k], roi)
        real, resid = apply_phase_correction(stack.data[k], theta)
        if resid > 0.05:
            warnings.warn(
                f"harmonic {k}: residual imaginary energy fraction {resid:.3f} "
                "exceeds 5%; phase model may not hold", stacklevel=2)
        data[k], angles[k], residuals[k] = real, theta, resid
    out = stack.copy()
    out.data = data
    out.phase_angles = angles
    out.imag_residuals = residuals
    return out


def resolve_sign_ambiguity(stack: PortraitStack, model,
                           iterations: int = 30, lam: float = 0.0,
                           tie_fraction: float = 0.01
                           ) -> tuple[PortraitStack, dict[int, int]]:
    """Fix the residual pi ambiguity of phase-corrected portraits.

    For each harmonic in ascending order, runs a short non-negative
    reconstruction with both signs and keeps the sign with the lower
    data-fit residual.  Ties within ``tie_fraction`` keep the current sign
    and flag the harmonic with sign 0 in the returned report.
    """
    from . import solve  # deferred: solve depends on forward, not on us

    out = stack.copy()
    signs: dict[int, int] = {}
    scfg = solve.SolverConfig(lam=lam, alpha=0.0, max_iterations=iterations,
                              tolerance=0.0)
    for k in sorted(stack.harmonics):
        residuals = []
        for flip in (1.0, -1.0):
            trial = {kk: (out.data[kk] * (flip if kk == k else 1.0))
                     for kk in out.harmonics}
            d = solve.stack_data_vector(trial, out.harmonics, model)
            result = solve.reconstruct(d, model, scfg)
            residuals.append(result.final_residual)
        keep, flipped = residuals
        denom = max(abs(keep), abs(flipped), 1e-300)
        if abs(keep - flipped) / denom < tie_fraction:
            signs[k] = 0  # tie: keep current sign, flagged
        elif flipped < keep:
            signs[k] = -1
            out.data[k] = -out.data[k]
            if out.phase_angles and k in out.phase_angles:
                out.phase_angles[k] = out.phase_angles[k] + np.pi
        else:
            signs[k] = 1
    return out, signs
