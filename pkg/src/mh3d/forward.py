"""Matrix-free linear forward model: sensitivity, convolution, downsampling.

The model maps a source image on a padded high-resolution mesh to stacked
harmonic portraits sampled at the measured slab planes:

    d_k = P sum_c H_{k,c} (B_c rho)

with H the circulant (FFT) convolutions with the harmonic PSF kernels, B
diagonal sensitivity weights, and P the row selector that crops the xy
padding and keeps the measured z planes.  apply_adjoint is the exact
transpose, verified against a dense column-by-column oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .parallel import fft_workers
from .physics import Mesh, ScannerConfig
from .psfgen import PsfStack

__all__ = [
    "ForwardModel",
    "apply_adjoint",
    "apply_forward",
    "build_dense_oracle",
    "build_forward_model",
    "crop_image",
    "default_pad",
    "pad_image",
]


def _pad_tuple(pad) -> tuple[int, int, int]:
    if np.isscalar(pad):
        pad = (int(pad),) * 3
    pad = tuple(int(p) for p in pad)
    if len(pad) != 3 or any(p < 0 for p in pad):
        raise ValueError(f"pad must be a scalar or 3 nonnegative ints, got {pad}")
    return pad


def pad_image(array: np.ndarray, pad) -> np.ndarray:
    """Zero-pad by ``pad`` voxels per side (scalar or per-axis)."""
    pad = _pad_tuple(pad)
    return np.pad(array, [(p, p) for p in pad])


def crop_image(array: np.ndarray, pad) -> np.ndarray:
    """Invert pad_image exactly."""
    pad = _pad_tuple(pad)
    sl = tuple(slice(p, n - p) for p, n in zip(pad, array.shape))
    if any(s.stop <= s.start for s in sl):
        raise ValueError(f"pad {pad} exceeds array shape {array.shape}")
    return array[sl]


def default_pad(psfs: PsfStack) -> tuple[int, int, int]:
    """Per-axis pad from the kernel truncation half-support.

    Falls back to half the mesh extent when the stack records no support
    (untruncated kernels reach everywhere).
    """
    if psfs.half_support is not None:
        return psfs.half_support
    return tuple((n - 1) // 2 for n in psfs.mesh.shape)


@dataclass(eq=False)
class ForwardModel:
    """Precomputed spectra and geometry for apply_forward/apply_adjoint.

    Immutable after construction; application is reentrant.  The stacked
    data array is indexed [harmonic, x, y, slab] with the harmonics in
    ``harmonics`` order; serialized files flatten it harmonic-major with x
    fastest.
    """

    spectra: dict[int, dict[str, np.ndarray]]
    sensitivity: dict[str, np.ndarray]
    harmonics: tuple[int, ...]
    mesh: Mesh                      # field-of-view fine mesh (unpadded)
    pad: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    slab_indices: np.ndarray        # fine-mesh z indices of measured planes
    slab_positions: tuple[float, ...]

    @property
    def data_shape(self) -> tuple[int, int, int, int]:
        nx, ny, _ = self.mesh.shape
        return (len(self.harmonics), nx, ny, len(self.slab_indices))

    @property
    def fov_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(p, p + n) for p, n in zip(self.pad, self.mesh.shape))

    def data_size(self) -> int:
        return int(np.prod(self.data_shape))

    def padded_size(self) -> int:
        return int(np.prod(self.padded_shape))


def build_forward_model(psfs: PsfStack, sensitivity, cfg: ScannerConfig | None,
                        pad="auto",
                        slab_positions: tuple[float, ...] | None = None
                        ) -> ForwardModel:
    """Assemble the model from PSF kernels, sensitivity maps, and geometry.

    ``sensitivity`` maps component name to a 3D array on the FOV mesh (or a
    scalar for a uniform map); components absent from the PSF stack are
    rejected.  Slab positions come from ``cfg.z_slab_positions`` unless
    given explicitly; each must sit on a fine-mesh plane within half a
    voxel.
    """
    mesh = psfs.mesh
    if pad == "auto":
        pad = default_pad(psfs)
    pad = _pad_tuple(pad)
    padded_shape = tuple(n + 2 * p for n, p in zip(mesh.shape, pad))

    if slab_positions is None:
        if cfg is None:
            raise ValueError("need cfg or explicit slab_positions")
        slab_positions = cfg.z_slab_positions
    z_axis = mesh.axis(2)
    dz = mesh.spacing[2]
    indices = []
    for z in slab_positions:
        i = int(round((z - z_axis[0]) / dz))
        if not 0 <= i < len(z_axis) or abs(z_axis[i] - z) > dz / 2 + 1e-12:
            raise ValueError(
                f"slab position {z} not representable on the fine mesh "
                f"(spacing {dz}) within half a voxel")
        indices.append(i)
    slab_indices = np.asarray(indices, dtype=int)
    if len(np.unique(slab_indices)) != len(slab_indices):
        raise ValueError("slab positions collapse onto duplicate fine planes")

    sens = {}
    for comp, value in sensitivity.items():
        arr = np.broadcast_to(np.asarray(value, dtype=float), mesh.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"sensitivity map {comp!r} has non-finite values")
        full = np.zeros(padded_shape)
        full[tuple(slice(p, p + n) for p, n in zip(pad, mesh.shape))] = arr
        sens[comp] = full

    center = tuple((n - 1) // 2 for n in mesh.shape)
    spectra: dict[int, dict[str, np.ndarray]] = {}
    for k in psfs.harmonics:
        spectra[k] = {}
        for comp in sens:
            if comp not in psfs.kernels[k]:
                raise ValueError(
                    f"sensitivity component {comp!r} has no PSF kernel for "
                    f"harmonic {k}")
            kernel = psfs.kernels[k][comp]
            embedded = np.zeros(padded_shape)
            embedded[tuple(slice(0, n) for n in mesh.shape)] = kernel
            embedded = np.roll(embedded, [-c for c in center], axis=(0, 1, 2))
            spectra[k][comp] = sfft.rfftn(embedded, workers=fft_workers())

    return ForwardModel(spectra=spectra, sensitivity=sens,
                        harmonics=tuple(psfs.harmonics), mesh=mesh, pad=pad,
                        padded_shape=padded_shape, slab_indices=slab_indices,
                        slab_positions=tuple(float(z) for z in slab_positions))


def _to_padded(model: ForwardModel, rho: np.ndarray) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    if rho.shape == model.padded_shape:
        return rho
    if rho.shape == model.mesh.shape:
        out = np.zeros(model.padded_shape)
        out[model.fov_slices] = rho
        return out
    raise ValueError(
        f"rho shape {rho.shape} matches neither the padded mesh "
        f"{model.padded_shape} nor the FOV mesh {model.mesh.shape}")


def apply_forward(model: ForwardModel, rho: np.ndarray) -> np.ndarray:
    """Stacked harmonic portraits of a source image.

    ``rho`` may live on the padded mesh or on the FOV mesh (zero-extended).
    Returns data shaped (harmonics, nx, ny, n_slabs).
    """
    rho = _to_padded(model, rho)
    sx, sy, _ = model.fov_slices
    zsel = model.pad[2] + model.slab_indices
    comp_spectra = {comp: sfft.rfftn(model.sensitivity[comp] * rho,
                                     workers=fft_workers())
                    for comp in model.sensitivity}
    out = np.empty(model.data_shape)
    for i, k in enumerate(model.harmonics):
        acc = None
        for comp, spec in comp_spectra.items():
            term = model.spectra[k][comp] * spec
            acc = term if acc is None else acc + term
        conv = sfft.irfftn(acc, s=model.padded_shape, workers=fft_workers())
        out[i] = conv[sx, sy, :][:, :, zsel]
    return out


def apply_adjoint(model: ForwardModel, data: np.ndarray) -> np.ndarray:
    """Exact transpose of apply_forward; returns a padded-mesh image."""
    data = np.asarray(data, dtype=float)
    if data.shape != model.data_shape:
        raise ValueError(
            f"data shape {data.shape} != model data shape {model.data_shape}")
    sx, sy, _ = model.fov_slices
    zsel = model.pad[2] + model.slab_indices
    acc = {comp: None for comp in model.sensitivity}
    for i, k in enumerate(model.harmonics):
        scattered = np.zeros(model.padded_shape)
        embedded = np.zeros(
            (model.mesh.shape[0], model.mesh.shape[1], model.padded_shape[2]))
        embedded[:, :, zsel] = data[i]
        scattered[sx, sy, :] = embedded
        spec = sfft.rfftn(scattered, workers=fft_workers())
        for comp in model.sensitivity:
            term = np.conj(model.spectra[k][comp]) * spec
            acc[comp] = term if acc[comp] is None else acc[comp] + term
    out = np.zeros(model.padded_shape)
    for comp, spec in acc.items():
        back = sfft.irfftn(spec, s=model.padded_shape, workers=fft_workers())
        out += model.sensitivity[comp] * back
    return out


def build_dense_oracle(model: ForwardModel, max_voxels: int = 4096
                       ) -> np.ndarray:
    """Materialize the forward matrix column by column.

    Bounded to ``max_voxels`` padded voxels; each column is apply_forward of
    a unit impulse, so dense @ x agrees with the matrix-free path by
    construction and dense.T provides an independent adjoint check.
    """
    n = model.padded_size()
    if n > max_voxels:
        raise ValueError(f"padded mesh has {n} voxels > max_voxels={max_voxels}")
    cols = np.empty((model.data_size(), n))
    e = np.zeros(model.padded_shape)
    flat = e.reshape(-1)
    for j in range(n):
        flat[j] = 1.0
        cols[:, j] = apply_forward(model, e).ravel()
        flat[j] = 0.0
    return cols
