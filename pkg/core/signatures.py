from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from core.errors import SignatureError
from core.spectral import SpectralBasis
from utils.logger import logger

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True, eq=False)
class PointSignatureMatrix:
    """Per-vertex signature: ``values`` is (n, d), one row per vertex."""

    values: np.ndarray
    kind: str  # WKS, siHKS or HKS
    params: Dict[str, float] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class ShapeDNADescriptor:
    values: np.ndarray
    normalization: str = "area"


def _positive_spectrum(basis: SpectralBasis):
    # the constant mode sits at round-off level of the largest eigenvalue
    tol = 1e-9 * max(float(np.abs(basis.eigenvalues).max()), _TINY)
    keep = basis.eigenvalues > tol
    return basis.eigenvalues[keep], basis.eigenfunctions[:, keep]


def wks_energy_grid(
    eigenvalues: np.ndarray, num_energies: int, variance_factor: float
):
    """Log-energy grid on ``[log l_1 + 2s, log l_max - 2s]`` with ``s = factor * step``.

    The step solves ``step * (num_energies - 1 + 4 * factor) = log l_max - log l_1``.
    """
    log_min = np.log(eigenvalues[0])
    log_max = np.log(eigenvalues[-1])
    span = log_max - log_min
    if span <= 0:
        raise SignatureError("WKS needs at least two distinct positive eigenvalues")
    step = span / (num_energies - 1 + 4.0 * variance_factor)
    sigma = variance_factor * step
    energies = log_min + 2.0 * sigma + step * np.arange(num_energies)
    return energies, sigma


def compute_wks(
    basis: SpectralBasis, num_energies: int = 100, variance_factor: float = 6.0
) -> PointSignatureMatrix:
    """Wave kernel signature, one column per log-energy.

    Kernel weights over the positive eigenvalues are normalized to sum 1 for
    every energy, so each entry is a convex combination of ``phi_k(x)^2``.
    """
    eigenvalues, phi = _positive_spectrum(basis)
    if len(eigenvalues) < 2:
        raise SignatureError(
            f"WKS needs at least 2 positive eigenvalues, got {len(eigenvalues)}"
        )
    energies, sigma = wks_energy_grid(eigenvalues, num_energies, variance_factor)
    log_l = np.log(eigenvalues)
    weights = np.exp(-((energies[:, None] - log_l[None, :]) ** 2) / (2.0 * sigma**2))
    weights /= weights.sum(axis=1, keepdims=True)
    values = (phi**2) @ weights.T
    return PointSignatureMatrix(
        values,
        "WKS",
        {"num_energies": num_energies, "variance_factor": variance_factor, "sigma": sigma},
    )


def compute_hks(basis: SpectralBasis, times: Sequence[float]) -> PointSignatureMatrix:
    """Heat kernel signature ``sum_k exp(-l_k t) phi_k(x)^2``, one column per time."""
    times = np.asarray(times, dtype=np.float64).ravel()
    if times.size == 0 or np.any(times <= 0):
        raise SignatureError("HKS times must be a nonempty list of positive reals")
    eigenvalues = np.clip(basis.eigenvalues, 0.0, None)
    decay = np.exp(-np.outer(eigenvalues, times))
    values = (basis.eigenfunctions**2) @ decay
    return PointSignatureMatrix(values, "HKS", {"num_times": int(times.size)})


def sihks_from_log_hks(log_hks: np.ndarray, out_dim: int) -> np.ndarray:
    """Fourier magnitude of the scale-derivative of log-HKS, first ``out_dim`` bins."""
    derivative = np.diff(log_hks, axis=1)
    spectrum = np.abs(np.fft.fft(derivative, axis=1))
    if spectrum.shape[1] < out_dim:
        raise SignatureError(
            f"siHKS grid yields {spectrum.shape[1]} frequencies, fewer than {out_dim}"
        )
    return spectrum[:, :out_dim]


def compute_sihks(
    basis: SpectralBasis,
    log_base: float = 2.0,
    tau_range: Sequence[float] = (1.0, 25.0),
    tau_step: float = 1.0 / 16.0,
    out_dim: int = 50,
    reference_area: Optional[float] = 1e6,
) -> PointSignatureMatrix:
    """Scale-invariant HKS sampled at ``t = log_base ** tau``.

    With ``reference_area`` set, sample times are measured on the mesh
    rescaled to that surface area: ``t`` becomes ``t * area / reference_area``.
    Eigenvalues scale as ``1 / area``, so the sampled window covers the same
    part of the spectrum at any native scale and the output does not depend
    on it. ``None`` samples the raw times.
    """
    tau_min, tau_max = float(tau_range[0]), float(tau_range[1])
    taus = np.arange(tau_min, tau_max + 0.5 * tau_step, tau_step)
    if len(taus) < 2:
        raise SignatureError("siHKS tau grid needs at least two samples")
    if reference_area is not None and reference_area <= 0:
        raise SignatureError(f"siHKS reference area must be positive, got {reference_area}")
    times = log_base**taus
    if reference_area is not None:
        times = times * (basis.area / reference_area)
    hks = compute_hks(basis, times).values
    underflow = hks < _TINY
    if np.any(underflow):
        logger.debug(f"siHKS: clamped {int(underflow.sum())} underflowing HKS samples")
        hks = np.maximum(hks, _TINY)
    values = sihks_from_log_hks(np.log(hks), out_dim)
    return PointSignatureMatrix(
        values,
        "siHKS",
        {
            "log_base": log_base,
            "tau_min": tau_min,
            "tau_max": tau_max,
            "tau_step": tau_step,
            "out_dim": out_dim,
            "reference_area": reference_area or 0.0,
        },
    )


def compute_shapedna(
    basis: SpectralBasis, out_dim: int = 40, normalization: str = "area"
) -> ShapeDNADescriptor:
    if basis.k < out_dim:
        raise SignatureError(f"ShapeDNA needs {out_dim} eigenpairs, basis has {basis.k}")
    eigenvalues = basis.eigenvalues[:out_dim]
    if normalization == "area":
        values = eigenvalues * basis.area
    elif normalization == "firstEigenvalue":
        if basis.k < 2 or basis.eigenvalues[1] <= 0:
            raise SignatureError("ShapeDNA first-eigenvalue normalization needs l_1 > 0")
        values = eigenvalues / basis.eigenvalues[1]
    else:
        raise SignatureError(f"unknown ShapeDNA normalization {normalization!r}")
    return ShapeDNADescriptor(values, normalization)
