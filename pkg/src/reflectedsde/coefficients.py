"""Diffusion and drift coefficient fields and the noise-interaction drift term.

A coefficient set bundles the diffusion matrix field, the drift field, and
the derivative of the diffusion, together with Lipschitz metadata.  All
built-in fields are defined on the whole space and restricted to the domain
closure by the solvers, which always evaluate at constrained points.

Built-in callables are batch-aware: they accept a single point of shape
``(d,)`` or a batch ``(B, d)`` and return ``(d, m)`` / ``(B, d, m)``
accordingly (one extra leading axis everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OutOfDomain
from .geometry import DomainSpec


@dataclass(frozen=True)
class CoefficientSet:
    """Diffusion matrix, drift vector, diffusion derivative, and metadata.

    ``grad_sigma(y)[i, j, k]`` is the derivative of entry ``(i, j)`` of the
    diffusion matrix in state direction ``k``.  Lipschitz constants are
    certified metadata; sampled ratio tests validate them.
    """

    sigma: Callable[[np.ndarray], np.ndarray]
    b: Callable[[np.ndarray], np.ndarray]
    grad_sigma: Callable[[np.ndarray], np.ndarray]
    dim_state: int
    dim_noise: int
    lipschitz_sigma: float
    lipschitz_b: float
    lipschitz_grad_sigma: float
    batch_capable: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def sigma_batch(self, Y: np.ndarray) -> np.ndarray:
        if self.batch_capable:
            return self.sigma(Y)
        return np.stack([self.sigma(y) for y in Y])

    def b_batch(self, Y: np.ndarray) -> np.ndarray:
        if self.batch_capable:
            return self.b(Y)
        return np.stack([self.b(y) for y in Y])

    def grad_sigma_batch(self, Y: np.ndarray) -> np.ndarray:
        if self.batch_capable:
            return self.grad_sigma(Y)
        return np.stack([self.grad_sigma(y) for y in Y])


def _check_in_domain(domain: DomainSpec | None, y: np.ndarray):
    if domain is not None and not domain.contains(y):
        raise OutOfDomain(f"evaluation point {y} lies outside the domain closure")


def stratonovich_correction(
    coeffs: CoefficientSet, y, domain: DomainSpec | None = None
) -> np.ndarray:
    """Noise-interaction drift vector: sum_{j,k} d(sigma_ij)/dy_k * sigma_kj.

    This is the vector whose half converts the pathwise (Stratonovich)
    equation into its Ito form.  Passing a domain enforces that ``y`` lies
    in its closure.
    """
    y = np.asarray(y, float)
    _check_in_domain(domain, y)
    return np.einsum("ijk,kj->i", coeffs.grad_sigma(y), coeffs.sigma(y))


def stratonovich_correction_batch(coeffs: CoefficientSet, Y: np.ndarray) -> np.ndarray:
    return np.einsum("bijk,bkj->bi", coeffs.grad_sigma_batch(Y), coeffs.sigma_batch(Y))


def ito_drift(coeffs: CoefficientSet, y, domain: DomainSpec | None = None) -> np.ndarray:
    """Effective Ito drift: ``b(y)`` plus half the noise-interaction term."""
    y = np.asarray(y, float)
    _check_in_domain(domain, y)
    return coeffs.b(y) + 0.5 * stratonovich_correction(coeffs, y)


def ito_drift_batch(coeffs: CoefficientSet, Y: np.ndarray) -> np.ndarray:
    return coeffs.b_batch(Y) + 0.5 * stratonovich_correction_batch(coeffs, Y)


def finite_difference_correction(
    coeffs: CoefficientSet, y, step: float = 1e-5
) -> np.ndarray:
    """Correction assembled from central finite differences of sigma.

    Independent of ``grad_sigma``; used to cross-check the analytic term.
    """
    y = np.asarray(y, float)
    d, m = coeffs.dim_state, coeffs.dim_noise
    grad = np.empty((d, m, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        grad[:, :, k] = (coeffs.sigma(y + e) - coeffs.sigma(y - e)) / (2.0 * step)
    return np.einsum("ijk,kj->i", grad, coeffs.sigma(y))


# ---------------------------------------------------------------------------
# Built-in coefficient families
# ---------------------------------------------------------------------------

def _drift_field(drift_matrix, drift_offset, d: int):
    A = np.zeros((d, d)) if drift_matrix is None else np.asarray(drift_matrix, float)
    c = np.zeros(d) if drift_offset is None else np.asarray(drift_offset, float)
    if A.shape != (d, d) or c.shape != (d,):
        raise ValueError("drift parameters must have shapes (d, d) and (d,)")

    def b(y):
        y = np.asarray(y, float)
        return y @ A.T + c

    lip = float(np.linalg.norm(A, 2))
    return b, lip, A, c


def constant(sigma, drift_matrix=None, drift_offset=None) -> CoefficientSet:
    """Constant diffusion matrix with affine drift."""
    sig = np.asarray(sigma, float)
    if sig.ndim != 2:
        raise ValueError("sigma must be a (d, m) matrix")
    d, m = sig.shape
    b, lip_b, A, c = _drift_field(drift_matrix, drift_offset, d)

    def sigma_f(y):
        y = np.asarray(y, float)
        if y.ndim == 1:
            return sig.copy()
        return np.broadcast_to(sig, (len(y), d, m)).copy()

    def grad_f(y):
        y = np.asarray(y, float)
        shape = (d, m, d) if y.ndim == 1 else (len(y), d, m, d)
        return np.zeros(shape)

    return CoefficientSet(
        sigma=sigma_f,
        b=b,
        grad_sigma=grad_f,
        dim_state=d,
        dim_noise=m,
        lipschitz_sigma=0.0,
        lipschitz_b=lip_b,
        lipschitz_grad_sigma=0.0,
        batch_capable=True,
        name="constant",
        params={
            "sigma": sig.tolist(),
            "drift_matrix": A.tolist(),
            "drift_offset": c.tolist(),
        },
    )


def linear(A, B=None, drift_matrix=None, drift_offset=None) -> CoefficientSet:
    """Matrix-affine diffusion: sigma_ij(y) = sum_k A[i,j,k] y_k + B[i,j]."""
    A = np.asarray(A, float)
    if A.ndim != 3:
        raise ValueError("A must have shape (d, m, d)")
    d, m, d2 = A.shape
    if d2 != d:
        raise ValueError("A must have shape (d, m, d)")
    B = np.zeros((d, m)) if B is None else np.asarray(B, float)
    b, lip_b, dm, doff = _drift_field(drift_matrix, drift_offset, d)

    def sigma_f(y):
        y = np.asarray(y, float)
        return np.einsum("ijk,...k->...ij", A, y) + B

    def grad_f(y):
        y = np.asarray(y, float)
        if y.ndim == 1:
            return A.copy()
        return np.broadcast_to(A, (len(y), d, m, d)).copy()

    # Operator norm of the linear map y -> A y as a (d*m, d) matrix.
    lip_sigma = float(np.linalg.norm(A.reshape(d * m, d), 2))
    return CoefficientSet(
        sigma=sigma_f,
        b=b,
        grad_sigma=grad_f,
        dim_state=d,
        dim_noise=m,
        lipschitz_sigma=lip_sigma,
        lipschitz_b=lip_b,
        lipschitz_grad_sigma=0.0,
        batch_capable=True,
        name="linear",
        params={
            "A": A.tolist(),
            "B": B.tolist(),
            "drift_matrix": dm.tolist(),
            "drift_offset": doff.tolist(),
        },
    )


def trig(
    offset,
    amplitude,
    frequency,
    phase=None,
    drift_matrix=None,
    drift_offset=None,
) -> CoefficientSet:
    """Sinusoidal diffusion: sigma_ij(y) = offset_ij + amp_ij sin(freq . y + phase_ij)."""
    offset = np.asarray(offset, float)
    amplitude = np.asarray(amplitude, float)
    frequency = np.asarray(frequency, float)
    if offset.ndim != 2 or offset.shape != amplitude.shape:
        raise ValueError("offset and amplitude must be matching (d, m) matrices")
    d, m = offset.shape
    if frequency.shape != (d,):
        raise ValueError("frequency must have shape (d,)")
    phase = np.zeros((d, m)) if phase is None else np.asarray(phase, float)
    if phase.shape != (d, m):
        raise ValueError("phase must have shape (d, m)")
    b, lip_b, dm_, doff = _drift_field(drift_matrix, drift_offset, d)

    def sigma_f(y):
        y = np.asarray(y, float)
        arg = (y @ frequency)[..., None, None] + phase
        return offset + amplitude * np.sin(arg)

    def grad_f(y):
        y = np.asarray(y, float)
        arg = (y @ frequency)[..., None, None] + phase
        return (amplitude * np.cos(arg))[..., None] * frequency

    amp_scale = float(np.linalg.norm(amplitude)) * float(np.linalg.norm(frequency))
    return CoefficientSet(
        sigma=sigma_f,
        b=b,
        grad_sigma=grad_f,
        dim_state=d,
        dim_noise=m,
        lipschitz_sigma=amp_scale,
        lipschitz_b=lip_b,
        lipschitz_grad_sigma=amp_scale * float(np.linalg.norm(frequency)),
        batch_capable=True,
        name="trig",
        params={
            "offset": offset.tolist(),
            "amplitude": amplitude.tolist(),
            "frequency": frequency.tolist(),
            "phase": phase.tolist(),
            "drift_matrix": dm_.tolist(),
            "drift_offset": doff.tolist(),
        },
    )


_COEFF_FACTORIES = {
    "constant": constant,
    "linear": linear,
    "trig": trig,
}


def make_coefficients(name: str, **params) -> CoefficientSet:
    """Build a built-in coefficient set by config name."""
    try:
        factory = _COEFF_FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown coefficient set {name!r}; known: {sorted(_COEFF_FACTORIES)}")
    return factory(**params)
