"""Dense 2D/3D array primitives and the package-wide FFT contract.

Every Fourier transform in this package is the *orthonormal* (unitary) 2D
DFT: ``fft2`` and ``ifft2`` carry a 1/sqrt(N) factor each, so ``ifft2`` is
simultaneously the inverse and the adjoint of ``fft2``.  Fixing this
convention once removes the classic source of silent scale bugs in
forward/adjoint pairs built from factored Fourier operators.

Layout conventions (shared with the file formats):

* 2D images are ``(height, width)`` row-major arrays,
* 3D volumes are ``(slices, height, width)`` slice-major arrays,
* real data is float64, spectra are complex128.

Arrays entering solver state must be finite; helpers here raise
:class:`~simba_idt.errors.NonFiniteError` instead of silently propagating
NaNs.
"""

from __future__ import annotations

import numpy as np

from simba_idt.errors import DimensionMismatchError, NonFiniteError


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    """Return ``a`` unchanged, raising NonFiniteError if it has NaN/Inf."""
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def as_image(a, name: str = "image") -> np.ndarray:
    """Coerce to a finite 2D float64 image."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionMismatchError(f"{name} must be 2D with positive size, got shape {a.shape}")
    return check_finite(a, name)


def as_complex_image(a, name: str = "image") -> np.ndarray:
    """Coerce to a finite 2D complex128 image."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionMismatchError(f"{name} must be 2D with positive size, got shape {a.shape}")
    return check_finite(a, name)


def as_volume(a, name: str = "volume") -> np.ndarray:
    """Coerce to a finite 3D (slices, height, width) float64 volume."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or min(a.shape) < 1:
        raise DimensionMismatchError(f"{name} must be 3D with positive size, got shape {a.shape}")
    return check_finite(a, name)


def fft2(img: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DFT of a real or complex image.

    Operates on the last two axes, so stacks of images transform in one
    call.  Unitarity means Parseval holds exactly and the adjoint of this
    map is :func:`ifft2`.
    """
    img = np.asarray(img)
    if img.ndim < 2 or img.shape[-1] < 1 or img.shape[-2] < 1:
        raise DimensionMismatchError(f"fft2 needs at least 2D input, got shape {img.shape}")
    check_finite(img, "fft2 input")
    return np.fft.fft2(img, norm="ortho")


def ifft2(spec: np.ndarray) -> np.ndarray:
    """Inverse (= adjoint) of :func:`fft2`, same orthonormal convention."""
    spec = np.asarray(spec)
    if spec.ndim < 2 or spec.shape[-1] < 1 or spec.shape[-2] < 1:
        raise DimensionMismatchError(f"ifft2 needs at least 2D input, got shape {spec.shape}")
    check_finite(spec, "ifft2 input")
    return np.fft.ifft2(spec, norm="ortho")


def inner(u: np.ndarray, v: np.ndarray) -> float:
    """Real inner product Re<u, v>; plain dot product for real arrays.

    This is the inner product under which the forward/adjoint pairs in
    :mod:`simba_idt.forward` are exact adjoints, for real and complex
    arrays alike.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"inner product shape mismatch {u.shape} vs {v.shape}")
    return float(np.real(np.vdot(u, v)))


def norm(a: np.ndarray) -> float:
    """Euclidean norm of an array of any shape."""
    return float(np.linalg.norm(np.asarray(a).ravel()))
