"""Linearized multi-slice measurement operator and its exact adjoint.

The unknown is a complex permittivity contrast stored as *two real
volumes* (``re`` = phase contrast, ``im`` = absorption contrast), which
keeps the operator real-linear and the gradients free of Wirtinger
conventions.  For illumination ``i`` the predicted background-subtracted
intensity is::

    forward_i(x) = Re{ ifft2( sum_j  hRe[i,j] * fft2(x.re[j])
                                   + hIm[i,j] * fft2(x.im[j]) ) }

with per-illumination, per-slice complex transfer functions ``hRe`` /
``hIm`` and the orthonormal FFT of :mod:`simba_idt.core`.  The adjoint is
exact under the real inner product; :func:`apply_adjoint` implements it in
the same factored Fourier form.

Real transfer-function stacks are loaded from files (see
:mod:`simba_idt.containers`); :func:`synth_tf` provides a deterministic
synthetic generator so the whole test suite is self-contained.  Synthetic
stacks are Hermitian-symmetric in frequency (physical intensity spectra
are), which makes them *frequency diagonal*: per-frequency closed-form
solves are exact for them, and :func:`tikhonov_reconstruct` exploits that.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse.linalg as spla

from simba_idt.core import as_volume, check_finite, fft2, ifft2
from simba_idt.errors import (
    DataError,
    DimensionMismatchError,
    NonConvergenceError,
)

CONVENTIONS = ("re_kept", "re_dropped")


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ContrastVolume:
    """Permittivity contrast split into phase (re) and absorption (im) volumes.

    Both parts are (slices, height, width) float64 arrays of identical
    shape, finite, and read-only after construction.  Supports the small
    amount of vector arithmetic the solvers need.
    """

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = as_volume(np.array(self.re, dtype=np.float64, order="C"), "re")
        im = as_volume(np.array(self.im, dtype=np.float64, order="C"), "im")
        if re.shape != im.shape:
            raise DimensionMismatchError(f"re/im shape mismatch {re.shape} vs {im.shape}")
        object.__setattr__(self, "re", _freeze(re))
        object.__setattr__(self, "im", _freeze(im))

    @staticmethod
    def _fresh(re: np.ndarray, im: np.ndarray) -> "ContrastVolume":
        """Wrap freshly computed arrays without the defensive copy."""
        out = object.__new__(ContrastVolume)
        object.__setattr__(out, "re", _freeze(np.ascontiguousarray(re, dtype=np.float64)))
        object.__setattr__(out, "im", _freeze(np.ascontiguousarray(im, dtype=np.float64)))
        return out

    @classmethod
    def zeros(cls, slices: int, height: int, width: int) -> "ContrastVolume":
        shape = (slices, height, width)
        return cls._fresh(np.zeros(shape), np.zeros(shape))

    @classmethod
    def zeros_like(cls, other: "ContrastVolume") -> "ContrastVolume":
        return cls.zeros(*other.shape)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.re.shape

    def _check_same_shape(self, other: "ContrastVolume"):
        # guard against numpy broadcasting quietly mixing volume sizes
        if self.re.shape != other.re.shape:
            raise DimensionMismatchError(
                f"volume shape mismatch {self.re.shape} vs {other.re.shape}")

    def __add__(self, other: "ContrastVolume") -> "ContrastVolume":
        self._check_same_shape(other)
        return ContrastVolume._fresh(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ContrastVolume") -> "ContrastVolume":
        self._check_same_shape(other)
        return ContrastVolume._fresh(self.re - other.re, self.im - other.im)

    def __mul__(self, scalar: float) -> "ContrastVolume":
        s = float(scalar)
        return ContrastVolume._fresh(self.re * s, self.im * s)

    __rmul__ = __mul__

    def __neg__(self) -> "ContrastVolume":
        return ContrastVolume._fresh(-self.re, -self.im)

    def dot(self, other: "ContrastVolume") -> float:
        self._check_same_shape(other)
        return float(np.dot(self.re.ravel(), other.re.ravel())
                     + np.dot(self.im.ravel(), other.im.ravel()))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def ravel(self) -> np.ndarray:
        """Flatten to a single real vector (re part first)."""
        return np.concatenate([self.re.ravel(), self.im.ravel()])

    @classmethod
    def from_ravel(cls, vec: np.ndarray, shape: tuple[int, int, int]) -> "ContrastVolume":
        n = int(np.prod(shape))
        if vec.size != 2 * n:
            raise DimensionMismatchError(f"vector length {vec.size} != 2*{n}")
        return cls._fresh(vec[:n].reshape(shape).copy(), vec[n:].reshape(shape).copy())


@dataclass(frozen=True, eq=False)
class TransferFunctionStack:
    """Per-illumination, per-slice transfer functions in factored Fourier form.

    ``h_re`` and ``h_im`` are (illuminations, slices, height, width)
    complex128 arrays sharing one shape.  ``freq_diagonal`` marks stacks
    whose TFs satisfy the Hermitian frequency symmetry H(-k) = conj(H(k)),
    for which per-frequency solves are exact.  ``convention`` records
    whether the real part is taken at the forward output (``re_kept``) or
    the complex field is returned as-is (``re_dropped``).
    """

    h_re: np.ndarray
    h_im: np.ndarray
    slice_spacing_um: float = 1.0
    metadata: dict = field(default_factory=dict)
    freq_diagonal: bool = False
    convention: str = "re_kept"

    def __post_init__(self):
        h_re = np.ascontiguousarray(self.h_re, dtype=np.complex128)
        h_im = np.ascontiguousarray(self.h_im, dtype=np.complex128)
        if h_re.ndim != 4 or min(h_re.shape) < 1:
            raise DimensionMismatchError(
                f"transfer functions must be (I, slices, H, W), got {h_re.shape}")
        if h_re.shape != h_im.shape:
            raise DimensionMismatchError(
                f"h_re/h_im shape mismatch {h_re.shape} vs {h_im.shape}")
        check_finite(h_re, "h_re")
        check_finite(h_im, "h_im")
        if self.convention not in CONVENTIONS:
            raise DataError(f"unknown convention {self.convention!r}")
        object.__setattr__(self, "h_re", _freeze(h_re))
        object.__setattr__(self, "h_im", _freeze(h_im))

    @property
    def illuminations(self) -> int:
        return self.h_re.shape[0]

    @property
    def slices(self) -> int:
        return self.h_re.shape[1]

    @property
    def height(self) -> int:
        return self.h_re.shape[2]

    @property
    def width(self) -> int:
        return self.h_re.shape[3]

    def check_volume(self, x: ContrastVolume):
        expect = (self.slices, self.height, self.width)
        if x.shape != expect:
            raise DimensionMismatchError(f"volume shape {x.shape} does not match TF {expect}")

    def check_index(self, i: int) -> int:
        i = int(i)
        if not 0 <= i < self.illuminations:
            raise DimensionMismatchError(
                f"illumination index {i} out of range [0, {self.illuminations})")
        return i


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Background-subtracted intensity images, one per illumination."""

    y: np.ndarray
    ground_truth: ContrastVolume | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if y.ndim != 3 or min(y.shape) < 1:
            raise DimensionMismatchError(f"measurements must be (I, H, W), got {y.shape}")
        check_finite(y, "y")
        object.__setattr__(self, "y", _freeze(y))

    @property
    def illuminations(self) -> int:
        return self.y.shape[0]

    def check_tf(self, tf: TransferFunctionStack):
        if self.y.shape[0] != tf.illuminations or self.y.shape[1:] != (tf.height, tf.width):
            raise DimensionMismatchError(
                f"measurements {self.y.shape} inconsistent with TF stack "
                f"({tf.illuminations}, {tf.height}, {tf.width})")


# ---------------------------------------------------------------------------
# forward / adjoint
# ---------------------------------------------------------------------------


def _volume_spectra(x: ContrastVolume) -> tuple[np.ndarray, np.ndarray]:
    return fft2(x.re), fft2(x.im)


def forward_batch(x: ContrastVolume, tf: TransferFunctionStack,
                  indices: np.ndarray) -> np.ndarray:
    """Predicted measurements for several illuminations in one pass.

    Returns a (len(indices), H, W) stack.  The slice spectra are computed
    once and shared across illuminations, which is what makes minibatch
    gradients cheap relative to per-illumination loops.
    """
    tf.check_volume(x)
    idx = np.asarray(indices, dtype=np.intp)
    xre_hat, xim_hat = _volume_spectra(x)
    spec = (np.einsum("ijhw,jhw->ihw", tf.h_re[idx], xre_hat)
            + np.einsum("ijhw,jhw->ihw", tf.h_im[idx], xim_hat))
    out = ifft2(spec)
    if tf.convention == "re_kept":
        return np.ascontiguousarray(out.real)
    return out


def apply_forward(x: ContrastVolume, tf: TransferFunctionStack, i: int) -> np.ndarray:
    """Predicted background-subtracted intensity for illumination ``i``."""
    i = tf.check_index(i)
    return forward_batch(x, tf, np.array([i]))[0]


def adjoint_sum(residuals: np.ndarray, tf: TransferFunctionStack,
                indices: np.ndarray) -> ContrastVolume:
    """Sum over the batch of per-illumination adjoints, sum_b A_{i_b}^H r_b.

    ``residuals`` is (B, H, W), real for the ``re_kept`` convention and
    complex for ``re_dropped``.  The reduction over the batch happens
    inside a single einsum in ascending batch position, so the result is
    bit-stable for a fixed index order.
    """
    idx = np.asarray(indices, dtype=np.intp)
    r = np.asarray(residuals)
    if r.ndim != 3 or r.shape[0] != idx.size or r.shape[1:] != (tf.height, tf.width):
        raise DimensionMismatchError(
            f"residual stack {r.shape} inconsistent with TF ({tf.height}, {tf.width}) "
            f"and batch size {idx.size}")
    check_finite(r, "residuals")
    r_hat = fft2(r)
    acc_re = np.einsum("bjhw,bhw->jhw", np.conj(tf.h_re[idx]), r_hat)
    acc_im = np.einsum("bjhw,bhw->jhw", np.conj(tf.h_im[idx]), r_hat)
    return ContrastVolume._fresh(ifft2(acc_re).real, ifft2(acc_im).real)


def apply_adjoint(r: np.ndarray, tf: TransferFunctionStack, i: int) -> ContrastVolume:
    """Exact adjoint of :func:`apply_forward` under the real inner product."""
    i = tf.check_index(i)
    return adjoint_sum(np.asarray(r)[None], tf, np.array([i]))


# ---------------------------------------------------------------------------
# synthetic transfer functions
# ---------------------------------------------------------------------------


def _conj_flip(g: np.ndarray) -> np.ndarray:
    """conj(G(-k)) on the FFT index grid (last two axes)."""
    return np.conj(np.roll(g[..., ::-1, ::-1], shift=(1, 1), axis=(-2, -1)))


def synth_tf(width: int, height: int, slices: int, *,
             wavelength_um: float,
             na: float,
             illumination_angles: Sequence[tuple[float, float]],
             slice_spacing_um: float = 5.0,
             background_index: float = 1.33,
             seed: int = 0,
             pixel_size_um: float | None = None,
             base_defocus_um: float | None = None,
             tilt_um: float | None = None,
             amplitude: float = 1.0,
             magnification: float | None = None,
             z_led_mm: float | None = None) -> TransferFunctionStack:
    """Deterministic synthetic transfer-function stack.

    Each TF is supported strictly inside the pupil (hard cutoff at radial
    frequency NA/wavelength), slices differ by a depth-dependent defocus
    phase, illuminations differ through a tilted/shifted defocus parabola
    plus a seeded amplitude factor, and the zero-frequency entry of every
    phase TF is exactly 0 (the model carries no DC phase information).

    The stack is Hermitian-symmetric in frequency by construction, so
    forward outputs are real before the final Re{} and the stack is
    flagged ``freq_diagonal``.
    """
    if width < 1 or height < 1 or slices < 1:
        raise DataError("width, height and slices must all be >= 1")
    if not 0.0 < na <= 1.0:
        raise DataError(f"NA must lie in (0, 1], got {na}")
    if wavelength_um <= 0:
        raise DataError(f"wavelength must be positive, got {wavelength_um}")
    if slice_spacing_um <= 0:
        raise DataError(f"slice spacing must be positive, got {slice_spacing_um}")
    angles = [(float(ax), float(ay)) for ax, ay in illumination_angles]
    if len(angles) < 1:
        raise DataError("at least one illumination angle required")

    pixel = pixel_size_um if pixel_size_um is not None else wavelength_um / (4.0 * na)
    if pixel <= 0:
        raise DataError(f"pixel size must be positive, got {pixel}")
    base_defocus = (base_defocus_um if base_defocus_um is not None
                    else 50.0 * wavelength_um / na ** 2)
    tilt = tilt_um if tilt_um is not None else 5.0 * wavelength_um

    fx = np.fft.fftfreq(width, d=pixel)[None, :]
    fy = np.fft.fftfreq(height, d=pixel)[:, None]
    cutoff = na / wavelength_um
    pupil = ((fx ** 2 + fy ** 2) <= cutoff ** 2).astype(np.float64)

    rng = np.random.default_rng(np.random.Philox(seed))
    gains = amplitude * (0.75 + 0.25 * rng.random(len(angles)))

    n_ill = len(angles)
    h_re = np.empty((n_ill, slices, height, width), dtype=np.complex128)
    h_im = np.empty_like(h_re)
    lam_eff = wavelength_um / background_index
    for i, (ax, ay) in enumerate(angles):
        ux = np.sin(ax) / wavelength_um
        uy = np.sin(ay) / wavelength_um
        rho2_shift = (fx - ux) ** 2 + (fy - uy) ** 2
        tilt_phase = 2.0 * np.pi * tilt * (np.sin(ax) * fx + np.sin(ay) * fy)
        for j in range(slices):
            z = base_defocus + j * slice_spacing_um
            chi = np.pi * lam_eff * z * rho2_shift + tilt_phase
            b = gains[i] * pupil * np.exp(1j * chi)
            bc = _conj_flip(b)
            h_re[i, j] = (b - bc) / 2j
            h_im[i, j] = (b + bc) / 2.0
    h_re[:, :, 0, 0] = 0.0

    metadata = {
        "wavelength_of_led_light_nm": wavelength_um * 1e3,
        "background_medium_index": background_index,
        "axial_position_of_leds_mm": z_led_mm,
        "microscope_objectives": magnification,
        "numerical_aperture": na,
        "slice_spacing_um": slice_spacing_um,
        "pixel_size_um": pixel,
        "seed": int(seed),
        "illumination_angles": angles,
        "base_defocus_um": base_defocus,
        "tilt_um": tilt,
        "amplitude": amplitude,
        "generator": "synthetic",
    }
    return TransferFunctionStack(h_re=h_re, h_im=h_im,
                                 slice_spacing_um=slice_spacing_um,
                                 metadata=metadata, freq_diagonal=True,
                                 convention="re_kept")


# ---------------------------------------------------------------------------
# Tikhonov baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TikhonovResult:
    volume: ContrastVolume
    method: str
    iterations: int
    relative_residual: float


def normal_rhs(m: MeasurementSet, tf: TransferFunctionStack) -> ContrastVolume:
    """(1/I) sum_i A_i^H y_i, the right-hand side of the normal equations."""
    idx = np.arange(tf.illuminations)
    return (1.0 / tf.illuminations) * adjoint_sum(m.y, tf, idx)


def normal_apply(x: ContrastVolume, tf: TransferFunctionStack) -> ContrastVolume:
    """(1/I) sum_i A_i^H A_i x, the averaged normal operator."""
    idx = np.arange(tf.illuminations)
    pred = forward_batch(x, tf, idx)
    return (1.0 / tf.illuminations) * adjoint_sum(pred, tf, idx)


def tikhonov_reconstruct(m: MeasurementSet, tf: TransferFunctionStack,
                         reg_weight: float, *, method: str = "auto",
                         cg_rtol: float = 1e-8,
                         cg_max_iter: int = 5000) -> TikhonovResult:
    """Ridge-regularized least squares over all illuminations.

    Minimizes ``sum_i ||y_i - A_i x||^2 / (2 I) + (reg_weight / 2) ||x||^2``.
    Frequency-diagonal stacks admit an exact per-frequency normal-equation
    solve; everything else goes through conjugate gradient on the normal
    equations to relative residual ``cg_rtol``.
    """
    if reg_weight <= 0:
        raise DataError(f"reg_weight must be > 0, got {reg_weight}")
    m.check_tf(tf)
    if method not in ("auto", "cg", "per_frequency"):
        raise DataError(f"unknown method {method!r}")
    if method == "auto":
        method = "per_frequency" if (tf.freq_diagonal and tf.convention == "re_kept") else "cg"

    if method == "per_frequency":
        return _tikhonov_per_frequency(m, tf, reg_weight)
    return _tikhonov_cg(m, tf, reg_weight, cg_rtol, cg_max_iter)


def _tikhonov_per_frequency(m: MeasurementSet, tf: TransferFunctionStack,
                            reg_weight: float) -> TikhonovResult:
    n_ill, s = tf.illuminations, tf.slices
    # variables per frequency: slice spectra of re then im, a 2s-vector
    h = np.concatenate([tf.h_re, tf.h_im], axis=1)          # (I, 2s, H, W)
    y_hat = fft2(m.y)                                       # (I, H, W)
    gram = np.einsum("iahw,ibhw->hwab", np.conj(h), h) / n_ill
    gram += reg_weight * np.eye(2 * s)[None, None]
    rhs = np.einsum("iahw,ihw->hwa", np.conj(h), y_hat) / n_ill
    z = np.linalg.solve(gram, rhs[..., None])[..., 0]       # (H, W, 2s)
    spectra = np.moveaxis(z, -1, 0)                         # (2s, H, W)
    fields = ifft2(spectra)
    leak = float(np.max(np.abs(fields.imag))) if fields.size else 0.0
    scale = float(np.max(np.abs(fields.real))) + 1e-30
    if leak > 1e-8 * max(scale, 1.0):
        raise DataError(
            "per-frequency solve produced a non-real volume; the stack is "
            "not actually frequency diagonal (Hermitian symmetry violated)")
    vol = ContrastVolume._fresh(fields.real[:s], fields.real[s:])
    return TikhonovResult(volume=vol, method="per_frequency", iterations=0,
                          relative_residual=0.0)


def _tikhonov_cg(m: MeasurementSet, tf: TransferFunctionStack, reg_weight: float,
                 rtol: float, max_iter: int) -> TikhonovResult:
    shape = (tf.slices, tf.height, tf.width)
    b = normal_rhs(m, tf).ravel()
    n = b.size
    count = {"it": 0}

    def matvec(v):
        count["it"] += 1
        x = ContrastVolume.from_ravel(v, shape)
        return (normal_apply(x, tf) + reg_weight * x).ravel()

    op = spla.LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    sol, info = spla.cg(op, b, rtol=rtol, atol=0.0, maxiter=max_iter)
    if info != 0:
        raise NonConvergenceError(
            f"Tikhonov conjugate gradient did not reach rtol={rtol} "
            f"within {max_iter} iterations (info={info})")
    res = op.matvec(sol) - b
    rel = float(np.linalg.norm(res) / (np.linalg.norm(b) + 1e-300))
    return TikhonovResult(volume=ContrastVolume.from_ravel(sol, shape),
                          method="cg", iterations=count["it"],
                          relative_residual=rel)
