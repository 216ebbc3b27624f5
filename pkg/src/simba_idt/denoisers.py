"""Pluggable denoisers D_sigma with nonexpansive reference implementations.

Four kinds ship: ``identity``, ``gaussianKernel`` (linear, symmetric,
norm <= 1, the workhorse of the theory suite), ``totalVariation``
(Chambolle dual projection, firmly nonexpansive up to the inner solve
tolerance), and ``cnn`` (native inference for the residual 3x3/64-channel
architecture written by the trainer).  All denoisers act slice-wise on
volumes, exactly as the solvers apply them to the re and im parts.

Boundary conventions are fixed per kind and must not be mixed: the
Gaussian reference uses symmetric (reflect) padding, which preserves
constants and keeps the operator norm at most 1; CNN layers use zero
padding, matching the training convention of the secondary component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.ndimage as ndi
from numpy.lib.stride_tricks import sliding_window_view

from simba_idt.core import check_finite
from simba_idt.errors import ArchitectureError, DataError, DimensionMismatchError

KINDS = ("identity", "gaussianKernel", "totalVariation", "cnn")


def gaussian_kernel(radius: int, sigma_spatial: float) -> np.ndarray:
    """Truncated, renormalized Gaussian tap matrix.

    Nonnegative, sums to 1, equal to its transpose and 180-degree rotation
    exactly.  As a convolution with reflect boundaries this is a linear
    operator with norm <= 1.  Radius 0 degenerates to identity.
    """
    radius = int(radius)
    if radius < 0:
        raise DataError(f"kernel radius must be >= 0, got {radius}")
    if radius == 0:
        return np.ones((1, 1))
    if sigma_spatial <= 0:
        raise DataError(f"kernel sigma must be > 0, got {sigma_spatial}")
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma_spatial ** 2))
    return k / k.sum()


@dataclass(frozen=True, eq=False)
class CnnWeights:
    """Weights of the residual denoising CNN.

    ``kernels[l]`` has shape (out_channels, in_channels, 3, 3) and
    ``biases[l]`` shape (out_channels,).  The chain must run 1 -> hidden
    -> ... -> hidden -> 1 with one uniform hidden width (64 in shipped
    weight files); a single-layer net degenerates to a 1 -> 1 convolution.
    With ``residual`` set, inference returns input minus the predicted
    noise.
    """

    kernels: tuple
    biases: tuple
    residual: bool = True
    spectral_norms: tuple | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = tuple(np.ascontiguousarray(k, dtype=np.float64) for k in self.kernels)
        bs = tuple(np.ascontiguousarray(b, dtype=np.float64) for b in self.biases)
        if len(ks) < 1 or len(ks) != len(bs):
            raise ArchitectureError(
                f"need matching kernel/bias lists, got {len(ks)} and {len(bs)}")
        widths = []
        for l, (k, b) in enumerate(zip(ks, bs)):
            if k.ndim != 4 or k.shape[2:] != (3, 3):
                raise ArchitectureError(f"layer {l}: kernels must be (out, in, 3, 3), "
                                        f"got {k.shape}")
            if b.shape != (k.shape[0],):
                raise ArchitectureError(f"layer {l}: bias shape {b.shape} does not "
                                        f"match {k.shape[0]} output channels")
            check_finite(k, f"layer {l} kernel")
            check_finite(b, f"layer {l} bias")
            widths.append((k.shape[1], k.shape[0]))
        if widths[0][0] != 1:
            raise ArchitectureError(f"first layer must take 1 channel, takes {widths[0][0]}")
        if widths[-1][1] != 1:
            raise ArchitectureError(f"last layer must emit 1 channel, emits {widths[-1][1]}")
        for l in range(len(widths) - 1):
            if widths[l][1] != widths[l + 1][0]:
                raise ArchitectureError(
                    f"channel chain broken between layers {l} and {l + 1}: "
                    f"{widths[l][1]} -> {widths[l + 1][0]}")
        hidden = {w for pair in widths for w in pair if w != 1} or {1}
        if len(hidden) > 1:
            raise ArchitectureError(f"hidden widths must be uniform, got {sorted(hidden)}")
        if self.spectral_norms is not None and len(self.spectral_norms) != len(ks):
            raise ArchitectureError("one spectral-norm bound per layer required")
        object.__setattr__(self, "kernels", ks)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "spectral_norms",
                           None if self.spectral_norms is None
                           else tuple(float(s) for s in self.spectral_norms))

    @property
    def layer_count(self) -> int:
        return len(self.kernels)

    @property
    def hidden_channels(self) -> int:
        return self.kernels[0].shape[0] if self.layer_count > 1 else 1

    def nonexpansive_certificate(self) -> bool:
        """True only when certified layer norms bound the whole map by 1.

        The residual combination x - f(x) carries the bound 1 + prod of
        layer norms, so residual nets certify only in the degenerate
        zero-network case; absent certificates always mean False.
        """
        if self.spectral_norms is None:
            return False
        prod = float(np.prod(self.spectral_norms))
        bound = 1.0 + prod if self.residual else prod
        return bound <= 1.0 + 1e-12


def cnn_infer(w: CnnWeights, img: np.ndarray) -> np.ndarray:
    """Forward pass of the residual CNN on one 2D image.

    Composite conv(3x3)+ReLU layers, then a final convolution with no
    activation; all convolutions same-size with zero padding.  With the
    residual flag the predicted noise is subtracted from the input.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionMismatchError(f"cnn_infer expects a 2D image, got {img.shape}")
    check_finite(img, "image")
    h, wd = img.shape
    act = img[None]
    last = w.layer_count - 1
    for l, (k, b) in enumerate(zip(w.kernels, w.biases)):
        pad = np.pad(act, ((0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(pad, (3, 3), axis=(1, 2))      # (C, h, wd, 3, 3)
        cols = win.transpose(0, 3, 4, 1, 2).reshape(act.shape[0] * 9, h * wd)
        act = (k.reshape(k.shape[0], -1) @ cols).reshape(k.shape[0], h, wd)
        act += b[:, None, None]
        if l < last:
            np.maximum(act, 0.0, out=act)
    pred = act[0]
    return img - pred if w.residual else pred


@dataclass(frozen=True, eq=False)
class DenoiserSpec:
    """Which denoiser to apply and every parameter that affects its output.

    ``sigma`` is the noise level the denoiser targets; for reference
    denoisers it is descriptive metadata, for CNNs it selects the trained
    weights.  ``boundary`` picks the kernel extension for gaussianKernel:
    "reflect" for natural images, "wrap" for periodic synthetic scenes
    (wrap makes the smoother exactly diagonal in the DFT basis, which the
    convergence laboratory exploits).  ``certified_nonexpansive`` is never
    taken from the caller: it is forced True for the kinds with a
    mathematical certificate and derived from the weight-file certificate
    for CNNs.
    """

    kind: str
    sigma: float = 0.0
    kernel_radius: int = 2
    kernel_sigma: float = 1.0
    boundary: str = "reflect"
    tv_weight: float = 0.05
    tv_max_iter: int = 200
    tv_tol: float = 1e-7
    weights: CnnWeights | None = None
    weight_file: str | None = None
    certified_nonexpansive: bool = field(default=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma < 0:
            raise DataError(f"sigma must be >= 0, got {self.sigma}")
        if self.boundary not in ("reflect", "wrap"):
            raise DataError(f"boundary must be 'reflect' or 'wrap', got {self.boundary!r}")
        if self.kind == "identity":
            object.__setattr__(self, "certified_nonexpansive", True)
        elif self.kind == "gaussianKernel":
            gaussian_kernel(self.kernel_radius, self.kernel_sigma)  # validates params
            object.__setattr__(self, "certified_nonexpansive", True)
        elif self.kind == "totalVariation":
            if self.tv_weight < 0:
                raise DataError(f"tv weight must be >= 0, got {self.tv_weight}")
            if self.tv_max_iter < 1 or self.tv_tol <= 0:
                raise DataError("tv inner solve needs max_iter >= 1 and tol > 0")
            object.__setattr__(self, "certified_nonexpansive", True)
        else:
            cert = self.weights is not None and self.weights.nonexpansive_certificate()
            object.__setattr__(self, "certified_nonexpansive", cert)

    def describe(self) -> str:
        if self.kind == "gaussianKernel":
            return (f"gaussianKernel(radius={self.kernel_radius}, "
                    f"sigma={self.kernel_sigma}, boundary={self.boundary})")
        if self.kind == "totalVariation":
            return (f"totalVariation(weight={self.tv_weight}, "
                    f"cap={self.tv_max_iter}, tol={self.tv_tol})")
        if self.kind == "cnn":
            src = self.weight_file or "in-memory"
            return f"cnn(sigma={self.sigma}, weights={src})"
        return "identity"


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def _tv_grad(u: np.ndarray) -> np.ndarray:
    g = np.zeros((2,) + u.shape)
    g[0, :-1, :] = u[1:, :] - u[:-1, :]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    return g


def _tv_div(p: np.ndarray) -> np.ndarray:
    d = np.zeros(p.shape[1:])
    d[:-1, :] += p[0, :-1, :]
    d[1:, :] -= p[0, :-1, :]
    d[:, :-1] += p[1, :, :-1]
    d[:, 1:] -= p[1, :, :-1]
    return d


def _tv_prox_slice(img: np.ndarray, weight: float, max_iter: int, tol: float) -> np.ndarray:
    """Chambolle dual projection for min_u 0.5||u - img||^2 + weight*TV(u)."""
    if weight == 0.0:
        return img.copy()
    p = np.zeros((2,) + img.shape)
    step = 0.248  # < 1/8 guarantees convergence of the dual iteration
    for _ in range(max_iter):
        candidate = _tv_div(p) - img / weight
        g = _tv_grad(candidate)
        mag = np.sqrt(g[0] ** 2 + g[1] ** 2)
        p_new = (p + step * g) / (1.0 + step * mag)
        delta = float(np.max(np.abs(p_new - p)))
        p = p_new
        if delta < tol:
            break
    return img - weight * _tv_div(p)


def _apply_slices(x: np.ndarray, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    if x.ndim == 2:
        return fn(x)
    return np.stack([fn(x[j]) for j in range(x.shape[0])])


def denoise(d: DenoiserSpec, x: np.ndarray) -> np.ndarray:
    """Apply the denoiser slice-wise; output shape equals input shape."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise DimensionMismatchError(f"expected a 2D slice or 3D volume, got {x.shape}")
    check_finite(x, "denoiser input")
    if d.kind == "identity":
        return x.copy()
    if d.kind == "gaussianKernel":
        k = gaussian_kernel(d.kernel_radius, d.kernel_sigma)
        mode = "wrap" if d.boundary == "wrap" else "reflect"
        if x.ndim == 3:
            return ndi.convolve(x, k[None], mode=mode)
        return ndi.convolve(x, k, mode=mode)
    if d.kind == "totalVariation":
        return _apply_slices(
            x, lambda s: _tv_prox_slice(s, d.tv_weight, d.tv_max_iter, d.tv_tol))
    if d.weights is None:
        raise DataError("cnn denoiser has no weights loaded "
                        f"(weight_file={d.weight_file!r})")
    return _apply_slices(x, lambda s: cnn_infer(d.weights, s))


# ---------------------------------------------------------------------------
# empirical nonexpansiveness probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeResult:
    max_ratio: float
    argmax_pair: tuple


def nonexpansiveness_probe(d, dims: tuple, n_pairs: int,
                           rng: np.random.Generator) -> ProbeResult:
    """Empirical Lipschitz lower bound over random pairs near plausible iterates.

    ``d`` is a DenoiserSpec or any callable on arrays of shape ``dims``.
    Pairs are a random base image plus a perturbation whose scale sweeps
    several orders of magnitude, so both global and local expansiveness
    show up.  A certified denoiser must stay <= 1 + 1e-9.
    """
    if n_pairs < 1:
        raise DataError(f"need at least one pair, got {n_pairs}")
    apply = d if callable(d) else (lambda a: denoise(d, a))
    best = -np.inf
    best_pair = None
    for _ in range(n_pairs):
        x = rng.standard_normal(dims)
        scale = 10.0 ** rng.uniform(-3.0, 0.5)
        y = x + scale * rng.standard_normal(dims)
        diff = np.linalg.norm((x - y).ravel())
        if diff == 0.0:
            continue
        ratio = float(np.linalg.norm((apply(x) - apply(y)).ravel()) / diff)
        if ratio > best:
            best = ratio
            best_pair = (x, y)
    return ProbeResult(max_ratio=float(best), argmax_pair=best_pair)
