"""Component data-fidelity terms, minibatch gradient estimator, constants.

The fidelity is quadratic per illumination, g_i(x) = (1/2)||y_i - A_i x||^2,
and the full objective averages over illuminations.  The minibatch
estimator draws batch indices i.i.d. uniformly *with replacement*, which
keeps it exactly unbiased; gradients inside a batch are reduced in sorted
index order so the result is bit-stable no matter how the evaluation is
scheduled.

Also here: power-iteration estimation of the per-component Lipschitz
constant L = max_i ||A_i||^2 and estimation of the gradient-noise variance
used by the convergence laboratory.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from simba_idt.core import fft2, ifft2
from simba_idt.errors import DataError
from simba_idt.forward import (
    ContrastVolume,
    MeasurementSet,
    TransferFunctionStack,
    adjoint_sum,
    forward_batch,
)

# Counter-based generator with a published algorithm so traces are
# reproducible across implementations that agree on the algorithm name.
RNG_ALGORITHM = "philox4x64"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded deterministic generator (Philox counter-based)."""
    return np.random.Generator(np.random.Philox(int(seed)))


def draw_indices(rng: np.random.Generator, n_ill: int, batch_size: int, *,
                 with_replacement: bool = True) -> np.ndarray:
    """Draw a minibatch of illumination indices, in draw order."""
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    if with_replacement:
        return rng.integers(0, n_ill, size=batch_size)
    if batch_size > n_ill:
        raise DataError(
            f"batch size {batch_size} > {n_ill} illuminations without replacement")
    return rng.choice(n_ill, size=batch_size, replace=False)


@dataclass(frozen=True, eq=False)
class FidelityProblem:
    """Measurements plus the operator stack they were taken with."""

    measurements: MeasurementSet
    tf: TransferFunctionStack
    loss_kind: str = "quadratic"

    def __post_init__(self):
        if self.loss_kind != "quadratic":
            raise DataError(f"unsupported loss kind {self.loss_kind!r}")
        self.measurements.check_tf(self.tf)

    @property
    def n_ill(self) -> int:
        return self.tf.illuminations

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.tf.slices, self.tf.height, self.tf.width)


def _batch_grad_loss(p: FidelityProblem, x: ContrastVolume,
                     idx: np.ndarray) -> tuple[ContrastVolume, float]:
    """Mean gradient and mean loss over the index multiset ``idx``.

    ``idx`` must already be in the fixed (sorted) evaluation order.
    """
    pred = forward_batch(x, p.tf, idx)
    resid = pred - p.measurements.y[idx]
    grad = (1.0 / idx.size) * adjoint_sum(resid, p.tf, idx)
    loss = 0.5 / idx.size * float(np.sum(resid * np.conj(resid)).real)
    return grad, loss


def component_loss(p: FidelityProblem, x: ContrastVolume, i: int) -> float:
    """(1/2)||y_i - A_i x||^2 for illumination ``i``."""
    i = p.tf.check_index(i)
    _, loss = _batch_grad_loss(p, x, np.array([i]))
    return loss


def component_gradient(p: FidelityProblem, x: ContrastVolume, i: int) -> ContrastVolume:
    """A_i^H (A_i x - y_i), the gradient of :func:`component_loss`."""
    i = p.tf.check_index(i)
    grad, _ = _batch_grad_loss(p, x, np.array([i]))
    return grad


def full_gradient_and_loss(p: FidelityProblem,
                           x: ContrastVolume) -> tuple[ContrastVolume, float]:
    return _batch_grad_loss(p, x, np.arange(p.n_ill))


def full_gradient(p: FidelityProblem, x: ContrastVolume) -> ContrastVolume:
    """(1/I) sum_i component_gradient(p, x, i)."""
    return full_gradient_and_loss(p, x)[0]


def full_loss(p: FidelityProblem, x: ContrastVolume) -> float:
    return full_gradient_and_loss(p, x)[1]


@dataclass(frozen=True)
class MinibatchGradient:
    """Estimator output plus the data needed for tracing."""

    gradient: ContrastVolume
    indices: np.ndarray        # in draw order, as produced by the rng
    loss: float                # minibatch estimate of the data fidelity


def minibatch_gradient(p: FidelityProblem, x: ContrastVolume, batch_size: int,
                       rng: np.random.Generator, *,
                       with_replacement: bool = True) -> MinibatchGradient:
    """(1/B) sum_b component_gradient(p, x, i_b), i_b i.i.d. uniform.

    Sampling is with replacement by default (exactly unbiased).  The trace
    keeps the draw order; the numerical reduction always runs in sorted
    index order so two schedulers of the same draw agree bit for bit.
    """
    idx = draw_indices(rng, p.n_ill, batch_size, with_replacement=with_replacement)
    grad, loss = _batch_grad_loss(p, x, np.sort(idx))
    return MinibatchGradient(gradient=grad, indices=idx, loss=loss)


# ---------------------------------------------------------------------------
# constants for the theory: L and gradient-noise variance
# ---------------------------------------------------------------------------


def operator_norm_bound(tf: TransferFunctionStack, i: int) -> float:
    """Cheap upper bound on ||A_i|| from TF sup-norms (slices * max row)."""
    i = tf.check_index(i)
    per_slice = (np.max(np.abs(tf.h_re[i]), axis=(-2, -1))
                 + np.max(np.abs(tf.h_im[i]), axis=(-2, -1)))
    return float(tf.slices * np.max(per_slice))


def power_iteration_norms(tf: TransferFunctionStack, *, iters: int = 50,
                          rtol: float = 1e-8, seed: int = 0) -> np.ndarray:
    """Largest eigenvalue of A_i^H A_i for every illumination at once.

    Runs one independent power iteration per illumination, all batched
    through shared FFT calls.  Returns a length-I array of ||A_i||^2
    estimates (Rayleigh quotients at the final iterate).
    """
    n_ill, s, h, w = tf.h_re.shape
    rng = make_rng(seed)
    v_re = rng.standard_normal((n_ill, s, h, w))
    v_im = rng.standard_normal((n_ill, s, h, w))

    def normal_all(vre, vim):
        # per-illumination A_i applied to its own vector, then A_i^H
        spec = (np.einsum("ijhw,ijhw->ihw", tf.h_re, fft2(vre))
                + np.einsum("ijhw,ijhw->ihw", tf.h_im, fft2(vim)))
        out = ifft2(spec)
        if tf.convention == "re_kept":
            out = out.real + 0j
        r_hat = fft2(out)
        wre = ifft2(np.einsum("ijhw,ihw->ijhw", np.conj(tf.h_re), r_hat)).real
        wim = ifft2(np.einsum("ijhw,ihw->ijhw", np.conj(tf.h_im), r_hat)).real
        return wre, wim

    lam = np.zeros(n_ill)
    for _ in range(iters):
        nrm = np.sqrt(np.sum(v_re ** 2, axis=(1, 2, 3))
                      + np.sum(v_im ** 2, axis=(1, 2, 3)))
        dead = nrm < 1e-300
        nrm = np.where(dead, 1.0, nrm)
        v_re /= nrm[:, None, None, None]
        v_im /= nrm[:, None, None, None]
        w_re, w_im = normal_all(v_re, v_im)
        new_lam = (np.sum(v_re * w_re, axis=(1, 2, 3))
                   + np.sum(v_im * w_im, axis=(1, 2, 3)))
        change = np.abs(new_lam - lam) / np.maximum(np.abs(new_lam), 1e-300)
        lam = new_lam
        v_re, v_im = w_re, w_im
        if np.all(change < rtol) or np.all(dead):
            break
    return np.maximum(lam, 0.0)


def estimate_lipschitz(p: FidelityProblem, *, iters: int = 50,
                       rtol: float = 1e-8, seed: int = 0) -> float:
    """L = 1.01 * max_i ||A_i||^2 by batched power iteration.

    Every component gradient is L-Lipschitz with this single constant.
    Returns exactly 0.0 for an all-zero operator stack.
    """
    lam = power_iteration_norms(p.tf, iters=iters, rtol=rtol, seed=seed)
    top = float(np.max(lam))
    if top <= 0.0:
        return 0.0
    return 1.01 * top


def component_variance(p: FidelityProblem, x: ContrastVolume) -> float:
    """Exact single-draw gradient variance (1/I) sum_i ||grad_i - grad||^2.

    This is the exact value that :func:`estimate_variance` approaches as
    the sample count grows (for B = 1); a batch of size B with replacement
    has variance component_variance / B.
    """
    gbar = full_gradient(p, x)
    acc = 0.0
    for i in range(p.n_ill):
        d = component_gradient(p, x, i) - gbar
        acc += d.dot(d)
    return acc / p.n_ill


def estimate_variance(p: FidelityProblem, x: ContrastVolume, batch_size: int,
                      n_samples: int, rng: np.random.Generator) -> float:
    """Sample mean of ||full_gradient - minibatch_gradient||^2.

    The convergence laboratory evaluates the theorem bound with
    nu^2 := batch_size * estimate_variance, since the estimator variance
    scales as nu^2 / B.
    """
    if n_samples < 1:
        raise DataError(f"need at least one sample, got {n_samples}")
    gbar = full_gradient(p, x)
    acc = 0.0
    for _ in range(n_samples):
        mb = minibatch_gradient(p, x, batch_size, rng)
        d = mb.gradient - gbar
        acc += d.dot(d)
    return acc / n_samples


# ---------------------------------------------------------------------------
# per-iteration memory accounting
# ---------------------------------------------------------------------------


def operator_bytes_touched(tf: TransferFunctionStack, m: MeasurementSet,
                           indices: np.ndarray | None = None) -> int:
    """Bytes of per-illumination operator data one iteration touches.

    Counts the transfer functions and measurements of the (unique) indices
    used; iterate/gradient buffers are excluded since they do not scale
    with the batch.  With ``indices=None`` the full-batch figure is
    returned.
    """
    if indices is None:
        uniq = np.arange(tf.illuminations)
    else:
        uniq = np.unique(np.asarray(indices, dtype=np.intp))
        for i in uniq:
            tf.check_index(int(i))
    per_ill = (tf.h_re[0].nbytes + tf.h_im[0].nbytes + m.y[0].nbytes)
    return int(uniq.size * per_ill)


def minibatch_memory_ratio(tf: TransferFunctionStack, m: MeasurementSet,
                           batch_size: int) -> float:
    """Worst-case (all-distinct batch) ratio of per-iteration operator bytes."""
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    b = min(batch_size, tf.illuminations)
    worst = operator_bytes_touched(tf, m, np.arange(b))
    return worst / operator_bytes_touched(tf, m)
