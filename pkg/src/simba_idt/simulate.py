"""Phantoms, measurement synthesis with controlled noise, and the SNR metric.

The SNR here is the affine-fit variant: the estimate may be rescaled and
shifted freely before comparison, because the forward model carries no DC
information for the phase channel and reconstructions are only defined up
to that ambiguity.  ``mean_align`` applies the corresponding global offset
fix before visual comparisons.
"""

from __future__ import annotations

import numpy as np

from simba_idt.core import check_finite
from simba_idt.errors import DataError, DimensionMismatchError
from simba_idt.forward import (
    ContrastVolume,
    MeasurementSet,
    TransferFunctionStack,
    forward_batch,
)

SNR_CAP_DB = 300.0


def _phantom_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _soft_disk(height: int, width: int, cy: float, cx: float, radius: float,
               amp: float) -> np.ndarray:
    yy = np.arange(height)[:, None] - cy
    xx = np.arange(width)[None, :] - cx
    dist = np.sqrt(yy ** 2 + xx ** 2)
    edge = max(1.5, 0.25 * radius)
    inner = radius - edge
    t = np.clip((dist - inner) / edge, 0.0, 1.0)
    return amp * 0.5 * (1.0 + np.cos(np.pi * t)) * (dist <= radius)


def _disks_slice(height: int, width: int, rng: np.random.Generator,
                 max_contrast: float) -> np.ndarray:
    out = np.zeros((height, width))
    placed = []          # (cy, cx, r)
    n_disks = int(rng.integers(4, 9))
    r_lo, r_hi = 0.08 * min(height, width), 0.20 * min(height, width)
    for _ in range(n_disks):
        for _attempt in range(200):
            r = float(rng.uniform(max(2.0, r_lo), max(3.0, r_hi)))
            cy = float(rng.uniform(r, height - r))
            cx = float(rng.uniform(r, width - r))
            if all(np.hypot(cy - py, cx - px) > r + pr + 1.0 for py, px, pr in placed):
                placed.append((cy, cx, r))
                amp = float(rng.uniform(0.4, 1.0)) * max_contrast
                out += _soft_disk(height, width, cy, cx, r, amp)
                break
    return out


def make_phantom(width: int, height: int, slices: int, kind: str = "disks",
                 seed: int = 0, *, max_contrast: float = 0.1,
                 image_path: str | None = None,
                 with_absorption: bool = False) -> ContrastVolume:
    """Deterministic test object with values in [0, max_contrast].

    ``disks`` scatters non-overlapping soft-edged disks independently per
    slice into the phase (re) part; ``grayscaleImage`` loads an image file
    into every re slice, rescaled to the contrast range.  Absorption (im)
    is zero unless ``with_absorption`` adds a weaker independent disk set.
    """
    if width < 1 or height < 1 or slices < 1:
        raise DataError("phantom dimensions must be >= 1")
    if max_contrast <= 0:
        raise DataError(f"max_contrast must be > 0, got {max_contrast}")
    if kind == "disks":
        rng = _phantom_rng(seed)
        re = np.stack([_disks_slice(height, width, rng, max_contrast)
                       for _ in range(slices)])
        if with_absorption:
            im = 0.25 * np.stack([_disks_slice(height, width, rng, max_contrast)
                                  for _ in range(slices)])
        else:
            im = np.zeros_like(re)
        return ContrastVolume(re, im)
    if kind == "grayscaleImage":
        if image_path is None:
            raise DataError("grayscaleImage phantom needs image_path")
        from PIL import Image
        with Image.open(image_path) as handle:
            img = np.asarray(handle.convert("L").resize((width, height)),
                             dtype=np.float64)
        span = img.max() - img.min()
        scaled = (img - img.min()) / span * max_contrast if span > 0 else np.zeros_like(img)
        re = np.broadcast_to(scaled, (slices, height, width)).copy()
        return ContrastVolume(re, np.zeros_like(re))
    raise DataError(f"unknown phantom kind {kind!r}; expected disks or grayscaleImage")


def simulate_measurements(x: ContrastVolume, tf: TransferFunctionStack,
                          input_snr_db: float | None, seed: int = 0,
                          metadata: dict | None = None) -> MeasurementSet:
    """Forward-model measurements with per-illumination white Gaussian noise.

    The noise of each illumination is scaled so its *realized* norm meets
    the requested input SNR exactly: 20 log10(||clean_i|| / ||e_i||) =
    input_snr_db.  Pass None (or +inf) for noiseless data.  The ground
    truth rides along in the returned set.
    """
    tf.check_volume(x)
    clean = forward_batch(x, tf, np.arange(tf.illuminations))
    noiseless = input_snr_db is None or np.isinf(input_snr_db)
    if noiseless:
        y = clean.copy()
    else:
        rng = _phantom_rng(seed)
        raw = rng.standard_normal(clean.shape)
        clean_norms = np.linalg.norm(clean.reshape(clean.shape[0], -1), axis=1)
        raw_norms = np.linalg.norm(raw.reshape(raw.shape[0], -1), axis=1)
        if np.any(clean_norms == 0.0):
            bad = int(np.argmax(clean_norms == 0.0))
            raise DataError(
                f"illumination {bad} has an all-zero clean measurement; "
                f"a finite input SNR of {input_snr_db} dB is undefined for it")
        target = clean_norms / 10.0 ** (input_snr_db / 20.0)
        y = clean + raw * (target / raw_norms)[:, None, None]
    meta = dict(metadata or {})
    meta.update({
        "input_snr_db": None if noiseless else float(input_snr_db),
        "noise_seed": int(seed),
    })
    return MeasurementSet(y=y, ground_truth=x, metadata=meta)


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------


def snr(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Affine-fit SNR in dB: max over a, b of 20 log10(||y|| / ||y - a*yhat + b||).

    Unconstrained least squares gives a = cov(y, yhat)/var(yhat) (a = 0
    for a constant estimate) and b zeroing the residual mean.  Capped at
    +300 dB once the residual drops below 1e-15 of the truth norm, so the
    metric stays total.
    """
    yhat = np.asarray(estimate, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if yhat.shape != y.shape:
        raise DimensionMismatchError(
            f"estimate and truth sizes differ: {yhat.size} vs {y.size}")
    check_finite(yhat, "estimate")
    check_finite(y, "truth")
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        raise DataError("truth volume has zero norm; SNR undefined")
    yc = y - y.mean()
    hc = yhat - yhat.mean()
    var = float(np.dot(hc, hc))
    a = float(np.dot(yc, hc)) / var if var > 0.0 else 0.0
    resid = float(np.linalg.norm(yc - a * hc))
    if resid < 1e-15 * y_norm:
        return SNR_CAP_DB
    return min(float(20.0 * np.log10(y_norm / resid)), SNR_CAP_DB)


def snr_fixed(estimate: np.ndarray, truth: np.ndarray) -> float:
    """SNR with a = 1, b = 0 (no affine fit); the affine version dominates it."""
    yhat = np.asarray(estimate, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if yhat.shape != y.shape:
        raise DimensionMismatchError(
            f"estimate and truth sizes differ: {yhat.size} vs {y.size}")
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        raise DataError("truth volume has zero norm; SNR undefined")
    resid = float(np.linalg.norm(y - yhat))
    if resid < 1e-15 * y_norm:
        return SNR_CAP_DB
    return min(float(20.0 * np.log10(y_norm / resid)), SNR_CAP_DB)


def snr_volumes(estimate: ContrastVolume, truth: ContrastVolume,
                joint: bool = False) -> float:
    """Affine-fit SNR between contrast volumes.

    Evaluates the phase (re) part by default, matching how reconstructions
    are scored; ``joint`` concatenates re and im into one vector first.
    """
    if joint:
        return snr(estimate.ravel(), truth.ravel())
    return snr(estimate.re, truth.re)


def mean_align(x: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Shift x by one global constant so its mean matches the reference.

    The forward model is blind to the phase DC component, so comparisons
    fix the mean first; the affine-fit SNR is invariant to this shift.
    """
    x = np.asarray(x, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    return x + (reference.mean() - x.mean())
