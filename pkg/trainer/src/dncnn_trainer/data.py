"""Image corpus handling and the augmented patch sampler.

The trainer accepts any folder of grayscale images.  For reproducible
desk-scale runs there is also a synthetic corpus generator: piecewise
smooth scenes of overlapping shapes over low-frequency backgrounds with
mild texture, which exercise the same structures (flat regions, sharp
edges, gentle gradients) a denoiser must preserve.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from dncnn_trainer.errors import CorpusError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def _smooth_field(rng, size: int, cutoff: float) -> np.ndarray:
    """Random band-limited field normalized to [0, 1]."""
    spec = rng.normal(size=(size, size)) + 1j * rng.normal(size=(size, size))
    f = np.fft.fftfreq(size) * size
    damp = 1.0 / (1.0 + (f[:, None] ** 2 + f[None, :] ** 2) / cutoff ** 2)
    img = np.fft.ifft2(spec * damp).real
    img -= img.min()
    peak = img.max()
    return img / peak if peak > 0 else img


def _scene(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.25 + 0.5 * _smooth_field(rng, size, cutoff=3.0)
    if rng.random() < 0.3:
        ang = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(ang) * xx + np.sin(ang) * yy) / size
        img += rng.uniform(-0.25, 0.25) * (ramp - ramp.mean())

    for _ in range(int(rng.integers(5, 14))):
        cy, cx = rng.uniform(0, size, size=2)
        a = rng.uniform(0.04, 0.25) * size
        b = rng.uniform(0.04, 0.25) * size
        ang = rng.uniform(0, np.pi)
        xr = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
        yr = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
        kind = rng.random()
        if kind < 0.6:
            dist = (np.sqrt((xr / a) ** 2 + (yr / b) ** 2) - 1.0) * min(a, b)
        elif kind < 0.85:
            dist = np.maximum(np.abs(xr) - a, np.abs(yr) - b)
        else:
            width = rng.uniform(0.75, max(1.5, 0.25 * min(a, b)))
            dist = np.abs((np.sqrt((xr / a) ** 2 + (yr / b) ** 2) - 1.0) * min(a, b)) - width
        coverage = np.clip(0.5 - dist, 0.0, 1.0)  # one-pixel soft edge
        level = rng.uniform(0.0, 1.0)
        alpha = rng.uniform(0.6, 1.0)
        img = img * (1 - alpha * coverage) + level * alpha * coverage

    if rng.random() < 0.5:
        fine = _smooth_field(rng, size, cutoff=size / 6.0)
        img += rng.uniform(0.02, 0.07) * (fine - fine.mean())
    return np.clip(img, 0.0, 1.0)


def make_corpus(folder, count: int = 48, size: int = 128, seed: int = 0) -> list:
    """Write ``count`` synthetic 8-bit grayscale PNGs; returns their paths."""
    if count < 1 or size < 16:
        raise CorpusError(f"corpus needs count >= 1 and size >= 16, "
                          f"got {count} and {size}")
    os.makedirs(folder, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        img = _scene(rng, size)
        quantized = np.round(img * 255.0).astype(np.uint8)
        path = os.path.join(folder, f"scene_{i:03d}.png")
        Image.fromarray(quantized, mode="L").save(path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# loading and sampling
# ---------------------------------------------------------------------------


def load_images(folder) -> list:
    """Grayscale images from a folder as float32 arrays in [0, 1]."""
    if not os.path.isdir(folder):
        raise CorpusError(f"image folder {folder!r} does not exist")
    names = sorted(n for n in os.listdir(folder)
                   if n.lower().endswith(IMAGE_EXTENSIONS))
    if not names:
        raise CorpusError(f"image folder {folder!r} holds no images")
    images = []
    for name in names:
        with Image.open(os.path.join(folder, name)) as handle:
            images.append(np.asarray(handle.convert("L"), dtype=np.float32) / 255.0)
    return images


class PatchSampler:
    """Random clean patches with the training augmentations.

    Augmentation: the 8 dihedral flips/rotations, spatial rescaling of the
    source image, and intensity rescaling of the patch.  Intensity factors
    leave the noise level (added later by the caller) absolute, so one
    trained model also covers scenes much darker than the unit range; a
    ``full_scale_share`` of patches stay at native intensity so unit-range
    performance is not traded away.
    """

    def __init__(self, images, patch_size: int, rng, *,
                 spatial_scales=(1.0, 0.85, 0.7),
                 intensity_range=(0.08, 1.0), full_scale_share: float = 0.5):
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        if not self.images:
            raise CorpusError("no images to sample from")
        self.patch = int(patch_size)
        self.scales = tuple(float(s) for s in spatial_scales)
        smallest = min(min(im.shape) for im in self.images) * min(self.scales)
        if smallest < self.patch:
            raise CorpusError(f"patch size {self.patch} exceeds the smallest "
                              f"rescaled image ({smallest:.0f} px)")
        self.intensity_range = (float(intensity_range[0]), float(intensity_range[1]))
        self.full_scale_share = float(full_scale_share)
        self.rng = rng
        self._variants = {}

    def _scaled(self, idx: int, scale: float) -> np.ndarray:
        key = (idx, scale)
        if key not in self._variants:
            im = self.images[idx]
            if scale == 1.0:
                self._variants[key] = im
            else:
                h = max(self.patch, int(round(im.shape[0] * scale)))
                w = max(self.patch, int(round(im.shape[1] * scale)))
                resized = Image.fromarray(im).resize((w, h), Image.BILINEAR)
                self._variants[key] = np.asarray(resized, dtype=np.float32)
        return self._variants[key]

    def sample(self, count: int) -> np.ndarray:
        """(count, 1, patch, patch) float32 batch of clean patches."""
        p = self.patch
        out = np.empty((count, 1, p, p), dtype=np.float32)
        for i in range(count):
            idx = int(self.rng.integers(len(self.images)))
            scale = self.scales[int(self.rng.integers(len(self.scales)))]
            im = self._scaled(idx, scale)
            y0 = int(self.rng.integers(im.shape[0] - p + 1))
            x0 = int(self.rng.integers(im.shape[1] - p + 1))
            crop = im[y0:y0 + p, x0:x0 + p]
            op = int(self.rng.integers(8))
            crop = np.rot90(crop, op % 4)
            if op >= 4:
                crop = crop[:, ::-1]
            if self.rng.random() < self.full_scale_share:
                gain = 1.0
            else:
                gain = self.rng.uniform(*self.intensity_range)
            out[i, 0] = crop * gain
        return out
