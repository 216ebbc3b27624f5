"""Held-out evaluation: PSNR of denoised vs clean over an image folder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from dncnn_trainer.data import load_images
from dncnn_trainer.model import net_from_arrays
from dncnn_trainer.weights_io import read_dnw


def psnr_db(estimate: np.ndarray, truth: np.ndarray, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(estimate, dtype=np.float64)
                         - np.asarray(truth, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


@dataclass(frozen=True)
class EvalReport:
    sigma: float
    noisy_psnr_db: float
    denoised_psnr_db: float
    per_image: tuple  # (index, noisy PSNR, denoised PSNR) per image

    @property
    def gain_db(self) -> float:
        return self.denoised_psnr_db - self.noisy_psnr_db

    def summary(self) -> str:
        return (f"sigma {self.sigma:g}: noisy {self.noisy_psnr_db:.2f} dB -> "
                f"denoised {self.denoised_psnr_db:.2f} dB "
                f"(gain {self.gain_db:+.2f} dB over {len(self.per_image)} images)")


def evaluate(weights_path, folder, sigma: float, seed: int = 0) -> EvalReport:
    """Denoise every image in the folder at noise level sigma/255.

    ``sigma`` is the test noise level, deliberately independent of the tag
    the weights were trained for, so specialization across levels can be
    measured.  Noise is seeded per run, identical for every weight file.
    """
    kernels, biases, _, _ = read_dnw(weights_path)
    net = net_from_arrays(kernels, biases)
    images = load_images(folder)
    rng = np.random.default_rng(seed)
    rows = []
    with torch.no_grad():
        for index, clean in enumerate(images):
            noise = rng.normal(0.0, sigma / 255.0, size=clean.shape).astype(np.float32)
            noisy = clean + noise
            denoised = net.denoise(torch.from_numpy(noisy)[None, None]).numpy()[0, 0]
            rows.append((index, psnr_db(noisy, clean), psnr_db(denoised, clean)))
    return EvalReport(
        sigma=float(sigma),
        noisy_psnr_db=float(np.mean([r[1] for r in rows])),
        denoised_psnr_db=float(np.mean([r[2] for r in rows])),
        per_image=tuple(rows))
