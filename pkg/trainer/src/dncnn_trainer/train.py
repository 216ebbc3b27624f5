"""Training loop: residual noise regression with the mixed l2+l1 loss.

Patches are clean crops x with AWGN of absolute level sigma/255 added;
the network output f(x + e) is regressed onto the noise e itself, and
the denoised image is the input minus the prediction.  The loss over a
batch of p patches is

    (1/p) sum_i [ ||f_i - e_i||_2^2 + rho * ||f_i - e_i||_1 ]

so rho = 0 is plain mean squared error per patch.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from dncnn_trainer import __version__
from dncnn_trainer.data import PatchSampler, load_images
from dncnn_trainer.errors import TrainerError, TrainingDiverged
from dncnn_trainer.model import DnCnnStar, layer_spectral_norms, net_to_arrays
from dncnn_trainer.weights_io import write_dnw

TRAINED_SIGMAS = (5, 10, 15, 20)


@dataclass(frozen=True)
class TrainConfig:
    image_folder: str
    sigma: int = 10
    rho: float = 0.0
    layers: int = 7
    epochs: int = 12
    patch_size: int = 40
    seed: int = 0
    hidden: int = 64
    batch_size: int = 32
    batches_per_epoch: int = 48
    lr: float = 1e-3
    out_path: str = "dncnn.dnw"
    log_path: str | None = None
    intensity_augment: bool = True
    spectral_norm_iters: int = 50
    extra_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sigma not in TRAINED_SIGMAS:
            raise TrainerError(f"sigma must be one of {TRAINED_SIGMAS}, got {self.sigma}")
        if self.rho < 0:
            raise TrainerError(f"rho must be >= 0, got {self.rho}")
        if self.layers < 1 or self.hidden < 1:
            raise TrainerError("need at least one layer and one hidden channel")
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise TrainerError("epochs, batches and batch size must all be >= 1")
        if self.patch_size < 8:
            raise TrainerError(f"patch size must be >= 8, got {self.patch_size}")
        if not self.lr > 0:
            raise TrainerError(f"learning rate must be > 0, got {self.lr}")


def mixed_loss(pred: torch.Tensor, target: torch.Tensor, rho: float) -> torch.Tensor:
    """(1/p) sum of per-patch squared l2 plus rho times l1."""
    diff = (pred - target).reshape(pred.shape[0], -1)
    per_patch = (diff ** 2).sum(dim=1)
    if rho != 0.0:
        per_patch = per_patch + rho * diff.abs().sum(dim=1)
    return per_patch.mean()


def train(config: TrainConfig, *, verbose: bool = False) -> str:
    """Train per the config and export a .dnw file; returns its path."""
    images = load_images(config.image_folder)
    rng = np.random.default_rng(config.seed)
    intensity = (0.08, 1.0) if config.intensity_augment else (1.0, 1.0)
    sampler = PatchSampler(images, config.patch_size, rng,
                           intensity_range=intensity,
                           full_scale_share=0.5 if config.intensity_augment else 1.0)

    torch.manual_seed(config.seed)
    net = DnCnnStar(layers=config.layers, hidden=config.hidden)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    noise_std = config.sigma / 255.0
    decay_every = max(1, config.epochs // 3)

    log_path = config.log_path or config.out_path + ".log.csv"
    for target in (config.out_path, log_path):
        parent = os.path.dirname(target)
        if parent:
            os.makedirs(parent, exist_ok=True)
    started = time.perf_counter()
    with open(log_path, "w") as log:
        log.write("epoch,lr,mean_loss,mean_rmse,wall_seconds\n")
        for epoch in range(config.epochs):
            lr = config.lr * 0.5 ** (epoch // decay_every)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss_sum = 0.0
            sq_sum = 0.0
            for _ in range(config.batches_per_epoch):
                clean = sampler.sample(config.batch_size)
                noise = rng.normal(0.0, noise_std, size=clean.shape).astype(np.float32)
                noisy = torch.from_numpy(clean + noise)
                target = torch.from_numpy(noise)
                optimizer.zero_grad()
                pred = net(noisy)
                loss = mixed_loss(pred, target, config.rho)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        epoch, f"loss went non-finite at epoch {epoch}")
                loss.backward()
                optimizer.step()
                loss_sum += value
                sq_sum += float(((pred.detach() - target) ** 2).mean())
            mean_loss = loss_sum / config.batches_per_epoch
            mean_rmse = math.sqrt(sq_sum / config.batches_per_epoch)
            elapsed = time.perf_counter() - started
            log.write(f"{epoch},{lr:g},{mean_loss:.8g},{mean_rmse:.8g},{elapsed:.3f}\n")
            log.flush()
            if verbose:
                print(f"epoch {epoch:3d}  lr {lr:.2e}  loss {mean_loss:10.4f}  "
                      f"rmse {mean_rmse:.5f}  [{elapsed:6.1f} s]")

    net.eval()
    kernels, biases = net_to_arrays(net)
    norms = layer_spectral_norms(net, iters=config.spectral_norm_iters)
    metadata = dict(config.extra_metadata)
    metadata.update({
        "sigma": int(config.sigma),
        "rho": float(config.rho),
        "epochs": int(config.epochs),
        "patch_size": int(config.patch_size),
        "seed": int(config.seed),
        "lr": float(config.lr),
        "optimizer": "adam",
        "batch_size": int(config.batch_size),
        "batches_per_epoch": int(config.batches_per_epoch),
        "intensity_augment": bool(config.intensity_augment),
        "corpus_images": len(images),
        "trainer": f"dncnn-trainer {__version__}",
    })
    return write_dnw(config.out_path, kernels, biases, metadata,
                     residual=True, spectral_norms=norms)
