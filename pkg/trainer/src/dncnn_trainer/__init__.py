"""Training pipeline for the residual CNN denoiser.

Trains DnCNN-style networks (3x3 convolutions, 64 channels, no batch
norm, residual noise prediction) on a folder of grayscale images and
exports ``.dnw`` weight files that the reconstruction package loads for
its ``cnn`` denoiser.  The weight-file byte layout is implemented here
independently; the file format is the only contract between the two
packages.
"""

__version__ = "0.1.0"

from dncnn_trainer.errors import CorpusError, FormatError, TrainerError, TrainingDiverged
from dncnn_trainer.model import DnCnnStar, layer_spectral_norms, net_from_arrays, net_to_arrays
from dncnn_trainer.data import load_images, make_corpus, PatchSampler
from dncnn_trainer.train import TrainConfig, mixed_loss, train
from dncnn_trainer.evaluate import EvalReport, evaluate, psnr_db
from dncnn_trainer.weights_io import read_dnw, write_dnw

__all__ = [
    "CorpusError",
    "DnCnnStar",
    "EvalReport",
    "FormatError",
    "PatchSampler",
    "TrainConfig",
    "TrainerError",
    "TrainingDiverged",
    "evaluate",
    "layer_spectral_norms",
    "load_images",
    "make_corpus",
    "mixed_loss",
    "net_from_arrays",
    "net_to_arrays",
    "psnr_db",
    "read_dnw",
    "train",
    "write_dnw",
]
