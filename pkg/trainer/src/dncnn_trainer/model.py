"""DnCNN-style residual denoiser: a plain 3x3 convolution stack.

No batch norm (dropped for the nonexpansiveness experiments on the
reconstruction side), ReLU between layers, none after the last.  The
network predicts the noise; ``denoise`` subtracts the prediction from
the input.  All convolutions are same-size with zero padding, which is
exactly the convention of the reconstruction package's inference engine,
so exported weights behave identically there.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dncnn_trainer.errors import FormatError


class DnCnnStar(nn.Module):
    def __init__(self, layers: int = 7, hidden: int = 64):
        super().__init__()
        if layers < 1:
            raise ValueError(f"need at least one layer, got {layers}")
        if hidden < 1:
            raise ValueError(f"need at least one hidden channel, got {hidden}")
        widths = [1] + [hidden] * (layers - 1) + [1]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[l], widths[l + 1], 3, padding=1)
            for l in range(layers))
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)

    @property
    def layer_count(self) -> int:
        return len(self.convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Noise estimate for a (B, 1, H, W) batch."""
        h = x
        last = len(self.convs) - 1
        for l, conv in enumerate(self.convs):
            h = conv(h)
            if l < last:
                h = torch.relu(h)
        return h

    def denoise(self, x: torch.Tensor) -> torch.Tensor:
        return x - self.forward(x)


def net_to_arrays(net: DnCnnStar):
    """Float32 (kernels, biases) lists in export order."""
    kernels = [conv.weight.detach().cpu().numpy().astype(np.float32)
               for conv in net.convs]
    biases = [conv.bias.detach().cpu().numpy().astype(np.float32)
              for conv in net.convs]
    return kernels, biases


def net_from_arrays(kernels, biases) -> DnCnnStar:
    """Rebuild a network from stored weights (inverse of net_to_arrays)."""
    if len(kernels) < 1 or len(kernels) != len(biases):
        raise FormatError(f"need matching kernel/bias lists, "
                          f"got {len(kernels)} and {len(biases)}")
    layers = len(kernels)
    hidden = int(kernels[0].shape[0]) if layers > 1 else 1
    net = DnCnnStar(layers=layers, hidden=hidden)
    with torch.no_grad():
        for conv, k, b in zip(net.convs, kernels, biases):
            k = torch.as_tensor(np.asarray(k, dtype=np.float32))
            b = torch.as_tensor(np.asarray(b, dtype=np.float32))
            if tuple(conv.weight.shape) != tuple(k.shape):
                raise FormatError(f"kernel shape {tuple(k.shape)} does not fit "
                                  f"a uniform-width stack (expected "
                                  f"{tuple(conv.weight.shape)})")
            conv.weight.copy_(k)
            conv.bias.copy_(b)
    net.eval()
    return net


def layer_spectral_norms(net: DnCnnStar, *, size: int = 64, iters: int = 50,
                         seed: int = 0):
    """Largest singular value of each convolution layer by power iteration.

    Each layer is treated as a linear map on (channels, size, size) with
    zero padding, matching how the layer is actually applied; biases do
    not enter.  Recorded in exported files so the reconstruction side can
    evaluate its nonexpansiveness certificate.
    """
    gen = torch.Generator().manual_seed(seed)
    norms = []
    with torch.no_grad():
        for conv in net.convs:
            v = torch.randn(1, conv.in_channels, size, size, generator=gen,
                            dtype=torch.float64)
            v /= v.norm()
            w = conv.weight.double()
            sigma = 0.0
            for _ in range(iters):
                u = F.conv2d(v, w, padding=1)
                sigma = float(u.norm())
                if sigma == 0.0:
                    break
                v = F.conv_transpose2d(u / sigma, w, padding=1)
                n = v.norm()
                if float(n) == 0.0:
                    break
                v /= n
            norms.append(sigma)
    return norms
