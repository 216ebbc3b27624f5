"""RED fixed-point operator, batch GM-RED, online SIMBA, acceleration.

All solvers iterate x^k = x^{k-1} - gamma * Ghat(x^{k-1}) where
Ghat = grad_est + tau * (x - D(x)); GM-RED uses the full gradient, SIMBA
an unbiased minibatch estimate.  Every run produces an IterateTrace whose
quantities are evaluated at the pre-update point of each iteration, so a
full-batch SIMBA run (index stub) and GM-RED agree column for column.

Step size ``auto`` resolves to 1/(L + 2 tau); the ``invSqrtT`` schedule
divides the resolved constant by sqrt(max_iter), which is the horizon
scaling of the O(1/sqrt(t)) corollary (still constant within a run).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from simba_idt.denoisers import DenoiserSpec, denoise
from simba_idt.errors import DataError
from simba_idt.fidelity import (
    FidelityProblem,
    estimate_lipschitz,
    full_gradient_and_loss,
    make_rng,
    minibatch_gradient,
)
from simba_idt.forward import ContrastVolume
from simba_idt.simulate import snr_volumes

GAMMA_SCHEDULES = ("constant", "invSqrtT")

# Fixed trace schema; the CSV writer in containers follows this order.
TRACE_COLUMNS = ("iter", "ghat_sq_norm", "g_sq_norm", "fidelity",
                 "snr_db", "wall_seconds", "batch_indices")


class FullBatchIndexStub:
    """Index generator that always returns the full sweep 0..I-1.

    Substituting it for the minibatch rng with B = I makes SIMBA
    reproduce GM-RED exactly, which the equivalence tests rely on.
    """

    def __init__(self, n_ill: int):
        self.n_ill = int(n_ill)

    def integers(self, low, high=None, size=None):
        hi = self.n_ill if high is None else int(high)
        if hi != self.n_ill or (size is not None and int(size) != self.n_ill):
            raise DataError(
                f"full-batch stub serves exactly {self.n_ill} indices, "
                f"requested {size} from range {hi}")
        return np.arange(self.n_ill)

    def choice(self, n, size=None, replace=True):
        return self.integers(0, n, size)


def full_batch_rng(n_ill: int) -> FullBatchIndexStub:
    return FullBatchIndexStub(n_ill)


@dataclass(frozen=True)
class SolverConfig:
    """Everything that determines a solver run besides the problem itself."""

    denoiser: DenoiserSpec
    tau: float
    gamma: float | str = "auto"
    batch_size: int = 1
    max_iter: int = 100
    seed: int = 0
    accelerated: bool = False
    gamma_schedule: str = "constant"
    x0: ContrastVolume | None = None
    lipschitz: float | None = None
    theory_mode: bool = False
    trace_full_g: bool = False
    with_replacement: bool = True
    full_batch_stub: bool = False
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.tau < 0:
            raise DataError(f"tau must be >= 0, got {self.tau}")
        if isinstance(self.gamma, str):
            if self.gamma != "auto":
                raise DataError(f"gamma must be positive or 'auto', got {self.gamma!r}")
        elif self.gamma <= 0:
            raise DataError(f"gamma must be positive, got {self.gamma}")
        if self.batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_iter < 1:
            raise DataError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.gamma_schedule not in GAMMA_SCHEDULES:
            raise DataError(f"unknown gamma schedule {self.gamma_schedule!r}")


@dataclass
class IterateTrace:
    """Per-iteration record of the quantities Theorem-style analyses need.

    Lists share one length <= max_iter; entry k describes iteration k+1
    evaluated at its pre-update point.  ``g_sq_norm`` entries are None
    unless full-gradient tracing was requested, ``snr_db`` entries are
    None without ground truth.
    """

    gamma: float
    tau: float
    lipschitz: float
    batch_size: int
    seed: int
    schedule: str
    accelerated: bool
    denoiser: str
    ghat_sq_norm: list = field(default_factory=list)
    g_sq_norm: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    snr_db: list = field(default_factory=list)
    wall_seconds: list = field(default_factory=list)
    batch_indices: list = field(default_factory=list)
    diverged: bool = False
    stop_reason: str = "completed"

    def __len__(self) -> int:
        return len(self.ghat_sq_norm)

    def row(self, k: int) -> dict:
        """Row dict for 1-based iteration k, following TRACE_COLUMNS."""
        i = k - 1
        return {
            "iter": k,
            "ghat_sq_norm": self.ghat_sq_norm[i],
            "g_sq_norm": self.g_sq_norm[i],
            "fidelity": self.fidelity[i],
            "snr_db": self.snr_db[i],
            "wall_seconds": self.wall_seconds[i],
            "batch_indices": ";".join(str(int(b)) for b in self.batch_indices[i]),
        }


def apply_denoiser(d: DenoiserSpec, x: ContrastVolume) -> ContrastVolume:
    """D applied slice-wise to the re and im parts independently."""
    return ContrastVolume._fresh(denoise(d, x.re), denoise(d, x.im))


def red_operator(p: FidelityProblem, d: DenoiserSpec, tau: float,
                 x: ContrastVolume) -> ContrastVolume:
    """G(x) = grad g(x) + tau * (x - D(x)), the operator whose zeros we seek."""
    grad, _ = full_gradient_and_loss(p, x)
    if tau == 0.0:
        return grad
    return grad + tau * (x - apply_denoiser(d, x))


def resolve_gamma(config: SolverConfig, lipschitz: float) -> float:
    base = (1.0 / (lipschitz + 2.0 * config.tau) if config.gamma == "auto"
            else float(config.gamma))
    if config.gamma_schedule == "invSqrtT":
        return base / np.sqrt(config.max_iter)
    return base


def _check_step_size(config: SolverConfig, gamma: float, lipschitz: float):
    limit = 1.0 / (lipschitz + 2.0 * config.tau)
    if gamma > limit * (1.0 + 1e-12):
        msg = (f"step size {gamma:.3e} exceeds the theory bound "
               f"1/(L+2tau) = {limit:.3e}")
        if config.theory_mode:
            raise DataError(msg)
        warnings.warn(msg, stacklevel=3)


def _run(p: FidelityProblem, config: SolverConfig, *, full_batch: bool,
         row_callback: Callable[[dict], None] | None) -> tuple[ContrastVolume, IterateTrace]:
    lipschitz = (config.lipschitz if config.lipschitz is not None
                 else estimate_lipschitz(p))
    gamma = resolve_gamma(config, lipschitz)
    _check_step_size(config, gamma, lipschitz)

    n_ill = p.n_ill
    if not full_batch and config.batch_size > n_ill and config.with_replacement:
        warnings.warn(f"batch size {config.batch_size} exceeds {n_ill} illuminations "
                      "(sampling with replacement)", stacklevel=3)
    if config.full_batch_stub and not full_batch:
        if config.batch_size != n_ill:
            raise DataError("full-batch stub requires batch_size == illumination count")
        rng = full_batch_rng(n_ill)
    else:
        rng = make_rng(config.seed)

    x = config.x0 if config.x0 is not None else ContrastVolume.zeros(*p.volume_shape)
    p.tf.check_volume(x)
    truth = p.measurements.ground_truth
    d = config.denoiser
    tau = config.tau

    trace = IterateTrace(gamma=gamma, tau=tau, lipschitz=lipschitz,
                         batch_size=(n_ill if full_batch else config.batch_size),
                         seed=config.seed, schedule=config.gamma_schedule,
                         accelerated=config.accelerated, denoiser=d.describe())

    s = x            # evaluation point; equals x unless accelerated
    x_prev = x
    q_prev = 1.0
    t0 = time.perf_counter()
    for k in range(1, config.max_iter + 1):
        if full_batch:
            grad, fid = full_gradient_and_loss(p, s)
            idx = np.arange(n_ill)
        else:
            mb = minibatch_gradient(p, s, config.batch_size, rng,
                                    with_replacement=config.with_replacement)
            grad, fid, idx = mb.gradient, mb.loss, mb.indices

        if tau != 0.0:
            reg = tau * (s - apply_denoiser(d, s))
            ghat = grad + reg
        else:
            reg = None
            ghat = grad

        trace.ghat_sq_norm.append(ghat.dot(ghat))
        if config.trace_full_g:
            if full_batch:
                g_full = ghat
            else:
                g_full = full_gradient_and_loss(p, s)[0]
                if reg is not None:
                    g_full = g_full + reg
            trace.g_sq_norm.append(g_full.dot(g_full))
        else:
            trace.g_sq_norm.append(None)
        trace.fidelity.append(fid)
        trace.snr_db.append(snr_volumes(s, truth) if truth is not None else None)
        trace.wall_seconds.append(time.perf_counter() - t0)
        trace.batch_indices.append(idx)
        if row_callback is not None:
            row_callback(trace.row(k))

        x_new = s - gamma * ghat
        if config.accelerated:
            q = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * q_prev * q_prev))
            s = x_new + ((q_prev - 1.0) / q) * (x_new - x_prev)
            q_prev = q
            x_prev = x_new
        else:
            s = x_new
        x = x_new

        mag = float(np.max(np.abs(x.re)) if x.re.size else 0.0)
        mag = max(mag, float(np.max(np.abs(x.im)) if x.im.size else 0.0))
        if not np.isfinite(mag) or x.norm() > config.divergence_threshold:
            trace.diverged = True
            trace.stop_reason = f"diverged at iteration {k}"
            break
    return x, trace


def gm_red_run(p: FidelityProblem, config: SolverConfig, *,
               row_callback=None) -> tuple[ContrastVolume, IterateTrace]:
    """Deterministic full-gradient RED iteration (no momentum)."""
    cfg = replace(config, accelerated=False)
    return _run(p, cfg, full_batch=True, row_callback=row_callback)


def simba_run(p: FidelityProblem, config: SolverConfig, *,
              row_callback=None) -> tuple[ContrastVolume, IterateTrace]:
    """Online minibatch RED iteration, deterministic given the seed."""
    return _run(p, config, full_batch=False, row_callback=row_callback)


def accelerated_run(p: FidelityProblem, config: SolverConfig, *, full_batch=False,
                    row_callback=None) -> tuple[ContrastVolume, IterateTrace]:
    """Momentum variant of either iteration; trace rows describe the
    momentum evaluation point of each step."""
    cfg = replace(config, accelerated=True)
    return _run(p, cfg, full_batch=full_batch, row_callback=row_callback)
