"""Online minibatch regularization-by-denoising (RED) reconstruction for
3D intensity diffraction tomography.

The package is organized around a linearized multi-slice measurement
operator in factored Fourier form, component data-fidelity gradients with
an unbiased minibatch estimator, pluggable image denoisers, fixed-point
solvers (batch and online, plain and Nesterov-accelerated), and a set of
numerical certification suites for the convergence theory.
"""

import os as _os

# Pin BLAS/OpenMP pools before numpy ever loads so fixed-seed runs are
# reproducible regardless of the host's core count.  Only effective when
# this package is imported first; explicit user settings win.
_threads = _os.environ.get("SIMBA_IDT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from simba_idt.core import fft2, ifft2
from simba_idt.forward import (
    ContrastVolume,
    MeasurementSet,
    TransferFunctionStack,
    apply_adjoint,
    apply_forward,
    synth_tf,
    tikhonov_reconstruct,
)
from simba_idt.fidelity import (
    FidelityProblem,
    component_gradient,
    component_loss,
    estimate_lipschitz,
    estimate_variance,
    full_gradient,
    make_rng,
    minibatch_gradient,
)
from simba_idt.denoisers import DenoiserSpec, CnnWeights, cnn_infer, denoise
from simba_idt.solvers import (
    IterateTrace,
    SolverConfig,
    accelerated_run,
    gm_red_run,
    red_operator,
    simba_run,
)
from simba_idt.simulate import make_phantom, mean_align, simulate_measurements, snr
from simba_idt.theory import (
    build_theory_instance,
    fixed_point_oracle,
    proposition_suite,
    run_corollary_sweep,
    run_theorem1_suite,
    theorem1_bound,
)

__all__ = [
    "fft2",
    "ifft2",
    "ContrastVolume",
    "MeasurementSet",
    "TransferFunctionStack",
    "apply_adjoint",
    "apply_forward",
    "synth_tf",
    "tikhonov_reconstruct",
    "FidelityProblem",
    "component_gradient",
    "component_loss",
    "estimate_lipschitz",
    "estimate_variance",
    "full_gradient",
    "make_rng",
    "minibatch_gradient",
    "DenoiserSpec",
    "CnnWeights",
    "cnn_infer",
    "denoise",
    "IterateTrace",
    "SolverConfig",
    "accelerated_run",
    "gm_red_run",
    "red_operator",
    "simba_run",
    "make_phantom",
    "mean_align",
    "simulate_measurements",
    "snr",
    "build_theory_instance",
    "fixed_point_oracle",
    "proposition_suite",
    "run_corollary_sweep",
    "run_theorem1_suite",
    "theorem1_bound",
]

__version__ = "0.1.0"
