"""Few-step trajectory generative models with exact likelihood.

An invertible per-level transporter plus a Gaussian next-level predictor
give exact joint log-likelihood over a short noising trajectory; sampling
walks the trajectory coarse-to-fine in a handful of steps.
"""

import os as _os

# BLAS thread caps must be set before numpy is first imported anywhere in
# the process, so this block stays at the top of the package root.
_threads = _os.environ.get("TRAJFLOW_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

from trajflow.gradcore import Tape, Tensor, grad  # noqa: E402
from trajflow.schedule import (  # noqa: E402
    TimeSchedule,
    Trajectory,
    apply_shift,
    build_schedule,
    forward_coeffs,
    forward_transition,
    posterior_coeffs,
    sample_trajectory,
    trajectory_covariance,
)

__all__ = [
    "Tape",
    "Tensor",
    "grad",
    "TimeSchedule",
    "Trajectory",
    "apply_shift",
    "build_schedule",
    "forward_coeffs",
    "forward_transition",
    "posterior_coeffs",
    "sample_trajectory",
    "trajectory_covariance",
]

__version__ = "0.1.0"
