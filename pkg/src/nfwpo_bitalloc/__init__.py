"""Constrained CTU-level bit allocation with Frank-Wolfe policy optimisation.

Modules:

* :mod:`.nn`: dense networks, Adam, soft target updates
* :mod:`.codec_env`: synthetic rate-distortion frames, episodic encoder environment, exhaustive oracle
* :mod:`.rl`: replay buffer, noise, n-step targets, training session
* :mod:`.nfwpo`: feasible sets, projection, Frank-Wolfe reference actions, the NFWPO agent
* :mod:`.baselines`: single-critic, dual-critic and projection-layer agents; fixed-QP anchor
* :mod:`.metrics`: rate deviation, ROI-weighted PSNR, BD-rate, aggregation
* :mod:`.estimators`: scikit-learn style wrappers
* :mod:`.cli`: command-line entry point
"""

from .baselines import fixed_qp_allocate
from .codec_env import CodecEnv, CtuModel, Frame, generate_frames, make_frame, oracle_allocate
from .estimators import (
    DualCriticAllocator,
    FixedQpAllocator,
    NfwpoAllocator,
    ProjectionDdpgAllocator,
    SingleCriticAllocator,
    check_frames,
)
from .metrics import bd_rate, psnr_from_mse, rate_deviation, roi_weighted_mse
from .nfwpo import NfwpoAgent, NfwpoConfig
from .nn import MlpNet

__version__ = "0.1.0"

__all__ = [
    "CodecEnv",
    "CtuModel",
    "Frame",
    "generate_frames",
    "make_frame",
    "oracle_allocate",
    "fixed_qp_allocate",
    "NfwpoAgent",
    "NfwpoConfig",
    "MlpNet",
    "NfwpoAllocator",
    "SingleCriticAllocator",
    "DualCriticAllocator",
    "ProjectionDdpgAllocator",
    "FixedQpAllocator",
    "check_frames",
    "bd_rate",
    "psnr_from_mse",
    "rate_deviation",
    "roi_weighted_mse",
]
