"""Differentially private normalized SGD with bounded adaptive gradient clipping.

The package trains simple models with per-sample gradient normalization and
Gaussian noise, adapts the clipping bound from a privatized count of large
gradients (optionally with a hard lower bound on the clipping bound), accounts
the privacy cost of both queries exactly, and evaluates fairness-oriented
metrics. The `clipbound` CLI drives reproducible experiments from JSON configs.
"""

__version__ = "0.1.0"

from .clipping import ClippingConfig, ClippingState, clip_normalize, update_bound
from .datasets import Dataset, TabularSchema, gen_bimodal, gen_skewed_classification
from .models import ModelSpec, ModelState, init_params, per_sample_loss_grads, predict
from .numkit import Rng, gaussian_vector, l2_norm, poisson_subsample
from .privacy import MechanismParams, RdpCurve, account, calibrate_sigma, rdp_to_eps
from .trainer import RunResult, TrainConfig, train

__all__ = [
    "__version__",
    "ClippingConfig",
    "ClippingState",
    "Dataset",
    "MechanismParams",
    "ModelSpec",
    "ModelState",
    "RdpCurve",
    "Rng",
    "RunResult",
    "TabularSchema",
    "TrainConfig",
    "account",
    "calibrate_sigma",
    "clip_normalize",
    "gaussian_vector",
    "gen_bimodal",
    "gen_skewed_classification",
    "init_params",
    "l2_norm",
    "per_sample_loss_grads",
    "poisson_subsample",
    "predict",
    "rdp_to_eps",
    "train",
    "update_bound",
]
